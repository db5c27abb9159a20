//! Losses, optimizers, the training loop and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{BrainGraph, GraphDataset};
use crate::model::{predict, Aggregator, GraphClassifier, ModelConfig, DEFAULT_HIDDEN};
use crate::rng::sub_rng;
use crate::tensor::{bce_with_logits_value, Activation, BatchStats, NormMode, Tape, Var};

/// Binary cross-entropy on a single logit.
pub fn bce_loss(tape: &mut Tape, logit: Var, label: u8) -> Result<Var> {
    tape.bce_with_logits(logit, f64::from(label))
}

/// Pooling regularizers: link-prediction `‖A − S·Sᵀ‖_F / N²` and the mean
/// row entropy of `S`.
pub fn aux_losses(tape: &mut Tape, assignment: Var, adj: Var) -> Result<(Var, Var)> {
    let n = tape.shape(assignment)[0];
    let st = tape.transpose(assignment)?;
    let sst = tape.matmul(assignment, st)?;
    let diff = tape.sub(adj, sst)?;
    let norm = tape.frobenius_norm(diff);
    let lp = tape.scale(norm, 1.0 / (n * n).max(1) as f64);
    let ent = tape.row_entropy_mean(assignment)?;
    Ok((lp, ent))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step {
        gamma: f64,
        every: usize,
    },
}

impl LrSchedule {
    /// Learning rate in force during 1-based `epoch`.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { gamma, every } => {
                base * gamma.powi(((epoch.max(1) - 1) / every.max(1)) as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Graphs per optimizer step (gradients are accumulated).
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub use_batchnorm: bool,
    pub lambda_lp: f64,
    pub lambda_e: f64,
    pub activation: Activation,
    pub aggregator: Aggregator,
    pub hidden: usize,
    pub fc_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            learning_rate: 1e-3,
            schedule: LrSchedule::Step {
                gamma: 0.5,
                every: 50,
            },
            optimizer: OptimizerKind::adam(),
            batch_size: 8,
            val_fraction: 0.2,
            seed: 0,
            use_batchnorm: true,
            lambda_lp: 0.0,
            lambda_e: 0.0,
            activation: Activation::Sigmoid,
            aggregator: Aggregator::Weighted,
            hidden: DEFAULT_HIDDEN,
            fc_hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        // Zero is accepted: it is the null-update control run.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if let LrSchedule::Step { gamma, every } = self.schedule {
            if every == 0 || !(gamma > 0.0) {
                return Err(Error::config(
                    "step schedule needs gamma > 0 and every >= 1",
                ));
            }
        }
        if self.lambda_lp < 0.0 || self.lambda_e < 0.0 {
            return Err(Error::config("auxiliary loss weights must be >= 0"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            fc_hidden: self.fc_hidden,
            activation: self.activation,
            aggregator: self.aggregator,
            use_batchnorm: self.use_batchnorm,
            ..ModelConfig::new(num_nodes)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    pub records: Vec<EpochMetrics>,
    /// 1-based epoch of the best validation accuracy (earliest on ties).
    pub best_epoch: usize,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

/// `%.6g`-style formatting: six significant digits, trailing zeros removed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

impl MetricsHistory {
    pub fn best(&self) -> Option<&EpochMetrics> {
        self.records.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                format_sig6(r.train_loss),
                format_sig6(r.train_acc),
                format_sig6(r.val_loss),
                format_sig6(r.val_acc)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Per-class shuffle, then `round(val_fraction * class_size)` of each class
/// (at least one, leaving at least one for training) go to validation. Both
/// index lists are returned sorted.
pub fn stratified_split(labels: &[u8], val_fraction: f64, seed: u64) -> Result<Split> {
    let mut rng = sub_rng(seed, 0x5EED_5711);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::config(format!(
                "class {class} has {} graph(s); training needs at least 2 per class",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((val_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

/// Optimizer state for one model's parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &GraphClassifier) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Optimizer {
            kind,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Applies one update from the accumulated gradients, scaled by
    /// `grad_scale` (1 / batch size).
    pub fn step(&mut self, model: &mut GraphClassifier, lr: f64, grad_scale: f64) {
        self.steps += 1;
        let t = self.steps;
        for (i, p) in model.parameters_mut().into_iter().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g * grad_scale;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[k] * grad_scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Outcome of one train-mode forward/backward pass.
#[derive(Clone, Debug)]
pub struct GraphStep {
    pub loss: f64,
    pub logit: f64,
    pub bn_stats: Vec<BatchStats>,
}

/// Runs one graph forward and backward in train mode and adds its parameter
/// gradients into the model's gradient buffers.
pub fn accumulate_graph(
    model: &mut GraphClassifier,
    g: &BrainGraph,
    cfg: &TrainConfig,
) -> Result<GraphStep> {
    let pass = model.forward_graph(g, NormMode::Train)?;
    let mut tape = pass.tape;
    let mut loss = bce_loss(&mut tape, pass.logit, g.label)?;
    if cfg.lambda_lp > 0.0 || cfg.lambda_e > 0.0 {
        for (&s, &a) in pass.assignments.iter().zip(&pass.pool_inputs) {
            let (lp, ent) = aux_losses(&mut tape, s, a)?;
            let lp = tape.scale(lp, cfg.lambda_lp);
            let ent = tape.scale(ent, cfg.lambda_e);
            loss = tape.add(loss, lp)?;
            loss = tape.add(loss, ent)?;
        }
    }
    let loss_value = tape.scalar(loss);
    let logit = tape.scalar(pass.logit);
    if loss_value.is_finite() {
        let grads = tape.backward(loss)?;
        for (p, v) in model.parameters_mut().into_iter().zip(&pass.params) {
            p.accumulate_grad(grads.get(*v).expect("parameters track gradients"));
        }
    }
    Ok(GraphStep {
        loss: loss_value,
        logit,
        bn_stats: pass.bn_stats,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot at the best validation epoch.
    pub best: GraphClassifier,
    /// Model after the final epoch.
    pub last: GraphClassifier,
    pub history: MetricsHistory,
    pub split: Split,
}

/// Trains a freshly initialised model on `dataset`. Fully deterministic in
/// `cfg.seed`.
pub fn train(dataset: &GraphDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(dataset, cfg, |_| {})
}

/// [`train`], calling `observe` after each epoch.
pub fn train_with_observer(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let split = stratified_split(&dataset.labels(), cfg.val_fraction, cfg.seed)?;
    let mut model = GraphClassifier::new(cfg.model_config(dataset.num_nodes()), cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, &model);
    let mut shuffle_rng = sub_rng(cfg.seed, 0x5107_F1E5);

    let mut history = MetricsHistory::default();
    let mut best: Option<(f64, GraphClassifier)> = None;
    let mut order = split.train.clone();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.rate(cfg.learning_rate, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut steps: Vec<Option<GraphStep>> = vec![None; dataset.len()];
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            for &i in batch {
                let g = &dataset.graphs[i];
                let step = accumulate_graph(&mut model, g, cfg)?;
                if !step.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("loss {} on graph {:?}", step.loss, g.subject_id),
                    });
                }
                steps[i] = Some(step);
            }
            optimizer.step(&mut model, lr, 1.0 / batch.len() as f64);
        }
        model.zero_grad();

        // Aggregate in dataset order so the sums do not depend on the shuffle.
        let done: Vec<(usize, &GraphStep)> = split
            .train
            .iter()
            .map(|&i| (i, steps[i].as_ref().expect("every training graph ran")))
            .collect();
        if cfg.use_batchnorm {
            let levels = model.levels.len();
            let per_level: Vec<BatchStats> = (0..levels)
                .map(|k| {
                    let stats: Vec<&BatchStats> =
                        done.iter().map(|(_, s)| &s.bn_stats[k]).collect();
                    BatchStats::average(&stats).expect("non-empty training split")
                })
                .collect();
            model.update_running_stats(&per_level);
        }
        let n_train = done.len() as f64;
        let train_loss = done.iter().map(|(_, s)| s.loss).sum::<f64>() / n_train;
        let train_correct = done
            .iter()
            .filter(|(i, s)| predict(s.logit) == dataset.graphs[*i].label)
            .count();

        let val = evaluate_indices(&model, dataset, &split.val)?;
        if !val.mean_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss {}", val.mean_loss),
            });
        }
        let record = EpochMetrics {
            epoch,
            train_loss,
            train_acc: train_correct as f64 / n_train,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
        };
        history.records.push(record);
        observe(&record);
        if best.as_ref().is_none_or(|(acc, _)| record.val_acc > *acc) {
            best = Some((record.val_acc, model.clone()));
            history.best_epoch = epoch;
        }
    }

    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        split,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: [[usize; 2]; 2],
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn from_outcomes(outcomes: &[(u8, f64)]) -> Self {
        let mut confusion = [[0usize; 2]; 2];
        let mut loss = 0.0;
        for &(label, logit) in outcomes {
            confusion[usize::from(label.min(1))][usize::from(predict(logit))] += 1;
            loss += bce_with_logits_value(logit, f64::from(label));
        }
        let total = outcomes.len().max(1) as f64;
        Evaluation {
            accuracy: (confusion[0][0] + confusion[1][1]) as f64 / total,
            mean_loss: loss / total,
            confusion,
        }
    }
}

fn evaluate_indices(
    model: &GraphClassifier,
    dataset: &GraphDataset,
    indices: &[usize],
) -> Result<Evaluation> {
    let outcomes = indices
        .par_iter()
        .map(|&i| {
            let g = &dataset.graphs[i];
            Ok((g.label, model.logit(g)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_outcomes(&outcomes))
}

/// Eval-mode accuracy, mean loss and confusion matrix over every graph.
pub fn evaluate(model: &GraphClassifier, dataset: &GraphDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    if dataset.num_nodes() != model.config.num_nodes {
        return Err(Error::dim(format!(
            "checkpoint expects {} nodes, dataset graphs have {}",
            model.config.num_nodes,
            dataset.num_nodes()
        )));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    evaluate_indices(model, dataset, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::scalar(0.0).into_param());
        for y in [0, 1] {
            let l = bce_loss(&mut tape, z, y).unwrap();
            assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let z = tape.leaf(&Tensor::scalar(3f64.ln()).into_param());
        let l = bce_loss(&mut tape, z, 1).unwrap();
        assert!((tape.scalar(l) - 0.287_682_072_451_781).abs() < 1e-12);
        assert!((tape.backward(l).unwrap().get(z).unwrap()[0] - (0.75 - 1.0)).abs() < 1e-15);
        let z = tape.leaf(&Tensor::scalar(-40.0).into_param());
        let l = bce_loss(&mut tape, z, 1).unwrap();
        assert!(tape.scalar(l).is_finite() && (tape.scalar(l) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn aux_loss_examples() {
        // One-hot S over 2 clusters, A = S·Sᵀ.
        let s = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = (0..2).map(|k| s[i * 2 + k] * s[j * 2 + k]).sum();
            }
        }
        let mut tape = Tape::new();
        let sv = tape.constant(vec![3, 2], s.to_vec()).unwrap();
        let av = tape.constant(vec![3, 3], a).unwrap();
        let (lp, ent) = aux_losses(&mut tape, sv, av).unwrap();
        assert_eq!(tape.scalar(lp), 0.0);
        assert_eq!(tape.scalar(ent), 0.0);

        let c = 5;
        let u = tape
            .constant(vec![4, c], vec![1.0 / c as f64; 4 * c])
            .unwrap();
        let z = tape.constant(vec![4, 4], vec![0.0; 16]).unwrap();
        let (_, ent) = aux_losses(&mut tape, u, z).unwrap();
        assert!((tape.scalar(ent) - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step {
            gamma: 0.5,
            every: 50,
        };
        assert_eq!(s.rate(1e-3, 1), 1e-3);
        assert_eq!(s.rate(1e-3, 50), 1e-3);
        assert_eq!(s.rate(1e-3, 51), 5e-4);
        assert_eq!(s.rate(1e-3, 150), 2.5e-4);
        assert_eq!(LrSchedule::Constant.rate(0.1, 99), 0.1);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.875), "0.875");
        assert_eq!(format_sig6(std::f64::consts::LN_2), "0.693147");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(1.5e-7), "1.5e-07");
        assert_eq!(format_sig6(9_999_999.0), "1e+07");
        assert_eq!(format_sig6(-2.5), "-2.5");
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let labels: Vec<u8> = (0..121).map(|i| u8::from(i < 60)).collect();
        let s = stratified_split(&labels, 0.2, 4).unwrap();
        assert_eq!(s, stratified_split(&labels, 0.2, 4).unwrap());
        assert_eq!(s.train.len() + s.val.len(), 121);
        let val_ad = s.val.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(val_ad, 12);
        assert_eq!(s.val.len() - val_ad, 12);
        assert!(stratified_split(&[0, 0, 0, 1], 0.2, 0).is_err());
    }

    #[test]
    fn confusion_and_accuracy() {
        let e = Evaluation::from_outcomes(&[(0, -1.0)]);
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion, [[1, 0], [0, 0]]);
        let e = Evaluation::from_outcomes(&[(1, 2.0)]);
        assert_eq!(e.confusion, [[0, 0], [0, 1]]);

        // Always predicting 0 on the 60 AD / 61 NC cohort.
        let outcomes: Vec<(u8, f64)> = (0..121).map(|i| (u8::from(i < 60), -1.0)).collect();
        let e = Evaluation::from_outcomes(&outcomes);
        assert!((e.accuracy - 61.0 / 121.0).abs() < 1e-15);
        assert!((e.accuracy - 0.504).abs() < 1e-3);
        let off = (e.confusion[0][1] + e.confusion[1][0]) as f64;
        assert!((e.accuracy - (1.0 - off / e.total() as f64)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                val_fraction: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}
