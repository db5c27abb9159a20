//! Finite-difference verification of every backward rule in the pipeline.
//!
//! A small model (16 nodes, three pooling levels, both fc layers) is run in
//! train mode on a random graph; the tape gradient of the logit with respect
//! to every parameter entry is compared against a central difference.
//!
//! The check model halves the node count per pool (16 -> 8 -> 4 -> 2). The
//! quarter-ratio chain would leave a single node before the last batch norm,
//! whose output is then constant and hides every upstream gradient.

use rand::Rng;

use crate::error::Result;
use crate::model::{GraphClassifier, ModelConfig};
use crate::rng::sub_rng;
use crate::tensor::{Activation, BackwardFault, NormMode};

pub const GRADCHECK_NODES: usize = 16;
pub const GRADCHECK_HIDDEN: usize = 16;
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that vanishing gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Entry where the maximum occurred.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub activation: Activation,
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < GRADCHECK_TOLERANCE))
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

/// Random symmetric weights in (0, 1] with zero diagonal, features in [-1, 1].
pub fn random_graph(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = sub_rng(seed, 0x6EA9);
    let features = (0..n * 3).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let w = 1.0 - rng.random_range(0.0..1.0);
            adj[i * n + j] = w;
            adj[j * n + i] = w;
        }
    }
    (features, adj)
}

pub fn gradcheck_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        hidden: GRADCHECK_HIDDEN,
        fc_hidden: GRADCHECK_HIDDEN,
        clusters: vec![8, 4, 2],
        activation,
        ..ModelConfig::new(GRADCHECK_NODES)
    }
}

/// Model with every parameter randomised: Glorot weights, biases and
/// batch-norm shifts in [-0.2, 0.2], scales in [0.5, 1.5]. Non-zero biases
/// keep ReLU inputs away from the kink at zero.
pub fn gradcheck_model(activation: Activation, seed: u64) -> Result<GraphClassifier> {
    let mut model = GraphClassifier::new(gradcheck_config(activation), seed)?;
    let mut rng = sub_rng(seed, 0xB1A5);
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        if name.ends_with(".gamma") {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..=1.5));
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.2..=0.2));
        }
    }
    Ok(model)
}

/// Checks `model` on `(features, adj)`. `fault` is injected into the
/// backward pass only, never into the finite differences.
pub fn check_model(
    model: &GraphClassifier,
    features: &[f64],
    adj: &[f64],
    fault: Option<BackwardFault>,
) -> Result<GradcheckReport> {
    let mut pass = model.forward(features, adj, NormMode::Train)?;
    pass.tape.set_fault(fault);
    let grads = pass.tape.backward(pass.logit)?;
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|v| grads.get(*v).expect("parameter gradient").to_vec())
        .collect();
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();

    let mut probe = model.clone();
    let mut params = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for (p, name) in names.into_iter().enumerate() {
        let len = analytic[p].len();
        let mut worst = (0.0f64, 0usize);
        for (k, &a) in analytic[p].iter().enumerate() {
            let original = probe.parameters_mut()[p].data()[k];
            probe.parameters_mut()[p].data_mut()[k] = original + GRADCHECK_STEP;
            let plus = probe.forward(features, adj, NormMode::Train)?.logit_value();
            probe.parameters_mut()[p].data_mut()[k] = original - GRADCHECK_STEP;
            let minus = probe.forward(features, adj, NormMode::Train)?.logit_value();
            probe.parameters_mut()[p].data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let err = relative_error(a, numeric);
            // NaN compares false, so promote it explicitly.
            if err.is_nan() || err > worst.0 {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, k);
            }
        }
        overall = overall.max(worst.0);
        params.push(ParamReport {
            name,
            entries: len,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradcheckReport {
        activation: model.config.activation,
        params,
        max_rel_error: overall,
    })
}

/// Builds a 16-node model and random graph from `seed` and checks every
/// parameter gradient.
pub fn gradcheck(
    seed: u64,
    activation: Activation,
    fault: Option<BackwardFault>,
) -> Result<GradcheckReport> {
    let model = gradcheck_model(activation, seed)?;
    let (features, adj) = random_graph(GRADCHECK_NODES, seed);
    check_model(&model, &features, &adj, fault)
}
