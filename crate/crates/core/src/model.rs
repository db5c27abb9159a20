//! The classifier: three GraphSAGE + batch-norm + differentiable-pooling
//! levels, a flatten readout and two fully connected layers.
//!
//! ```text
//! [N,3] -> sage1 -> bn1 -> pool1 -> [C1,H] -> sage2 -> bn2 -> pool2 -> [C2,H]
//!       -> sage3 -> bn3 -> pool3 -> [C3,H] -> flatten [C3*H] -> fc1 (relu) -> fc2 -> logit
//! ```
//!
//! With `N = 1162` and the default quarter pool ratio the cluster counts are
//! 291, 73 and 18.

mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BrainGraph, FEATURES};
use crate::rng::rng_from_seed;
use crate::tensor::{
    sigmoid, Activation, BatchNormState, BatchStats, NormMode, Tape, Tensor, Var, BN_EPS,
    BN_MOMENTUM,
};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// How a node's neighbourhood is summarised before concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    /// Mean weighted by edge weight.
    Weighted,
    /// Plain mean over nodes joined by a positive-weight edge.
    Mean,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Weighted => "weighted",
            Aggregator::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Aggregator::Weighted),
            "mean" => Ok(Aggregator::Mean),
            other => Err(Error::config(format!("unknown aggregator {other:?}"))),
        }
    }
}

pub const POOL_LEVELS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

/// Cluster counts for successive quarter-size pools: `n / 4` rounded half
/// up, never below one. 1162 nodes give 291, 73, 18.
pub fn cluster_chain(num_nodes: usize, levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels);
    let mut n = num_nodes;
    for _ in 0..levels {
        n = ((n + 2) / 4).max(1);
        out.push(n);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub in_features: usize,
    pub hidden: usize,
    pub fc_hidden: usize,
    pub clusters: Vec<usize>,
    pub activation: Activation,
    pub aggregator: Aggregator,
    pub use_batchnorm: bool,
}

impl ModelConfig {
    /// Default architecture for graphs of `num_nodes` nodes.
    pub fn new(num_nodes: usize) -> Self {
        ModelConfig {
            num_nodes,
            in_features: FEATURES,
            hidden: DEFAULT_HIDDEN,
            fc_hidden: DEFAULT_HIDDEN,
            clusters: cluster_chain(num_nodes, POOL_LEVELS),
            activation: Activation::Sigmoid,
            aggregator: Aggregator::Weighted,
            use_batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.in_features == 0 || self.hidden == 0 || self.fc_hidden == 0 {
            return Err(Error::config(
                "node count and layer widths must be positive",
            ));
        }
        if self.clusters.is_empty() {
            return Err(Error::config("at least one pooling level is required"));
        }
        if self.activation == Activation::Identity {
            return Err(Error::config("hidden activation must be sigmoid or relu"));
        }
        let mut n = self.num_nodes;
        for (level, &c) in self.clusters.iter().enumerate() {
            // A single node may pool into a single cluster; otherwise pooling must shrink.
            if c == 0 || c > n || (c == n && n > 1) {
                return Err(Error::config(format!(
                    "pool {} maps {n} nodes to {c} clusters; need 1 <= C < N",
                    level + 1
                )));
            }
            n = c;
        }
        Ok(())
    }

    /// Node count after the last pool.
    pub fn readout_nodes(&self) -> usize {
        *self.clusters.last().expect("validated")
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![rows, cols], data)
        .expect("sized")
        .into_param()
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).into_param()
}

/// Parameter handles of one layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Dense GraphSAGE layer: `H = act(concat(X, agg(X)) · W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    /// `[2 * F_in, F_out]`
    pub weight: Tensor,
    /// `[F_out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl SageLayer {
    pub fn init(f_in: usize, f_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        SageLayer {
            weight: glorot(2 * f_in, f_out, rng),
            bias: zeros_param(f_out),
            activation,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows() / 2
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn record(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    /// Applies the layer given a row-normalized propagation matrix (see
    /// [`propagation_matrix`]).
    pub fn apply(&self, tape: &mut Tape, vars: LayerVars, x: Var, propagation: Var) -> Result<Var> {
        let cols = tape.shape(x).get(1).copied().unwrap_or(0);
        if cols != self.in_features() {
            return Err(Error::dim(format!(
                "sage layer expects {} input features, got shape {:?}",
                self.in_features(),
                tape.shape(x)
            )));
        }
        let neighbourhood = tape.matmul(propagation, x)?;
        let joined = tape.concat_cols(x, neighbourhood)?;
        let pre = tape.matmul(joined, vars.weight)?;
        let pre = tape.add_row(pre, vars.bias)?;
        Ok(tape.activation(pre, self.activation))
    }

    /// Records the layer's parameters and applies it to `(x, adj)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        adj: Var,
        aggregator: Aggregator,
    ) -> Result<Var> {
        let vars = self.record(tape);
        let p = propagation_matrix(tape, adj, aggregator)?;
        self.apply(tape, vars, x, p)
    }
}

/// Row-normalized aggregation weights. Rows with no neighbours aggregate to
/// zero.
pub fn propagation_matrix(tape: &mut Tape, adj: Var, aggregator: Aggregator) -> Result<Var> {
    let (r, c) = match tape.shape(adj) {
        [r, c] if r == c => (*r, *c),
        s => return Err(Error::dim(format!("adjacency must be square, got {s:?}"))),
    };
    match aggregator {
        Aggregator::Weighted => tape.row_normalize(adj),
        Aggregator::Mean => {
            let mask = tape
                .value(adj)
                .iter()
                .map(|&w| if w > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mask = tape.constant(vec![r, c], mask)?;
            tape.row_normalize(mask)
        }
    }
}

/// Differentiable pooling block: an embedding layer and an assignment layer
/// that share the input graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolBlock {
    pub embed: SageLayer,
    /// Produces one logit per cluster; no activation.
    pub assign: SageLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    /// `[C, F_out]`
    pub x: Var,
    /// `[C, C]`
    pub adj: Var,
    /// Soft assignment `[N, C]`, rows summing to one.
    pub assignment: Var,
}

impl PoolBlock {
    pub fn init(
        f_in: usize,
        f_out: usize,
        clusters: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        PoolBlock {
            embed: SageLayer::init(f_in, f_out, activation, rng),
            assign: SageLayer::init(f_in, clusters, Activation::Identity, rng),
        }
    }

    pub fn clusters(&self) -> usize {
        self.assign.out_features()
    }

    /// `Z = embed(X, A)`, `S = softmax(assign(X, A))`, `X' = SᵀZ`, `A' = SᵀAS`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        embed: LayerVars,
        assign: LayerVars,
        x: Var,
        adj: Var,
        propagation: Var,
    ) -> Result<PoolOutput> {
        let n = tape.shape(adj)[0];
        let c = self.clusters();
        if c > n || (c == n && n > 1) {
            return Err(Error::config(format!(
                "cannot pool {n} nodes into {c} clusters"
            )));
        }
        let z = self.embed.apply(tape, embed, x, propagation)?;
        let logits = self.assign.apply(tape, assign, x, propagation)?;
        let s = tape.softmax_rows(logits)?;
        let st = tape.transpose(s)?;
        let x_out = tape.matmul(st, z)?;
        let a_s = tape.matmul(adj, s)?;
        let adj_out = tape.matmul(st, a_s)?;
        Ok(PoolOutput {
            x: x_out,
            adj: adj_out,
            assignment: s,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        adj: Var,
        aggregator: Aggregator,
    ) -> Result<PoolOutput> {
        let e = self.embed.record(tape);
        let a = self.assign.record(tape);
        let p = propagation_matrix(tape, adj, aggregator)?;
        self.apply(tape, e, a, x, adj, p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BatchNormState,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![features], 1.0).into_param(),
            beta: zeros_param(features),
            state: BatchNormState::new(features),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: glorot(f_in, f_out, rng),
            bias: zeros_param(f_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub sage: SageLayer,
    pub norm: BatchNorm,
    pub pool: PoolBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphClassifier {
    pub config: ModelConfig,
    pub levels: Vec<Level>,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    /// `[1, 1]`
    pub logit: Var,
    /// One handle per trainable parameter, in [`GraphClassifier::parameters`] order.
    pub params: Vec<Var>,
    /// Output shape of every stage: sage/pool per level, flatten, fc1, fc2.
    pub trace: Vec<Vec<usize>>,
    /// Adjacency entering each pool.
    pub pool_inputs: Vec<Var>,
    /// Soft assignment of each pool.
    pub assignments: Vec<Var>,
    /// Coarsened adjacency produced by each pool.
    pub coarsened: Vec<Var>,
    /// Train-mode batch statistics, one per level (empty in eval mode or
    /// without batch norm).
    pub bn_stats: Vec<BatchStats>,
}

impl ForwardPass {
    pub fn logit_value(&self) -> f64 {
        self.tape.scalar(self.logit)
    }

    /// Node count entering each sage layer, then after the final pool.
    pub fn node_counts(&self) -> Vec<usize> {
        let levels = self.pool_inputs.len();
        let mut out: Vec<usize> = self
            .trace
            .iter()
            .take(2 * levels)
            .step_by(2)
            .map(|s| s[0])
            .collect();
        if let Some(last) = self.trace.get(2 * levels - 1) {
            out.push(last[0]);
        }
        out
    }
}

/// Predicted class: 1 iff `sigmoid(logit) >= 0.5`, i.e. `logit >= 0`.
pub fn predict(logit: f64) -> u8 {
    u8::from(logit >= 0.0)
}

pub fn probability(logit: f64) -> f64 {
    sigmoid(logit)
}

impl GraphClassifier {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let h = config.hidden;
        let mut f_in = config.in_features;
        let levels = config
            .clusters
            .iter()
            .map(|&c| {
                let level = Level {
                    sage: SageLayer::init(f_in, h, config.activation, &mut rng),
                    norm: BatchNorm::new(h),
                    pool: PoolBlock::init(h, h, c, config.activation, &mut rng),
                };
                f_in = h;
                level
            })
            .collect();
        let fc1 = Linear::init(config.readout_nodes() * h, config.fc_hidden, &mut rng);
        let fc2 = Linear::init(config.fc_hidden, 1, &mut rng);
        Ok(GraphClassifier {
            config,
            levels,
            fc1,
            fc2,
        })
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            let k = i + 1;
            out.push((format!("sage{k}.weight"), &l.sage.weight));
            out.push((format!("sage{k}.bias"), &l.sage.bias));
            out.push((format!("bn{k}.gamma"), &l.norm.gamma));
            out.push((format!("bn{k}.beta"), &l.norm.beta));
            out.push((format!("pool{k}.embed.weight"), &l.pool.embed.weight));
            out.push((format!("pool{k}.embed.bias"), &l.pool.embed.bias));
            out.push((format!("pool{k}.assign.weight"), &l.pool.assign.weight));
            out.push((format!("pool{k}.assign.bias"), &l.pool.assign.bias));
        }
        out.push(("fc1.weight".into(), &self.fc1.weight));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), &self.fc2.weight));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out
    }

    /// Same order as [`GraphClassifier::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.levels {
            out.push(&mut l.sage.weight);
            out.push(&mut l.sage.bias);
            out.push(&mut l.norm.gamma);
            out.push(&mut l.norm.beta);
            out.push(&mut l.pool.embed.weight);
            out.push(&mut l.pool.embed.bias);
            out.push(&mut l.pool.assign.weight);
            out.push(&mut l.pool.assign.bias);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(Tensor::zero_grad);
    }

    /// Folds one set of per-level batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (level, s) in self.levels.iter_mut().zip(stats) {
            level.norm.state.update(s, BN_MOMENTUM);
        }
    }

    pub fn forward_graph(&self, g: &BrainGraph, mode: NormMode) -> Result<ForwardPass> {
        self.forward(g.features(), g.adjacency(), mode)
    }

    /// Full forward pass on row-major `[N, F]` features and `[N, N]`
    /// adjacency.
    pub fn forward(
        &self,
        features: &[f64],
        adjacency: &[f64],
        mode: NormMode,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let n = cfg.num_nodes;
        if adjacency.len() != n * n || features.len() != n * cfg.in_features {
            return Err(Error::dim(format!(
                "model expects {n} nodes with {} features; got {} feature values and {} adjacency values",
                cfg.in_features,
                features.len(),
                adjacency.len()
            )));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t))
            .collect();
        let mut x = tape.constant(vec![n, cfg.in_features], features.to_vec())?;
        let mut adj = tape.constant(vec![n, n], adjacency.to_vec())?;

        let mut trace = Vec::new();
        let mut pool_inputs = Vec::new();
        let mut assignments = Vec::new();
        let mut coarsened = Vec::new();
        let mut bn_stats = Vec::new();
        let lv = |i: usize| LayerVars {
            weight: params[i],
            bias: params[i + 1],
        };

        for (k, level) in self.levels.iter().enumerate() {
            let base = 8 * k;
            let p = propagation_matrix(&mut tape, adj, cfg.aggregator)?;
            let mut h = level.sage.apply(&mut tape, lv(base), x, p)?;
            if cfg.use_batchnorm {
                let (normed, stats) = tape.batchnorm_nodes(
                    h,
                    params[base + 2],
                    params[base + 3],
                    &level.norm.state,
                    mode,
                    BN_EPS,
                )?;
                h = normed;
                bn_stats.extend(stats);
            }
            trace.push(tape.shape(h).to_vec());
            let out = level
                .pool
                .apply(&mut tape, lv(base + 4), lv(base + 6), h, adj, p)?;
            trace.push(tape.shape(out.x).to_vec());
            pool_inputs.push(adj);
            assignments.push(out.assignment);
            coarsened.push(out.adj);
            x = out.x;
            adj = out.adj;
        }

        let base = 8 * self.levels.len();
        let width = cfg.readout_nodes() * cfg.hidden;
        let flat = tape.reshape(x, vec![1, width])?;
        trace.push(vec![width]);
        let h1 = tape.matmul(flat, params[base])?;
        let h1 = tape.add_row(h1, params[base + 1])?;
        let h1 = tape.relu(h1);
        trace.push(vec![cfg.fc_hidden]);
        let out = tape.matmul(h1, params[base + 2])?;
        let logit = tape.add_row(out, params[base + 3])?;
        trace.push(vec![1]);

        Ok(ForwardPass {
            tape,
            logit,
            params,
            trace,
            pool_inputs,
            assignments,
            coarsened,
            bn_stats,
        })
    }

    /// Eval-mode logit for one graph.
    pub fn logit(&self, g: &BrainGraph) -> Result<f64> {
        Ok(self.forward_graph(g, NormMode::Eval)?.logit_value())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GraphClassifier::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            fc_hidden: 8,
            ..ModelConfig::new(n)
        }
    }

    #[test]
    fn full_scale_cluster_chain() {
        assert_eq!(cluster_chain(1162, 3), vec![291, 73, 18]);
        assert_eq!(cluster_chain(128, 3), vec![32, 8, 2]);
        assert_eq!(cluster_chain(16, 3), vec![4, 1, 1]);
        assert_eq!(cluster_chain(64, 3), vec![16, 4, 1]);
        assert_eq!(cluster_chain(2, 2), vec![1, 1]);
    }

    #[test]
    fn config_rejects_non_shrinking_pool() {
        let mut cfg = small_config(16);
        assert!(cfg.validate().is_ok());
        cfg.clusters = vec![16, 4, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.clusters = vec![4, 5, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sage_single_node_has_empty_neighbourhood() {
        let mut rng = rng_from_seed(1);
        let layer = SageLayer::init(2, 3, Activation::Sigmoid, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.4, -0.3]).unwrap();
        let a = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let h = layer
            .forward(&mut tape, x, a, Aggregator::Weighted)
            .unwrap();
        let w = &layer.weight;
        for j in 0..3 {
            let pre = 0.4 * w.get(0, j) - 0.3 * w.get(1, j) + layer.bias.data()[j];
            assert!((tape.value(h)[j] - sigmoid(pre)).abs() < 1e-15);
        }
    }

    #[test]
    fn sage_two_node_hand_evaluation() {
        // W = [I; I] so pre = x_v + h_N(v).
        let layer = SageLayer {
            weight: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]])
                .unwrap(),
            bias: Tensor::zeros(vec![2]),
            activation: Activation::Sigmoid,
        };
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = tape.constant(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let h = layer
            .forward(&mut tape, x, a, Aggregator::Weighted)
            .unwrap();
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        let expect = [s1, s1, s1, s1];
        for (got, want) in tape.value(h).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_identical_features_give_identical_rows() {
        let mut rng = rng_from_seed(5);
        let layer = SageLayer::init(3, 4, Activation::Relu, &mut rng);
        let n = 5;
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![n, 3], [0.2, -0.5, 0.9].repeat(n))
            .unwrap();
        let w: Vec<f64> = (0..n * n)
            .map(|k| {
                if k / n == k % n {
                    0.0
                } else {
                    0.3 + 0.1 * ((k / n + k % n) % 3) as f64
                }
            })
            .collect();
        let a = tape.constant(vec![n, n], w).unwrap();
        let h = layer
            .forward(&mut tape, x, a, Aggregator::Weighted)
            .unwrap();
        let v = tape.value(h);
        for r in 1..n {
            for j in 0..4 {
                assert!((v[r * 4 + j] - v[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mean_aggregator_ignores_weight_magnitudes() {
        let mut tape = Tape::new();
        let a = tape
            .constant(
                vec![3, 3],
                vec![0.0, 0.2, 0.9, 0.2, 0.0, 0.0, 0.9, 0.0, 0.0],
            )
            .unwrap();
        let p = propagation_matrix(&mut tape, a, Aggregator::Mean).unwrap();
        assert_eq!(
            tape.value(p),
            &[0.0, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    fn pool_with_logits(
        n: usize,
        c: usize,
        logits: Vec<f64>,
        z: Vec<f64>,
        a: Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        // Bypass the layers: feed the assignment logits and embeddings directly.
        let mut tape = Tape::new();
        let lg = tape.constant(vec![n, c], logits).unwrap();
        let zv = tape.constant(vec![n, z.len() / n], z).unwrap();
        let av = tape.constant(vec![n, n], a).unwrap();
        let s = tape.softmax_rows(lg).unwrap();
        let st = tape.transpose(s).unwrap();
        let x = tape.matmul(st, zv).unwrap();
        let asv = tape.matmul(av, s).unwrap();
        let ap = tape.matmul(st, asv).unwrap();
        (tape.value(x).to_vec(), tape.value(ap).to_vec())
    }

    #[test]
    fn pooling_closed_forms() {
        let n = 6;
        let c = 2;
        let z: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if i == j {
                    0.0
                } else {
                    0.1 + 0.05 * ((i + j) % 4) as f64
                }
            })
            .collect();

        // Uniform assignment.
        let (x, ap) = pool_with_logits(n, c, vec![0.0; n * c], z.clone(), a.clone());
        let total: f64 = a.iter().sum();
        for col in 0..2 {
            let mean = (0..n).map(|r| z[r * 2 + col]).sum::<f64>() / n as f64;
            for row in 0..c {
                assert!((x[row * 2 + col] - n as f64 / c as f64 * mean).abs() < 1e-12);
            }
        }
        for v in &ap {
            assert!((v - total / (c * c) as f64).abs() < 1e-12);
        }

        // One-hot assignment via ±large logits: clusters {0,1,2} and {3,4,5}.
        let cluster = |i: usize| usize::from(i >= 3);
        let logits: Vec<f64> = (0..n)
            .flat_map(|i| {
                if cluster(i) == 0 {
                    [200.0, -200.0]
                } else {
                    [-200.0, 200.0]
                }
            })
            .collect();
        let (x, ap) = pool_with_logits(n, c, logits, z.clone(), a.clone());
        for k in 0..c {
            for col in 0..2 {
                let sum: f64 = (0..n)
                    .filter(|&i| cluster(i) == k)
                    .map(|i| z[i * 2 + col])
                    .sum();
                assert!((x[k * 2 + col] - sum).abs() < 1e-12);
            }
            for l in 0..c {
                let block: f64 = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter(|&(i, j)| cluster(i) == k && cluster(j) == l)
                    .map(|(i, j)| a[i * n + j])
                    .sum();
                assert!((ap[k * c + l] - block).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_pooling_total_weight_matches_direct_evaluation() {
        let n = 4;
        let c = 2;
        let logits = vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9, 0.05, 0.0];
        let a = vec![
            0.0, 0.5, 0.2, 0.9, 0.5, 0.0, 0.4, 0.1, 0.2, 0.4, 0.0, 0.7, 0.9, 0.1, 0.7, 0.0,
        ];
        let (_, ap) = pool_with_logits(n, c, logits.clone(), vec![0.0; n], a.clone());
        // Σ A' = Σ_ij (S·1)_i A_ij (S·1)_j with S rows = softmax of logits.
        let s: Vec<[f64; 2]> = logits
            .chunks(2)
            .map(|r| {
                let m = r[0].max(r[1]);
                let (e0, e1) = ((r[0] - m).exp(), (r[1] - m).exp());
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            })
            .collect();
        let mut direct = 0.0;
        for k in 0..c {
            for l in 0..c {
                for i in 0..n {
                    for j in 0..n {
                        direct += s[i][k] * a[i * n + j] * s[j][l];
                    }
                }
            }
        }
        let total: f64 = ap.iter().sum();
        assert!((total - direct).abs() < 1e-12);
        // Rows of S sum to one, so the total edge mass is preserved.
        assert!((total - a.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_rejects_too_many_clusters() {
        let mut rng = rng_from_seed(2);
        let block = PoolBlock::init(2, 2, 4, Activation::Relu, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let a = tape.constant(vec![3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(
            block.forward(&mut tape, x, a, Aggregator::Weighted),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_trace_and_dimension_check() {
        let model = GraphClassifier::new(small_config(16), 3).unwrap();
        let feats = vec![0.1; 16 * 3];
        let adj: Vec<f64> = (0..256)
            .map(|k| if k / 16 == k % 16 { 0.0 } else { 0.5 })
            .collect();
        let pass = model.forward(&feats, &adj, NormMode::Train).unwrap();
        assert_eq!(
            pass.trace,
            vec![
                vec![16, 8],
                vec![4, 8],
                vec![4, 8],
                vec![1, 8],
                vec![1, 8],
                vec![1, 8],
                vec![8],
                vec![8],
                vec![1]
            ]
        );
        assert_eq!(pass.node_counts(), vec![16, 4, 1, 1]);
        assert_eq!(pass.bn_stats.len(), 3);
        assert!(pass.logit_value().is_finite());
        assert!(matches!(
            model.forward(&feats[..45], &adj, NormMode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn degenerate_input_stays_finite() {
        for act in [Activation::Sigmoid, Activation::Relu] {
            let cfg = ModelConfig {
                activation: act,
                ..small_config(12)
            };
            let model = GraphClassifier::new(cfg, 8).unwrap();
            for mode in [NormMode::Train, NormMode::Eval] {
                let pass = model.forward(&[0.0; 36], &[0.0; 144], mode).unwrap();
                assert!(pass.logit_value().is_finite());
            }
        }
    }

    #[test]
    fn prediction_threshold() {
        assert_eq!(predict(0.0), 1);
        assert_eq!(predict(-3.0), 0);
        assert_eq!(predict(3.0), 1);
        assert_eq!(probability(0.0), 0.5);
    }

    #[test]
    fn parameter_names_and_order_agree() {
        let mut model = GraphClassifier::new(small_config(16), 0).unwrap();
        let shapes: Vec<Vec<usize>> = model
            .parameters()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let shapes_mut: Vec<Vec<usize>> = model
            .parameters_mut()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(shapes, shapes_mut);
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "sage1.weight");
        assert_eq!(names.last().unwrap(), "fc2.bias");
        assert_eq!(names.len(), 28);
    }
}
