//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`] and are addressed by [`Var`] handles. Each
//! operation appends a node holding its result and enough saved state to run
//! its backward rule. [`Tape::backward`] walks the nodes in reverse recording
//! order and returns a fresh [`Gradients`] table, so the tape itself is never
//! mutated by a backward pass and can be replayed.
//!
//! Matrices are rank-2 row-major. Scalars are rank-0 (`shape == []`).

use crate::error::{Error, Result};

/// Dense row-major `f64` array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    /// Marks the tensor as a trainable parameter.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Fault injection for verifying that gradient checks actually catch broken
/// backward rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Scales the left-operand gradient of every matmul.
    MatMulLhsScale(f64),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of momentum updates applied so far.
    pub updates: u64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            updates: 0,
        }
    }

    /// Moves the running statistics toward `stats` by `momentum`. The first
    /// update adopts `stats` outright.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        if self.updates == 0 {
            self.running_mean.clone_from(&stats.mean);
            self.running_var.clone_from(&stats.var);
        } else {
            for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
                *r += momentum * (s - *r);
            }
            for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
                *r += momentum * (s - *r);
            }
        }
        self.updates += 1;
    }
}

/// Per-feature statistics of one train-mode batch-norm call. `var` is the
/// unbiased estimate used for the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Element-wise average of several batch statistics, summed in order.
    pub fn average(stats: &[&BatchStats]) -> Option<BatchStats> {
        let first = stats.first()?;
        let k = stats.len() as f64;
        let mut mean = vec![0.0; first.mean.len()];
        let mut var = vec![0.0; first.var.len()];
        for s in stats {
            mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
            var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|v| *v /= k);
        var.iter_mut().for_each(|v| *v /= k);
        Some(BatchStats { mean, var })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    SoftmaxRows(Var),
    RowNormalize {
        input: Var,
        row_sums: Vec<f64>,
    },
    Reshape(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
    FrobeniusNorm(Var),
    RowEntropyMean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

fn check_matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(format!(
            "{what} expects a matrix, got shape {shape:?}"
        ))),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        check_matrix(&self.nodes[v.0].shape, what)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions differ, [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let out = transpose_data(self.value(a), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` row vector to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::dim(format!(
                "add_row: row of shape {:?} does not broadcast over [{r}, {c}]",
                self.shape(row)
            )));
        }
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(vec![r, c], out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, k), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Relu => self.relu(a),
            Activation::Identity => a,
        }
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(a, "concat_cols")?;
        let (n2, q) = self.matrix_dims(b, "concat_cols")?;
        if n != n2 {
            return Err(Error::dim(format!(
                "concat_cols: row counts differ, [{n}, {p}] vs [{n2}, {q}]"
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&va[i * p..(i + 1) * p]);
            out.extend_from_slice(&vb[i * q..(i + 1) * q]);
        }
        Ok(self.push(vec![n, p + q], out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "softmax_rows")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(a), &[a]))
    }

    /// Divides every row by its sum. Rows summing to zero stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "row_normalize")?;
        let mut out = self.value(a).to_vec();
        let mut row_sums = Vec::with_capacity(r);
        for row in out.chunks_mut(c.max(1)).take(r) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
            row_sums.push(s);
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::RowNormalize { input: a, row_sums },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::dim(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a), &[a]))
    }

    /// Batch normalization over the node axis of an `[n, f]` matrix.
    ///
    /// In train mode the columns are standardized with their own (biased)
    /// statistics and the batch statistics are returned so the caller can
    /// fold them into `state`. In eval mode `state`'s running statistics are
    /// used and nothing is returned.
    pub fn batchnorm_nodes(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, f) = self.matrix_dims(x, "batchnorm_nodes")?;
        if n == 0 {
            return Err(Error::dim("batchnorm_nodes: needs at least one row"));
        }
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::dim(format!(
                "batchnorm_nodes: scale/shift must have {f} entries"
            )));
        }
        let xv = self.value(x);
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; f];
                for row in xv.chunks(f) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut ss = vec![0.0; f];
                for row in xv.chunks(f) {
                    for ((s, v), m) in ss.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let biased: Vec<f64> = ss.iter().map(|s| s / n as f64).collect();
                let unbiased = if n > 1 {
                    ss.iter().map(|s| s / (n - 1) as f64).collect()
                } else {
                    biased.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
            NormMode::Eval => {
                if state.running_mean.len() != f || state.running_var.len() != f {
                    return Err(Error::dim(format!(
                        "batchnorm_nodes: running statistics do not cover {f} features"
                    )));
                }
                (state.running_mean.clone(), state.running_var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(n * f);
        let mut out = Vec::with_capacity(n * f);
        for row in xv.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let var = self.push(
            vec![n, f],
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Binary cross-entropy of a single logit against `target`, in the
    /// overflow-free form `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return Err(Error::dim(format!(
                "bce_with_logits: expects one logit, got shape {:?}",
                self.shape(logit)
            )));
        }
        let loss = bce_with_logits_value(self.scalar(logit), target);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::BceWithLogits { logit, target },
            &[logit],
        ))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let norm = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Vec::new(), vec![norm], Op::FrobeniusNorm(a), &[a])
    }

    /// Mean over rows of the Shannon entropy of each (probability) row.
    pub fn row_entropy_mean(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix_dims(a, "row_entropy_mean")?;
        let total: f64 = self
            .value(a)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        let mean = if r == 0 { 0.0 } else { total / r as f64 };
        Ok(self.push(Vec::new(), vec![mean], Op::RowEntropyMean(a), &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node that requires a gradient gets an entry in the result; nodes
    /// with no path to `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if slot.is_none() && node.requires_grad {
                *slot = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_data(self.value(b), k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    if let Some(BackwardFault::MatMulLhsScale(s)) = self.fault {
                        da.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let at = transpose_data(self.value(a), m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&at, g, &mut db, k, m, n);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                self.accumulate(grads, a, transpose_data(g, r, c));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, d);
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.to_vec());
                if self.needs(row) {
                    let c = self.value(row).len();
                    let mut d = vec![0.0; c];
                    for chunk in g.chunks(c.max(1)) {
                        d.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, row, d);
                }
            }
            &Op::Scale(a, k) => {
                self.accumulate(grads, a, g.iter().map(|v| v * k).collect());
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(&node.data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, a, d);
            }
            &Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, d);
            }
            &Op::ConcatCols(a, b) => {
                let n = node.shape[0];
                let p = self.nodes[a.0].shape[1];
                let q = self.nodes[b.0].shape[1];
                let w = p + q;
                if self.needs(a) {
                    let d = (0..n)
                        .flat_map(|i| g[i * w..i * w + p].iter().copied())
                        .collect();
                    self.accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let d = (0..n)
                        .flat_map(|i| g[i * w + p..(i + 1) * w].iter().copied())
                        .collect();
                    self.accumulate(grads, b, d);
                }
            }
            &Op::SoftmaxRows(a) => {
                let c = node.shape[1];
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), srow) in d
                    .chunks_mut(c.max(1))
                    .zip(g.chunks(c.max(1)))
                    .zip(node.data.chunks(c.max(1)))
                {
                    let dot: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
                    for ((dv, gv), sv) in drow.iter_mut().zip(grow).zip(srow) {
                        *dv = sv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::RowNormalize { input, row_sums } => {
                let c = node.shape[1];
                let mut d = vec![0.0; g.len()];
                for (r, &s) in row_sums.iter().enumerate() {
                    if s == 0.0 {
                        continue;
                    }
                    let range = r * c..(r + 1) * c;
                    let grow = &g[range.clone()];
                    let yrow = &node.data[range.clone()];
                    // out = a / s  ⇒  da_j = (g_j − Σ_k g_k out_k) / s
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (dv, gv) in d[range].iter_mut().zip(grow) {
                        *dv = (gv - dot) / s;
                    }
                }
                self.accumulate(grads, *input, d);
            }
            &Op::Reshape(a) => {
                self.accumulate(grads, a, g.to_vec());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, f) = (node.shape[0], node.shape[1]);
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * f];
                    if *batch_stats {
                        // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let nf = n as f64;
                        for j in 0..f {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..n {
                                let dxh = g[r * f + j] * gam[j];
                                s1 += dxh;
                                s2 += dxh * xhat[r * f + j];
                            }
                            for r in 0..n {
                                let dxh = g[r * f + j] * gam[j];
                                dx[r * f + j] =
                                    inv_std[j] / nf * (nf * dxh - s1 - xhat[r * f + j] * s2);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..f {
                                dx[r * f + j] = g[r * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            &Op::BceWithLogits { logit, target } => {
                let p = sigmoid(self.scalar(logit));
                self.accumulate(grads, logit, vec![g[0] * (p - target)]);
            }
            &Op::FrobeniusNorm(a) => {
                let norm = node.data[0];
                let d = if norm == 0.0 {
                    vec![0.0; self.value(a).len()]
                } else {
                    self.value(a).iter().map(|v| g[0] * v / norm).collect()
                };
                self.accumulate(grads, a, d);
            }
            &Op::RowEntropyMean(a) => {
                let r = self.nodes[a.0].shape[0].max(1) as f64;
                let d = self
                    .value(a)
                    .iter()
                    .map(|&p| {
                        if p > 0.0 {
                            -g[0] * (p.ln() + 1.0) / r
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, a, d);
            }
        }
    }
}

pub fn bce_with_logits_value(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// track gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}
