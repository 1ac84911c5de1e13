//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted and the backward pass is a single reverse sweep.
//! Leaves created from trainable [`Param`]s are memoized by parameter name: binding
//! the same parameter twice in one graph yields the same [`Var`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Upsample3d {
        input: Var,
        grid: [usize; 3],
        factor: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
    BceProbs {
        probs: Var,
        target: Vec<f64>,
        clamp: f64,
    },
    Dice {
        probs: Var,
        target: Vec<f64>,
        intersection: f64,
        denom: f64,
        eps: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Reshape(_) => "reshape",
            Op::Upsample3d { .. } => "upsample3d",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::BceProbs { .. } => "bce_probs",
            Op::Dice { .. } => "dice",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![a, b],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Reshape(a) => vec![a],
            Op::Upsample3d { input, .. } => vec![input],
            Op::BceWithLogits { logits, .. } => vec![logits],
            Op::BceProbs { probs, .. } => vec![probs],
            Op::Dice { probs, .. } => vec![probs],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations plus the saved activations needed to
/// differentiate them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Contract(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.zero_grad();
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter as a leaf. Frozen parameters become constants.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.tensor.clone(), p.tensor.requires_grad);
        self.params.insert(p.name.clone(), v);
        v
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rows_cols()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        self.push(Tensor::from_parts(vec![sa[0], sb[1]], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose: rank-2 required, got {s:?}")));
        }
        let out = transpose_raw(self.value(a).data(), s[0], s[1]);
        self.push(Tensor::from_parts(vec![s[1], s[0]], out), Op::Transpose(a))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        let rl = self.value(row).len();
        if rl != cols {
            return Err(Error::Dimension(format!(
                "{}: row of length {rl} against {:?}",
                op.name(),
                self.shape(x)
            )));
        }
        let r = self.value(row).data();
        let out = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    /// `x[n, c] + row[c]` for every row `n`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x[n, c] * row[c]` for every row `n`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s))
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        let mut out = self.value(a).data().to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    /// Row-wise layer normalization with `eps = 1e-5` inside the square root.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if cols < 2 {
            return Err(Error::Dimension(format!(
                "layernorm: need at least 2 features, got {:?}",
                self.shape(x)
            )));
        }
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Dimension(format!(
                "layernorm: gain/bias must have length {cols}"
            )));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Averages the rows of `x[n, c]` into a `[c]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        let mut out = vec![0.0; cols];
        for chunk in self.value(x).data().chunks(cols) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.push(Tensor::from_parts(vec![cols], out), Op::MeanRows(x))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Nearest-neighbour upsampling of a `grid[0] x grid[1] x grid[2]` cell
    /// array (any shape with that many values) by `factor` along every axis.
    pub fn upsample3d(&mut self, input: Var, grid: [usize; 3], factor: usize) -> Result<Var> {
        let n = grid.iter().product::<usize>();
        if self.value(input).len() != n || factor == 0 {
            return Err(Error::Dimension(format!(
                "upsample3d: input {:?} does not hold a {grid:?} grid",
                self.shape(input)
            )));
        }
        let dims = [grid[0] * factor, grid[1] * factor, grid[2] * factor];
        let src = self.value(input).data();
        let mut out = vec![0.0; dims.iter().product()];
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let base_out = (x * dims[1] + y) * dims[2];
                let base_in = ((x / factor) * grid[1] + y / factor) * grid[2];
                for z in 0..dims[2] {
                    out[base_out + z] = src[base_in + z / factor];
                }
            }
        }
        self.push(
            Tensor::from_parts(dims.to_vec(), out),
            Op::Upsample3d {
                input,
                grid,
                factor,
            },
        )
    }

    fn check_target(&self, v: Var, target: &[f64], op: &str) -> Result<()> {
        if self.value(v).len() != target.len() {
            return Err(Error::Contract(format!(
                "{op}: prediction has {} values, target {}",
                self.value(v).len(),
                target.len()
            )));
        }
        Ok(())
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        self.check_target(logits, target, "bce_with_logits")?;
        let z = self.value(logits).data();
        let total: f64 = z
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy on probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce_probs(&mut self, probs: Var, target: &[f64], clamp: f64) -> Result<Var> {
        self.check_target(probs, target, "bce_probs")?;
        let p = self.value(probs).data();
        let total: f64 = p
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / p.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceProbs {
                probs,
                target: target.to_vec(),
                clamp,
            },
        )
    }

    /// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
    pub fn dice(&mut self, probs: Var, target: &[f64], eps: f64) -> Result<Var> {
        self.check_target(probs, target, "dice")?;
        let p = self.value(probs).data();
        let intersection: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
        let loss = 1.0 - (2.0 * intersection + eps) / denom;
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                probs,
                target: target.to_vec(),
                intersection,
                denom,
                eps,
            },
        )
    }

    /// Cross-entropy of `softmax(logits)` against a target distribution,
    /// computed with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        self.check_target(logits, target, "softmax_cross_entropy")?;
        let z = self.value(logits).data();
        let lse = log_sum_exp(z);
        let loss: f64 = target.iter().zip(z).map(|(t, z)| t * (lse - z)).sum();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients on leaves are added to
    /// whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, delta) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                let mut res = Vec::new();
                if want(*a) {
                    let bt = transpose_raw(val(*b), q, r);
                    res.push((*a, matmul_raw(g, &bt, p, r, q)));
                }
                if want(*b) {
                    let at = transpose_raw(val(*a), p, q);
                    res.push((*b, matmul_raw(&at, g, q, p, r)));
                }
                res
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                vec![(*a, transpose_raw(g, s[1], s[0]))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddRow(x, row) => {
                let cols = self.value(*row).len();
                vec![(*x, g.to_vec()), (*row, column_sums(g, cols))]
            }
            Op::MulRow(x, row) => {
                let r = val(*row);
                let cols = r.len();
                let dx = g
                    .chunks(cols)
                    .flat_map(|gc| gc.iter().zip(r).map(|(g, r)| g * r))
                    .collect();
                let gx: Vec<f64> = g.iter().zip(val(*x)).map(|(g, x)| g * x).collect();
                vec![(*x, dx), (*row, column_sums(&gx, cols))]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Softmax(a) => {
                let (_, cols) = node.value.rows_cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for c in 0..cols {
                        dxr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = node.value.rows_cols();
                let gv = val(*gain);
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let n = cols as f64;
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                    }
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        dx[r * cols + c] = inv_std[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu(a) => {
                let dx = g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect();
                vec![(*a, dx)]
            }
            Op::Sigmoid(a) => {
                let dx = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MeanRows(x) => {
                let (rows, _) = self.rows_cols(*x);
                let dx = (0..rows).flat_map(|_| g.iter().map(|v| v / rows as f64)).collect();
                vec![(*x, dx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Upsample3d {
                input,
                grid,
                factor,
            } => {
                let f = *factor;
                let dims = [grid[0] * f, grid[1] * f, grid[2] * f];
                let mut dx = vec![0.0; grid.iter().product()];
                for x in 0..dims[0] {
                    for y in 0..dims[1] {
                        let base_out = (x * dims[1] + y) * dims[2];
                        let base_in = ((x / f) * grid[1] + y / f) * grid[2];
                        for z in 0..dims[2] {
                            dx[base_in + z / f] += g[base_out + z];
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits);
                let n = z.len() as f64;
                let dx = z
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                    .collect();
                vec![(*logits, dx)]
            }
            Op::BceProbs {
                probs,
                target,
                clamp,
            } => {
                let p = val(*probs);
                let n = p.len() as f64;
                let dx = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < *clamp || p > 1.0 - *clamp {
                            0.0
                        } else {
                            g[0] * (p - t) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![(*probs, dx)]
            }
            Op::Dice {
                probs,
                target,
                intersection,
                denom,
                eps,
            } => {
                let num = 2.0 * intersection + eps;
                let d2 = denom * denom;
                let dx = target
                    .iter()
                    .map(|&t| -g[0] * (2.0 * t * denom - num) / d2)
                    .collect();
                vec![(*probs, dx)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let total: f64 = target.iter().sum();
                let dx = probs
                    .iter()
                    .zip(target)
                    .map(|(p, t)| g[0] * (total * p - t))
                    .collect();
                vec![(*logits, dx)]
            }
        }
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Adds leaf gradients into the matching parameters (matched by name).
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        for p in params {
            if p.frozen() {
                continue;
            }
            if let Some(g) = self.param_var(&p.name).and_then(|v| self.grad(v)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aik * b);
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for chunk in g.chunks(cols) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
