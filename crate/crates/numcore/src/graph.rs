//! Dynamically recorded operation tape with reverse-mode accumulation.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf, and records
//! enough to run its vector-Jacobian product later. [`Graph::backward`] seeds
//! a `1 × 1` loss with gradient 1 and walks the tape in reverse.
//!
//! Ops with a discrete branch (ReLU sign, gate band, caller-chosen indices)
//! fold the branch outcome into [`Graph::branch_signature`]; the gradient
//! checker uses it to skip finite-difference probes that straddle a kink.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::macs::MacCounter;
use crate::params::ParamSet;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub spatial_stride: usize,
    /// Leading spatial zero padding (0 or 1); total spatial padding is 2.
    pub pad_before: usize,
}

impl Conv3dSpec {
    pub const KERNEL: usize = 3;

    pub fn out_height(&self) -> usize {
        (self.height + 2 - Self::KERNEL) / self.spatial_stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 - Self::KERNEL) / self.spatial_stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * Self::KERNEL.pow(3)
    }

    pub fn out_positions(&self) -> usize {
        self.frames * self.out_height() * self.out_width()
    }

    pub fn macs(&self) -> u64 {
        (self.out_channels * self.patch_len() * self.out_positions()) as u64
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PoolRows(Var, Vec<Vec<usize>>),
    SumAll(Var),
    Pick(Var, Vec<usize>),
    SatGate(Var),
    SteGate(Var),
    CosineDistance(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv3dSpec,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Confined to one thread of execution.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
    macs: MacCounter,
    branch: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v)
        .wrapping_mul(0x0100_0000_01b3)
        .rotate_left(17)
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saturating sigmoid `max(0, min(1, 1.2σ(x) − 0.1))`.
pub fn saturating_sigmoid(x: f64) -> f64 {
    (1.2 * sigmoid(x) - 0.1).clamp(0.0, 1.0)
}

/// Slope of [`saturating_sigmoid`], zero outside the unclipped band.
pub fn saturating_sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    let v = 1.2 * s - 0.1;
    if v > 0.0 && v < 1.0 {
        1.2 * s * (1.0 - s)
    } else {
        0.0
    }
}

fn gate_region(x: f64) -> u64 {
    let v = 1.2 * sigmoid(x) - 0.1;
    if v <= 0.0 {
        0
    } else if v >= 1.0 {
        2
    } else {
        1
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_slope(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            macs: MacCounter::new(),
            branch: 0xcbf2_9ce4_8422_2325,
        }
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

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn macs_mut(&mut self) -> &mut MacCounter {
        &mut self.macs
    }

    pub fn set_stage(&mut self, stage: &'static str) -> &'static str {
        self.macs.set_stage(stage)
    }

    /// Hash of every discrete branch outcome taken so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    /// Folds a caller-side discrete decision into the branch signature.
    pub fn note_branch(&mut self, v: u64) {
        self.branch = mix(self.branch, v);
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Binds a named parameter; repeated binds return the same leaf.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        let v = self.push("param", t, Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        self.macs.add((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::from_rows(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        self.macs.add((m * k * n) as u64);
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", Tensor::from_rows(m, n, out)?, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push("transpose", t, Op::Transpose(a), rg)
    }

    /// Same buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Row range `[start, start + len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, t, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + row` with `row: 1 × cols` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let cols = tx.cols();
        if tr.len() != cols || tr.rows() != 1 {
            return Err(shape_err("add_row", tx, tr));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        self.push("add_row", t, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_const", t, Op::AddConst(x), rg)
    }

    /// Scales row `i` of `x` by `s[i]` (`s` is `rows × 1`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != tx.rows() {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, &f) in ts.data().iter().enumerate() {
            for v in &mut data[i * cols..(i + 1) * cols] {
                *v *= f;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        self.push("scale_rows", t, Op::ScaleRows(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut h = self.branch;
        for (i, &v) in tx.data().iter().enumerate() {
            if v > 0.0 {
                h = mix(h, i as u64);
            }
        }
        let t = tx.map(|v| v.max(0.0));
        self.branch = mix(h, tx.len() as u64);
        let rg = self.rg(&[x]);
        self.push("relu", t, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push("sigmoid", t, Op::Sigmoid(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        let t = tx.map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push("sqrt", t, Op::Sqrt(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push("square", t, Op::Square(x), rg)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax_rows", t, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("log_softmax_rows", t, Op::LogSoftmaxRows(x), rg)
    }

    /// Per-row layer normalisation with learnable `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.len() != cols || tb.len() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if start + len > cols {
            return Err(Error::invalid("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::from_rows(rows, len, data)?;
        let rg = self.rg(&[x]);
        self.push("slice_cols", t, Op::SliceCols(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::from_rows(rows, total, data)?;
        let rg = self.rg(parts);
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_rows(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid("gather_rows", format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(tx.row_slice(i));
        }
        let t = Tensor::from_rows(idx.len(), cols, data)?;
        let rg = self.rg(&[x]);
        self.push("gather_rows", t, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Mean of the rows in each group; output has one row per group.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid("pool_rows", "empty group"));
            }
            let out = &mut data[g * cols..(g + 1) * cols];
            for &r in members {
                if r >= rows {
                    return Err(Error::invalid("pool_rows", format!("row {r} out of {rows}")));
                }
                for (o, v) in out.iter_mut().zip(tx.row_slice(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::from_rows(groups.len(), cols, data)?;
        let rg = self.rg(&[x]);
        self.push("pool_rows", t, Op::PoolRows(x, groups), rg)
    }

    /// `1 × cols` mean over all rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.pool_rows(x, vec![(0..rows).collect()])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push("sum_all", t, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Picks flat elements into a `1 × k` row; indices count as a branch.
    pub fn pick(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(flat_idx.len());
        let mut h = self.branch;
        for &i in flat_idx {
            if i >= tx.len() {
                return Err(Error::invalid("pick", format!("index {i} out of {}", tx.len())));
            }
            data.push(tx.data()[i]);
            h = mix(h, i as u64);
        }
        self.branch = h;
        let t = Tensor::row(data);
        let rg = self.rg(&[x]);
        self.push("pick", t, Op::Pick(x, flat_idx.to_vec()), rg)
    }

    /// Differentiable saturating-sigmoid gate value.
    pub fn sat_gate(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut h = self.branch;
        for &v in tx.data() {
            h = mix(h, gate_region(v));
        }
        let t = tx.map(saturating_sigmoid);
        self.branch = h;
        let rg = self.rg(&[x]);
        self.push("sat_gate", t, Op::SatGate(x), rg)
    }

    /// Hard decision `1(x > 0)` whose backward pass uses the saturating
    /// sigmoid slope (straight-through estimator).
    pub fn ste_gate(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut h = self.branch;
        for &v in tx.data() {
            h = mix(h, gate_region(v) * 2 + u64::from(v > 0.0));
        }
        let t = tx.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.branch = h;
        let rg = self.rg(&[x]);
        self.push("ste_gate", t, Op::SteGate(x), rg)
    }

    /// `1 − cos(a, b)` over the flattened tensors; `1` if either norm is zero.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("cosine_distance", ta, tb));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        let c = if na == 0.0 || nb == 0.0 {
            1.0
        } else {
            let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        };
        self.note_branch(u64::from(na == 0.0 || nb == 0.0));
        let rg = self.rg(&[a, b]);
        self.push("cosine_distance", Tensor::scalar(c), Op::CosineDistance(a, b), rg)
    }

    /// 3-D convolution, kernel 3×3×3, temporal stride 1 and zero padding 1 in
    /// time. Spatially each axis gets `pad_before` leading and `2 − pad_before`
    /// trailing zeros, so output cell `o` is centred on input `o·stride + 1 − pad_before`.
    ///
    /// `x` is `[C_in, T, H, W]`, `w` is `[C_out, C_in·27]`, `b` is `1 × C_out`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spatial_stride: usize, pad_before: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 4 {
            return Err(Error::invalid("conv3d", format!("input shape {:?}", tx.shape())));
        }
        if pad_before > 1 || spatial_stride == 0 {
            return Err(Error::invalid(
                "conv3d",
                format!("stride {spatial_stride}, pad_before {pad_before}"),
            ));
        }
        let spec = Conv3dSpec {
            in_channels: tx.shape()[0],
            out_channels: self.value(w).rows(),
            frames: tx.shape()[1],
            height: tx.shape()[2],
            width: tx.shape()[3],
            spatial_stride,
            pad_before,
        };
        let tw = self.value(w);
        if tw.cols() != spec.patch_len() || self.value(b).len() != spec.out_channels {
            return Err(shape_err("conv3d", tw, tx));
        }
        let cols = im2col(tx.data(), &spec);
        let (ho, wo, p) = (spec.out_height(), spec.out_width(), spec.out_positions());
        let mut out = vec![0.0; spec.out_channels * p];
        gemm(tw.data(), &cols, &mut out, spec.out_channels, spec.patch_len(), p);
        let bias = self.value(b).data();
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            for v in chunk {
                *v += bias[co];
            }
        }
        self.macs.add(spec.macs());
        let t = Tensor::new(vec![spec.out_channels, spec.frames, ho, wo], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push("conv3d", t, Op::Conv3d { x, w, b, spec, cols }, rg)
    }

    /// Runs reverse accumulation from a `1 × 1` loss. May be called once per
    /// graph; later calls overwrite earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    gemm_nt(dy, tb.data(), acc(grads, *a, m * k), m, n, k);
                }
                if need(*b) {
                    gemm_tn(ta.data(), dy, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if need(*a) {
                    gemm(dy, tb.data(), acc(grads, *a, m * k), m, n, k);
                }
                if need(*b) {
                    gemm_tn(dy, ta.data(), acc(grads, *b, n * k), m, n, k);
                }
            }
            Op::Transpose(a) => {
                if need(*a) {
                    let (r, c) = (y.rows(), y.cols());
                    let g = acc(grads, *a, r * c);
                    for p in 0..r {
                        for q in 0..c {
                            g[q * r + p] += dy[p * c + q];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if need(*a) {
                    for (g, d) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(*a) {
                    for (g, d) in acc(grads, *a, dy.len()).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if need(*b) {
                    for (g, d) in acc(grads, *b, dy.len()).iter_mut().zip(dy) {
                        *g += sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let tb = val(*b).data();
                    for ((g, d), y) in acc(grads, *a, dy.len()).iter_mut().zip(dy).zip(tb) {
                        *g += d * y;
                    }
                }
                if need(*b) {
                    let ta = val(*a).data();
                    for ((g, d), x) in acc(grads, *b, dy.len()).iter_mut().zip(dy).zip(ta) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if need(*x) {
                    for (g, d) in acc(grads, *x, dy.len()).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if need(*row) {
                    let cols = len(*row);
                    let g = acc(grads, *row, cols);
                    for chunk in dy.chunks(cols.max(1)) {
                        for (gv, d) in g.iter_mut().zip(chunk) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if need(*x) {
                    for (g, d) in acc(grads, *x, dy.len()).iter_mut().zip(dy) {
                        *g += c * d;
                    }
                }
            }
            Op::AddConst(x) => {
                if need(*x) {
                    for (g, d) in acc(grads, *x, dy.len()).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let tx = val(*x);
                let cols = tx.cols();
                let ts = val(*s).data();
                if need(*x) {
                    let g = acc(grads, *x, dy.len());
                    for (r, &f) in ts.iter().enumerate() {
                        for c in r * cols..(r + 1) * cols {
                            g[c] += dy[c] * f;
                        }
                    }
                }
                if need(*s) {
                    let g = acc(grads, *s, ts.len());
                    for (r, gv) in g.iter_mut().enumerate() {
                        let mut a = 0.0;
                        for c in r * cols..(r + 1) * cols {
                            a += dy[c] * tx.data()[c];
                        }
                        *gv += a;
                    }
                }
            }
            Op::Relu(x) => {
                if need(*x) {
                    let tx = val(*x).data();
                    for ((g, d), v) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(tx) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if need(*x) {
                    let tx = val(*x).data();
                    for ((g, d), v) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(tx) {
                        *g += d * gelu_slope(*v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if need(*x) {
                    for ((g, d), s) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(y.data()) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::Sqrt(x) => {
                if need(*x) {
                    for ((g, d), s) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(y.data()) {
                        *g += d / (2.0 * s);
                    }
                }
            }
            Op::Square(x) => {
                if need(*x) {
                    let tx = val(*x).data();
                    for ((g, d), v) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(tx) {
                        *g += 2.0 * v * d;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if need(*x) {
                    let cols = y.cols().max(1);
                    let g = acc(grads, *x, dy.len());
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((gv, d), s) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += s * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if need(*x) {
                    let cols = y.cols().max(1);
                    let g = acc(grads, *x, dy.len());
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.data().chunks(cols)) {
                        let total: f64 = dr.iter().sum();
                        for ((gv, d), ly) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += d - ly.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = y.cols();
                let rows = y.rows();
                let gm = val(*gamma).data();
                if need(*gamma) {
                    let g = acc(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if need(*beta) {
                    let g = acc(grads, *beta, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += dy[r * cols + c];
                        }
                    }
                }
                if need(*x) {
                    let g = acc(grads, *x, rows * cols);
                    let inv = 1.0 / cols as f64;
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dh = dy[r * cols + c] * gm[c];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * cols + c];
                        }
                        mean_d *= inv;
                        mean_dx *= inv;
                        for c in 0..cols {
                            let dh = dy[r * cols + c] * gm[c];
                            g[r * cols + c] += rstd[r] * (dh - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if need(*x) {
                    let src_cols = val(*x).cols();
                    let (rows, w) = (y.rows(), y.cols());
                    let g = acc(grads, *x, rows * src_cols);
                    for r in 0..rows {
                        for c in 0..w {
                            g[r * src_cols + start + c] += dy[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (y.rows(), y.cols());
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if need(*p) {
                        let g = acc(grads, *p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += dy[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if need(*p) {
                        for (g, d) in acc(grads, *p, n).iter_mut().zip(&dy[off..off + n]) {
                            *g += d;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows(x, idx) => {
                if need(*x) {
                    let cols = y.cols();
                    let g = acc(grads, *x, len(*x));
                    for (o, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            g[src * cols + c] += dy[o * cols + c];
                        }
                    }
                }
            }
            Op::PoolRows(x, groups) => {
                if need(*x) {
                    let cols = y.cols();
                    let g = acc(grads, *x, len(*x));
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &r in members {
                            for c in 0..cols {
                                g[r * cols + c] += dy[gi * cols + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if need(*x) {
                    for g in acc(grads, *x, len(*x)).iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::Pick(x, idx) => {
                if need(*x) {
                    let g = acc(grads, *x, len(*x));
                    for (k, &i) in idx.iter().enumerate() {
                        g[i] += dy[k];
                    }
                }
            }
            Op::SatGate(x) | Op::SteGate(x) => {
                if need(*x) {
                    let tx = val(*x).data();
                    for ((g, d), v) in acc(grads, *x, dy.len()).iter_mut().zip(dy).zip(tx) {
                        *g += d * saturating_sigmoid_slope(*v);
                    }
                }
            }
            Op::CosineDistance(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                let cos = dot / (na * nb);
                let d = dy[0];
                if need(*a) {
                    let g = acc(grads, *a, ta.len());
                    for ((gv, x), y) in g.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *gv -= d * (y / (na * nb) - cos * x / (na * na));
                    }
                }
                if need(*b) {
                    let g = acc(grads, *b, tb.len());
                    for ((gv, x), y) in g.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *gv -= d * (x / (na * nb) - cos * y / (nb * nb));
                    }
                }
            }
            Op::Conv3d { x, w, b, spec, cols } => {
                let p = spec.out_positions();
                let k = spec.patch_len();
                let co = spec.out_channels;
                if need(*b) {
                    let g = acc(grads, *b, co);
                    for (c, chunk) in dy.chunks(p).enumerate() {
                        g[c] += chunk.iter().sum::<f64>();
                    }
                }
                if need(*w) {
                    gemm_nt(dy, cols, acc(grads, *w, co * k), co, p, k);
                }
                if need(*x) {
                    let mut dcols = vec![0.0; k * p];
                    gemm_tn(val(*w).data(), dy, &mut dcols, co, k, p);
                    col2im_add(&dcols, spec, acc(grads, *x, len(*x)));
                }
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    /// Named gradients for every bound parameter (zeros when unreached).
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grad(*v).unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Adds parameter gradients into the set's gradient slots.
    pub fn accumulate_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.grads.get(v.0).and_then(|g| g.as_ref()) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn im2col(x: &[f64], s: &Conv3dSpec) -> Vec<f64> {
    let (ho, wo, p) = (s.out_height(), s.out_width(), s.out_positions());
    let (t, h, w) = (s.frames as isize, s.height as isize, s.width as isize);
    let mut cols = vec![0.0; s.patch_len() * p];
    for ci in 0..s.in_channels {
        let plane = &x[ci * s.frames * s.height * s.width..];
        for kt in 0..3isize {
            for kh in 0..3isize {
                for kw in 0..3isize {
                    let row = ci * 27 + (kt * 9 + kh * 3 + kw) as usize;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut pos = 0;
                    for to in 0..s.frames as isize {
                        let ti = to + kt - 1;
                        for yo in 0..ho as isize {
                            let yi = yo * s.spatial_stride as isize + kh - s.pad_before as isize;
                            for xo in 0..wo as isize {
                                let xi = xo * s.spatial_stride as isize + kw - s.pad_before as isize;
                                if ti >= 0 && ti < t && yi >= 0 && yi < h && xi >= 0 && xi < w {
                                    dst[pos] = plane[((ti * h + yi) * w + xi) as usize];
                                }
                                pos += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], s: &Conv3dSpec, dx: &mut [f64]) {
    let (ho, wo, p) = (s.out_height(), s.out_width(), s.out_positions());
    let (t, h, w) = (s.frames as isize, s.height as isize, s.width as isize);
    for ci in 0..s.in_channels {
        let base = ci * s.frames * s.height * s.width;
        for kt in 0..3isize {
            for kh in 0..3isize {
                for kw in 0..3isize {
                    let row = ci * 27 + (kt * 9 + kh * 3 + kw) as usize;
                    let src = &cols[row * p..(row + 1) * p];
                    let mut pos = 0;
                    for to in 0..s.frames as isize {
                        let ti = to + kt - 1;
                        for yo in 0..ho as isize {
                            let yi = yo * s.spatial_stride as isize + kh - s.pad_before as isize;
                            for xo in 0..wo as isize {
                                let xi = xo * s.spatial_stride as isize + kw - s.pad_before as isize;
                                if ti >= 0 && ti < t && yi >= 0 && yi < h && xi >= 0 && xi < w {
                                    dx[base + ((ti * h + yi) * w + xi) as usize] += src[pos];
                                }
                                pos += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_counts_macs_and_checks_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_nested(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(Tensor::from_nested(&[&[5.0], &[6.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        assert_eq!(g.macs().total(), 4);
        let bad = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let bad2 = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(bad, bad2).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn identity_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2)).unwrap();
        let x = Tensor::from_nested(&[&[1.5, -2.0, 0.25], &[3.0, 7.0, -1.0]]);
        let xv = g.constant(x.clone()).unwrap();
        let y = g.matmul(i2, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_nested(&[
                &[2.0, 2.0, 2.0],
                &[0.0, 3f64.ln(), f64::MIN_POSITIVE],
            ]))
            .unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            assert!((v.get2(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(Tensor::from_nested(&[&[1000.0, 0.0]])).unwrap();
        let s = g.softmax_rows(big).unwrap();
        assert!((g.value(s).get2(0, 0) - 1.0).abs() < 1e-12);
        assert!(g.value(s).get2(0, 1) >= 0.0 && g.value(s).get2(0, 1) < 1e-300);
        let two = g.constant(Tensor::from_nested(&[&[0.0, 3f64.ln()]])).unwrap();
        let s2 = g.softmax_rows(two).unwrap();
        assert!((g.value(s2).get2(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.value(s2).get2(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX)).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "scale" });
    }

    #[test]
    fn saturating_gate_values() {
        assert_eq!(saturating_sigmoid(0.0), 0.5);
        assert_eq!(saturating_sigmoid(10.0), 1.0);
        assert_eq!(saturating_sigmoid(-3.0), 0.0);
        assert_eq!(saturating_sigmoid_slope(-3.0), 0.0);
        assert!((saturating_sigmoid_slope(0.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ste_forward_is_strict_and_backward_is_surrogate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![0.0, 0.5, -0.5])).unwrap();
        let b = g.ste_gate(x).unwrap();
        assert_eq!(g.value(b).data(), &[0.0, 1.0, 0.0]);
        let s = g.sum_all(b).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        for (i, &v) in [0.0, 0.5, -0.5].iter().enumerate() {
            assert!((gx.data()[i] - saturating_sigmoid_slope(v)).abs() < 1e-15);
        }
    }

    #[test]
    fn conv3d_output_geometry_and_macs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4, 32, 64])).unwrap();
        let w = g.constant(Tensor::zeros(&[8, 81])).unwrap();
        let b = g.constant(Tensor::zeros(&[1, 8])).unwrap();
        let y = g.conv3d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 4, 16, 32]);
        assert_eq!(g.macs().total(), (8 * 81 * 4 * 16 * 32) as u64);
    }

    #[test]
    fn conv3d_matches_direct_loop() {
        let x = crate::rng::seeded_gaussian(1, &[2, 3, 6, 6]);
        let w = crate::rng::seeded_gaussian(2, &[3, 54]);
        let b = crate::rng::seeded_gaussian(3, &[1, 3]);
        for pad in 0..2 {
            let mut g = Graph::new();
            let (xv, wv, bv) = (
                g.constant(x.clone()).unwrap(),
                g.constant(w.clone()).unwrap(),
                g.constant(b.clone()).unwrap(),
            );
            let y = g.conv3d(xv, wv, bv, 2, pad).unwrap();
            let yt = g.value(y);
            let at = |c: usize, t: isize, i: isize, j: isize| -> f64 {
                if !(0..3).contains(&t) || !(0..6).contains(&i) || !(0..6).contains(&j) {
                    0.0
                } else {
                    x.data()[((c * 3 + t as usize) * 6 + i as usize) * 6 + j as usize]
                }
            };
            for co in 0..3 {
                for t in 0..3isize {
                    for yo in 0..3isize {
                        for xo in 0..3isize {
                            let mut s = b.data()[co];
                            for ci in 0..2 {
                                for kt in 0..3isize {
                                    for kh in 0..3isize {
                                        for kw in 0..3isize {
                                            let wi = ci * 27 + (kt * 9 + kh * 3 + kw) as usize;
                                            s += w.get2(co, wi)
                                                * at(
                                                    ci,
                                                    t + kt - 1,
                                                    yo * 2 + kh - pad as isize,
                                                    xo * 2 + kw - pad as isize,
                                                );
                                        }
                                    }
                                }
                            }
                            let got = yt.data()[((co * 3 + t as usize) * 3 + yo as usize) * 3 + xo as usize];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
