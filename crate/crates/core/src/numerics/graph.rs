//! Eager reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op evaluates immediately and appends a node to the tape. Nodes only
//! reference earlier nodes, so walking the tape from the end visits them in
//! reverse topological order.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Log-probability floor used by the clamped likelihood losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Op families that can be targeted by fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    BatchMatMul,
    Softmax,
    LayerNorm,
    Gelu,
    Conv2d,
    GatherRows,
    L2Normalize,
    Other,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "bmm" => OpKind::BatchMatMul,
            "softmax" => OpKind::Softmax,
            "layernorm" => OpKind::LayerNorm,
            "gelu" => OpKind::Gelu,
            "conv2d" => OpKind::Conv2d,
            "gather" => OpKind::GatherRows,
            "l2norm" => OpKind::L2Normalize,
            other => return Err(Error::Config(format!("unknown op kind {other}"))),
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Transpose { a: Var, m: usize, n: usize },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    MulScalar { a: Var, s: Var },
    AddScalar { a: Var, s: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatLast { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<Vec<f64>> },
    MeanLast { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    BceWithLogits { z: Var, targets: Vec<f64> },
    NllClamped { p: Var, labels: Vec<usize> },
    BceClamped { p: Var, targets: Vec<f64> },
    WeightedSum { a: Var, w: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::L2NormalizeRows { .. } => OpKind::L2Normalize,
            _ => OpKind::Other,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Gradients of every parameter bound on the graph that the loss reached,
    /// in binding order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(v).map(|t| (*id, t)))
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.leaves.get(v))
    }
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    bind_order: Vec<(ParamId, Var)>,
    consumed: bool,
    fault: Option<OpKind>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => kernels::add_into(g, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong.
    /// Only meant for exercising gradient-check failure paths.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf tracking gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Binding the same
    /// id twice returns the same node, so shared weights accumulate gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone().with_grad());
        self.bound.insert(id, v);
        self.bind_order.push((id, v));
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bind_order
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product over the leading dimension: `[g×m×k]·[g×k×n]`, or
    /// `[g×m×k]·[g×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let c = &mut out[i * m * n..(i + 1) * m * n];
            let aa = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            if trans_b {
                kernels::gemm_nt_acc(c, aa, bb, m, k, n);
            } else {
                kernels::gemm_acc(c, aa, bb, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, g, m, k, n, trans_b },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { a, m, n }, rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let out = permute_data(self.value(a).data(), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { a, axes: axes.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a vector along the last dimension of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            kernels::add_into(row, &b);
        }
        t.set_requires_grad(false);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale { a, c }, rg))
    }

    /// Multiplies every entry by a single-element variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.map(a, |x| x * c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::MulScalar { a, s }, rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("add_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.map(a, |x| x + c);
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::AddScalar { a, s }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, kernels::gelu);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gelu { a }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, kernels::sigmoid);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sigmoid { a }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::exp);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Exp { a }, rg))
    }

    // ----- normalization --------------------------------------------------

    /// Softmax over the last dimension. `mask` has one entry per element of
    /// `a`; `false` entries are excluded and come out exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::shape("softmax mask", x.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; x.numel()];
        for (r, (xr, yr)) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row: r });
            }
            let mut sum = 0.0;
            for (j, &v) in xr.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    yr[j] = e;
                    sum += e;
                }
            }
            for y in yr.iter_mut() {
                *y /= sum;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization over the last dimension followed by an
    /// affine transform.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        if d < 2 {
            return Err(Error::Config("layernorm needs at least two features".into()));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layernorm", x.shape(), self.shape(gain)));
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { a, gain, bias, xhat, inv_std }, rg))
    }

    /// Unit-L2-normalizes each row. A zero-norm row is a numerical fault.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let mut norms = Vec::with_capacity(x.numel() / n);
        let mut out = x.data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite(format!("row {r} has norm {norm}; cosine undefined")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::L2NormalizeRows { a, norms }, rg))
    }

    // ----- structural -----------------------------------------------------

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatLast { parts: parts.to_vec() }, rg))
    }

    /// Stacks 2-D blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let cols = self.value(*first).last_dim();
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Output row `r` is row `idx[r]` of the 2-D input.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", s, &[bad]));
        }
        if idx.is_empty() {
            return Err(Error::Config("gather of zero rows".into()));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    // ----- convolution ----------------------------------------------------

    /// Cross-correlation of `x` (`[C×H×W]` or `[B×C×H×W]`) with `kernel`
    /// (`[C_out×C_in×kh×kw]`), plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, h, w, batched) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => return Err(Error::shape("conv2d", &xs, &ks)),
        };
        if ks.len() != 4 || ks[1] != c_in {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != ks[0] {
                return Err(Error::shape("conv2d bias", &ks, self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::Config(format!("kernel {k} larger than padded input {size}+2·{pad}")))?;
            if span % stride != 0 {
                return Err(Error::Config(format!(
                    "conv2d output size ({size}+2·{pad}-{k})/{stride}+1 is not an integer"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            h_out: out_dim(h, ks[2])?,
            w_out: out_dim(w, ks[3])?,
        };
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; batch * geom.out_len()];
        let mut cols = Vec::with_capacity(batch);
        for bi in 0..batch {
            let col = kernels::im2col(&xd[bi * geom.in_len()..(bi + 1) * geom.in_len()], &geom);
            let o = &mut out[bi * geom.out_len()..(bi + 1) * geom.out_len()];
            kernels::gemm_acc(o, kd, &col, geom.c_out, geom.patch_len(), geom.out_pixels());
            if let Some(bd) = &bd {
                for (co, chunk) in o.chunks_exact_mut(geom.out_pixels()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
            cols.push(col);
        }
        let shape = if batched {
            vec![batch, geom.c_out, geom.h_out, geom.w_out]
        } else {
            vec![geom.c_out, geom.h_out, geom.w_out]
        };
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(t, Op::Conv2d { x, w: kernel, b: bias, geom, cols }, rg))
    }

    // ----- reductions and losses -----------------------------------------

    /// Mean over the last dimension (the dimension is dropped).
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        let out: Vec<f64> = x.data().chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MeanLast { a }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { a }, rg))
    }

    /// `Σ w ⊙ a` for a constant weight pattern.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        same_shape("weighted_sum", self.value(a), w)?;
        let s = self.value(a).data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum { a, w: w.data().to_vec() },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits `z` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &Tensor) -> Result<Var> {
        same_shape("bce_with_logits", self.value(z), targets)?;
        let zd = self.value(z).data();
        let n = zd.len() as f64;
        let loss = zd
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| kernels::softplus(z) - t * z)
            .sum::<f64>()
            / n;
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { z, targets: targets.data().to_vec() },
            rg,
        ))
    }

    /// `-(1/B)·Σ ln max(p[i, yᵢ], 1e-12)` over a `[B×M]` probability matrix.
    pub fn nll_clamped(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(p);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("nll", s, &[labels.len()]));
        }
        let m = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::Data(format!("class index {bad} out of range for {m} classes")));
        }
        let pd = self.value(p).data();
        let b = labels.len() as f64;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| pd[i * m + y].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / b;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllClamped { p, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Mean elementwise binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce_clamped(&mut self, p: Var, targets: &Tensor) -> Result<Var> {
        same_shape("bce", self.value(p), targets)?;
        if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Data(format!("non-binary target {bad}")));
        }
        let pd = self.value(p).data();
        let n = pd.len() as f64;
        let loss = -pd
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceClamped { p, targets: targets.data().to_vec() },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Propagates gradients from a single-element `loss` to every reachable
    /// gradient-tracking leaf. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        loss_val.ensure_finite("loss")?;
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(mut gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), gout)?);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                gout.iter_mut().for_each(|g| *g *= 1.01);
            }
            self.backprop_node(i, &gout, &mut grads);
        }

        Ok(Gradients {
            leaves,
            params: self.bind_order.clone(),
        })
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    accumulate_with(grads, a, m * k, |g| kernels::gemm_nt_acc(g, gout, val(b), m, n, k));
                }
                if wants(b) {
                    accumulate_with(grads, b, k * n, |g| kernels::gemm_tn_acc(g, val(a), gout, k, m, n));
                }
            }
            &Op::BatchMatMul { a, b, g: groups, m, k, n, trans_b } => {
                let (ad, bd) = (val(a), val(b));
                if wants(a) {
                    accumulate_with(grads, a, groups * m * k, |ga| {
                        for gi in 0..groups {
                            let go = &gout[gi * m * n..(gi + 1) * m * n];
                            let bb = &bd[gi * k * n..(gi + 1) * k * n];
                            let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                            if trans_b {
                                kernels::gemm_acc(dst, go, bb, m, n, k);
                            } else {
                                kernels::gemm_nt_acc(dst, go, bb, m, n, k);
                            }
                        }
                    });
                }
                if wants(b) {
                    accumulate_with(grads, b, groups * k * n, |gb| {
                        for gi in 0..groups {
                            let go = &gout[gi * m * n..(gi + 1) * m * n];
                            let aa = &ad[gi * m * k..(gi + 1) * m * k];
                            let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if trans_b {
                                // dB[n×k] = dCᵀ·A
                                kernels::gemm_tn_acc(dst, go, aa, n, m, k);
                            } else {
                                // dB[k×n] = Aᵀ·dC
                                kernels::gemm_tn_acc(dst, aa, go, k, m, n);
                            }
                        }
                    });
                }
            }
            &Op::Transpose { a, m, n } => {
                if wants(a) {
                    accumulate(grads, a, kernels::transpose(gout, n, m));
                }
            }
            Op::Permute { a, axes } => {
                if wants(*a) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let out_shape = nodes[i].value.shape();
                    accumulate(grads, *a, permute_data(gout, out_shape, &inverse));
                }
            }
            &Op::Reshape { a } => {
                if wants(a) {
                    accumulate(grads, a, gout.to_vec());
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, a, gout.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, gout.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(grads, a, gout.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, gout.iter().map(|g| -g).collect());
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    accumulate(grads, a, gout.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    accumulate(grads, b, gout.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::AddRow { a, bias } => {
                if wants(a) {
                    accumulate(grads, a, gout.to_vec());
                }
                if wants(bias) {
                    let n = val(bias).len();
                    accumulate_with(grads, bias, n, |gb| {
                        for row in gout.chunks_exact(n) {
                            kernels::add_into(gb, row);
                        }
                    });
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    accumulate(grads, a, gout.iter().map(|g| g * c).collect());
                }
            }
            &Op::MulScalar { a, s } => {
                let c = val(s)[0];
                if wants(a) {
                    accumulate(grads, a, gout.iter().map(|g| g * c).collect());
                }
                if wants(s) {
                    let d: f64 = gout.iter().zip(val(a)).map(|(g, x)| g * x).sum();
                    accumulate(grads, s, vec![d]);
                }
            }
            &Op::AddScalar { a, s } => {
                if wants(a) {
                    accumulate(grads, a, gout.to_vec());
                }
                if wants(s) {
                    accumulate(grads, s, vec![gout.iter().sum()]);
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    accumulate(grads, a, gout.iter().zip(val(a)).map(|(g, &x)| g * kernels::gelu_grad(x)).collect());
                }
            }
            &Op::Sigmoid { a } => {
                if wants(a) {
                    accumulate(grads, a, gout.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
            }
            &Op::Exp { a } => {
                if wants(a) {
                    accumulate(grads, a, gout.iter().zip(out).map(|(g, y)| g * y).collect());
                }
            }
            &Op::Softmax { a } => {
                if wants(a) {
                    let n = nodes[i].value.last_dim();
                    let mut dx = vec![0.0; out.len()];
                    for ((yr, gr), dr) in out.chunks_exact(n).zip(gout.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    accumulate(grads, a, dx);
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let d = nodes[i].value.last_dim();
                let gd = val(*gain);
                if wants(*a) {
                    let mut dx = vec![0.0; out.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &gout[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *a, dx);
                }
                if wants(*gain) {
                    accumulate_with(grads, *gain, d, |gg| {
                        for (gr, hr) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    accumulate_with(grads, *bias, d, |gb| {
                        for gr in gout.chunks_exact(d) {
                            kernels::add_into(gb, gr);
                        }
                    });
                }
            }
            Op::ConcatLast { parts } => {
                let total = nodes[i].value.last_dim();
                let rows = out.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        accumulate(grads, p, gout[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, idx } => {
                if wants(*a) {
                    let cols = nodes[i].value.last_dim();
                    let len = nodes[a.0].value.numel();
                    accumulate_with(grads, *a, len, |ga| {
                        for (r, &src) in idx.iter().enumerate() {
                            kernels::add_into(&mut ga[src * cols..(src + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let g = geom;
                let kd = val(*w);
                for (bi, col) in cols.iter().enumerate() {
                    let go = &gout[bi * g.out_len()..(bi + 1) * g.out_len()];
                    if wants(*w) {
                        accumulate_with(grads, *w, kd.len(), |gw| {
                            kernels::gemm_nt_acc(gw, go, col, g.c_out, g.out_pixels(), g.patch_len());
                        });
                    }
                    if let Some(b) = *b {
                        if wants(b) {
                            accumulate_with(grads, b, g.c_out, |gb| {
                                for (co, chunk) in go.chunks_exact(g.out_pixels()).enumerate() {
                                    gb[co] += chunk.iter().sum::<f64>();
                                }
                            });
                        }
                    }
                    if wants(*x) {
                        let mut dcol = vec![0.0; col.len()];
                        kernels::gemm_tn_acc(&mut dcol, kd, go, g.patch_len(), g.c_out, g.out_pixels());
                        let len = nodes[x.0].value.numel();
                        accumulate_with(grads, *x, len, |gx| {
                            kernels::col2im_acc(&mut gx[bi * g.in_len()..(bi + 1) * g.in_len()], &dcol, g);
                        });
                    }
                }
            }
            &Op::MeanLast { a } => {
                if wants(a) {
                    let n = nodes[a.0].value.last_dim();
                    let mut dx = Vec::with_capacity(n * gout.len());
                    for &g in gout {
                        dx.extend(std::iter::repeat_n(g / n as f64, n));
                    }
                    accumulate(grads, a, dx);
                }
            }
            &Op::SumAll { a } => {
                if wants(a) {
                    accumulate(grads, a, vec![gout[0]; nodes[a.0].value.numel()]);
                }
            }
            &Op::MeanAll { a } => {
                if wants(a) {
                    let n = nodes[a.0].value.numel();
                    accumulate(grads, a, vec![gout[0] / n as f64; n]);
                }
            }
            Op::WeightedSum { a, w } => {
                if wants(*a) {
                    accumulate(grads, *a, w.iter().map(|w| w * gout[0]).collect());
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                if wants(*a) {
                    let n = nodes[i].value.last_dim();
                    let mut dx = vec![0.0; out.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &out[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::BceWithLogits { z, targets } => {
                if wants(*z) {
                    let n = targets.len() as f64;
                    let dz = val(*z)
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| gout[0] * (kernels::sigmoid(z) - t) / n)
                        .collect();
                    accumulate(grads, *z, dz);
                }
            }
            Op::NllClamped { p, labels } => {
                if wants(*p) {
                    let pd = val(*p);
                    let m = pd.len() / labels.len();
                    let b = labels.len() as f64;
                    let mut dp = vec![0.0; pd.len()];
                    for (r, &y) in labels.iter().enumerate() {
                        let v = pd[r * m + y];
                        if v > PROB_FLOOR {
                            dp[r * m + y] = -gout[0] / (b * v);
                        }
                    }
                    accumulate(grads, *p, dp);
                }
            }
            Op::BceClamped { p, targets } => {
                if wants(*p) {
                    let n = targets.len() as f64;
                    let dp = val(*p)
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            let mut d = 0.0;
                            if p > PROB_FLOOR {
                                d -= y / p;
                            }
                            if 1.0 - p > PROB_FLOOR {
                                d += (1.0 - y) / (1.0 - p);
                            }
                            gout[0] * d / n
                        })
                        .collect();
                    accumulate(grads, *p, dp);
                }
            }
        }
    }
}

/// Reorders row-major `data` of `shape` so output axis `i` is input axis `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
