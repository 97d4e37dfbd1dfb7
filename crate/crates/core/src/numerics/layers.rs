//! Parameterized building blocks. Each layer owns only [`ParamId`]s; the
//! tensors live in a [`ParamStore`] and are bound onto a [`Graph`] per forward.

use super::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W` stored as `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from N(0, 1/d_in), zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), rng.normal_tensor(vec![d_in, d_out], std))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(vec![d], 1.0))?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(vec![d]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias, LN_EPS)
    }
}

/// Expands a per-key validity mask `[B×T]` to the `[B·heads×T×T]` layout used
/// by batched attention scores.
pub fn expand_key_mask(key_mask: &[bool], batch: usize, t: usize, heads: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * heads * t * t);
    for b in 0..batch {
        let keys = &key_mask[b * t..(b + 1) * t];
        for _ in 0..heads * t {
            out.extend_from_slice(keys);
        }
    }
    out
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("hidden size {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d)?,
            heads,
            d,
        })
    }

    /// `[B·T×d]` rows → `[B·heads×T×d/heads]`.
    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, t: usize) -> Result<Var> {
        let dh = self.d / self.heads;
        let x = g.reshape(x, &[batch, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, t, dh])
    }

    /// Attends from the rows of `xq` to the rows of `xkv`, both laid out as
    /// `batch` sequences of `t` rows. `key_mask` (length `B·T`, true = real
    /// token) removes padded keys from every softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        batch: usize,
        t: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let rows = batch * t;
        for x in [xq, xkv] {
            if g.shape(x) != [rows, self.d] {
                return Err(Error::shape("attention input", g.shape(x), &[rows, self.d]));
            }
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(Error::shape("attention mask", &[m.len()], &[rows]));
            }
        }
        let dh = self.d / self.heads;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let q = self.split_heads(g, q, batch, t)?;
        let k = self.split_heads(g, k, batch, t)?;
        let v = self.split_heads(g, v, batch, t)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let mask = key_mask.map(|m| expand_key_mask(m, batch, t, self.heads));
        let p = g.softmax(scores, mask.as_deref())?;
        let ctx = g.bmm(p, v, false)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[rows, self.d])?;
        self.o.forward(g, store, ctx)
    }
}

/// Pre-norm transformer encoder layer with a 4·d GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, 4 * d)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * d, d)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
        t: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, batch, t, key_mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), rng.normal_tensor(vec![c_out, c_in, kernel, kernel], std))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]))?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}
