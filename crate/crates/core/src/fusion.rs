//! Symmetric two-dialect cross-attention fusion.

use serde::{Deserialize, Serialize};

use crate::audio::EncodedAudio;
use crate::error::{Error, Result};
use crate::numerics::layers::{expand_key_mask, Linear};
use crate::numerics::{Graph, ParamStore, Rng, Var};

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `QKᵀ / d`
    #[default]
    DivideByD,
    /// `QKᵀ / √d`
    DivideBySqrtD,
}

impl ScaleMode {
    pub fn factor(self, d: usize) -> f64 {
        match self {
            ScaleMode::DivideByD => 1.0 / d as f64,
            ScaleMode::DivideBySqrtD => 1.0 / (d as f64).sqrt(),
        }
    }
}

/// Shared single-head Q/K/V maps plus the `2d → d` output projection.
#[derive(Debug, Clone)]
pub struct DialectFusion {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub scale: ScaleMode,
    pub d: usize,
}

impl DialectFusion {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, scale: ScaleMode) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, rng, &format!("{name}.out"), 2 * d, d)?,
            scale,
            d,
        })
    }

    pub fn qkv_project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d {
            return Err(Error::shape("qkv_project", g.shape(x), &[self.d]));
        }
        Ok((
            self.q.forward(g, store, x)?,
            self.k.forward(g, store, x)?,
            self.v.forward(g, store, x)?,
        ))
    }

    /// `Softmax(Q·Kᵀ / s)·V` per sentence; `q` comes from one dialect and
    /// `k`, `v` from the other. Masked key positions get zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, batch: usize, t: usize, key_mask: &[bool]) -> Result<Var> {
        let rows = batch * t;
        for x in [q, k, v] {
            if g.shape(x) != [rows, self.d] {
                return Err(Error::shape("cross_attend", g.shape(x), &[rows, self.d]));
            }
        }
        if key_mask.len() != rows {
            return Err(Error::shape("cross_attend mask", &[key_mask.len()], &[rows]));
        }
        let q = g.reshape(q, &[batch, t, self.d])?;
        let k = g.reshape(k, &[batch, t, self.d])?;
        let v = g.reshape(v, &[batch, t, self.d])?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, self.scale.factor(self.d))?;
        let mask = expand_key_mask(key_mask, batch, t, 1);
        let p = g.softmax(scores, Some(&mask))?;
        let out = g.bmm(p, v, false)?;
        g.reshape(out, &[rows, self.d])
    }

    /// Concatenates the class rows of both attended sequences and projects
    /// `2d → d`.
    pub fn fuse_concat(&self, g: &mut Graph, store: &ParamStore, att_a: Var, att_b: Var, batch: usize, t: usize) -> Result<Var> {
        if g.shape(att_a) != g.shape(att_b) {
            return Err(Error::shape("fuse_concat", g.shape(att_a), g.shape(att_b)));
        }
        let cls: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let a = g.gather_rows(att_a, &cls)?;
        let b = g.gather_rows(att_b, &cls)?;
        let cat = g.concat_last(&[a, b])?;
        self.out.forward(g, store, cat)
    }

    /// Returns `(F_att^A, F_att^B)`: A's values attended by B's queries and
    /// vice versa.
    pub fn attend_both(&self, g: &mut Graph, store: &ParamStore, a: &EncodedAudio, b: &EncodedAudio) -> Result<(Var, Var)> {
        if a.batch != b.batch || a.t != b.t {
            return Err(Error::Data(format!(
                "dialect sequences differ in layout: {}×{} vs {}×{}",
                a.batch, a.t, b.batch, b.t
            )));
        }
        if a.mask != b.mask {
            return Err(Error::Data("dialect sequences have different masks".into()));
        }
        let (qa, ka, va) = self.qkv_project(g, store, a.tokens)?;
        let (qb, kb, vb) = self.qkv_project(g, store, b.tokens)?;
        let att_a = self.cross_attend(g, qb, ka, va, a.batch, a.t, &a.mask)?;
        let att_b = self.cross_attend(g, qa, kb, vb, a.batch, a.t, &b.mask)?;
        Ok((att_a, att_b))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: &EncodedAudio, b: &EncodedAudio) -> Result<Var> {
        let (att_a, att_b) = self.attend_both(g, store, a, b)?;
        self.fuse_concat(g, store, att_a, att_b, a.batch, a.t)
    }
}
