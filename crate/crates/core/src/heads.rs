//! Visual and textual feature heads, and the audio projection into the
//! common fusion space.

use crate::error::{Error, Result};
use crate::numerics::layers::{Conv2d, Linear};
use crate::numerics::{Graph, ParamStore, Rng, Var};

pub const CNN_KERNEL: usize = 4;
pub const CNN_STRIDE: usize = 2;
pub const CNN_PAD: usize = 1;

/// Three stride-2 convolutions with GELU, global average pooling and a
/// projection to `d_f`.
#[derive(Debug, Clone)]
pub struct VisualHead {
    pub convs: Vec<Conv2d>,
    pub proj: Linear,
    pub latent: [usize; 3],
}

impl VisualHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, latent: [usize; 3], channels: [usize; 3], d_f: usize) -> Result<Self> {
        let [c, h, w] = latent;
        // Each layer halves the spatial size exactly, so three layers need
        // both sides divisible by 8.
        if c == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "latent geometry {c}×{h}×{w} must have spatial sides divisible by 8"
            )));
        }
        let mut convs = Vec::with_capacity(3);
        let mut c_in = c;
        for (i, &c_out) in channels.iter().enumerate() {
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{i}"), c_in, c_out, CNN_KERNEL, CNN_STRIDE, CNN_PAD)?);
            c_in = c_out;
        }
        let proj = Linear::new(store, rng, &format!("{name}.proj"), c_in, d_f)?;
        Ok(Self { convs, proj, latent })
    }

    /// `latents` is `[B×C×H×W]`; output `[B×d_f]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latents: Var) -> Result<Var> {
        let s = g.shape(latents).to_vec();
        if s.len() != 4 || s[1..] != self.latent {
            return Err(Error::shape("visual_forward", &s, &self.latent));
        }
        let batch = s[0];
        let mut x = latents;
        for conv in &self.convs {
            x = conv.forward(g, store, x)?;
            x = g.gelu(x)?;
        }
        let s = g.shape(x).to_vec();
        let (channels, pixels) = (s[1], s[2] * s[3]);
        let x = g.reshape(x, &[batch * channels, pixels])?;
        let x = g.mean_last(x)?;
        let x = g.reshape(x, &[batch, channels])?;
        self.proj.forward(g, store, x)
    }
}

/// `Linear(d_text → d_f) → GELU → Linear(d_f → d_f)` over precomputed
/// sentence embeddings.
#[derive(Debug, Clone)]
pub struct TextHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl TextHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_text: usize, d_f: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_text, d_f)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_f, d_f)?,
        })
    }

    /// `emb` is `[B×d_text]`; output `[B×d_f]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Result<Var> {
        let s = g.shape(emb);
        if s.len() != 2 || s[1] != self.l1.d_in {
            return Err(Error::shape("text_forward", s, &[self.l1.d_in]));
        }
        let h = self.l1.forward(g, store, emb)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// Linear map from the fused audio feature (`d`) to the fusion space (`d_f`).
pub fn audio_to_fusion(g: &mut Graph, store: &ParamStore, proj: &Linear, f: Var) -> Result<Var> {
    let s = g.shape(f);
    if s.len() != 2 || s[1] != proj.d_in {
        return Err(Error::shape("audio_to_fusion", s, &[proj.d_in]));
    }
    proj.forward(g, store, f)
}
