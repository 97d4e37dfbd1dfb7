//! Pairwise cosine-similarity contrastive loss across modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveVariant {
    /// Every `(i, j)` similarity is an independent match/no-match decision.
    #[default]
    PairwiseBinary,
    /// Cross-entropy over each row and each column of the similarity matrix.
    RowSoftmax,
}

/// Learnable similarity scale `s = exp(log_scale)` and bias `b`.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    pub log_scale: ParamId,
    pub bias: ParamId,
    pub variant: ContrastiveVariant,
}

impl ContrastiveHead {
    /// `s = 1`, `b = 0` at initialization.
    pub fn new(store: &mut ParamStore, name: &str, variant: ContrastiveVariant) -> Result<Self> {
        Ok(Self {
            log_scale: store.insert(format!("{name}.log_scale"), Tensor::vector(vec![0.0]))?,
            bias: store.insert(format!("{name}.bias"), Tensor::vector(vec![0.0]))?,
            variant,
        })
    }

    /// Loss for one modality pair, both `[B×d_f]`.
    pub fn pair_loss(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
        if sx.len() != 2 || sx != sy {
            return Err(Error::shape("contrastive_loss", &sx, &sy));
        }
        let b = sx[0];
        if b < 2 {
            return Err(Error::Config(format!("contrastive loss needs a batch of at least 2, got {b}")));
        }
        let xn = g.l2_normalize_rows(x)?;
        let yn = g.l2_normalize_rows(y)?;
        let ynt = g.transpose(yn)?;
        let sim = g.matmul(xn, ynt)?;
        let log_s = g.param(store, self.log_scale);
        let s = g.exp(log_s)?;
        let bias = g.param(store, self.bias);
        let z = g.mul_scalar(sim, s)?;
        let z = g.add_scalar(z, bias)?;
        match self.variant {
            ContrastiveVariant::PairwiseBinary => g.bce_with_logits(z, &Tensor::eye(b)),
            ContrastiveVariant::RowSoftmax => {
                let diag: Vec<usize> = (0..b).collect();
                let rows = g.softmax(z, None)?;
                let rows = g.nll_clamped(rows, &diag)?;
                let zt = g.transpose(z)?;
                let cols = g.softmax(zt, None)?;
                let cols = g.nll_clamped(cols, &diag)?;
                let both = g.add(rows, cols)?;
                g.scale(both, 0.5)
            }
        }
    }

    /// Sum of [`pair_loss`](Self::pair_loss) over every unordered pair of the
    /// given modality feature batches.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, feats: &[Var]) -> Result<Var> {
        if feats.len() < 2 {
            return Err(Error::Config("contrastive loss needs at least two modalities".into()));
        }
        let mut total: Option<Var> = None;
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let l = self.pair_loss(g, store, feats[i], feats[j])?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
        }
        Ok(total.expect("at least one pair"))
    }
}
