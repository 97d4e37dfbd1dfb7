//! Per-character acoustic sequences and the shared transformer encoder.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::layers::{EncoderLayer, LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const UNK: &str = "<unk>";

/// Character token → acoustic feature vector for one dialect.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureTable {
    dialect: String,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor,
}

impl AudioFeatureTable {
    /// `tokens[i]` names row `i` of `matrix` (`[V×d_a]`).
    pub fn new(dialect: impl Into<String>, tokens: Vec<String>, matrix: Tensor) -> Result<Self> {
        let dialect = dialect.into();
        if matrix.rank() != 2 || matrix.shape()[0] != tokens.len() {
            return Err(Error::Data(format!(
                "{dialect} table: {} tokens for a matrix of shape {:?}",
                tokens.len(),
                matrix.shape()
            )));
        }
        matrix.ensure_finite(&format!("{dialect} table"))?;
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("{dialect} table: duplicate token {t:?}")));
            }
        }
        if !index.contains_key(UNK) {
            return Err(Error::Data(format!("{dialect} table: missing {UNK} row")));
        }
        Ok(Self {
            dialect,
            tokens,
            index,
            matrix,
        })
    }

    pub fn dialect(&self) -> &str {
        &self.dialect
    }

    pub fn d_a(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.matrix.row(i))
    }

    pub fn unk_row(&self) -> &[f64] {
        self.matrix.row(self.index[UNK])
    }
}

/// Looked-up acoustic rows of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    /// `[n×d_a]`, row `i` copied verbatim from the table.
    pub features: Tensor,
    /// Per-token flag: the token was missing and the `<unk>` row was used.
    pub unk: Vec<bool>,
    pub unk_count: usize,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.unk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unk.is_empty()
    }
}

/// Maps each character to its table row, falling back to `<unk>`. With
/// `strict`, an unknown character is an error instead.
pub fn assemble_sequence(chars: &[String], table: &AudioFeatureTable, l_max: usize, strict: bool) -> Result<AssembledSequence> {
    if chars.is_empty() {
        return Err(Error::Data("empty sentence".into()));
    }
    if chars.len() > l_max {
        return Err(Error::Data(format!("sentence of {} characters exceeds L_max {l_max}", chars.len())));
    }
    let d_a = table.d_a();
    let mut data = Vec::with_capacity(chars.len() * d_a);
    let mut unk = Vec::with_capacity(chars.len());
    for c in chars {
        match table.get(c) {
            Some(row) => {
                data.extend_from_slice(row);
                unk.push(false);
            }
            None if strict => {
                return Err(Error::Data(format!("character {c:?} not in {} table", table.dialect())));
            }
            None => {
                data.extend_from_slice(table.unk_row());
                unk.push(true);
            }
        }
    }
    let unk_count = unk.iter().filter(|u| **u).count();
    Ok(AssembledSequence {
        features: Tensor::new(vec![chars.len(), d_a], data)?,
        unk,
        unk_count,
    })
}

/// Encoder output for a batch of `batch` sentences padded to `t` rows each
/// (class position first).
#[derive(Debug, Clone)]
pub struct EncodedAudio {
    /// `[B·T×d]`
    pub tokens: Var,
    /// `[B×d]`, row `b` is row `b·T` of `tokens`.
    pub pooled: Var,
    pub batch: usize,
    pub t: usize,
    /// `[B·T]`, true for the class position and real tokens.
    pub mask: Vec<bool>,
}

/// Input projection, position/class/unknown embeddings and the encoder stack.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub input: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    pub unk: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub d: usize,
    pub d_a: usize,
    pub l_max: usize,
}

/// Row layout of a padded batch: class slot, tokens, then padding.
struct Layout {
    t: usize,
    mask: Vec<bool>,
}

impl Layout {
    fn new(seqs: &[AssembledSequence]) -> Self {
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut mask = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            mask.extend((0..t).map(|i| i <= s.len()));
        }
        Self { t, mask }
    }
}

impl AudioEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_a: usize,
        d: usize,
        heads: usize,
        layers: usize,
        l_max: usize,
    ) -> Result<Self> {
        if l_max == 0 {
            return Err(Error::Config("L_max must be positive".into()));
        }
        let input = Linear::new(store, rng, &format!("{name}.input"), d_a, d)?;
        let pos = store.insert(format!("{name}.pos"), rng.normal_tensor(vec![l_max + 1, d], 0.1))?;
        let cls = store.insert(format!("{name}.cls"), rng.normal_tensor(vec![1, d], 0.1))?;
        let unk = store.insert(format!("{name}.unk"), Tensor::zeros(vec![1, d]))?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), d, heads))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d)?;
        Ok(Self {
            input,
            pos,
            cls,
            unk,
            layers,
            final_norm,
            d,
            d_a,
            l_max,
        })
    }

    /// Builds the `[B·T×d]` encoder input: row 0 of each sentence is
    /// `a_cls + p₀`, row `i` is `project(a_feat[i−1]) + p_i` (plus the learned
    /// unknown-character embedding for `<unk>` hits), padding rows are zero.
    pub fn add_pos_class(&self, g: &mut Graph, store: &ParamStore, seqs: &[AssembledSequence]) -> Result<(Var, Vec<bool>, usize)> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Data("empty sentence".into()));
            }
            if s.len() > self.l_max {
                return Err(Error::Data(format!("sentence of {} characters exceeds L_max {}", s.len(), self.l_max)));
            }
            if s.features.shape() != [s.len(), self.d_a] {
                return Err(Error::shape("add_pos_class", s.features.shape(), &[s.len(), self.d_a]));
            }
        }
        let layout = Layout::new(seqs);
        let t = layout.t;
        let n_tok: usize = seqs.iter().map(|s| s.len()).sum();

        let mut feats = Vec::with_capacity(n_tok * self.d_a);
        for s in seqs {
            feats.extend_from_slice(s.features.data());
        }
        let feats = g.constant(Tensor::new(vec![n_tok, self.d_a], feats)?);
        let projected = self.input.forward(g, store, feats)?;

        // Source rows: [cls, tokens..., zero]; gather them into the padded layout.
        let cls = g.param(store, self.cls);
        let zero = g.constant(Tensor::zeros(vec![1, self.d]));
        let src = g.concat_rows(&[cls, projected, zero])?;
        let zero_idx = n_tok + 1;
        let mut content_idx = Vec::with_capacity(seqs.len() * t);
        let mut pos_idx = Vec::with_capacity(seqs.len() * t);
        let mut unk_idx = Vec::with_capacity(seqs.len() * t);
        let mut next = 1;
        for s in seqs {
            for i in 0..t {
                if i == 0 {
                    content_idx.push(0);
                    unk_idx.push(0);
                } else if i <= s.len() {
                    content_idx.push(next);
                    unk_idx.push(usize::from(s.unk[i - 1]));
                    next += 1;
                } else {
                    content_idx.push(zero_idx);
                    unk_idx.push(0);
                }
                pos_idx.push(i);
            }
        }
        let content = g.gather_rows(src, &content_idx)?;
        let pos = g.param(store, self.pos);
        let pos = g.gather_rows(pos, &pos_idx)?;
        let mut x = g.add(content, pos)?;
        if unk_idx.contains(&1) {
            let unk = g.param(store, self.unk);
            let zero = g.constant(Tensor::zeros(vec![1, self.d]));
            let table = g.concat_rows(&[zero, unk])?;
            let u = g.gather_rows(table, &unk_idx)?;
            x = g.add(x, u)?;
        }
        Ok((x, layout.mask, t))
    }

    /// Runs the encoder stack over an `add_pos_class` output.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Vec<bool>, t: usize) -> Result<EncodedAudio> {
        let rows = g.shape(x)[0];
        if t == 0 || !rows.is_multiple_of(t) || mask.len() != rows {
            return Err(Error::shape("encode_audio", g.shape(x), &[mask.len(), t]));
        }
        let batch = rows / t;
        for b in 0..batch {
            if !mask[b * t] {
                return Err(Error::Data(format!("sentence {b}: class position is masked")));
            }
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, batch, t, Some(&mask))?;
        }
        let tokens = self.final_norm.forward(g, store, h)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let pooled = g.gather_rows(tokens, &cls_rows)?;
        Ok(EncodedAudio {
            tokens,
            pooled,
            batch,
            t,
            mask,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[AssembledSequence]) -> Result<EncodedAudio> {
        let (x, mask, t) = self.add_pos_class(g, store, seqs)?;
        self.encode(g, store, x, mask, t)
    }
}
