//! A dataset held in memory, and its directory layout on disk:
//!
//! ```text
//! manifest.jsonl
//! audio/<dialect>.tsv  audio/<dialect>.pft
//! latents/<id>.pft
//! text/<id>.pft        translation-enhanced sentence embeddings
//! text_plain/<id>.pft  embeddings of the original sentence only (optional)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::manifest::{Manifest, Split};
use super::{pft, table};
use crate::audio::AudioFeatureTable;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub tables: BTreeMap<String, AudioFeatureTable>,
    /// Per sample, `[C×H×W]`.
    pub latents: Vec<Tensor>,
    /// Per sample, `[d_text]`.
    pub text: Vec<Tensor>,
    pub text_plain: Option<Vec<Tensor>>,
}

impl Corpus {
    /// Checks every file-level geometry against the manifest header.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let h = &self.manifest.header;
        let n = self.manifest.samples.len();
        for (dialect, &d_a) in &h.dialects {
            let t = self
                .tables
                .get(dialect)
                .ok_or_else(|| Error::Data(format!("no feature table for dialect {dialect}")))?;
            if t.d_a() != d_a {
                return Err(Error::Data(format!("{dialect} table has width {}, manifest declares {d_a}", t.d_a())));
            }
        }
        if let Some(extra) = self.tables.keys().find(|k| !h.dialects.contains_key(*k)) {
            return Err(Error::Data(format!("table for undeclared dialect {extra}")));
        }
        let plain_len = self.text_plain.as_ref().map_or(n, Vec::len);
        if self.latents.len() != n || self.text.len() != n || plain_len != n {
            return Err(Error::Data("per-sample feature counts do not match the manifest".into()));
        }
        for (s, lat) in self.manifest.samples.iter().zip(&self.latents) {
            if lat.shape() != h.latent {
                return Err(Error::Data(format!("{}: latent shape {:?}, manifest declares {:?}", s.id, lat.shape(), h.latent)));
            }
            lat.ensure_finite(&format!("latent {}", s.id))?;
        }
        let texts = self.text.iter().chain(self.text_plain.iter().flatten());
        for (i, t) in texts.enumerate() {
            if t.shape() != [h.d_text] {
                let id = &self.manifest.samples[i % n].id;
                return Err(Error::Data(format!("{id}: text embedding shape {:?}, manifest declares [{}]", t.shape(), h.d_text)));
            }
            t.ensure_finite("text embedding")?;
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.write(dir.join("manifest.jsonl"))?;
        for (name, t) in &self.tables {
            table::write_feature_table(
                dir.join("audio").join(format!("{name}.tsv")),
                dir.join("audio").join(format!("{name}.pft")),
                t,
            )?;
        }
        for (i, s) in self.manifest.samples.iter().enumerate() {
            pft::write_tensor(dir.join("latents").join(format!("{}.pft", s.id)), &self.latents[i])?;
            pft::write_tensor(dir.join("text").join(format!("{}.pft", s.id)), &self.text[i])?;
            if let Some(plain) = &self.text_plain {
                pft::write_tensor(dir.join("text_plain").join(format!("{}.pft", s.id)), &plain[i])?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir.join("manifest.jsonl"))?;
        let mut tables = BTreeMap::new();
        for (name, &d_a) in &manifest.header.dialects {
            let t = table::load_feature_table(
                name,
                dir.join("audio").join(format!("{name}.tsv")),
                dir.join("audio").join(format!("{name}.pft")),
                Some(d_a),
            )?;
            tables.insert(name.clone(), t);
        }
        let read_all = |sub: &str| -> Result<Vec<Tensor>> {
            manifest
                .samples
                .iter()
                .map(|s| pft::read_tensor(dir.join(sub).join(format!("{}.pft", s.id))))
                .collect()
        };
        let latents = read_all("latents")?;
        let text = read_all("text")?;
        let text_plain = if dir.join("text_plain").is_dir() {
            Some(read_all("text_plain")?)
        } else {
            None
        };
        let corpus = Self {
            manifest,
            tables,
            latents,
            text,
            text_plain,
        };
        corpus.validate().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(corpus)
    }
}
