//! Line-delimited JSON dataset manifest: one header line, then one line per
//! sample.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub task: TaskKind,
    pub classes: usize,
    /// Acoustic feature width per dialect.
    pub dialects: BTreeMap<String, usize>,
    /// `[C, H, W]` of every latent file.
    pub latent: [usize; 3],
    pub d_text: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub chars: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub split: Split,
}

impl SampleRecord {
    /// Gold indicator row over `m` classes.
    pub fn gold_row(&self, m: usize) -> Vec<bool> {
        let mut row = vec![false; m];
        if let Some(y) = self.label {
            row[y] = true;
        }
        for &y in self.labels.iter().flatten() {
            row[y] = true;
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Sample(SampleRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.classes < 2 {
            return Err(Error::Data(format!("manifest declares {} classes", h.classes)));
        }
        if h.dialects.is_empty() {
            return Err(Error::Data("manifest declares no dialects".into()));
        }
        if h.dialects.values().any(|&d| d == 0) || h.latent.contains(&0) || h.d_text == 0 {
            return Err(Error::Data("manifest declares a zero-sized geometry".into()));
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            if s.chars.is_empty() {
                return Err(Error::Data(format!("{}: empty character list", s.id)));
            }
            match (h.task, &s.label, &s.labels) {
                (TaskKind::SingleLabel, Some(y), None) => {
                    if *y >= h.classes {
                        return Err(Error::Data(format!("{}: label {y} out of range", s.id)));
                    }
                }
                (TaskKind::MultiLabel, None, Some(ys)) => {
                    if ys.iter().any(|&y| y >= h.classes) {
                        return Err(Error::Data(format!("{}: label out of range", s.id)));
                    }
                    let distinct: HashSet<_> = ys.iter().collect();
                    if distinct.len() != ys.len() {
                        return Err(Error::Data(format!("{}: repeated label", s.id)));
                    }
                }
                (TaskKind::SingleLabel, ..) => {
                    return Err(Error::Data(format!("{}: single-label task needs exactly a `label` field", s.id)));
                }
                (TaskKind::MultiLabel, ..) => {
                    return Err(Error::Data(format!("{}: multi-label task needs exactly a `labels` field", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "{}", serde_json::to_string(&Line::Header(self.header.clone()))?).expect("string write");
        for s in &self.samples {
            writeln!(out, "{}", serde_json::to_string(&Line::Sample(s.clone()))?).expect("string write");
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header = None;
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() && samples.is_empty() => header = Some(h),
                Line::Header(_) => return Err(Error::format(path, format!("line {}: unexpected header", i + 1))),
                Line::Sample(_) if header.is_none() => {
                    return Err(Error::format(path, "first record must be the header"));
                }
                Line::Sample(s) => samples.push(s),
            }
        }
        let header = header.ok_or_else(|| Error::format(path, "missing header record"))?;
        let m = Self { header, samples };
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
