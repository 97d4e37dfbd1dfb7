//! Run configuration: built-in defaults, then the TOML file, then flags, then
//! corpus geometry for anything the file left unset.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use yunlu_core::io::corpus::Corpus;
use yunlu_core::io::synth::SynthSpec;
use yunlu_core::model::ModelConfig;
use yunlu_core::train::{DialectPair, TrainPlan};

use crate::Ablate;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub synth: SynthSpec,
}

/// Model fields that follow the corpus unless the file sets them.
const GEOMETRY: [&str; 5] = ["task", "classes", "latent", "d_text", "d_a"];

/// Parsed config file, kept as a table so that "set in the file" can be told
/// apart from "equal to the default".
#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn read(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self { table })
    }

    fn sets_model_field(&self, key: &str) -> bool {
        self.table
            .get("model")
            .and_then(toml::Value::as_table)
            .is_some_and(|m| m.contains_key(key))
    }

    /// Defaults overlaid with the file contents.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut base = toml::Table::try_from(RunConfig::default()).context("serializing defaults")?;
        merge(&mut base, &self.table);
        toml::Value::Table(base).try_into().context("invalid config file")
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Flag overrides shared by the training commands.
#[derive(Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub ablate: Vec<Ablate>,
    pub dialects: Option<DialectPair>,
    pub paper_dims: bool,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        if let Some(s) = o.seed {
            self.plan.seed = s;
        }
        if let Some(d) = &o.dialects {
            self.plan.dialects = d.clone();
        }
        for a in &o.ablate {
            a.apply(&mut self.plan.flags);
        }
        if o.paper_dims {
            self.model = self.model.clone().with_paper_dims();
        }
    }

    /// Copies corpus geometry into every model field the file left unset.
    pub fn fill_from_corpus(&mut self, file: &ConfigFile, corpus: &Corpus) {
        let h = &corpus.manifest.header;
        let m = &mut self.model;
        for key in GEOMETRY.into_iter().filter(|k| !file.sets_model_field(k)) {
            match key {
                "task" => m.task = h.task,
                "classes" => m.classes = h.classes,
                "latent" => m.latent = h.latent,
                "d_text" => m.d_text = h.d_text,
                _ => {
                    if let Some(&d_a) = h.dialects.get(&self.plan.dialects.primary) {
                        m.d_a = d_a;
                    }
                }
            }
        }
    }

    pub fn validate_training(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        if self.data.is_none() {
            bail!("no corpus given: pass --data or set `data` in the config file");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> ConfigFile {
        ConfigFile {
            table: text.parse().unwrap(),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ConfigFile::default().resolve().unwrap(), RunConfig::default());
    }

    #[test]
    fn file_values_override_only_what_they_name() {
        let cfg = file("[plan]\nepochs = 3\n[model]\nd = 16\n").resolve().unwrap();
        assert_eq!(cfg.plan.epochs, 3);
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.heads, ModelConfig::default().heads);
        assert_eq!(cfg.plan.lr, TrainPlan::default().lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(file("[plan]\nepoch = 3\n").resolve().is_err());
        assert!(file("colour = 1\n").resolve().is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut cfg = file("data = \"corpus\"\n[plan]\ndialects = \"mandarin+wu\"\n").resolve().unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            ablate: vec![Ablate::Vision],
            ..Overrides::default()
        });
        let text = cfg.to_toml().unwrap();
        let back = file(&text).resolve().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.plan.seed, 9);
        assert!(!back.plan.flags.use_vision);
    }
}
