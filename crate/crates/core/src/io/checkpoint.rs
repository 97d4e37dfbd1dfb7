//! Checkpoint directories:
//!
//! ```text
//! meta.json            model config, plan, stage, step, optimizer settings
//! params/<name>.pft    one file per parameter tensor
//! adam/m/<name>.pft    optimizer moments (only when optimizer state is saved)
//! adam/v/<name>.pft
//! ```
//!
//! Nothing time-dependent is written, so identical runs give identical
//! directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pft;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tensor};
use crate::train::plan::TrainPlan;

pub const FORMAT: &str = "yunlu-checkpoint-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Warmup,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ModelConfig,
    pub plan: TrainPlan,
    pub stage: Stage,
    /// Optimizer steps taken in this stage.
    pub step: u64,
    pub epoch: usize,
    /// Validation score the checkpoint was selected on, if any.
    pub val_metric: Option<f64>,
    pub adam: Option<AdamMeta>,
    /// Parameter names in store order.
    pub params: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, plan: TrainPlan, stage: Stage, params: ParamStore) -> Self {
        let names = params.iter().map(|(_, n, _)| n.to_string()).collect();
        Self {
            meta: CheckpointMeta {
                format: FORMAT.into(),
                config,
                plan,
                stage,
                step: 0,
                epoch: 0,
                val_metric: None,
                adam: None,
                params: names,
            },
            params,
            adam: None,
        }
    }

    /// Freshly initialized model for `config` and `plan.seed`.
    pub fn init(config: ModelConfig, plan: TrainPlan) -> Result<Self> {
        let (_, store) = Model::new(config.clone(), plan.seed)?;
        Ok(Self::new(config, plan, Stage::Init, store))
    }

    pub fn with_adam(mut self, adam: Adam) -> Self {
        self.meta.adam = Some(AdamMeta {
            config: adam.config,
            step: adam.step_count(),
        });
        self.adam = Some(adam);
        self
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn rebuild(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(self.meta.config.clone(), self.meta.plan.seed)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }

    /// Bitwise equality of metadata, parameters and optimizer state.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        let adam_eq = match (&self.adam, &other.adam) {
            (None, None) => true,
            (Some(a), Some(b)) => self.params.ids().all(|id| {
                a.first_moment(id).bit_eq(b.first_moment(id)) && a.second_moment(id).bit_eq(b.second_moment(id))
            }),
            _ => false,
        };
        self.meta == other.meta && self.params.bit_eq(&other.params) && adam_eq
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["params", "adam"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, name, t) in self.params.iter() {
            pft::write_tensor(dir.join("params").join(format!("{name}.pft")), t)?;
            if let Some(adam) = &self.adam {
                pft::write_tensor(dir.join("adam/m").join(format!("{name}.pft")), adam.first_moment(id))?;
                pft::write_tensor(dir.join("adam/v").join(format!("{name}.pft")), adam.second_moment(id))?;
            }
        }
        let meta = serde_json::to_string_pretty(&self.meta)? + "\n";
        let path = dir.join("meta.json");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if meta.format != FORMAT {
            return Err(Error::format(&path, format!("unsupported checkpoint format {:?}", meta.format)));
        }
        let mut params = ParamStore::new();
        for name in &meta.params {
            params.insert(name.clone(), pft::read_tensor(dir.join("params").join(format!("{name}.pft")))?)?;
        }
        let adam = match &meta.adam {
            None => None,
            Some(am) => {
                let read = |kind: &str| -> Result<Vec<Tensor>> {
                    meta.params
                        .iter()
                        .map(|n| pft::read_tensor(dir.join("adam").join(kind).join(format!("{n}.pft"))))
                        .collect()
                };
                Some(Adam::from_parts(am.config, am.step, read("m")?, read("v")?, &params)?)
            }
        };
        // The stored tensors must fit the model the metadata describes.
        let (_, mut fresh) = Model::new(meta.config.clone(), meta.plan.seed)?;
        fresh
            .load_from(&params)
            .map_err(|e| Error::format(dir, format!("parameters do not match the stored config: {e}")))?;
        Ok(Self { meta, params, adam })
    }
}
