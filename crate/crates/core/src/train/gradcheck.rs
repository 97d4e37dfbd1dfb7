//! Finite-difference check of every model parameter tensor.

use serde::Serialize;

use super::{bce_loss, ce_loss};
use crate::audio::{assemble_sequence, AudioFeatureTable, UNK};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Model, ModelConfig, ModelInput, TaskKind};
use crate::numerics::gradcheck::{finite_diff_grad, worst_rel_error, DEFAULT_STEP, TOLERANCE};
use crate::numerics::{Graph, OpKind, ParamStore, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub numel: usize,
    pub worst_rel_error: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_error <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !g.passed()).collect()
    }
}

/// Inputs sized for `config`: `lengths.len()` sentences in two dialects (one
/// character missing from the tables, to exercise `<unk>`), latents and text.
fn tiny_inputs(config: &ModelConfig, lengths: &[usize], rng: &mut Rng) -> Result<ModelInput> {
    let vocab = 6;
    let mut tokens: Vec<String> = (0..vocab).map(|i| format!("t{i}")).collect();
    tokens.push(UNK.into());
    let table = |rng: &mut Rng, name: &str| {
        AudioFeatureTable::new(name, tokens.clone(), rng.normal_tensor(vec![vocab + 1, config.d_a], 1.0))
    };
    let ta = table(rng, "a")?;
    let tb = table(rng, "b")?;
    let mut sentences: Vec<Vec<String>> = lengths
        .iter()
        .map(|&n| (0..n).map(|_| format!("t{}", rng.below(vocab))).collect())
        .collect();
    if let Some(s) = sentences.first_mut() {
        s[0] = "missing".into();
    }
    let assemble = |t: &AudioFeatureTable| {
        sentences
            .iter()
            .map(|s| assemble_sequence(s, t, config.l_max, false))
            .collect::<Result<Vec<_>>>()
    };
    let b = lengths.len();
    let mut lat_shape = vec![b];
    lat_shape.extend_from_slice(&config.latent);
    Ok(ModelInput {
        primary: assemble(&ta)?,
        secondary: Some(assemble(&tb)?),
        latents: Some(rng.normal_tensor(lat_shape, 1.0)),
        text: Some(rng.normal_tensor(vec![b, config.d_text], 1.0)),
    })
}

/// Classification loss plus the contrastive loss, so that every parameter
/// (including the contrastive scale and bias) receives a gradient.
fn total_loss(g: &mut Graph, model: &Model, store: &ParamStore, input: &ModelInput, labels: &[usize]) -> Result<crate::numerics::Var> {
    let flags = AblationFlags::default();
    let f = model.features(g, store, input, &flags)?;
    let p = model.classify(g, store, &f)?;
    let cls = match model.config.task {
        TaskKind::SingleLabel => ce_loss(g, p, labels)?,
        TaskKind::MultiLabel => {
            let m = model.config.classes;
            let mut t = Tensor::zeros(vec![labels.len(), m]);
            for (i, &y) in labels.iter().enumerate() {
                t.data_mut()[i * m + y] = 1.0;
            }
            bce_loss(g, p, &t)?
        }
    };
    let c = model.contrastive.loss(g, store, &f.present())?;
    g.add(cls, c)
}

/// Compares analytic and central-difference gradients for every parameter
/// tensor of a model built from `config`. `fault` corrupts one backward rule
/// in the analytic pass.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, lengths: &[usize], fault: Option<OpKind>) -> Result<GradcheckReport> {
    if lengths.len() < 2 {
        return Err(Error::Config("gradcheck needs a batch of at least 2".into()));
    }
    let (model, store) = Model::new(config.clone(), seed)?;
    let mut rng = Rng::new(seed.wrapping_add(1));
    let input = tiny_inputs(config, lengths, &mut rng)?;
    let labels: Vec<usize> = (0..lengths.len()).map(|_| rng.below(config.classes)).collect();

    let mut g = match fault {
        Some(k) => Graph::with_fault(k),
        None => Graph::new(),
    };
    let loss = total_loss(&mut g, &model, &store, &input, &labels)?;
    let grads = g.backward(loss)?;

    let mut groups = Vec::new();
    for (id, name, value) in store.iter() {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut probe_store = store.clone();
        let numeric = finite_diff_grad(
            |probe| {
                *probe_store.get_mut(id) = probe.clone();
                let mut g = Graph::new();
                let l = total_loss(&mut g, &model, &probe_store, &input, &labels)?;
                Ok(g.value(l).item())
            },
            value,
            DEFAULT_STEP,
        )?;
        groups.push(GroupResult {
            name: name.to_string(),
            numel: value.numel(),
            worst_rel_error: worst_rel_error(&analytic, &numeric)?,
        });
    }
    Ok(GradcheckReport { groups })
}

/// The check at its standard size: tiny dims, batch of 3 sentences of up to 4
/// characters.
pub fn default_gradcheck(fault: Option<OpKind>) -> Result<GradcheckReport> {
    model_gradcheck(&ModelConfig::tiny(), 7, &[4, 3, 4], fault)
}
