//! Turns corpus samples into model batches.

use crate::audio::{assemble_sequence, AssembledSequence};
use crate::error::{Error, Result};
use crate::io::corpus::Corpus;
use crate::model::{AblationFlags, ModelConfig, ModelInput, TaskKind};
use crate::numerics::Tensor;
use crate::train::plan::TrainPlan;

/// Checks that a model shape can consume a corpus.
pub fn check_compatible(config: &ModelConfig, corpus: &Corpus, plan: &TrainPlan) -> Result<()> {
    let h = &corpus.manifest.header;
    let mismatch = |what: &str, model: String, data: String| {
        Err(Error::Config(format!("{what}: model expects {model}, corpus has {data}")))
    };
    if config.task != h.task {
        return mismatch("task kind", format!("{:?}", config.task), format!("{:?}", h.task));
    }
    if config.classes != h.classes {
        return mismatch("class count", config.classes.to_string(), h.classes.to_string());
    }
    if config.latent != h.latent {
        return mismatch("latent geometry", format!("{:?}", config.latent), format!("{:?}", h.latent));
    }
    if config.d_text != h.d_text {
        return mismatch("text width", config.d_text.to_string(), h.d_text.to_string());
    }
    let flags = plan.effective_flags();
    if flags.use_audio {
        let mut names = vec![&plan.dialects.primary];
        if flags.use_dialect {
            names.extend(plan.dialects.secondary.as_ref());
        }
        for name in names {
            match h.dialects.get(name) {
                None => return Err(Error::Config(format!("corpus has no {name} feature table"))),
                Some(&d_a) if d_a != config.d_a => {
                    return mismatch(&format!("{name} feature width"), config.d_a.to_string(), d_a.to_string())
                }
                Some(_) => {}
            }
        }
    }
    if flags.use_text && !flags.use_translation_channel && corpus.text_plain.is_none() {
        return Err(Error::Config("plain-text channel requested but the corpus has no text_plain embeddings".into()));
    }
    Ok(())
}

/// Pre-assembled per-sample inputs for one plan.
#[derive(Debug)]
pub struct Batcher<'a> {
    corpus: &'a Corpus,
    flags: AblationFlags,
    task: TaskKind,
    classes: usize,
    primary: Vec<AssembledSequence>,
    secondary: Option<Vec<AssembledSequence>>,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a Corpus, config: &ModelConfig, plan: &TrainPlan) -> Result<Self> {
        check_compatible(config, corpus, plan)?;
        let flags = plan.effective_flags();
        let assemble = |dialect: &str| -> Result<Vec<AssembledSequence>> {
            let table = &corpus.tables[dialect];
            corpus
                .manifest
                .samples
                .iter()
                .map(|s| {
                    assemble_sequence(&s.chars, table, config.l_max, plan.strict_unk)
                        .map_err(|e| Error::Data(format!("{}: {e}", s.id)))
                })
                .collect()
        };
        let primary = if flags.use_audio {
            assemble(&plan.dialects.primary)?
        } else {
            Vec::new()
        };
        let secondary = match (&plan.dialects.secondary, flags.use_dialect) {
            (Some(name), true) => Some(assemble(name)?),
            _ => None,
        };
        Ok(Self {
            corpus,
            flags,
            task: config.task,
            classes: config.classes,
            primary,
            secondary,
        })
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn corpus(&self) -> &Corpus {
        self.corpus
    }

    /// Inputs for the given samples; only enabled branches are filled.
    pub fn input(&self, idx: &[usize]) -> Result<ModelInput> {
        let stack = |rows: &[Tensor], shape: &[usize]| -> Result<Tensor> {
            let mut data = Vec::with_capacity(idx.len() * shape.iter().product::<usize>());
            for &i in idx {
                data.extend_from_slice(rows[i].data());
            }
            let mut full = vec![idx.len()];
            full.extend_from_slice(shape);
            Tensor::new(full, data)
        };
        let h = &self.corpus.manifest.header;
        let text = if self.flags.use_text {
            let src = if self.flags.use_translation_channel {
                &self.corpus.text
            } else {
                self.corpus.text_plain.as_ref().expect("checked in new")
            };
            Some(stack(src, &[h.d_text])?)
        } else {
            None
        };
        let latents = if self.flags.use_vision {
            Some(stack(&self.corpus.latents, &h.latent)?)
        } else {
            None
        };
        let pick = |seqs: &[AssembledSequence]| idx.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>();
        Ok(ModelInput {
            primary: if self.flags.use_audio { pick(&self.primary) } else { Vec::new() },
            secondary: self.secondary.as_deref().map(pick),
            latents,
            text,
        })
    }

    /// Single-label class indices, or an error for multi-label data.
    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                let s = &self.corpus.manifest.samples[i];
                s.label
                    .ok_or_else(|| Error::Data(format!("{}: single-label task but sample has no label", s.id)))
            })
            .collect()
    }

    /// Gold indicator rows.
    pub fn gold(&self, idx: &[usize]) -> Vec<Vec<bool>> {
        idx.iter()
            .map(|&i| self.corpus.manifest.samples[i].gold_row(self.classes))
            .collect()
    }

    /// Gold rows as a 0/1 matrix for BCE.
    pub fn gold_matrix(&self, idx: &[usize]) -> Result<Tensor> {
        let data = self.gold(idx).into_iter().flatten().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![idx.len(), self.classes], data)
    }

    pub fn groups(&self, idx: &[usize]) -> Vec<Option<String>> {
        idx.iter()
            .map(|&i| self.corpus.manifest.samples[i].region.clone())
            .collect()
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }
}
