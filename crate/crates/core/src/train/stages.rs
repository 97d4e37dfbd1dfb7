//! Contrastive warm-up, supervised training and evaluation.

use serde::{Deserialize, Serialize};

use super::data::Batcher;
use super::metrics::{decide, evaluate_grouped, EvalReport};
use super::plan::TrainPlan;
use super::{bce_loss, ce_loss};
use crate::error::{Error, Result};
use crate::io::checkpoint::{Checkpoint, Stage};
use crate::io::corpus::Corpus;
use crate::io::manifest::Split;
use crate::model::{Model, ModelConfig, TaskKind};
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Rng, Var};

const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy (single-label) or macro-F1 (multi-label) on the validation
    /// split, if there is one.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochStat>,
}

/// `loss_log` lines: `<stage>\t<step>\t<loss>`, with losses printed in
/// shortest round-trip form.
pub fn format_loss_log(stage: &str, losses: &[f64]) -> String {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{stage}\t{i}\t{l:?}\n"))
        .collect()
}

/// Independent streams for the two stages, derived from the plan seed.
fn stage_rng(seed: u64, stage: Stage) -> Rng {
    let mut root = Rng::new(seed ^ 0x0005_eed0_f7a1_u64);
    let warm = root.fork();
    let classify = root.fork();
    match stage {
        Stage::Warmup => warm,
        _ => classify,
    }
}

fn check_resume(config: &ModelConfig, plan: &TrainPlan, from: &Checkpoint) -> Result<()> {
    if &from.meta.config != config {
        return Err(Error::Config("checkpoint was built for a different model config".into()));
    }
    if from.meta.plan.seed != plan.seed {
        return Err(Error::Config(format!(
            "checkpoint seed {} differs from plan seed {}",
            from.meta.plan.seed, plan.seed
        )));
    }
    Ok(())
}

/// Stage 1: trains every feature extractor with the contrastive loss only.
/// The classifier never enters the graph, so it is left untouched. With zero
/// steps, or fewer than two enabled modalities, `init` is returned as is.
pub fn warmup_stage(corpus: &Corpus, config: &ModelConfig, plan: &TrainPlan, init: &Checkpoint) -> Result<StageOutput> {
    plan.validate()?;
    check_resume(config, plan, init)?;
    let batcher = Batcher::new(corpus, config, plan)?;
    let flags = batcher.flags();
    if plan.warmup_steps == 0 || flags.enabled_modalities() < 2 {
        return Ok(StageOutput {
            checkpoint: init.clone(),
            losses: Vec::new(),
            epochs: Vec::new(),
        });
    }
    if plan.warmup_batch < 2 {
        return Err(Error::Config(format!(
            "warm-up batch must hold at least 2 samples, got {}",
            plan.warmup_batch
        )));
    }
    let train = corpus.split_indices(Split::Train);
    if train.len() < 2 {
        return Err(Error::Data("warm-up needs at least 2 training samples".into()));
    }
    let (model, mut store) = init.rebuild()?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: plan.warmup_lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut rng = stage_rng(plan.seed, Stage::Warmup);
    let mut order = train.clone();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(plan.warmup_steps);
    let batch = plan.warmup_batch.min(train.len());
    for _ in 0..plan.warmup_steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let input = batcher.input(idx)?;
        let mut g = Graph::new();
        let f = model.features(&mut g, &store, &input, &flags)?;
        let loss = model.contrastive.loss(&mut g, &store, &f.present())?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        adam.step(&mut store, &grads.params())?;
    }
    let mut ckpt = Checkpoint::new(config.clone(), plan.clone(), Stage::Warmup, store).with_adam(adam);
    ckpt.meta.step = plan.warmup_steps as u64;
    Ok(StageOutput {
        checkpoint: ckpt,
        losses,
        epochs: Vec::new(),
    })
}

fn classification_loss(g: &mut Graph, batcher: &Batcher, probs: Var, idx: &[usize]) -> Result<Var> {
    match batcher.task() {
        TaskKind::SingleLabel => ce_loss(g, probs, &batcher.labels(idx)?),
        TaskKind::MultiLabel => bce_loss(g, probs, &batcher.gold_matrix(idx)?),
    }
}

/// Stage 2: joint training of every module with cross-entropy (single-label)
/// or binary cross-entropy (multi-label). The returned checkpoint holds the
/// parameters of the best validation epoch (ties keep the earlier epoch); with
/// no validation split it holds the final parameters.
pub fn train_stage2(corpus: &Corpus, config: &ModelConfig, plan: &TrainPlan, warm: &Checkpoint) -> Result<StageOutput> {
    plan.validate()?;
    check_resume(config, plan, warm)?;
    let batcher = Batcher::new(corpus, config, plan)?;
    let flags = batcher.flags();
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let val = corpus.split_indices(Split::Val);
    let (model, mut store) = warm.rebuild()?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: plan.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let mut rng = stage_rng(plan.seed, Stage::Classify);
    let mut order = train.clone();
    let mut losses = Vec::new();
    let mut epochs = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, ParamStore, Adam)> = None;
    let use_aux = plan.aux_contrastive_weight > 0.0 && flags.enabled_modalities() >= 2;

    for epoch in 0..plan.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(plan.batch_size) {
            let input = batcher.input(idx)?;
            let mut g = Graph::new();
            let f = model.features(&mut g, &store, &input, &flags)?;
            let probs = model.classify(&mut g, &store, &f)?;
            let mut loss = classification_loss(&mut g, &batcher, probs, idx)?;
            if use_aux && idx.len() >= 2 {
                let c = model.contrastive.loss(&mut g, &store, &f.present())?;
                let c = g.scale(c, plan.aux_contrastive_weight)?;
                loss = g.add(loss, c)?;
            }
            let l = g.value(loss).item();
            losses.push(l);
            sum += l;
            steps += 1;
            let grads = g.backward(loss)?;
            adam.step(&mut store, &grads.params())?;
        }
        let val_metric = if val.is_empty() {
            None
        } else {
            let report = evaluate_indices(&model, &store, &batcher, &val)?;
            Some(selection_metric(&report, config.task))
        };
        epochs.push(EpochStat {
            epoch,
            train_loss: sum / steps.max(1) as f64,
            val_metric,
        });
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(b, ..)| m > *b) {
                best = Some((m, epoch, store.clone(), adam.clone()));
            }
        }
    }

    let (store, adam, epoch, val_metric) = match best {
        Some((m, e, s, a)) => (s, a, e, Some(m)),
        None => (store, adam, plan.epochs.saturating_sub(1), None),
    };
    let step = adam.step_count();
    let mut ckpt = Checkpoint::new(config.clone(), plan.clone(), Stage::Classify, store).with_adam(adam);
    ckpt.meta.step = step;
    ckpt.meta.epoch = epoch;
    ckpt.meta.val_metric = val_metric;
    Ok(StageOutput {
        checkpoint: ckpt,
        losses,
        epochs,
    })
}

/// The checkpoint-selection score: accuracy for single-label tasks,
/// macro-F1 for multi-label tasks.
pub fn selection_metric(report: &EvalReport, task: TaskKind) -> f64 {
    match task {
        TaskKind::SingleLabel => report.accuracy,
        TaskKind::MultiLabel => report.macro_f1,
    }
}

/// Predicted indicator rows for the given samples.
pub fn predict(model: &Model, store: &ParamStore, batcher: &Batcher, idx: &[usize]) -> Result<Vec<Vec<bool>>> {
    let flags = batcher.flags();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let input = batcher.input(chunk)?;
        let mut g = Graph::new();
        let f = model.features(&mut g, store, &input, &flags)?;
        let p = model.classify(&mut g, store, &f)?;
        out.extend(decide(g.value(p), model.config.task)?);
    }
    Ok(out)
}

/// Metrics over the given samples, with per-region accuracy.
pub fn evaluate_indices(model: &Model, store: &ParamStore, batcher: &Batcher, idx: &[usize]) -> Result<EvalReport> {
    let pred = predict(model, store, batcher, idx)?;
    evaluate_grouped(&pred, &batcher.gold(idx), &batcher.groups(idx))
}

/// Evaluates a checkpoint on one split of a corpus, using the checkpoint's own
/// config and plan flags.
pub fn evaluate_split(corpus: &Corpus, ckpt: &Checkpoint, split: Split) -> Result<EvalReport> {
    let (model, store) = ckpt.rebuild()?;
    let batcher = Batcher::new(corpus, &ckpt.meta.config, &ckpt.meta.plan)?;
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("corpus has no {split:?} samples")));
    }
    evaluate_indices(&model, &store, &batcher, &idx)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub warmup: StageOutput,
    pub classify: StageOutput,
    pub val: Option<EvalReport>,
}

/// Initialization, warm-up (if the plan asks for it), supervised training
/// and validation scoring.
pub fn run_experiment(corpus: &Corpus, config: &ModelConfig, plan: &TrainPlan) -> Result<RunOutcome> {
    let init = Checkpoint::init(config.clone(), plan.clone())?;
    let warmup = warmup_stage(corpus, config, plan, &init)?;
    let classify = train_stage2(corpus, config, plan, &warmup.checkpoint)?;
    let val = if corpus.split_indices(Split::Val).is_empty() {
        None
    } else {
        Some(evaluate_split(corpus, &classify.checkpoint, Split::Val)?)
    };
    Ok(RunOutcome { warmup, classify, val })
}
