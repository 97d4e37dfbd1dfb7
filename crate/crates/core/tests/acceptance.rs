//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=2,5` restricts the run.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use yunlu_core::audio::{assemble_sequence, AudioFeatureTable, UNK};
use yunlu_core::fusion::{DialectFusion, ScaleMode};
use yunlu_core::io::checkpoint::Checkpoint;
use yunlu_core::io::corpus::Corpus;
use yunlu_core::io::pft;
use yunlu_core::io::synth::{synth_generate, SynthSpec};
use yunlu_core::model::{AblationFlags, ModelConfig, TaskKind};
use yunlu_core::numerics::gradcheck::TOLERANCE;
use yunlu_core::train::contrastive::{ContrastiveHead, ContrastiveVariant};
use yunlu_core::train::gradcheck::default_gradcheck;
use yunlu_core::train::metrics::{accuracy, confusion, decide, macro_f1, micro_f1};
use yunlu_core::train::stages::format_loss_log;
use yunlu_core::train::{bce_loss, ce_loss, run_experiment, DialectPair, TrainPlan};
use yunlu_core::{AudioEncoder, Graph, ParamStore, Rng, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn test_dims() -> ModelConfig {
    ModelConfig {
        d: 32,
        heads: 4,
        layers: 2,
        d_a: 24,
        l_max: 16,
        d_f: 32,
        latent: [4, 8, 8],
        cnn_channels: [8, 16, 32],
        d_text: 32,
        classes: 5,
        ..ModelConfig::default()
    }
}

fn main_corpus() -> Corpus {
    let spec = SynthSpec {
        train: 2000,
        val: 400,
        test: 0,
        classes: 5,
        audio_signal: 0.9,
        visual_signal: 0.5,
        text_signal: 0.4,
        ..SynthSpec::default()
    };
    synth_generate(&spec).expect("corpus")
}

fn val_accuracy(corpus: &Corpus, plan: &TrainPlan) -> Result<f64, String> {
    let out = run_experiment(corpus, &test_dims(), plan).map_err(|e| e.to_string())?;
    Ok(out.val.expect("val split").accuracy)
}

fn c1_gradcheck() -> Outcome {
    let t = Instant::now();
    let r = default_gradcheck(None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = r.groups.iter().map(|g| g.worst_rel_error).fold(0.0, f64::max);
    let required = [
        "audio.input", "audio.pos", "audio.cls", "audio.layer0", "audio.final_norm", "fusion.q", "fusion.k",
        "fusion.v", "fusion.out", "visual.conv", "visual.proj", "text.l1", "text.l2", "audio_proj", "classifier",
        "contrastive.log_scale", "contrastive.bias",
    ];
    let missing: Vec<_> = required
        .iter()
        .filter(|p| !r.groups.iter().any(|g| g.name.starts_with(*p)))
        .collect();
    let failing: Vec<_> = r.failures().iter().map(|g| g.name.clone()).collect();
    check(
        r.passed() && missing.is_empty() && elapsed <= Duration::from_secs(60),
        format!(
            "{} tensors, worst rel err {worst:.2e} (tol {TOLERANCE:e}), {:.1}s, missing {missing:?}, failing {failing:?}",
            r.groups.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_contrastive_closed_form() -> Outcome {
    let mut store = ParamStore::new();
    let head = ContrastiveHead::new(&mut store, "c", ContrastiveVariant::PairwiseBinary).map_err(|e| e.to_string())?;
    let f = Tensor::from_rows(&[vec![0.7, -0.2, 1.3, 0.4], vec![0.7, -0.2, 1.3, 0.4]]).unwrap();
    let mut g = Graph::new();
    let feats: Vec<_> = (0..3).map(|_| g.constant(f.clone())).collect();
    let pair = head.pair_loss(&mut g, &store, feats[0], feats[1]).map_err(|e| e.to_string())?;
    let total = head.loss(&mut g, &store, &feats).map_err(|e| e.to_string())?;
    // Every cosine is 1: two matched pairs and two unmatched pairs at logit 1.
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    let oracle_pair = (2.0 * -sig.ln() + 2.0 * -(1.0 - sig).ln()) / 4.0;
    let (p, t) = (g.value(pair).item(), g.value(total).item());
    check(
        (p - 0.813261687).abs() <= 1e-9
            && (t - 2.439785062).abs() <= 1e-9
            && (p - oracle_pair).abs() <= 1e-12
            && (t - 3.0 * oracle_pair).abs() <= 1e-12,
        format!("pair {p:.12}, total {t:.12}"),
    )
}

// The decimal literals are the published expected values.
#[allow(clippy::approx_constant)]
fn c3_closed_form_losses() -> Outcome {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(vec![4, 5]));
    let p = g.softmax(z, None).map_err(|e| e.to_string())?;
    let ce = ce_loss(&mut g, p, &[0, 3, 4, 1]).map_err(|e| e.to_string())?;
    let half = g.constant(Tensor::full(vec![3, 4], 0.5));
    let mut targets = Tensor::zeros(vec![3, 4]);
    targets.data_mut()[1] = 1.0;
    targets.data_mut()[7] = 1.0;
    let bce = bce_loss(&mut g, half, &targets).map_err(|e| e.to_string())?;
    let (ce, bce) = (g.value(ce).item(), g.value(bce).item());
    check(
        (ce - 5f64.ln()).abs() <= 1e-12
            && (ce - 1.609437912).abs() <= 1e-9
            && (bce - 2f64.ln()).abs() <= 1e-12
            && (bce - 0.693147181).abs() <= 1e-9,
        format!("CE {ce:.12} (ln 5), BCE {bce:.12} (ln 2)"),
    )
}

fn c4_degenerate_attention() -> Outcome {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let d = 8;
    let fusion = DialectFusion::new(&mut store, &mut rng, "fusion", d, ScaleMode::DivideByD).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let q = g.constant(rng.normal_tensor(vec![3, d], 1.0));
    let k = g.constant(rng.normal_tensor(vec![3, d], 1.0));
    let v_t = rng.normal_tensor(vec![3, d], 1.0);
    let v = g.constant(v_t.clone());
    let out = fusion
        .cross_attend(&mut g, q, k, v, 3, 1, &[true; 3])
        .map_err(|e| e.to_string())?;
    let length_one = g.value(out).bit_eq(&v_t);

    let encoder = AudioEncoder::new(&mut store, &mut rng, "audio", 6, d, 2, 2, 8).map_err(|e| e.to_string())?;
    let tokens: Vec<String> = (0..5).map(|i| format!("t{i}")).chain([UNK.to_string()]).collect();
    let table = AudioFeatureTable::new("m", tokens, rng.normal_tensor(vec![6, 6], 1.0)).unwrap();
    let seqs: Vec<_> = [vec!["t1", "t2", "t3"], vec!["t4", "t0"]]
        .iter()
        .map(|s| {
            let s: Vec<String> = s.iter().map(|c| c.to_string()).collect();
            assemble_sequence(&s, &table, 8, true).unwrap()
        })
        .collect();
    let mut g = Graph::new();
    let a = encoder.forward(&mut g, &store, &seqs).map_err(|e| e.to_string())?;
    let b = encoder.forward(&mut g, &store, &seqs).map_err(|e| e.to_string())?;
    let (att_a, att_b) = fusion.attend_both(&mut g, &store, &a, &b).map_err(|e| e.to_string())?;
    let identical = g.value(att_a).bit_eq(g.value(att_b));
    check(
        length_one && identical,
        format!("length-1 output equals V: {length_one}; identical dialects give identical attention: {identical}"),
    )
}

/// Counts TP/FP/FN per class by enumerating every (sample, class) cell.
fn oracle_metrics(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> (f64, f64, f64) {
    let m = gold[0].len();
    let exact = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64;
    let mut per_class = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    for k in 0..m {
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for i in 0..pred.len() {
            if pred[i][k] && gold[i][k] {
                tp += 1;
            }
            if pred[i][k] && !gold[i][k] {
                fp += 1;
            }
            if !pred[i][k] && gold[i][k] {
                fnn += 1;
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fnn;
        let denom = 2 * tp + fp + fnn;
        per_class.push(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 });
    }
    let denom = 2 * tp_all + fp_all + fn_all;
    let micro = if denom == 0 { 0.0 } else { (2 * tp_all) as f64 / denom as f64 };
    let macro_ = per_class.iter().sum::<f64>() / m as f64;
    (exact, micro, macro_)
}

fn c5_metric_oracle() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    let mut ties = 0;
    for case in 0..200 {
        let b = 1 + rng.below(20);
        let m = 2 + rng.below(11);
        let task = if case % 2 == 0 { TaskKind::SingleLabel } else { TaskKind::MultiLabel };
        // Coarse probabilities so that ties occur.
        let mut probs = Tensor::zeros(vec![b, m]);
        for v in probs.data_mut() {
            *v = rng.below(5) as f64 / 4.0;
        }
        let gold: Vec<Vec<bool>> = (0..b)
            .map(|_| match task {
                TaskKind::SingleLabel => {
                    let y = rng.below(m);
                    (0..m).map(|j| j == y).collect()
                }
                TaskKind::MultiLabel => (0..m).map(|_| rng.bernoulli(0.3)).collect(),
            })
            .collect();
        let pred = decide(&probs, task).unwrap();
        // Independent decision rule: first index reaching the row maximum, or p >= 0.5.
        let oracle_pred: Vec<Vec<bool>> = (0..b)
            .map(|i| {
                let row = probs.row(i);
                match task {
                    TaskKind::SingleLabel => {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if row.iter().filter(|&&v| v == max).count() > 1 {
                            ties += 1;
                        }
                        let k = row.iter().position(|&v| v == max).unwrap();
                        (0..m).map(|j| j == k).collect()
                    }
                    TaskKind::MultiLabel => row.iter().map(|&p| p >= 0.5).collect(),
                }
            })
            .collect();
        let counts = confusion(&pred, &gold).unwrap();
        let got = (accuracy(&pred, &gold).unwrap(), micro_f1(&counts), macro_f1(&counts));
        if pred != oracle_pred || got != oracle_metrics(&oracle_pred, &gold) {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && ties > 0,
        format!("200 instances, {mismatches} mismatches, {ties} tied rows exercised"),
    )
}

fn c6_learnability(corpus: &Corpus) -> Outcome {
    let t = Instant::now();
    let plan = TrainPlan {
        seed: 0,
        epochs: 30,
        warmup_steps: 20,
        ..TrainPlan::default()
    };
    let out = run_experiment(corpus, &test_dims(), &plan).map_err(|e| e.to_string())?;
    let acc = out.val.expect("val").accuracy;
    let secs = t.elapsed().as_secs_f64();
    check(
        acc >= 0.95 && secs <= 600.0,
        format!(
            "best val accuracy {acc:.4} at epoch {} of 30, {secs:.0}s",
            out.classify.checkpoint.meta.epoch + 1
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_ablation(corpus: &Corpus) -> Outcome {
    let variants = [
        ("full", AblationFlags::default()),
        ("no-vision", AblationFlags { use_vision: false, ..AblationFlags::default() }),
        ("no-audio", AblationFlags { use_audio: false, ..AblationFlags::default() }),
        (
            "no-audio-no-vision",
            AblationFlags { use_audio: false, use_vision: false, ..AblationFlags::default() },
        ),
    ];
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        for (name, flags) in variants {
            let plan = TrainPlan { seed, epochs: 10, flags, ..TrainPlan::default() };
            acc.entry(name).or_default().push(val_accuracy(corpus, &plan)?);
        }
    }
    let m: BTreeMap<&str, f64> = acc.iter().map(|(k, v)| (*k, 100.0 * mean(v))).collect();
    let (full, nv, na, nav) = (m["full"], m["no-vision"], m["no-audio"], m["no-audio-no-vision"]);
    let ok = full - nv >= 2.0 && nv - nav >= 2.0 && (full - na) - (full - nv) >= 2.0;
    check(
        ok,
        format!("3-seed mean acc %: full {full:.2}, no-vision {nv:.2}, no-audio {na:.2}, no-audio-no-vision {nav:.2}"),
    )
}

fn c8_dialect_fusion() -> Outcome {
    let spec = SynthSpec {
        train: 2000,
        val: 400,
        test: 0,
        audio_signal: 1.0,
        visual_signal: 0.0,
        text_signal: 0.0,
        dialect_erasure: 0.5,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec).map_err(|e| e.to_string())?;
    let audio_only = AblationFlags {
        use_text: false,
        use_vision: false,
        ..AblationFlags::default()
    };
    let runs = [
        ("mandarin", DialectPair::single("mandarin")),
        ("cantonese", DialectPair::single("cantonese")),
        ("mandarin+cantonese", DialectPair::pair("mandarin", "cantonese")),
    ];
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        for (name, dialects) in &runs {
            let plan = TrainPlan {
                seed,
                epochs: 10,
                flags: audio_only,
                dialects: dialects.clone(),
                ..TrainPlan::default()
            };
            acc.entry(name).or_default().push(val_accuracy(&corpus, &plan)?);
        }
    }
    let m: BTreeMap<&str, f64> = acc.iter().map(|(k, v)| (*k, 100.0 * mean(v))).collect();
    let best_single = m["mandarin"].max(m["cantonese"]);
    let fused = m["mandarin+cantonese"];
    check(
        best_single <= 90.0 && fused - best_single >= 1.0,
        format!(
            "3-seed mean acc %: mandarin {:.2}, cantonese {:.2}, fused {fused:.2}",
            m["mandarin"], m["cantonese"]
        ),
    )
}

fn c9_serialization_determinism() -> Outcome {
    let mut rng = Rng::new(99);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut pft_ok = 0;
    for i in 0..100 {
        let rank = 1 + rng.below(4);
        let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
        let mut t = rng.normal_tensor(shape, 10.0);
        // Include awkward bit patterns.
        let n = t.numel();
        t.data_mut()[rng.below(n)] = f64::MIN_POSITIVE / 3.0;
        t.data_mut()[rng.below(n)] = -0.0;
        let p = dir.path().join(format!("t{i}.pft"));
        pft::write_tensor(&p, &t).map_err(|e| e.to_string())?;
        let back = pft::read_tensor(&p).map_err(|e| e.to_string())?;
        pft_ok += usize::from(back.bit_eq(&t) && back.shape() == t.shape());
    }

    let mut ckpt_ok = 0;
    for i in 0..100u64 {
        let plan = TrainPlan { seed: i, ..TrainPlan::default() };
        let ckpt = Checkpoint::init(ModelConfig::tiny(), plan).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("ckpt{}", i % 3));
        ckpt.save(&p).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&p).map_err(|e| e.to_string())?;
        ckpt_ok += usize::from(back.bit_eq(&ckpt));
    }

    let spec = SynthSpec { train: 120, val: 40, test: 0, ..SynthSpec::default() };
    let corpus = synth_generate(&spec).map_err(|e| e.to_string())?;
    let plan = TrainPlan { seed: 5, epochs: 2, warmup_steps: 5, batch_size: 16, ..TrainPlan::default() };
    let run = || -> Result<(Vec<u8>, String), String> {
        let out = run_experiment(&corpus, &test_dims(), &plan).map_err(|e| e.to_string())?;
        let d = tempfile::tempdir().map_err(|e| e.to_string())?;
        out.classify.checkpoint.save(d.path()).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        let mut files: Vec<_> = walk(d.path());
        files.sort();
        for f in files {
            bytes.extend(f.strip_prefix(d.path()).unwrap().to_string_lossy().as_bytes());
            bytes.extend(std::fs::read(&f).unwrap());
        }
        let log = format_loss_log("warmup", &out.warmup.losses) + &format_loss_log("train", &out.classify.losses);
        Ok((bytes, log))
    };
    let (a, la) = run()?;
    let (b, lb) = run()?;
    let same = a == b && la == lb;
    check(
        pft_ok == 100 && ckpt_ok == 100 && same,
        format!("PFT1 {pft_ok}/100, checkpoints {ckpt_ok}/100 bit-exact; repeated run identical: {same}"),
    )
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn c10_padding_neutrality() -> Outcome {
    let mut rng = Rng::new(31);
    let mut store = ParamStore::new();
    let d_a = 6;
    let encoder = AudioEncoder::new(&mut store, &mut rng, "audio", d_a, 16, 4, 2, 12).map_err(|e| e.to_string())?;
    let vocab = 20;
    let tokens: Vec<String> = (0..vocab).map(|i| format!("t{i}")).chain([UNK.to_string()]).collect();
    let table = AudioFeatureTable::new("m", tokens, rng.normal_tensor(vec![vocab + 1, d_a], 1.0)).unwrap();
    let sentence = |rng: &mut Rng, n: usize| {
        let s: Vec<String> = (0..n).map(|_| format!("t{}", rng.below(vocab + 3))).collect();
        assemble_sequence(&s, &table, 12, false).unwrap()
    };
    let mut equal = 0;
    for _ in 0..50 {
        let target = { let n = 1 + rng.below(8); sentence(&mut rng, n) };
        let mut g = Graph::new();
        let solo = encoder.forward(&mut g, &store, std::slice::from_ref(&target)).map_err(|e| e.to_string())?;
        let solo = g.value(solo.pooled).clone();

        let mut batch: Vec<_> = (0..3).map(|_| { let n = 1 + rng.below(12); sentence(&mut rng, n) }).collect();
        let pos = rng.below(batch.len() + 1);
        batch.insert(pos, target);
        let mut g = Graph::new();
        let enc = encoder.forward(&mut g, &store, &batch).map_err(|e| e.to_string())?;
        let padded = g.value(enc.pooled).row(pos).to_vec();
        equal += usize::from(Tensor::new(vec![1, 16], padded).unwrap().bit_eq(&solo));
    }
    check(equal == 50, format!("{equal}/50 pooled features bit-equal solo vs padded batch"))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut corpus = None;
    let mut main_corpus_once = || corpus.get_or_insert_with(main_corpus).clone();

    let mut failures = 0;
    let mut run = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
    };
    run(1, "gradient correctness", &mut c1_gradcheck);
    run(2, "closed-form contrastive loss", &mut c2_contrastive_closed_form);
    run(3, "closed-form CE/BCE", &mut c3_closed_form_losses);
    run(4, "degenerate cross-attention", &mut c4_degenerate_attention);
    run(5, "metric oracle equivalence", &mut c5_metric_oracle);
    run(6, "end-to-end learnability", &mut || c6_learnability(&main_corpus_once()));
    run(7, "ablation ordering", &mut || c7_ablation(&main_corpus_once()));
    run(8, "dialect fusion benefit", &mut c8_dialect_fusion);
    run(9, "serialization and determinism", &mut c9_serialization_determinism);
    run(10, "padding neutrality", &mut c10_padding_neutrality);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
