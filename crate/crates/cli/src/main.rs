//! `yunlu`: corpus generation, two-stage training, evaluation, gradient
//! checking and artifact inspection.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

mod config;
mod inspect;

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use yunlu_core::io::checkpoint::Checkpoint;
use yunlu_core::io::corpus::Corpus;
use yunlu_core::io::manifest::Split;
use yunlu_core::io::report::{write_report, RunReport};
use yunlu_core::io::synth::synth_generate;
use yunlu_core::model::{AblationFlags, TaskKind};
use yunlu_core::numerics::OpKind;
use yunlu_core::train::data::check_compatible;
use yunlu_core::train::gradcheck::model_gradcheck;
use yunlu_core::train::stages::{format_loss_log, EpochStat};
use yunlu_core::train::{evaluate_split, run_experiment, train_stage2, warmup_stage, DialectPair};
use yunlu_core::ModelConfig;

use config::{ConfigFile, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "yunlu", version, about = "Tri-modal poetry sentiment classification with dialect-fused audio")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted signals.
    GenSynth(GenSynthArgs),
    /// Contrastive warm-up of the feature extractors.
    Warmup(WarmupArgs),
    /// Supervised training, preceded by warm-up unless --from is given.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Summarize a PFT1 file, checkpoint directory or manifest.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    Text,
    Audio,
    Vision,
    Dialect,
}

impl Ablate {
    pub fn apply(self, f: &mut AblationFlags) {
        match self {
            Ablate::Text => f.use_text = false,
            Ablate::Audio => f.use_audio = false,
            Ablate::Vision => f.use_vision = false,
            Ablate::Dialect => f.use_dialect = false,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct RunFlags {
    /// TOML file with [model], [plan] and [synth] tables and an optional `data` path.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory (overrides `data` from the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a branch; may be repeated.
    #[arg(long, value_enum)]
    ablate: Vec<Ablate>,
    /// Primary dialect, optionally fused with a second: `mandarin+cantonese`.
    #[arg(long)]
    dialects: Option<DialectPair>,
    /// Hidden size 768 with 8 heads.
    #[arg(long)]
    paper_dims: bool,
}

#[derive(Args)]
struct WarmupArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Output directory for the checkpoint, loss log and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
    /// Start from this warm-up checkpoint instead of running warm-up.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Disable a branch at evaluation time; recorded in the report.
    #[arg(long, value_enum)]
    ablate: Vec<Ablate>,
    /// Write the report here (plus a `.json` sibling).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Perturb the backward rule of one op kind.
    #[arg(long, hide = true)]
    inject_fault: Option<OpKind>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// TOML file; only its [synth] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    multi_label: bool,
    #[arg(long, allow_negative_numbers = true)]
    audio_signal: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    visual_signal: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    text_signal: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    dialect_distortion: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    dialect_erasure: Option<f64>,
    /// Dialect tables to generate, joined by '+'.
    #[arg(long)]
    dialects: Option<String>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

trait UsageExt<T> {
    fn usage(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Warmup(a) => warmup(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect { path } => inspect::inspect(&path).map(|s| print!("{s}")).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by ": ", dropping causes an outer message already
/// spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

/// SHA-256 over every file below `dir`, in path order, covering relative
/// paths and contents.
fn dir_hash(dir: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir)?;
        let mut bytes = Vec::new();
        fs::File::open(entry.path())?.read_to_end(&mut bytes)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let mut spec = ConfigFile::read(a.config.as_deref()).usage()?.resolve().usage()?.synth;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut spec.train, a.train);
    set(&mut spec.val, a.val);
    set(&mut spec.test, a.test);
    set(&mut spec.classes, a.classes);
    for (dst, v) in [
        (&mut spec.audio_signal, a.audio_signal),
        (&mut spec.visual_signal, a.visual_signal),
        (&mut spec.text_signal, a.text_signal),
        (&mut spec.dialect_distortion, a.dialect_distortion),
        (&mut spec.dialect_erasure, a.dialect_erasure),
    ] {
        if let Some(v) = v {
            *dst = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if a.multi_label {
        spec.task = TaskKind::MultiLabel;
    }
    if let Some(d) = &a.dialects {
        spec.dialects = d.split('+').map(|s| s.trim().to_string()).collect();
    }
    spec.validate().usage()?;

    let corpus = synth_generate(&spec)?;
    corpus.write(&a.out)?;
    let hash = dir_hash(&a.out)?;
    println!("corpus   {}", a.out.display());
    println!("samples  train={} val={} test={}", spec.train, spec.val, spec.test);
    println!("classes  {} ({:?})", spec.classes, spec.task);
    println!(
        "signals  audio={} visual={} text={}",
        spec.audio_signal, spec.visual_signal, spec.text_signal
    );
    println!(
        "dialects {} (distortion={} erasure={})",
        spec.dialects.join(" "),
        spec.dialect_distortion,
        spec.dialect_erasure
    );
    println!("seed     {}", spec.seed);
    println!("sha256   {hash}");
    Ok(())
}

/// Resolves the run configuration and loads the corpus it names.
fn prepare(run: &RunFlags) -> CmdResult<(RunConfig, Corpus)> {
    let file = ConfigFile::read(run.config.as_deref()).usage()?;
    let mut cfg = file.resolve().usage()?;
    cfg.apply(&Overrides {
        data: run.data.clone(),
        seed: run.seed,
        ablate: run.ablate.clone(),
        dialects: run.dialects.clone(),
        paper_dims: run.paper_dims,
    });
    cfg.validate_training().usage()?;
    let data = cfg.data.clone().expect("validated");
    let corpus = Corpus::load(&data).with_context(|| format!("loading corpus {}", data.display()))?;
    cfg.fill_from_corpus(&file, &corpus);
    cfg.model.validate().usage()?;
    check_compatible(&cfg.model, &corpus, &cfg.plan)?;
    Ok((cfg, corpus))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn warmup(a: WarmupArgs) -> CmdResult {
    let (cfg, corpus) = prepare(&a.run)?;
    let init = Checkpoint::init(cfg.model.clone(), cfg.plan.clone())?;
    let out = warmup_stage(&corpus, &cfg.model, &cfg.plan, &init)?;
    out.checkpoint.save(a.out.join("checkpoint"))?;
    write_file(&a.out.join("loss.log"), &format_loss_log("warmup", &out.losses))?;
    write_file(&a.out.join("run.toml"), &cfg.to_toml()?)?;
    match out.losses.last() {
        Some(last) => println!("warmup   {} steps, final loss {last:.6}", out.losses.len()),
        None => println!("warmup   skipped (no steps or fewer than two modalities)"),
    }
    println!("checkpoint {}", a.out.join("checkpoint").display());
    Ok(())
}

fn print_epochs(epochs: &[EpochStat]) {
    for e in epochs {
        match e.val_metric {
            Some(v) => println!("epoch {:>3}  loss {:.6}  val {v:.4}", e.epoch, e.train_loss),
            None => println!("epoch {:>3}  loss {:.6}", e.epoch, e.train_loss),
        }
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let (cfg, corpus) = prepare(&a.run)?;
    let (warm_losses, classify) = match &a.from {
        Some(from) => {
            let warm = Checkpoint::load(from).with_context(|| format!("loading checkpoint {}", from.display()))?;
            (Vec::new(), train_stage2(&corpus, &cfg.model, &cfg.plan, &warm)?)
        }
        None => {
            let r = run_experiment(&corpus, &cfg.model, &cfg.plan)?;
            (r.warmup.losses, r.classify)
        }
    };
    print_epochs(&classify.epochs);
    let ckpt = &classify.checkpoint;
    ckpt.save(a.out.join("checkpoint"))?;
    let log = format_loss_log("warmup", &warm_losses) + &format_loss_log("classify", &classify.losses);
    write_file(&a.out.join("loss.log"), &log)?;
    write_file(&a.out.join("run.toml"), &cfg.to_toml()?)?;

    let split = if corpus.split_indices(Split::Val).is_empty() { Split::Train } else { Split::Val };
    let metrics = evaluate_split(&corpus, ckpt, split)?;
    let report = RunReport::new(split_name(split), &cfg.model, &cfg.plan, metrics);
    write_report(&report, a.out.join("report.txt"))?;
    print!("{}", report.to_text());
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let mut ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    for ab in &a.ablate {
        ab.apply(&mut ckpt.meta.plan.flags);
    }
    ckpt.meta.plan.flags.validate().usage()?;
    let corpus = Corpus::load(&a.data).with_context(|| format!("loading corpus {}", a.data.display()))?;
    let split = Split::from(a.split);
    let metrics = evaluate_split(&corpus, &ckpt, split)?;
    let report = RunReport::new(split_name(split), &ckpt.meta.config, &ckpt.meta.plan, metrics);
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_report(&report, out)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let report = model_gradcheck(&ModelConfig::tiny(), a.seed, &[4, 3, 4], a.inject_fault)?;
    for g in &report.groups {
        let verdict = if g.passed() { "ok" } else { "FAIL" };
        println!("{:<36} {:>6}  {:.3e}  {verdict}", g.name, g.numel, g.worst_rel_error);
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} parameter groups within tolerance", report.groups.len());
        return Ok(());
    }
    let names: Vec<&str> = failures.iter().map(|g| g.name.as_str()).collect();
    Err(Failure::Runtime(anyhow!("gradient check failed for {}", names.join(", "))))
}
