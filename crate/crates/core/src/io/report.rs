//! Run reports: a line-oriented `key = value` text file for people and a JSON
//! twin for tools.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationFlags, ModelConfig};
use crate::train::metrics::EvalReport;
use crate::train::plan::TrainPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    /// Which split the metrics were computed on.
    pub split: String,
    /// Flags in force for the run (see [`TrainPlan::effective_flags`]).
    pub flags: AblationFlags,
    pub dialects: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub plan: TrainPlan,
    pub metrics: EvalReport,
}

impl RunReport {
    pub fn new(split: &str, config: &ModelConfig, plan: &TrainPlan, metrics: EvalReport) -> Self {
        Self {
            split: split.into(),
            flags: plan.effective_flags(),
            dialects: plan.dialects.to_string(),
            seed: plan.seed,
            config: config.clone(),
            plan: plan.clone(),
            metrics,
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let f = &self.flags;
        let mut s = String::new();
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "modalities = {}", f.tag());
        let _ = writeln!(s, "use_text = {}", f.use_text);
        let _ = writeln!(s, "use_audio = {}", f.use_audio);
        let _ = writeln!(s, "use_vision = {}", f.use_vision);
        let _ = writeln!(s, "use_dialect = {}", f.use_dialect);
        let _ = writeln!(s, "use_translation_channel = {}", f.use_translation_channel);
        let _ = writeln!(s, "dialects = {}", self.dialects);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "samples = {}", m.samples);
        let _ = writeln!(s, "accuracy = {}", m.accuracy);
        let _ = writeln!(s, "micro_f1 = {}", m.micro_f1);
        let _ = writeln!(s, "macro_f1 = {}", m.macro_f1);
        for (k, v) in m.per_class_f1.iter().enumerate() {
            let _ = writeln!(s, "f1.class{k} = {v}");
        }
        for (g, stat) in &m.groups {
            let _ = writeln!(s, "accuracy.{g} = {} ({} samples)", stat.accuracy, stat.samples);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Strict parse of the JSON form; every field is required.
    pub fn parse(json: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(json)?;
        r.metrics.validate()?;
        Ok(r)
    }
}

/// The JSON twin of a text report path: `x.txt` → `x.json`.
pub fn json_path(text_path: &Path) -> PathBuf {
    text_path.with_extension("json")
}

/// Writes `path` (text) and its JSON twin.
pub fn write_report(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))?;
    let jp = json_path(path);
    fs::write(&jp, report.to_json()?).map_err(|e| Error::io(&jp, e))
}

/// Reads a report from its JSON form (given either path of the pair).
pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let jp = json_path(path.as_ref());
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    RunReport::parse(&text).map_err(|e| Error::format(&jp, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub modalities: String,
    pub dialects: String,
    pub seed: u64,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// One row per report, in input order.
pub fn ablation_table(reports: &[RunReport]) -> Vec<AblationRow> {
    reports
        .iter()
        .map(|r| AblationRow {
            modalities: r.flags.tag(),
            dialects: r.dialects.clone(),
            seed: r.seed,
            accuracy: r.metrics.accuracy,
            micro_f1: r.metrics.micro_f1,
            macro_f1: r.metrics.macro_f1,
        })
        .collect()
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.modalities.len()).max().unwrap_or(0).max("modalities".len());
    let mut s = format!(
        "{:<width$}  {:<20}  {:>6}  {:>8}  {:>8}  {:>8}\n",
        "modalities", "dialects", "seed", "acc", "mic-f1", "mac-f1"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:<20}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.modalities, r.dialects, r.seed, r.accuracy, r.micro_f1, r.macro_f1
        );
    }
    s
}
