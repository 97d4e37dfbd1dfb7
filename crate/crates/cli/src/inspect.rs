//! Human-readable summaries of PFT1 tensors, checkpoints and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use yunlu_core::io::checkpoint::Checkpoint;
use yunlu_core::io::manifest::Manifest;
use yunlu_core::io::pft;
use yunlu_core::Tensor;

pub fn inspect(path: &Path) -> Result<String> {
    if path.is_dir() {
        if path.join("meta.json").is_file() {
            return checkpoint(path);
        }
        if path.join("manifest.jsonl").is_file() {
            return manifest(&path.join("manifest.jsonl"));
        }
        bail!("{}: directory is neither a checkpoint nor a corpus", path.display());
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name == "meta.json" {
        return checkpoint(path.parent().unwrap_or(Path::new(".")));
    }
    if name.ends_with(".jsonl") {
        return manifest(path);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if name.ends_with(".pft") || bytes.starts_with(pft::MAGIC) {
        return Ok(tensor(path, &pft::decode(&bytes, path)?));
    }
    bail!("{}: unknown file type", path.display())
}

fn tensor(path: &Path, t: &Tensor) -> String {
    let d = t.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, "file  {}", path.display());
    let _ = writeln!(s, "type  PFT1 f64");
    let _ = writeln!(s, "dims  {:?}", t.shape());
    let _ = writeln!(s, "numel {}", t.numel());
    let _ = writeln!(s, "min   {min}");
    let _ = writeln!(s, "mean  {mean}");
    let _ = writeln!(s, "max   {max}");
    s
}

fn checkpoint(dir: &Path) -> Result<String> {
    let ck = Checkpoint::load(dir)?;
    let m = &ck.meta;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {}", dir.display());
    let _ = writeln!(s, "format     {}", m.format);
    let _ = writeln!(s, "stage      {:?}", m.stage);
    let _ = writeln!(s, "step       {}", m.step);
    let _ = writeln!(s, "epoch      {}", m.epoch);
    if let Some(v) = m.val_metric {
        let _ = writeln!(s, "val_metric {v}");
    }
    let _ = writeln!(s, "modalities {}", m.plan.effective_flags().tag());
    let _ = writeln!(s, "dialects   {}", m.plan.dialects);
    let _ = writeln!(s, "seed       {}", m.plan.seed);
    let _ = writeln!(s, "optimizer  {}", if ck.adam.is_some() { "adam state stored" } else { "none" });
    for (_, name, t) in ck.params.iter() {
        let _ = writeln!(s, "  {name:<40} {:?}", t.shape());
    }
    let _ = writeln!(s, "parameters {} tensors, {} values", ck.params.len(), ck.params.numel());
    Ok(s)
}

fn manifest(path: &Path) -> Result<String> {
    let m = Manifest::read(path)?;
    let h = &m.header;
    let mut splits: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = vec![0usize; h.classes];
    let mut regions: BTreeMap<&str, usize> = BTreeMap::new();
    let mut chars = 0;
    for r in &m.samples {
        *splits.entry(format!("{:?}", r.split).to_lowercase()).or_default() += 1;
        for (k, on) in r.gold_row(h.classes).into_iter().enumerate() {
            labels[k] += usize::from(on);
        }
        *regions.entry(r.region.as_deref().unwrap_or("-")).or_default() += 1;
        chars += r.chars.len();
    }
    let mut s = String::new();
    let _ = writeln!(s, "manifest {}", path.display());
    let _ = writeln!(s, "task     {:?}", h.task);
    let _ = writeln!(s, "classes  {}", h.classes);
    for (d, w) in &h.dialects {
        let _ = writeln!(s, "dialect  {d} (d_a={w})");
    }
    let _ = writeln!(s, "latent   {:?}", h.latent);
    let _ = writeln!(s, "d_text   {}", h.d_text);
    let _ = writeln!(s, "samples  {}", m.samples.len());
    for (k, n) in &splits {
        let _ = writeln!(s, "  {k:<6} {n}");
    }
    let _ = writeln!(s, "labels   {labels:?}");
    let _ = writeln!(s, "regions  {regions:?}");
    let mean = chars as f64 / m.samples.len().max(1) as f64;
    let _ = writeln!(s, "mean_len {mean:.2}");
    Ok(s)
}
