//! Accuracy, micro-F1 and macro-F1 over label-indicator rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numerics::Tensor;

/// Multi-label decision threshold: a class is predicted when `p ≥ 0.5`.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    /// `2TP / (2TP + FP + FN)`, with `0/0 → 0`.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Turns a `[B×M]` probability matrix into predicted indicator rows.
pub fn decide(probs: &Tensor, task: TaskKind) -> Result<Vec<Vec<bool>>> {
    if probs.rank() != 2 {
        return Err(Error::shape("decide", probs.shape(), &[]));
    }
    let m = probs.shape()[1];
    Ok(probs
        .data()
        .chunks_exact(m)
        .map(|row| match task {
            TaskKind::SingleLabel => {
                let k = argmax(row);
                (0..m).map(|j| j == k).collect()
            }
            TaskKind::MultiLabel => row.iter().map(|&p| p >= THRESHOLD).collect(),
        })
        .collect())
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], m: usize) -> Result<Vec<Vec<bool>>> {
    labels
        .iter()
        .map(|&y| {
            if y >= m {
                Err(Error::Data(format!("class index {y} out of range for {m} classes")))
            } else {
                Ok((0..m).map(|j| j == y).collect())
            }
        })
        .collect()
}

fn check_aligned(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<usize> {
    if pred.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if pred.len() != gold.len() {
        return Err(Error::Data(format!("{} predictions for {} gold rows", pred.len(), gold.len())));
    }
    let m = gold[0].len();
    if pred.iter().chain(gold).any(|r| r.len() != m) {
        return Err(Error::Data("ragged label rows".into()));
    }
    Ok(m)
}

pub fn confusion(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<Vec<ClassCounts>> {
    let m = check_aligned(pred, gold)?;
    let mut counts = vec![ClassCounts::default(); m];
    for (p, y) in pred.iter().zip(gold) {
        for (c, (&pp, &yy)) in counts.iter_mut().zip(p.iter().zip(y)) {
            match (pp, yy) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

/// Fraction of rows predicted exactly (subset accuracy for multi-label).
pub fn accuracy(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 of the pooled counts.
pub fn micro_f1(counts: &[ClassCounts]) -> f64 {
    let pooled = counts.iter().fold(ClassCounts::default(), |a, c| ClassCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    pooled.f1()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(counts: &[ClassCounts]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().map(ClassCounts::f1).sum::<f64>() / counts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub counts: Vec<ClassCounts>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, GroupStat>,
    pub samples: usize,
}

impl EvalReport {
    /// Checks ranges and that the F1 fields agree with the stored counts.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut all = vec![self.accuracy, self.micro_f1, self.macro_f1];
        all.extend(&self.per_class_f1);
        all.extend(self.groups.values().map(|g| g.accuracy));
        if !all.into_iter().all(in_unit) {
            return Err(Error::Data("metric outside [0, 1]".into()));
        }
        if self.per_class_f1.len() != self.counts.len() {
            return Err(Error::Data("per-class F1 and counts differ in length".into()));
        }
        let consistent = micro_f1(&self.counts) == self.micro_f1
            && macro_f1(&self.counts) == self.macro_f1
            && self.counts.iter().zip(&self.per_class_f1).all(|(c, f)| c.f1() == *f);
        if !consistent {
            return Err(Error::Data("F1 values disagree with the stored confusion counts".into()));
        }
        Ok(())
    }
}

pub fn evaluate(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<EvalReport> {
    let counts = confusion(pred, gold)?;
    Ok(EvalReport {
        accuracy: accuracy(pred, gold)?,
        micro_f1: micro_f1(&counts),
        macro_f1: macro_f1(&counts),
        per_class_f1: counts.iter().map(ClassCounts::f1).collect(),
        counts,
        groups: BTreeMap::new(),
        samples: pred.len(),
    })
}

/// [`evaluate`] plus accuracy per group tag. Untagged samples count toward
/// the overall figures only.
pub fn evaluate_grouped(pred: &[Vec<bool>], gold: &[Vec<bool>], groups: &[Option<String>]) -> Result<EvalReport> {
    if groups.len() != pred.len() {
        return Err(Error::Data(format!("{} group tags for {} samples", groups.len(), pred.len())));
    }
    let mut report = evaluate(pred, gold)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((p, y), tag) in pred.iter().zip(gold).zip(groups) {
        if let Some(tag) = tag {
            let e = tally.entry(tag.clone()).or_default();
            e.0 += usize::from(p == y);
            e.1 += 1;
        }
    }
    report.groups = tally
        .into_iter()
        .map(|(k, (hits, n))| {
            (
                k,
                GroupStat {
                    accuracy: hits as f64 / n as f64,
                    samples: n,
                },
            )
        })
        .collect();
    Ok(report)
}
