use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AblationFlags;

/// The primary dialect, optionally paired with a second one for fusion.
/// Written as `mandarin+cantonese` or a single name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DialectPair {
    pub primary: String,
    pub secondary: Option<String>,
}

impl DialectPair {
    pub fn pair(primary: &str, secondary: &str) -> Self {
        Self {
            primary: primary.into(),
            secondary: Some(secondary.into()),
        }
    }

    pub fn single(name: &str) -> Self {
        Self {
            primary: name.into(),
            secondary: None,
        }
    }
}

impl Default for DialectPair {
    fn default() -> Self {
        Self::pair("mandarin", "cantonese")
    }
}

impl FromStr for DialectPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let valid = |n: &str| !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        match parts.as_slice() {
            [a] if valid(a) => Ok(Self::single(a)),
            [a, b] if valid(a) && valid(b) && a != b => Ok(Self::pair(a, b)),
            _ => Err(Error::Config(format!(
                "dialect selection {s:?} must be one name or two distinct names joined by '+'"
            ))),
        }
    }
}

impl TryFrom<String> for DialectPair {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DialectPair> for String {
    fn from(p: DialectPair) -> String {
        p.to_string()
    }
}

impl fmt::Display for DialectPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.secondary {
            Some(b) => write!(f, "{}+{b}", self.primary),
            None => f.write_str(&self.primary),
        }
    }
}

/// Everything that decides a training run besides the model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    /// Seeds parameter initialization, batch order and everything else.
    pub seed: u64,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the contrastive term added to the classification loss.
    pub aux_contrastive_weight: f64,
    pub flags: AblationFlags,
    pub dialects: DialectPair,
    /// Reject characters missing from a feature table instead of using `<unk>`.
    pub strict_unk: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            warmup_steps: 0,
            warmup_batch: 32,
            warmup_lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            aux_contrastive_weight: 0.0,
            flags: AblationFlags::default(),
            dialects: DialectPair::default(),
            strict_unk: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        for (name, lr) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.aux_contrastive_weight.is_finite() && self.aux_contrastive_weight >= 0.0) {
            return Err(Error::Config("aux_contrastive_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// The flags actually in force: fusion needs a second dialect.
    pub fn effective_flags(&self) -> AblationFlags {
        AblationFlags {
            use_dialect: self.flags.use_dialect && self.flags.use_audio && self.dialects.secondary.is_some(),
            ..self.flags
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dialect_pair_round_trips() {
        for s in ["mandarin+cantonese", "wu"] {
            assert_eq!(s.parse::<DialectPair>().unwrap().to_string(), s);
        }
        for bad in ["", "a+a", "a+b+c", "a+", "man darin"] {
            assert!(bad.parse::<DialectPair>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&DialectPair::default()).unwrap();
        assert_eq!(json, "\"mandarin+cantonese\"");
    }

    #[test]
    fn single_dialect_disables_fusion() {
        let plan = TrainPlan {
            dialects: DialectPair::single("cantonese"),
            ..TrainPlan::default()
        };
        assert!(!plan.effective_flags().use_dialect);
        assert!(TrainPlan::default().effective_flags().use_dialect);
    }
}
