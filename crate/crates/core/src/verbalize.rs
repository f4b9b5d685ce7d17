//! Manual verbalizer: free-text model output to a class probability.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predict::PredictionScore;

#[derive(Debug, Error, PartialEq)]
pub enum VerbalizerError {
    #[error("verbalizer needs at least one positive and one negative form")]
    EmptyForms,
    #[error("form {0:?} is both positive and negative")]
    Overlap(String),
    #[error("fallback probability {0} is outside [0, 1]")]
    BadFallback(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Verbalizer {
    pub positive_forms: BTreeSet<String>,
    pub negative_forms: BTreeSet<String>,
    pub fallback_probability: f64,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Self {
            positive_forms: BTreeSet::from(["yes".to_string()]),
            negative_forms: BTreeSet::from(["no".to_string()]),
            fallback_probability: 0.5,
        }
    }
}

/// Trim, lowercase, then strip trailing `.`, `!` and `?`.
pub fn normalize(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .trim_end_matches(['.', '!', '?'])
        .trim_end()
        .to_string()
}

impl Verbalizer {
    pub fn new(
        positive: impl IntoIterator<Item = impl AsRef<str>>,
        negative: impl IntoIterator<Item = impl AsRef<str>>,
        fallback_probability: f64,
    ) -> Result<Self, VerbalizerError> {
        let v = Self {
            positive_forms: positive
                .into_iter()
                .map(|s| normalize(s.as_ref()))
                .collect(),
            negative_forms: negative
                .into_iter()
                .map(|s| normalize(s.as_ref()))
                .collect(),
            fallback_probability,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), VerbalizerError> {
        if self.positive_forms.is_empty() || self.negative_forms.is_empty() {
            return Err(VerbalizerError::EmptyForms);
        }
        if let Some(f) = self
            .positive_forms
            .intersection(&self.negative_forms)
            .next()
        {
            return Err(VerbalizerError::Overlap(f.clone()));
        }
        if !(0.0..=1.0).contains(&self.fallback_probability) {
            return Err(VerbalizerError::BadFallback(self.fallback_probability));
        }
        Ok(())
    }

    fn matches(forms: &BTreeSet<String>, normalized: &str) -> bool {
        forms.iter().any(|f| normalize(f) == normalized)
    }

    /// Unmatched output falls back to `fallback_probability` and is flagged.
    pub fn map_output(&self, raw: &str) -> PredictionScore {
        let norm = normalize(raw);
        let (p, unmatched) = if Self::matches(&self.positive_forms, &norm) {
            (1.0, false)
        } else if Self::matches(&self.negative_forms, &norm) {
            (0.0, false)
        } else {
            (self.fallback_probability, true)
        };
        PredictionScore {
            positive_probability: p,
            raw_output: raw.to_string(),
            unmatched,
        }
    }
}
