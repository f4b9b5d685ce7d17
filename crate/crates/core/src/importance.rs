//! Covariance-based feature ranking.
//!
//! Every encoded column is compared with the 0/1 target through the sample
//! covariance. A source feature takes the signed covariance of whichever of
//! its encoded columns has the largest magnitude.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{one_hot_encode, DatasetError, Table};

/// Relative part of the tolerance under which two magnitudes count as tied.
const TIE_REL: f64 = 1e-12;
/// Absolute part, absorbing rounding noise around zero.
const TIE_ABS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("covariance needs equal lengths, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("covariance needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("covariance input contains a non-finite value")]
    NonFinite,
    #[error("ranking needs at least 2 rows, table has {0}")]
    TooFewRows(usize),
    #[error("table has no feature columns besides the label")]
    NoFeatures,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("keep must be at least 1")]
    ZeroKeep,
    #[error("keep = {keep} exceeds the {features} available features")]
    KeepTooLarge { keep: usize, features: usize },
    #[error("report does not cover table feature {0:?}")]
    StaleReport(String),
    #[error("cannot read report {path}: {reason}")]
    ReadReport { path: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Sample covariance with the n-1 denominator.
pub fn covariance(x: &[f64], y: &[f64]) -> Result<f64, ImportanceError> {
    if x.len() != y.len() {
        return Err(ImportanceError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(ImportanceError::TooFewObservations(n));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ImportanceError::NonFinite);
    }
    let mean_x = x.iter().sum::<f64>() / n as f64;
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let cross: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mean_x) * (b - mean_y))
        .sum();
    Ok(cross / (n - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Signed covariance per source feature.
    pub scores: BTreeMap<String, f64>,
    /// Features by descending |score|, ties in column order.
    pub ranking: Vec<String>,
    pub top_k: Vec<String>,
    pub k: usize,
}

impl ImportanceReport {
    pub fn score(&self, feature: &str) -> Option<f64> {
        self.scores.get(feature).copied()
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ImportanceError> {
        let read_err = |reason: String| ImportanceError::ReadReport {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let report: Self = serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
        if report.k == 0 || !report.ranking.starts_with(&report.top_k) {
            return Err(read_err("top_k is not a prefix of ranking".into()));
        }
        Ok(report)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn tied(a: f64, max: f64) -> bool {
    max - a <= TIE_REL * max + TIE_ABS
}

fn exceeds(a: f64, b: f64) -> bool {
    a > b && !tied(b, a)
}

/// Ranks every non-label feature by |covariance| with the positive-class indicator.
pub fn rank_features(table: &Table, k: usize) -> Result<ImportanceReport, ImportanceError> {
    if k == 0 {
        return Err(ImportanceError::ZeroK);
    }
    if table.len() < 2 {
        return Err(ImportanceError::TooFewRows(table.len()));
    }
    let features: Vec<String> = table
        .schema()
        .feature_names()
        .into_iter()
        .map(String::from)
        .collect();
    if features.is_empty() {
        return Err(ImportanceError::NoFeatures);
    }

    let encoded = one_hot_encode(table);
    let mut scores = BTreeMap::new();
    let mut magnitudes = Vec::with_capacity(features.len());
    for feature in &features {
        let mut best: Option<f64> = None;
        for j in encoded.columns_of(feature) {
            let c = covariance(&encoded.column(j), &encoded.target)?;
            best = match best {
                Some(b) if !exceeds(c.abs(), b.abs()) => Some(b),
                _ => Some(c),
            };
        }
        // a categorical feature with no observed level carries no signal
        let score = best.unwrap_or(0.0);
        magnitudes.push(score.abs());
        scores.insert(feature.clone(), score);
    }

    let mut remaining: Vec<usize> = (0..features.len()).collect();
    let mut ranking = Vec::with_capacity(features.len());
    while !remaining.is_empty() {
        let max = remaining.iter().map(|&i| magnitudes[i]).fold(0.0, f64::max);
        let pos = remaining
            .iter()
            .position(|&i| tied(magnitudes[i], max))
            .expect("the maximum is always within tolerance of itself");
        ranking.push(features[remaining.remove(pos)].clone());
    }
    let top_k = ranking.iter().take(k).cloned().collect();
    Ok(ImportanceReport {
        scores,
        ranking,
        top_k,
        k,
    })
}

/// Keeps the label column and the `keep` best-ranked features, in original column order.
pub fn drop_least_important(
    table: &Table,
    report: &ImportanceReport,
    keep: usize,
) -> Result<Table, ImportanceError> {
    if keep == 0 {
        return Err(ImportanceError::ZeroKeep);
    }
    let schema = table.schema();
    let features = schema.feature_names();
    if keep > features.len() {
        return Err(ImportanceError::KeepTooLarge {
            keep,
            features: features.len(),
        });
    }
    let ranked: Vec<&String> = report
        .ranking
        .iter()
        .filter(|f| schema.is_feature(f))
        .collect();
    if let Some(f) = features
        .iter()
        .find(|f| !report.ranking.iter().any(|r| r == *f))
    {
        return Err(ImportanceError::StaleReport(f.to_string()));
    }
    let survivors: HashSet<&str> = ranked
        .into_iter()
        .take(keep)
        .map(String::as_str)
        .chain(std::iter::once(schema.label_column()))
        .collect();

    let kept: Vec<usize> = schema
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| survivors.contains(c.name.as_str()))
        .map(|(i, _)| i)
        .collect();
    let new_schema = crate::dataset::Schema::new(
        kept.iter().map(|&i| schema.columns()[i].clone()).collect(),
        schema.label_column(),
        schema.positive_label(),
    )?;
    let rows = table
        .rows()
        .iter()
        .map(|row| kept.iter().map(|&i| row[i].clone()).collect())
        .collect();
    Ok(Table::new(new_schema, rows)?)
}
