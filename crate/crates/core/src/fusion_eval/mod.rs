//! Dual-model score fusion and the evaluation protocol: per-model score
//! normalisation, summation, balanced resampling, ROC/AUC and normalised
//! mean anomaly scores per class.

pub mod auc;
pub mod plot;
pub mod protocol;
pub mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anomaly::ScoreRow;
use crate::data::manifest::Label;
use crate::error::{Error, Result};

pub use auc::{read_roc, roc_auc, roc_csv, trapezoid_area, write_roc, RocPoint};
pub use protocol::{
    balanced_sample, mean_anomaly_gaps, run_protocol, EvalConfig, EvalReport, MasReport, Quota,
    RunResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    Minmax,
    Zscore,
}

pub fn normalize_scores(scores: &[f64], method: Normalization) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores to normalise".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores to normalise".into()));
    }
    match method {
        Normalization::None => Ok(scores.to_vec()),
        Normalization::Minmax => {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                return Err(Error::Degenerate(
                    "min-max normalisation of a constant score list".into(),
                ));
            }
            Ok(scores.iter().map(|s| (s - lo) / (hi - lo)).collect())
        }
        Normalization::Zscore => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 {
                return Err(Error::Degenerate(
                    "z-score normalisation of a constant score list".into(),
                ));
            }
            let sd = var.sqrt();
            Ok(scores.iter().map(|s| (s - mean) / sd).collect())
        }
    }
}

pub fn fuse(a: f64, b: f64) -> Result<f64> {
    fuse_all(&[a, b])
}

/// Sum of any number of model scores.
pub fn fuse_all(scores: &[f64]) -> Result<f64> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("fusion input".into()));
    }
    Ok(scores.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    pub label: Label,
    /// Normalised score under the first model.
    pub score_a: f64,
    /// Normalised score under the second model.
    pub score_b: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub normalization: Normalization,
    pub rows: Vec<TableRow>,
}

impl ScoreTable {
    /// Joins two score files on image path, normalises each model's scores
    /// over the whole cohort and sums them. Rows follow the order of `a`.
    pub fn from_scores(
        a: &[ScoreRow],
        b: &[ScoreRow],
        normalization: Normalization,
    ) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Empty("score table".into()));
        }
        let mut by_path: BTreeMap<&str, &ScoreRow> = BTreeMap::new();
        for r in b {
            if by_path.insert(&r.path, r).is_some() {
                return Err(Error::Config(format!("duplicate score row for {}", r.path)));
            }
        }
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "score files cover {} and {} images",
                a.len(),
                b.len()
            )));
        }
        let mut sb = Vec::with_capacity(a.len());
        for r in a {
            let other = by_path
                .get(r.path.as_str())
                .ok_or_else(|| Error::Config(format!("no second-model score for {}", r.path)))?;
            if other.label != r.label {
                return Err(Error::Config(format!("label disagreement for {}", r.path)));
            }
            sb.push(other.score);
        }
        let na = normalize_scores(
            &a.iter().map(|r| r.score).collect::<Vec<_>>(),
            normalization,
        )?;
        let nb = normalize_scores(&sb, normalization)?;
        let rows = a
            .iter()
            .zip(na.into_iter().zip(nb))
            .map(|(r, (x, y))| {
                Ok(TableRow {
                    id: r.path.clone(),
                    label: r.label,
                    score_a: x,
                    score_b: y,
                    fused: fuse(x, y)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            normalization,
            rows,
        })
    }

    /// Rows built directly from per-model scores, already on a common scale.
    pub fn from_raw(ids: &[String], labels: &[Label], a: &[f64], b: &[f64]) -> Result<Self> {
        if ids.len() != labels.len() || a.len() != labels.len() || b.len() != labels.len() {
            return Err(Error::Shape("score table columns differ in length".into()));
        }
        let rows = (0..ids.len())
            .map(|i| {
                Ok(TableRow {
                    id: ids[i].clone(),
                    label: labels[i],
                    score_a: a[i],
                    score_b: b[i],
                    fused: fuse(a[i], b[i])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            normalization: Normalization::None,
            rows,
        })
    }
}
