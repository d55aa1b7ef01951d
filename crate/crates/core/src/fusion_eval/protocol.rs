use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::Label;
use crate::error::{Error, Result};
use crate::fusion_eval::auc::{roc_auc, RocPoint};
use crate::fusion_eval::{normalize_scores, Normalization, ScoreTable, TableRow};
use crate::nn::params::stable_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quota {
    pub label: Label,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    /// The held-out class; its images are the positives.
    pub positive: Label,
    /// Negatives drawn per run in balanced mode.
    pub negatives: Vec<Quota>,
    /// `false` uses every negative in every run.
    pub balanced: bool,
    pub seed: u64,
    /// Per-model score normalisation applied before fusion.
    pub normalization: Normalization,
    /// Optional seeded cap on each class's test pool, applied once before the runs.
    pub pool_per_class: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            positive: Label::Covid19,
            negatives: vec![
                Quota {
                    label: Label::Normal,
                    count: 286,
                },
                Quota {
                    label: Label::Pneumonia,
                    count: 287,
                },
            ],
            balanced: true,
            seed: 0,
            normalization: Normalization::Minmax,
            pool_per_class: Some(573),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.negatives.iter().any(|q| q.label == self.positive) {
            return Err(Error::Config(
                "the positive class cannot also be a negative quota".into(),
            ));
        }
        if self.pool_per_class == Some(0) {
            return Err(Error::Config("pool_per_class must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed of run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

/// Draws each quota without replacement from its labelled pool using the
/// run's seed. Returned indices refer to the pools' elements, in quota order.
pub fn balanced_sample(
    pools: &BTreeMap<Label, Vec<usize>>,
    quotas: &[Quota],
    run_seed: u64,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for q in quotas {
        let pool = pools.get(&q.label).map(Vec::as_slice).unwrap_or(&[]);
        if pool.len() < q.count {
            return Err(Error::Config(format!(
                "{} pool holds {} images, {} requested",
                q.label,
                pool.len(),
                q.count
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ stable_hash(q.label.as_str()));
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), q.count)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub high: Label,
    pub low: Label,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasReport {
    pub normalization: Normalization,
    pub per_class: BTreeMap<Label, f64>,
    /// Every class pair, larger mean first.
    pub gaps: Vec<Gap>,
}

impl MasReport {
    /// True when `label` has the strictly largest mean.
    pub fn is_strict_max(&self, label: Label) -> bool {
        let Some(&m) = self.per_class.get(&label) else {
            return false;
        };
        self.per_class.iter().all(|(l, &v)| *l == label || v < m)
    }
}

/// Per-class mean of fused scores (normalised over the whole table with
/// `normalization`) and all pairwise gaps.
pub fn mean_anomaly_gaps(table: &ScoreTable, normalization: Normalization) -> Result<MasReport> {
    if table.rows.is_empty() {
        return Err(Error::Empty("score table".into()));
    }
    let fused: Vec<f64> = table.rows.iter().map(|r| r.fused).collect();
    let norm = normalize_scores(&fused, normalization)?;
    let mut sums: BTreeMap<Label, (f64, usize)> = BTreeMap::new();
    for (r, v) in table.rows.iter().zip(norm) {
        let e = sums.entry(r.label).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let per_class: BTreeMap<Label, f64> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect();
    let labels: Vec<Label> = per_class.keys().copied().collect();
    let mut gaps = Vec::new();
    for (i, &a) in labels.iter().enumerate() {
        for &b in &labels[i + 1..] {
            let (ma, mb) = (per_class[&a], per_class[&b]);
            let (high, low) = if ma >= mb { (a, b) } else { (b, a) };
            gaps.push(Gap {
                high,
                low,
                gap: (ma - mb).abs(),
            });
        }
    }
    Ok(MasReport {
        normalization,
        per_class,
        gaps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub positives: usize,
    pub negatives: BTreeMap<Label, usize>,
    /// AUC of the fused score.
    pub auc: f64,
    /// AUC of the first model's score alone.
    pub auc_a: f64,
    /// AUC of the second model's score alone.
    pub auc_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub runs: Vec<RunResult>,
    pub mean_auc: f64,
    pub mean_auc_a: f64,
    pub mean_auc_b: f64,
    /// Fused-score ROC of the first run.
    pub roc: Vec<RocPoint>,
    pub mas: MasReport,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn cap_rows(rows: &[TableRow], cap: Option<usize>, seed: u64) -> Vec<TableRow> {
    let Some(cap) = cap else { return rows.to_vec() };
    let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_label.entry(r.label).or_default().push(i);
    }
    let mut keep = vec![false; rows.len()];
    for (label, idx) in by_label {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ stable_hash(label.as_str()) ^ 0x9e37_79b9);
            sample(&mut rng, idx.len(), cap)
                .into_iter()
                .for_each(|j| keep[idx[j]] = true);
        }
    }
    rows.iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// Runs the resampling protocol over a fused score table.
pub fn run_protocol(table: &ScoreTable, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let rows = cap_rows(&table.rows, cfg.pool_per_class, cfg.seed);
    let positives: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].label == cfg.positive)
        .collect();
    if positives.is_empty() {
        return Err(Error::MissingClass(cfg.positive.to_string()));
    }
    let mut pools: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.label != cfg.positive {
            pools.entry(r.label).or_default().push(i);
        }
    }
    let all_negatives: Vec<usize> = pools.values().flatten().copied().collect();

    let mut runs = Vec::with_capacity(cfg.repeats);
    let mut roc = Vec::new();
    for run in 0..cfg.repeats {
        let seed = cfg.run_seed(run);
        let negs = if cfg.balanced {
            balanced_sample(&pools, &cfg.negatives, seed)?
        } else {
            all_negatives.clone()
        };
        let chosen: Vec<usize> = positives.iter().chain(&negs).copied().collect();
        let labels: Vec<bool> = chosen
            .iter()
            .map(|&i| rows[i].label == cfg.positive)
            .collect();
        let col =
            |f: fn(&TableRow) -> f64| chosen.iter().map(|&i| f(&rows[i])).collect::<Vec<f64>>();
        let (auc, points) = roc_auc(&col(|r| r.fused), &labels)?;
        let auc_a = roc_auc(&col(|r| r.score_a), &labels)?.0;
        let auc_b = roc_auc(&col(|r| r.score_b), &labels)?.0;
        if run == 0 {
            roc = points;
        }
        let mut neg_counts = BTreeMap::new();
        for &i in &negs {
            *neg_counts.entry(rows[i].label).or_insert(0) += 1;
        }
        runs.push(RunResult {
            run,
            seed,
            positives: positives.len(),
            negatives: neg_counts,
            auc,
            auc_a,
            auc_b,
        });
    }
    let k = runs.len() as f64;
    let mean = |f: fn(&RunResult) -> f64| runs.iter().map(f).sum::<f64>() / k;
    let capped = ScoreTable {
        normalization: table.normalization,
        rows,
    };
    Ok(EvalReport {
        config: cfg.clone(),
        mean_auc: mean(|r| r.auc),
        mean_auc_a: mean(|r| r.auc_a),
        mean_auc_b: mean(|r| r.auc_b),
        seeds: runs.iter().map(|r| r.seed).collect(),
        runs,
        roc,
        mas: mean_anomaly_gaps(&capped, Normalization::None)?,
    })
}
