//! Gaussian score simulation of the two-model setting: each known class
//! scores low under its own model and high under the other, the unknown
//! class scores high under both.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::Label;
use crate::error::Result;
use crate::fusion_eval::protocol::{run_protocol, EvalConfig};
use crate::fusion_eval::{Normalization, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianScenario {
    pub per_class: usize,
    /// Mean score of an out-of-class image; in-class images have mean 0.
    pub shift: f64,
    pub sd: f64,
}

impl Default for GaussianScenario {
    fn default() -> Self {
        Self {
            per_class: 200,
            shift: 2.0,
            sd: 1.0,
        }
    }
}

/// One simulated cohort; model A is trained on `SyntheticA`, model B on `SyntheticB`.
pub fn simulate(s: &GaussianScenario, rng: &mut impl Rng) -> Result<ScoreTable> {
    let low = Normal::new(0.0, s.sd).expect("positive sd");
    let high = Normal::new(s.shift, s.sd).expect("positive sd");
    let (mut ids, mut labels, mut a, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for label in [
        Label::SyntheticA,
        Label::SyntheticB,
        Label::SyntheticUnknown,
    ] {
        for i in 0..s.per_class {
            ids.push(format!("{label}-{i}"));
            labels.push(label);
            a.push(if label == Label::SyntheticA {
                low.sample(rng)
            } else {
                high.sample(rng)
            });
            b.push(if label == Label::SyntheticB {
                low.sample(rng)
            } else {
                high.sample(rng)
            });
        }
    }
    ScoreTable::from_raw(&ids, &labels, &a, &b)
}

/// `(fused, model A, model B)` AUCs of one simulated cohort, unknown class positive.
pub fn synergy_trial(s: &GaussianScenario, rng: &mut impl Rng) -> Result<(f64, f64, f64)> {
    let table = simulate(s, rng)?;
    let cfg = EvalConfig {
        repeats: 1,
        positive: Label::SyntheticUnknown,
        negatives: Vec::new(),
        balanced: false,
        normalization: Normalization::None,
        pool_per_class: None,
        ..Default::default()
    };
    let r = run_protocol(&table, &cfg)?;
    Ok((r.mean_auc, r.mean_auc_a, r.mean_auc_b))
}
