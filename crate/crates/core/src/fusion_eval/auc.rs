use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::io::atomic_write;
use crate::error::{Error, Result};

/// One ROC vertex: everything scoring `>= threshold` is called positive.
/// The first vertex has an infinite threshold (nothing called positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
}

// JSON has no infinity; the open threshold is written as null
fn ser_threshold<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

fn cmp_scores(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite scores")
}

/// Mann–Whitney AUC (ties count one half) and the ROC staircase over all
/// distinct thresholds, from `(0, 0)` to `(1, 1)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Degenerate(
            "roc needs both positive and negative samples".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| cmp_scores(scores[b], scores[a]));

    // walk tied groups from the highest score down; `twice` accumulates
    // 2 * (pairs won + half of tied pairs) as an exact integer
    let mut twice: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative below it, tie with gn
        let below = n - fp - gn;
        twice += u128::from(gp) * (2 * u128::from(below) + u128::from(gn));
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: t,
        });
    }
    let auc = twice as f64 / (2.0 * p as f64 * n as f64);
    Ok((auc, points))
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}

pub fn write_roc(path: &Path, points: &[RocPoint]) -> Result<()> {
    atomic_write(path, roc_csv(points).as_bytes())
}

pub fn read_roc(path: &Path) -> Result<Vec<RocPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("fpr") {
            continue;
        }
        let bad = |msg: &str| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("expected numbers"))?;
        if f.len() != 3 {
            return Err(bad("expected fpr,tpr,threshold"));
        }
        out.push(RocPoint {
            fpr: f[0],
            tpr: f[1],
            threshold: f[2],
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no ROC points in {}", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let (auc, pts) = roc_auc(&[2.0, 3.0, 0.0, 1.0], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(
            roc_auc(&[5.0; 6], &[true, false, true, false, false, true])
                .unwrap()
                .0,
            0.5
        );
        assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn json_keeps_open_threshold() {
        let p = RocPoint {
            fpr: 0.0,
            tpr: 0.0,
            threshold: f64::INFINITY,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("null"));
        assert_eq!(serde_json::from_str::<RocPoint>(&s).unwrap(), p);
    }

    fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0i32..8, n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(s, mut l)| {
                    l[0] = true;
                    l[1] = false;
                    (s.into_iter().map(f64::from).collect(), l)
                })
        })
    }

    proptest! {
        #[test]
        fn staircase_area_matches_rank_statistic((s, l) in labelled()) {
            let (auc, pts) = roc_auc(&s, &l).unwrap();
            prop_assert!((trapezoid_area(&pts) - auc).abs() < 1e-9);
            prop_assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            prop_assert!((0.0..=1.0).contains(&auc));
        }

        #[test]
        fn invariant_under_increasing_maps((s, l) in labelled()) {
            let base = roc_auc(&s, &l).unwrap().0;
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let aff: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
            prop_assert_eq!(roc_auc(&exp, &l).unwrap().0, base);
            prop_assert_eq!(roc_auc(&aff, &l).unwrap().0, base);
        }

        #[test]
        fn negation_complements_without_ties(n in 2usize..40, seed in any::<u64>()) {
            let s: Vec<f64> = (0..n).map(|i| (((i as u64 * 2654435761) ^ seed) % 1_000_003) as f64 + i as f64 * 1e-3).collect();
            let mut l: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            l[0] = true;
            l[1] = false;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = roc_auc(&s, &l).unwrap().0 + roc_auc(&neg, &l).unwrap().0;
            prop_assert!((a - 1.0).abs() < 1e-12);
        }
    }
}
