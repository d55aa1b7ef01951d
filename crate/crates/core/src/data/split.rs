use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{DatasetManifest, ImageRecord, Label, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSets {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl SplitSets {
    pub fn train_counts(&self) -> BTreeMap<Label, usize> {
        count(&self.train)
    }

    pub fn test_counts(&self) -> BTreeMap<Label, usize> {
        count(&self.test)
    }

    /// Train records of one class, in manifest order.
    pub fn train_of(&self, label: Label) -> Vec<ImageRecord> {
        self.train
            .iter()
            .filter(|r| r.label == label)
            .cloned()
            .collect()
    }
}

fn count(records: &[ImageRecord]) -> BTreeMap<Label, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.label).or_insert(0) += 1;
    }
    m
}

/// Partitions a manifest by split, never letting `unknown` into the train set.
/// Manifest order is preserved.
pub fn build_split(manifest: &DatasetManifest, unknown: Label) -> Result<SplitSets> {
    if !manifest.records.iter().any(|r| r.label == unknown) {
        return Err(Error::MissingClass(unknown.to_string()));
    }
    let mut sets = SplitSets::default();
    for r in &manifest.records {
        match r.split {
            Split::Train if r.label != unknown => sets.train.push(r.clone()),
            Split::Train => {}
            Split::Test => sets.test.push(r.clone()),
        }
    }
    Ok(sets)
}

/// Keeps at most `per_class` records of each label, chosen with a seeded
/// draw without replacement; survivors keep their original order.
pub fn cap_per_class(records: &[ImageRecord], per_class: usize, seed: u64) -> Vec<ImageRecord> {
    let mut keep = vec![false; records.len()];
    let by_label = {
        let mut m: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            m.entry(r.label).or_default().push(i);
        }
        m
    };
    for (label, idx) in by_label {
        if idx.len() <= per_class {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ crate::nn::params::stable_hash(label.as_str()));
            for j in sample(&mut rng, idx.len(), per_class) {
                keep[idx[j]] = true;
            }
        }
    }
    records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rec(name: &str, label: Label, split: Split) -> ImageRecord {
        ImageRecord {
            path: PathBuf::from(name),
            label,
            split,
            source: "s".into(),
        }
    }

    #[test]
    fn covidx_shaped_split() {
        let mut records = Vec::new();
        for (label, split, n) in [
            (Label::Normal, Split::Train, 7493),
            (Label::Pneumonia, Split::Train, 4986),
            (Label::Normal, Split::Test, 573),
            (Label::Pneumonia, Split::Test, 573),
            (Label::Covid19, Split::Test, 573),
        ] {
            records.extend((0..n).map(|i| rec(&format!("{label}{i}"), label, split)));
        }
        let sets = build_split(&DatasetManifest::new(records), Label::Covid19).unwrap();
        let train = sets.train_counts();
        assert_eq!(train.get(&Label::Normal), Some(&7493));
        assert_eq!(train.get(&Label::Pneumonia), Some(&4986));
        assert_eq!(train.get(&Label::Covid19), None);
        assert!(sets.test_counts().values().all(|&n| n == 573));
    }

    #[test]
    fn missing_unknown_class_is_an_error() {
        let m = DatasetManifest::new(vec![rec("a", Label::Normal, Split::Train)]);
        assert!(matches!(
            build_split(&m, Label::Covid19),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn minimal_passthrough() {
        let a = rec("a", Label::SyntheticA, Split::Train);
        let b = rec("b", Label::SyntheticUnknown, Split::Test);
        let sets = build_split(
            &DatasetManifest::new(vec![a.clone(), b.clone()]),
            Label::SyntheticUnknown,
        )
        .unwrap();
        assert_eq!(sets.train, vec![a]);
        assert_eq!(sets.test, vec![b]);
    }

    #[test]
    fn known_label_chosen_as_unknown_is_dropped_from_train() {
        let m = DatasetManifest::new(vec![
            rec("a", Label::SyntheticA, Split::Train),
            rec("b", Label::SyntheticB, Split::Train),
            rec("c", Label::SyntheticB, Split::Test),
        ]);
        let sets = build_split(&m, Label::SyntheticB).unwrap();
        assert!(sets.train.iter().all(|r| r.label != Label::SyntheticB));
        assert_eq!(sets.test.len(), 1);
    }

    #[test]
    fn capping_is_seeded_and_order_preserving() {
        let recs: Vec<_> = (0..50)
            .map(|i| rec(&format!("{i}"), Label::Normal, Split::Test))
            .collect();
        let a = cap_per_class(&recs, 10, 1);
        let b = cap_per_class(&recs, 10, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let pos: Vec<usize> = a
            .iter()
            .map(|r| r.path.to_str().unwrap().parse().unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, cap_per_class(&recs, 10, 2));
        assert_eq!(cap_per_class(&recs, 100, 1), recs);
    }
}
