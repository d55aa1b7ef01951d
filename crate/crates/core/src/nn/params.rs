use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Weight,
    /// Running statistics; updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal {
        mean: f64,
        std: f64,
    },
    /// He-style uniform bound `sqrt(6 / fan_in)` scaled by `gain`.
    HeUniform {
        fan_in: usize,
        gain: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub group: usize,
}

/// Named parameter tensors grouped by layer, in construction order.
///
/// Each parameter is initialised from its own random stream derived from the
/// store seed and the parameter name, so two models that share a parameter
/// name (and shape) start from identical values regardless of what else they
/// contain.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    seed: u64,
    entries: Vec<ParamEntry<T>>,
    groups: Vec<String>,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Opens a new parameter group; later parameters belong to it.
    pub fn begin_group(&mut self, name: &str) -> usize {
        self.groups.push(name.to_string());
        self.groups.len() - 1
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        if self.groups.is_empty() {
            self.begin_group("root");
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(name));
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("valid normal");
                (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
            }
            Init::HeUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
            }
        };
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Tensor::from_vec(shape, data).expect("shape product"),
            kind,
            group: self.groups.len() - 1,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn group_names(&self) -> &[String] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Number of leading groups covered by `fraction` of all groups, rounded up.
    pub fn frozen_prefix(&self, fraction: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "freeze fraction {fraction} outside [0, 1]"
            )));
        }
        let groups = self.group_count() as f64;
        // 1e-9 guards against 0.25 * 8 landing on 2.0000000000000004
        Ok(((fraction * groups) - 1e-9).ceil().max(0.0) as usize)
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            self.entries[id.0].value = v;
        }
    }

    /// Copies values from `other` for every parameter with matching name and shape.
    /// Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other
                .entries
                .iter()
                .find(|s| s.name == e.name && s.value.shape() == e.value.shape())
            {
                e.value = src.value.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Replaces all values from a flat list in entry order.
    pub fn set_all(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            if e.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, stored {:?}",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
            e.value = v;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values; used to assert a model is untouched.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::<f64>::new(3);
        let mut b = ParamStore::<f64>::new(3);
        b.add(
            "other",
            &[5],
            Init::Normal {
                mean: 0.0,
                std: 1.0,
            },
            ParamKind::Weight,
        );
        let ia = a.add(
            "w",
            &[4],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
            },
            ParamKind::Weight,
        );
        let ib = b.add(
            "w",
            &[4],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
            },
            ParamKind::Weight,
        );
        assert_eq!(a.value(ia), b.value(ib));
        let mut c = ParamStore::<f64>::new(4);
        let ic = c.add(
            "w",
            &[4],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
            },
            ParamKind::Weight,
        );
        assert_ne!(a.value(ia), c.value(ic));
    }

    #[test]
    fn frozen_prefix_rounds_up() {
        let mut s = ParamStore::<f32>::new(0);
        for i in 0..10 {
            s.begin_group(&format!("g{i}"));
        }
        assert_eq!(s.frozen_prefix(0.25).unwrap(), 3);
        assert_eq!(s.frozen_prefix(0.0).unwrap(), 0);
        assert_eq!(s.frozen_prefix(1.0).unwrap(), 10);
        assert!(s.frozen_prefix(1.5).is_err());
        let mut e = ParamStore::<f32>::new(0);
        for i in 0..8 {
            e.begin_group(&format!("g{i}"));
        }
        assert_eq!(e.frozen_prefix(0.25).unwrap(), 2);
    }
}
