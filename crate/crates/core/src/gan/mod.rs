//! Generator/discriminator pairs (RANDGAN and the AnoGAN baseline) and
//! adversarial training.

pub mod arch;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::manifest::Label;
use crate::error::{Error, Result};
use crate::nn::params::stable_hash;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use arch::{build_discriminator, build_generator, Discriminator, GanArch, Generator, Variant};
pub use train::{
    build_pair, history_csv, latent_batch, sample_context_batch, train_gan, EpochStats,
    GanTrainConfig, GeneratorObjective,
};

/// A trained pair ready for inversion. RANDGAN models carry the context
/// vector used at query time, encoded once from a seeded batch of training
/// images.
#[derive(Debug, Clone)]
pub struct GanModel<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub context: Option<Vec<T>>,
}

impl<T: Scalar> GanModel<T> {
    pub fn variant(&self) -> Variant {
        self.gen.variant
    }

    pub fn arch(&self) -> &GanArch {
        &self.gen.arch
    }

    /// Generated images for `z` `[n, d]` under the frozen context.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.gen.generate(z, self.context.as_deref())
    }

    /// SHA-256 over both parameter sets and the frozen context.
    pub fn fingerprint(&self) -> String {
        let ctx: Vec<String> = self
            .context
            .iter()
            .flatten()
            .map(|v| v.to_f64_lossy().to_string())
            .collect();
        format!(
            "{}:{}:{}",
            self.gen.store.fingerprint(),
            self.disc.store.fingerprint(),
            ctx.join(",")
        )
    }
}

/// Encodes a seeded random batch of `train` as the query-time context.
/// Returns `None` for the baseline.
pub fn freeze_context<T: Scalar>(
    gen: &Generator<T>,
    train: &Tensor<T>,
    batch: usize,
    seed: u64,
) -> Result<Option<Vec<T>>> {
    if gen.variant != Variant::Randgan {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash("query-context"));
    let imgs = sample_context_batch(train, batch.max(1), &mut rng)?;
    Ok(Some(gen.encode_context(&imgs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpointMeta {
    pub variant: Variant,
    pub arch: GanArch,
    pub latent_dim: usize,
    pub feature_tap: usize,
    pub seed: u64,
    /// Known class the model was trained on.
    pub label: Option<Label>,
    pub train: GanTrainConfig,
    pub data_hash: String,
    pub context: Option<Vec<f64>>,
}

impl GanCheckpointMeta {
    pub fn new<T: Scalar>(
        model: &GanModel<T>,
        train: &GanTrainConfig,
        label: Option<Label>,
        data_hash: String,
    ) -> Self {
        Self {
            variant: model.variant(),
            arch: model.arch().clone(),
            latent_dim: model.arch().latent_dim,
            feature_tap: model.arch().feature_tap,
            seed: train.seed,
            label,
            train: train.clone(),
            data_hash,
            context: model
                .context
                .as_ref()
                .map(|c| c.iter().map(|v| v.to_f64_lossy()).collect()),
        }
    }
}

pub fn save_gan<T: Scalar>(
    path: &Path,
    model: &GanModel<T>,
    meta: &GanCheckpointMeta,
) -> Result<()> {
    checkpoint::save(path, &[&model.gen.store, &model.disc.store], meta)
}

pub fn load_gan<T: Scalar>(path: &Path) -> Result<(GanModel<T>, GanCheckpointMeta)> {
    let meta: GanCheckpointMeta = checkpoint::load_meta(path)?;
    if meta.arch.latent_dim != meta.latent_dim || meta.arch.feature_tap != meta.feature_tap {
        return Err(Error::Checkpoint(
            "metadata disagrees with its architecture block".into(),
        ));
    }
    let mut gen = build_generator(&meta.arch, meta.variant, meta.seed)?;
    let mut disc = build_discriminator(&meta.arch, meta.seed)?;
    checkpoint::load_params(path, &mut [&mut gen.store, &mut disc.store])?;
    let context = meta
        .context
        .as_ref()
        .map(|c| c.iter().map(|&v| T::lit(v)).collect::<Vec<T>>());
    if meta.variant == Variant::Randgan
        && context.as_ref().map(Vec::len) != Some(meta.arch.context_dim)
    {
        return Err(Error::Checkpoint(
            "randgan checkpoint lacks a frozen context of the right length".into(),
        ));
    }
    Ok((GanModel { gen, disc, context }, meta))
}

/// SHA-256 of a tensor's values, recorded in checkpoints as the data hash.
pub fn tensor_hash<T: Scalar>(t: &Tensor<T>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_f64_lossy().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
