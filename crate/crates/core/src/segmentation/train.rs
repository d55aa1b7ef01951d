use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::image::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Adam, AdamConfig, Mode};
use crate::scalar::Scalar;
use crate::segmentation::unet::{build_unet, UNet, UNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: SegLoss,
    /// Leading fraction of parameter groups kept fixed by [`transfer_finetune`].
    pub freeze_fraction: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-4,
            loss: SegLoss::BinaryCrossEntropy,
            freeze_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "segmentation batch_size and learning_rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config(format!(
                "freeze_fraction {} outside [0, 1]",
                self.freeze_fraction
            )));
        }
        Ok(())
    }
}

/// Sidecar metadata of a segmentation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegCheckpointMeta {
    pub arch: UNetSpec,
    pub freeze_fraction: f64,
    pub seed: u64,
    pub train: SegTrainConfig,
    pub data_hash: String,
}

/// SHA-256 over image pixels (as `f64`) and mask bits, in order.
pub fn pair_hash<T: Scalar>(images: &[ImageTensor<T>], masks: &[BinaryMask]) -> String {
    let mut h = Sha256::new();
    for img in images {
        for v in img.pixels() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    }
    for m in masks {
        h.update(m.data());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn fit<T: Scalar>(
    model: &mut UNet<T>,
    images: &[ImageTensor<T>],
    masks: &[BinaryMask],
    cfg: &SegTrainConfig,
    frozen_groups: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("segmentation training set".into()));
    }
    if images.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let batch = model.check_inputs(images)?;
    for m in masks {
        if m.height() != model.spec.input_size || m.width() != model.spec.input_size {
            return Err(Error::Shape(
                "mask size differs from model input size".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate, 0.9));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch.select_batch(chunk);
            let target: Vec<T> = chunk
                .iter()
                .flat_map(|&i| masks[i].data().iter().map(|&v| T::lit(f64::from(v))))
                .collect();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = model.forward(&mut g, xv, Mode::TRAIN)?;
            let loss = g.bce_with_logits(logits, &target)?;
            let lv = g.value(loss).data()[0].to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "segmentation loss at epoch {epoch}"
                )));
            }
            total += lv * chunk.len() as f64;
            g.backward(loss)?;
            let grads = g.param_grads();
            let updates = g.take_buffer_updates();
            opt.step(&mut model.store, &grads, frozen_groups);
            model.store.apply_buffer_updates(updates);
        }
        history.push(total / images.len() as f64);
    }
    Ok(history)
}

/// Trains every parameter group. Returns the mean loss per epoch.
pub fn train_seg<T: Scalar>(
    model: &mut UNet<T>,
    images: &[ImageTensor<T>],
    masks: &[BinaryMask],
    cfg: &SegTrainConfig,
) -> Result<Vec<f64>> {
    fit(model, images, masks, cfg, 0)
}

/// Continues training with the first `ceil(freeze_fraction * groups)` groups
/// fixed. Frozen weights and their batch-norm statistics stay bit-identical.
pub fn transfer_finetune<T: Scalar>(
    model: &mut UNet<T>,
    images: &[ImageTensor<T>],
    masks: &[BinaryMask],
    cfg: &SegTrainConfig,
) -> Result<Vec<f64>> {
    let frozen = model.store.frozen_prefix(cfg.freeze_fraction)?;
    let saved: Vec<_> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.group < frozen)
        .map(|e| e.value.clone())
        .collect();
    let history = fit(model, images, masks, cfg, frozen)?;
    // running statistics are buffers and would otherwise drift in train mode
    let ids: Vec<usize> = (0..model.store.len())
        .filter(|&i| model.store.entries()[i].group < frozen)
        .collect();
    for (i, v) in ids.into_iter().zip(saved) {
        *model.store.value_mut(crate::nn::ParamId(i)) = v;
    }
    Ok(history)
}

pub fn save_unet<T: Scalar>(path: &Path, model: &UNet<T>, meta: &SegCheckpointMeta) -> Result<()> {
    checkpoint::save(path, &[&model.store], meta)
}

pub fn load_unet<T: Scalar>(path: &Path) -> Result<(UNet<T>, SegCheckpointMeta)> {
    let meta: SegCheckpointMeta = checkpoint::load_meta(path)?;
    let mut model = build_unet(&meta.arch, meta.seed)?;
    checkpoint::load_params(path, &mut [&mut model.store])?;
    Ok((model, meta))
}
