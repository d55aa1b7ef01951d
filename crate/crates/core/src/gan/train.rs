use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::arch::{
    build_discriminator, build_generator, Discriminator, GanArch, Generator, Variant,
};
use crate::graph::{sigmoid, Graph};
use crate::nn::params::stable_hash;
use crate::nn::{Adam, AdamConfig, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Maximise `log D(G(z))`.
    NonSaturating,
    /// Minimise `log(1 - D(G(z)))` as written in the minimax game.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub variant: Variant,
    pub arch: GanArch,
    pub epochs: usize,
    pub batch_size: usize,
    /// Real images drawn per generator step to form the RANDGAN context.
    pub context_batch: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub objective: GeneratorObjective,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Randgan,
            arch: GanArch::default(),
            epochs: 25,
            batch_size: 32,
            context_batch: 16,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            objective: GeneratorObjective::NonSaturating,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(
                "gan batch_size must be at least 2 (batch norm)".into(),
            ));
        }
        if self.variant == Variant::Randgan && self.context_batch == 0 {
            return Err(Error::Config("randgan needs context_batch >= 1".into()));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("beta1 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Mean D output on real images over the epoch's discriminator steps.
    pub d_real: f64,
    /// Mean D output on generated images over the same steps.
    pub d_fake: f64,
}

/// Renders the history as `epoch,loss_D,loss_G` text.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss_D,loss_G\n");
    for e in history {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss_d, e.loss_g));
    }
    s
}

/// Draws `batch_size` images uniformly with replacement from `train` `[n, 1, s, s]`.
pub fn sample_context_batch<T: Scalar>(
    train: &Tensor<T>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n = train.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("context source set".into()));
    }
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    Ok(train.select_batch(&idx))
}

pub fn latent_batch<T: Scalar>(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..n * d)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::from_vec(&[n, d], data).expect("n * d values")
}

/// Untrained generator/discriminator pair for `cfg`. Both variants built
/// with the same seed share every discriminator weight and every generator
/// parameter they have in common.
pub fn build_pair<T: Scalar>(cfg: &GanTrainConfig) -> Result<(Generator<T>, Discriminator<T>)> {
    cfg.validate()?;
    Ok((
        build_generator(&cfg.arch, cfg.variant, cfg.seed)?,
        build_discriminator(&cfg.arch, cfg.seed)?,
    ))
}

fn check_finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "{what} diverged at epoch {epoch}; lower the learning rates"
        )))
    }
}

/// Alternating adversarial training over `train` `[n, 1, s, s]` in `[-1, 1]`.
/// One discriminator step then one generator step per minibatch; for RANDGAN
/// each step draws a fresh random context batch from `train`.
pub fn train_gan<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    train: &Tensor<T>,
    cfg: &GanTrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let (n, c, h, w) = train
        .dims4()
        .map_err(|_| Error::Shape("training set must be [n, 1, s, s]".into()))?;
    if n == 0 {
        return Err(Error::Empty("gan training set".into()));
    }
    let s = gen.arch.image_size;
    if c != 1 || h != s || w != s {
        return Err(Error::Shape(format!(
            "training images must be 1x{s}x{s}, got {c}x{h}x{w}"
        )));
    }
    if train.data().iter().any(|v| v.abs() > T::one()) {
        return Err(Error::Range(
            "gan training images must lie in [-1, 1]".into(),
        ));
    }
    let d = gen.arch.latent_dim;
    let randgan = gen.variant == Variant::Randgan;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash("gan-train"));
    let mut opt_g = Adam::new(AdamConfig::new(cfg.lr_generator, cfg.beta1));
    let mut opt_d = Adam::new(AdamConfig::new(cfg.lr_discriminator, cfg.beta1));
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.min(n).max(2);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut sum_real, mut sum_fake, mut steps) =
            (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
        // a trailing single image would give batch norm a zero variance
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("nonempty");
            batches.last_mut().expect("nonempty").extend(tail);
        }
        for idx in batches {
            let m = idx.len().max(2);
            let real = if idx.len() == 1 {
                train.select_batch(&[idx[0], idx[0]])
            } else {
                train.select_batch(&idx)
            };

            // discriminator step
            let z = latent_batch::<T>(m, d, &mut rng);
            let ctx_imgs = if randgan {
                Some(sample_context_batch(train, cfg.context_batch, &mut rng)?)
            } else {
                None
            };
            let fake = {
                let mut g = Graph::new();
                let zv = g.constant(z);
                let ctx = match &ctx_imgs {
                    Some(ci) => {
                        let civ = g.constant(ci.clone());
                        Some(gen.encode(&mut g, civ, Mode::TRAIN_NO_GRAD)?)
                    }
                    None => None,
                };
                let y = gen.forward(&mut g, zv, ctx, Mode::TRAIN_NO_GRAD)?;
                g.value(y).clone()
            };
            let both = Tensor::cat_batch(&[real, fake])?;
            let mut target = vec![T::one(); m];
            target.extend(std::iter::repeat_n(T::zero(), m));
            let mut g = Graph::new();
            let xv = g.constant(both);
            let (logits, _) = disc.forward(&mut g, xv, Mode::TRAIN)?;
            let probs: Vec<f64> = g
                .value(logits)
                .data()
                .iter()
                .map(|&l| sigmoid(l).to_f64_lossy())
                .collect();
            // mean over 2m samples, times two = BCE(real, 1) + BCE(fake, 0)
            let bce = g.bce_with_logits(logits, &target)?;
            let loss_d = g.scale(bce, T::lit(2.0));
            let ld = check_finite(
                g.value(loss_d).data()[0].to_f64_lossy(),
                "discriminator loss",
                epoch,
            )?;
            g.backward(loss_d)?;
            opt_d.step(&mut disc.store, &g.param_grads(), 0);
            sum_real += probs[..m].iter().sum::<f64>() / m as f64;
            sum_fake += probs[m..].iter().sum::<f64>() / m as f64;

            // generator step
            let z = latent_batch::<T>(m, d, &mut rng);
            let ctx_imgs = if randgan {
                Some(sample_context_batch(train, cfg.context_batch, &mut rng)?)
            } else {
                None
            };
            let mut g = Graph::new();
            let zv = g.constant(z);
            let ctx = match ctx_imgs {
                Some(ci) => {
                    let civ = g.constant(ci);
                    Some(gen.encode(&mut g, civ, Mode::TRAIN)?)
                }
                None => None,
            };
            let y = gen.forward(&mut g, zv, ctx, Mode::TRAIN)?;
            let (logits, _) = disc.forward(&mut g, y, Mode::EVAL)?;
            let loss_g = match cfg.objective {
                GeneratorObjective::NonSaturating => {
                    g.bce_with_logits(logits, &vec![T::one(); m])?
                }
                GeneratorObjective::Saturating => {
                    let b = g.bce_with_logits(logits, &vec![T::zero(); m])?;
                    g.scale(b, -T::one())
                }
            };
            let lg = check_finite(
                g.value(loss_g).data()[0].to_f64_lossy(),
                "generator loss",
                epoch,
            )?;
            g.backward(loss_g)?;
            let updates = g.take_buffer_updates();
            opt_g.step(&mut gen.store, &g.param_grads(), 0);
            gen.store.apply_buffer_updates(updates);

            sum_d += ld;
            sum_g += lg;
            steps += 1;
        }
        let k = steps as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            loss_d: sum_d / k,
            loss_g: sum_g / k,
            d_real: sum_real / k,
            d_fake: sum_fake / k,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> GanTrainConfig {
        GanTrainConfig {
            variant,
            arch: GanArch {
                image_size: 8,
                latent_dim: 4,
                gen_width: 8,
                disc_width: 4,
                context_width: 4,
                context_dim: 3,
                feature_tap: 3,
                trunk_blocks: 1,
            },
            epochs: 1,
            batch_size: 4,
            context_batch: 3,
            ..Default::default()
        }
    }

    fn images(n: usize) -> Tensor<f64> {
        let data = (0..n * 64)
            .map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0).clamp(-1.0, 1.0))
            .collect();
        Tensor::from_vec(&[n, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn smoke_epoch_changes_parameters() {
        let cfg = tiny_cfg(Variant::Randgan);
        let (mut g, mut d) = build_pair::<f64>(&cfg).unwrap();
        let (g0, d0) = (g.store.fingerprint(), d.store.fingerprint());
        let h = train_gan(&mut g, &mut d, &images(8), &cfg).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h[0].loss_d.is_finite() && h[0].loss_g.is_finite());
        assert_ne!(g.store.fingerprint(), g0);
        assert_ne!(d.store.fingerprint(), d0);
    }

    #[test]
    fn training_is_seeded() {
        let cfg = GanTrainConfig {
            epochs: 2,
            ..tiny_cfg(Variant::Anogan)
        };
        let run = || {
            let (mut g, mut d) = build_pair::<f64>(&cfg).unwrap();
            let h = train_gan(&mut g, &mut d, &images(5), &cfg).unwrap();
            (g.store.fingerprint(), d.store.fingerprint(), h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn context_sampling_is_uniform() {
        let set = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0f64, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = sample_context_batch(&set, 10_000, &mut rng).unwrap();
        let ones = b.data().iter().filter(|&&v| v == 1.0).count() as f64 / 10_000.0;
        assert!((ones - 0.5).abs() <= 0.02, "{ones}");
        let single = Tensor::from_vec(&[1, 1, 1, 1], vec![0.25f64]).unwrap();
        assert!(sample_context_batch(&single, 3, &mut rng)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.25));
        let empty = Tensor::<f64>::zeros(&[0, 1, 1, 1]);
        assert!(sample_context_batch(&empty, 3, &mut rng).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let cfg = tiny_cfg(Variant::Anogan);
        let (mut g, mut d) = build_pair::<f64>(&cfg).unwrap();
        assert!(train_gan(&mut g, &mut d, &Tensor::zeros(&[0, 1, 8, 8]), &cfg).is_err());
        assert!(train_gan(&mut g, &mut d, &Tensor::full(&[2, 1, 8, 8], 2.0), &cfg).is_err());
        assert!(train_gan(&mut g, &mut d, &Tensor::zeros(&[2, 1, 4, 4]), &cfg).is_err());
    }
}
