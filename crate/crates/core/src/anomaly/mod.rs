//! Latent-space inversion of a trained pair and the resulting anomaly score
//! `A(x) = (1 - λ) R(x) + λ D(x)`, where `R` is the L1 pixel residual and `D`
//! the L1 distance between discriminator features of the query and of its
//! reconstruction.

pub mod scores;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::image::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::graph::{Graph, Var};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use scores::{read_scores, scores_csv, write_scores, ScoreRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOptimizer {
    /// `z -= step * grad`.
    GradientDescent,
    /// Adam on z with the DCGAN momentum setting.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// Half-cosine decay from `step_size` to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: LatentOptimizer,
    pub schedule: StepSchedule,
    /// Upper bound on samples (queries x restarts) per forward pass.
    pub chunk: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.01,
            restarts: 3,
            lambda: 0.2,
            seed: 0,
            optimizer: LatentOptimizer::GradientDescent,
            schedule: StepSchedule::Constant,
            chunk: 96,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.chunk == 0 {
            return Err(Error::Config(
                "inversion steps, restarts and chunk must be >= 1".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("inversion step_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step_size,
            StepSchedule::Cosine => {
                self.step_size
                    * 0.5
                    * (1.0 + (std::f64::consts::PI * t as f64 / self.steps as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult<T> {
    pub best_z: Vec<T>,
    pub residual: f64,
    pub discrimination: f64,
    pub score: f64,
    pub reconstruction: ImageTensor<T>,
    /// Restarts that finished with a finite loss.
    pub restarts_used: usize,
}

/// `(1 - λ) R + λ D`.
pub fn combine(residual: f64, discrimination: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * residual + lambda * discrimination
}

/// `Σ |x - G(z)|` over all pixels.
pub fn residual_loss<T: Scalar>(x: &ImageTensor<T>, gz: &ImageTensor<T>) -> Result<f64> {
    if x.height() != gz.height() || x.width() != gz.width() {
        return Err(Error::Shape(format!(
            "residual: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            gz.height(),
            gz.width()
        )));
    }
    Ok(l1(x.pixels(), gz.pixels()))
}

/// `Σ |f(x) - f(G(z))|`.
pub fn discrimination_loss<T: Scalar>(fx: &[T], fgz: &[T]) -> Result<f64> {
    if fx.len() != fgz.len() {
        return Err(Error::Shape(format!(
            "features of length {} vs {}",
            fx.len(),
            fgz.len()
        )));
    }
    Ok(l1(fx, fgz))
}

fn l1<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| (p - q).abs().to_f64_lossy())
        .sum()
}

fn check_query<T: Scalar>(model: &GanModel<T>, x: &ImageTensor<T>) -> Result<()> {
    let s = model.arch().image_size;
    if x.height() != s || x.width() != s {
        return Err(Error::Shape(format!(
            "query must be {s}x{s}, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    if x.range() != ValueRange::SYMMETRIC {
        return Err(Error::Range("queries must be normalised to [-1, 1]".into()));
    }
    Ok(())
}

/// Per-sample `(R, D)` as graph nodes for latent codes `z` against targets.
struct Objective {
    residual: Var,
    discrimination: Var,
    image: Var,
}

fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &GanModel<T>,
    z: Var,
    targets: &Tensor<T>,
    target_features: &Tensor<T>,
) -> Result<Objective> {
    let ctx = match &model.context {
        Some(c) => Some(g.constant(model.gen.context_tensor(c)?)),
        None => None,
    };
    let image = model.gen.forward(g, z, ctx, Mode::EVAL)?;
    let xt = g.constant(targets.clone());
    let residual = g.l1_per_sample(image, xt)?;
    let (_, feat) = model.disc.forward(g, image, Mode::EVAL)?;
    let ft = g.constant(target_features.clone());
    let discrimination = g.l1_per_sample(feat, ft)?;
    Ok(Objective {
        residual,
        discrimination,
        image,
    })
}

fn features<T: Scalar>(model: &GanModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(model.disc.discriminate(images)?.1)
}

/// Total loss at `z` for query `x`.
pub fn total_loss<T: Scalar>(
    x: &ImageTensor<T>,
    z: &[T],
    model: &GanModel<T>,
    lambda: f64,
) -> Result<f64> {
    Ok(total_loss_and_grad(x, z, model, lambda)?.0)
}

/// Total loss at `z` and its analytic gradient with respect to `z`.
pub fn total_loss_and_grad<T: Scalar>(
    x: &ImageTensor<T>,
    z: &[T],
    model: &GanModel<T>,
    lambda: f64,
) -> Result<(f64, Vec<T>)> {
    check_query(model, x)?;
    let d = model.arch().latent_dim;
    if z.len() != d {
        return Err(Error::Shape(format!(
            "z has {} values, model expects {d}",
            z.len()
        )));
    }
    let xt = Tensor::stack(&[&x.to_tensor()])?;
    let fx = features(model, &xt)?;
    let mut g = Graph::new();
    let zv = g.leaf(Tensor::from_vec(&[1, d], z.to_vec())?);
    let obj = build_objective(&mut g, model, zv, &xt, &fx)?;
    let r = g.scale(obj.residual, T::lit(1.0 - lambda));
    let dd = g.scale(obj.discrimination, T::lit(lambda));
    let sum = g.add(r, dd)?;
    let total = g.sum(sum);
    let value = g.value(total).data()[0].to_f64_lossy();
    g.backward(total)?;
    let grad = g
        .grad(zv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![T::zero(); d]);
    Ok((value, grad))
}

/// Initial latent codes for query `index`: `restarts` rows drawn from its own
/// stream, so results do not depend on which other queries share a batch.
pub fn initial_latents<T: Scalar>(seed: u64, index: u64, restarts: usize, d: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..restarts * d)
        .map(|_| T::lit(StandardNormal.sample(&mut rng)))
        .collect()
}

/// Inverts every query. `indices[i]` selects the random stream of query `i`
/// (use its position in the cohort). Queries are processed in chunks of at
/// most `cfg.chunk` samples; the model is only read.
pub fn invert_batch<T: Scalar>(
    model: &GanModel<T>,
    queries: &[ImageTensor<T>],
    indices: &[u64],
    cfg: &InversionConfig,
) -> Result<Vec<AnomalyResult<T>>> {
    cfg.validate()?;
    if queries.len() != indices.len() {
        return Err(Error::Shape(format!(
            "{} queries but {} indices",
            queries.len(),
            indices.len()
        )));
    }
    for q in queries {
        check_query(model, q)?;
    }
    let per_chunk = (cfg.chunk / cfg.restarts).max(1);
    let mut out = Vec::with_capacity(queries.len());
    for (qs, ids) in queries.chunks(per_chunk).zip(indices.chunks(per_chunk)) {
        out.extend(invert_chunk(model, qs, ids, cfg)?);
    }
    Ok(out)
}

pub fn invert_latent<T: Scalar>(
    model: &GanModel<T>,
    x: &ImageTensor<T>,
    cfg: &InversionConfig,
) -> Result<AnomalyResult<T>> {
    Ok(invert_batch(model, std::slice::from_ref(x), &[0], cfg)?.remove(0))
}

pub fn anomaly_score<T: Scalar>(
    x: &ImageTensor<T>,
    model: &GanModel<T>,
    cfg: &InversionConfig,
) -> Result<f64> {
    Ok(invert_latent(model, x, cfg)?.score)
}

fn invert_chunk<T: Scalar>(
    model: &GanModel<T>,
    queries: &[ImageTensor<T>],
    indices: &[u64],
    cfg: &InversionConfig,
) -> Result<Vec<AnomalyResult<T>>> {
    let d = model.arch().latent_dim;
    let r = cfg.restarts;
    let n = queries.len() * r;
    let lambda = cfg.lambda;

    let query_batch = Tensor::stack(
        &queries
            .iter()
            .map(ImageTensor::to_tensor)
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>(),
    )?;
    let fx = features(model, &query_batch)?;
    let rows: Vec<usize> = (0..n).map(|i| i / r).collect();
    let targets = query_batch.select_batch(&rows);
    let target_feats = fx.select_batch(&rows);

    let mut z: Vec<T> = indices
        .iter()
        .flat_map(|&i| initial_latents::<T>(cfg.seed, i, r, d))
        .collect();
    let mut alive = vec![true; n];
    let (b1, b2, eps) = (0.5, 0.999, 1e-8);
    let mut m1 = vec![0.0f64; n * d];
    let mut m2 = vec![0.0f64; n * d];

    for t in 0..cfg.steps {
        let mut g = Graph::new();
        let zv = g.leaf(Tensor::from_vec(&[n, d], z.clone())?);
        let obj = build_objective(&mut g, model, zv, &targets, &target_feats)?;
        let rr = g.scale(obj.residual, T::lit(1.0 - lambda));
        let dd = g.scale(obj.discrimination, T::lit(lambda));
        let per = g.add(rr, dd)?;
        let losses: Vec<f64> = g
            .value(per)
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let total = g.sum(per);
        g.backward(total)?;
        let grad = g.grad(zv).expect("z is a leaf").data().to_vec();
        let lr = cfg.step_at(t);
        for s in 0..n {
            if !alive[s] {
                continue;
            }
            let gs = &grad[s * d..(s + 1) * d];
            if !losses[s].is_finite() || gs.iter().any(|v| !v.is_finite()) {
                alive[s] = false;
                continue;
            }
            for k in 0..d {
                let i = s * d + k;
                let gi = gs[k].to_f64_lossy();
                let delta = match cfg.optimizer {
                    LatentOptimizer::GradientDescent => lr * gi,
                    LatentOptimizer::Adam => {
                        m1[i] = b1 * m1[i] + (1.0 - b1) * gi;
                        m2[i] = b2 * m2[i] + (1.0 - b2) * gi * gi;
                        let mh = m1[i] / (1.0 - b1.powi(t as i32 + 1));
                        let vh = m2[i] / (1.0 - b2.powi(t as i32 + 1));
                        lr * mh / (vh.sqrt() + eps)
                    }
                };
                z[i] = T::lit(z[i].to_f64_lossy() - delta);
            }
        }
    }

    // final evaluation at the returned codes
    let mut g = Graph::new();
    let zv = g.constant(Tensor::from_vec(&[n, d], z.clone())?);
    let obj = build_objective(&mut g, model, zv, &targets, &target_feats)?;
    let res: Vec<f64> = g
        .value(obj.residual)
        .data()
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let dis: Vec<f64> = g
        .value(obj.discrimination)
        .data()
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let images = g.value(obj.image).clone();

    let mut out = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let mut best: Option<(usize, f64)> = None;
        let mut used = 0;
        for s in q * r..(q + 1) * r {
            let a = combine(res[s], dis[s], lambda);
            if !alive[s] || !a.is_finite() {
                continue;
            }
            used += 1;
            if best.is_none_or(|(_, b)| a < b) {
                best = Some((s, a));
            }
        }
        let (s, a) = best.ok_or_else(|| {
            Error::NonFinite(format!("every restart diverged for query {}", indices[q]))
        })?;
        out.push(AnomalyResult {
            best_z: z[s * d..(s + 1) * d].to_vec(),
            residual: res[s],
            discrimination: dis[s],
            score: a,
            reconstruction: ImageTensor::from_batch(&images, s, ValueRange::SYMMETRIC)?,
            restarts_used: used,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{build_discriminator, build_generator, GanArch, Variant};

    fn img(px: Vec<f64>, side: usize) -> ImageTensor<f64> {
        ImageTensor::new(side, side, px, ValueRange::SYMMETRIC).unwrap()
    }

    #[test]
    fn residual_closed_forms() {
        let a = img(vec![1.0; 128 * 128], 128);
        let b = img(vec![-1.0; 128 * 128], 128);
        assert_eq!(residual_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(residual_loss(&a, &b).unwrap(), 32768.0);
        assert!(residual_loss(&a, &img(vec![0.0; 4], 2)).is_err());
    }

    #[test]
    fn discrimination_closed_forms() {
        assert_eq!(
            discrimination_loss(&[1.0f64, 2.0], &[0.0, 0.0]).unwrap(),
            3.0
        );
        assert_eq!(discrimination_loss(&[0.5f64; 4], &[0.5; 4]).unwrap(), 0.0);
        assert!(discrimination_loss(&[0.0f64], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn combine_weights() {
        assert_eq!(combine(10.0, 5.0, 0.2), 9.0);
        assert_eq!(combine(10.0, 5.0, 0.0), 10.0);
        assert_eq!(combine(10.0, 5.0, 1.0), 5.0);
    }

    fn tiny_model() -> GanModel<f64> {
        let arch = GanArch {
            image_size: 8,
            latent_dim: 3,
            gen_width: 8,
            disc_width: 4,
            context_width: 4,
            context_dim: 2,
            feature_tap: 3,
            trunk_blocks: 1,
        };
        let gen = build_generator(&arch, Variant::Anogan, 5).unwrap();
        let disc = build_discriminator(&arch, 5).unwrap();
        GanModel {
            gen,
            disc,
            context: None,
        }
    }

    #[test]
    fn one_step_moves_z_by_one_update() {
        let m = tiny_model();
        let x = img((0..64).map(|i| (i as f64 / 32.0) - 1.0).collect(), 8);
        let cfg = InversionConfig {
            steps: 1,
            restarts: 1,
            ..Default::default()
        };
        let res = invert_latent(&m, &x, &cfg).unwrap();
        let z0 = initial_latents::<f64>(cfg.seed, 0, 1, 3);
        let (_, grad) = total_loss_and_grad(&x, &z0, &m, cfg.lambda).unwrap();
        for k in 0..3 {
            assert!((res.best_z[k] - (z0[k] - cfg.step_size * grad[k])).abs() < 1e-12);
        }
        assert_eq!(
            res.score,
            combine(res.residual, res.discrimination, cfg.lambda)
        );
        assert!(InversionConfig { steps: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn inversion_does_not_touch_the_model() {
        let m = tiny_model();
        let before = m.fingerprint();
        let x = img(vec![0.3; 64], 8);
        let cfg = InversionConfig {
            steps: 5,
            ..Default::default()
        };
        let a = invert_latent(&m, &x, &cfg).unwrap();
        let b = invert_latent(&m, &x, &cfg).unwrap();
        assert_eq!(m.fingerprint(), before);
        assert_eq!(a, b);
        assert_eq!(a.restarts_used, 3);
    }

    #[test]
    fn queries_are_independent_of_batch_mates() {
        let m = tiny_model();
        let xs = vec![img(vec![0.3; 64], 8), img(vec![-0.2; 64], 8)];
        let cfg = InversionConfig {
            steps: 5,
            ..Default::default()
        };
        let both = invert_batch(&m, &xs, &[0, 1], &cfg).unwrap();
        let second = invert_batch(&m, &xs[1..], &[1], &cfg).unwrap();
        assert!((both[1].score - second[0].score).abs() < 1e-9);
    }

    #[test]
    fn wrong_range_is_rejected() {
        let m = tiny_model();
        let x = ImageTensor::new(8, 8, vec![0.5; 64], ValueRange::UNIT).unwrap();
        assert!(invert_latent(&m, &x, &InversionConfig::default()).is_err());
    }
}
