//! Procedural desk-scale stand-in for a multi-source chest X-ray cohort.
//!
//! Every image shows two elliptical "lungs" (the foreground mask) on a dark
//! background. Classes differ only inside the lungs by the number of bright
//! disc-shaped opacities: class A has none, class B one, the held-out class
//! one in each lung. Outside the lungs each acquisition source stamps its own
//! marker (an edge bar or corner block) and background level, scaled by
//! `artifact_strength`. In the train split class `k` comes from source `k`
//! with probability `train_source_bias`; the test split draws sources
//! uniformly for every class, so source markers carry no class information
//! at test time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::BinaryMask;
use crate::data::io::{atomic_write, encode_png_gray, write_mask};
use crate::data::manifest::{DatasetManifest, ImageRecord, Label, Split};
use crate::error::{Error, Result};
use crate::nn::params::stable_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub label: Label,
    /// Number of opacities; blob `i` is placed in lung `i % 2`
    /// (or a random lung when there is exactly one).
    pub blobs: usize,
    /// Blob radius as a fraction of the image size.
    pub blob_radius: f64,
    /// Intensity added inside a blob, on the `[0, 1]` scale.
    pub blob_intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub classes: Vec<ClassRecipe>,
    pub artifact_strength: f64,
    /// Images per class per split; held-out classes get no train images.
    pub counts: SynthCounts,
    pub sources: usize,
    pub train_source_bias: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let recipe = |label, blobs| ClassRecipe {
            label,
            blobs,
            blob_radius: 0.09,
            blob_intensity: 0.4,
        };
        Self {
            image_size: 64,
            classes: vec![
                recipe(Label::SyntheticA, 0),
                recipe(Label::SyntheticB, 1),
                recipe(Label::SyntheticUnknown, 2),
            ],
            artifact_strength: 1.0,
            counts: SynthCounts {
                train: 200,
                test: 40,
            },
            sources: 3,
            train_source_bias: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(
                "synthetic image_size must be at least 8".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::Config(
                "at least one class recipe is required".into(),
            ));
        }
        if self.counts.test == 0 || self.counts.train == 0 {
            return Err(Error::Config("counts must be at least 1 per class".into()));
        }
        if self.sources == 0 {
            return Err(Error::Config("at least one source is required".into()));
        }
        if !(self.artifact_strength >= 0.0 && self.artifact_strength.is_finite()) {
            return Err(Error::Config(
                "artifact_strength must be a finite value >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train_source_bias) {
            return Err(Error::Config("train_source_bias must lie in [0, 1]".into()));
        }
        for c in &self.classes {
            if !(c.blob_radius > 0.0 && c.blob_radius < 0.5) {
                return Err(Error::Config(format!(
                    "{}: blob_radius must lie in (0, 0.5)",
                    c.label
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned ellipse in pixel units; pixel `(x, y)` is inside when its
/// centre `(x + 0.5, y + 0.5)` satisfies the ellipse inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub name: String,
    pub label: Label,
    pub split: Split,
    pub source: usize,
    pub lungs: [Ellipse; 2],
    pub blobs: Vec<Disc>,
    pub pixels: Vec<u8>,
    pub mask: BinaryMask,
}

const BACKGROUND: f64 = 0.08;
const MARKER: f64 = 0.6;

fn draw_lungs(size: f64, rng: &mut ChaCha8Rng) -> [Ellipse; 2] {
    let mut j = |spread: f64| rng.random_range(-spread..=spread) * size;
    let ry = 0.30 * size + j(0.02);
    let rx = 0.13 * size + j(0.015);
    let cy = 0.5 * size + j(0.02);
    let gap = j(0.02);
    [
        Ellipse {
            cx: 0.32 * size - gap,
            cy,
            rx,
            ry: ry + j(0.01),
        },
        Ellipse {
            cx: 0.68 * size + gap,
            cy,
            rx: rx + j(0.01),
            ry,
        },
    ]
}

fn place_blob(lung: &Ellipse, r: f64, rng: &mut ChaCha8Rng) -> Disc {
    // centre drawn in the ellipse shrunk by the radius so the disc stays inside
    let (ax, ay) = ((lung.rx - r).max(0.5), (lung.ry - r).max(0.5));
    loop {
        let u: f64 = rng.random_range(-1.0..=1.0);
        let v: f64 = rng.random_range(-1.0..=1.0);
        if u * u + v * v <= 1.0 {
            return Disc {
                cx: lung.cx + u * ax,
                cy: lung.cy + v * ay,
                r,
            };
        }
    }
}

/// Additive marker of `source` at pixel `(x, y)` before strength scaling.
fn source_marker(source: usize, size: usize, x: usize, y: usize) -> f64 {
    let edge = (size / 8).max(1);
    let level = 0.08 * (source / 3 + source % 3) as f64;
    let stamp = match source % 3 {
        0 => x < edge,
        1 => y < edge,
        _ => x >= size - 2 * edge && y >= size - 2 * edge,
    };
    level + if stamp { MARKER } else { 0.0 }
}

fn render_one(
    cfg: &SyntheticConfig,
    recipe: &ClassRecipe,
    split: Split,
    index: usize,
    class_pos: usize,
) -> SynthSample {
    let size = cfg.image_size;
    let sf = size as f64;
    let tag = format!("{}-{}-{}", recipe.label, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(&tag));

    let source = match split {
        Split::Train if rng.random_bool(cfg.train_source_bias) => class_pos % cfg.sources,
        _ => rng.random_range(0..cfg.sources),
    };
    let lungs = draw_lungs(sf, &mut rng);
    let r = recipe.blob_radius * sf;
    let blobs: Vec<Disc> = match recipe.blobs {
        0 => Vec::new(),
        1 => vec![place_blob(&lungs[rng.random_range(0..2)], r, &mut rng)],
        n => (0..n)
            .map(|i| place_blob(&lungs[i % 2], r, &mut rng))
            .collect(),
    };
    let gain: f64 = rng.random_range(0.9..1.1);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mask = BinaryMask::from_fn(size, size, |y, x| lungs.iter().any(|l| l.contains(x, y)));

    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = if mask.get(y, x) {
                // soft vertical gradient with a faint rib-like modulation
                let mut t = gain * (0.30 + 0.12 * py / sf) + 0.03 * (py / sf * 18.0 + phase).sin();
                for b in &blobs {
                    let d = ((px - b.cx).powi(2) + (py - b.cy).powi(2)).sqrt();
                    // one-pixel soft edge
                    t += recipe.blob_intensity * (b.r + 0.5 - d).clamp(0.0, 1.0);
                }
                t + rng.random_range(-0.01..0.01)
            } else {
                BACKGROUND + cfg.artifact_strength * source_marker(source, size, x, y)
            };
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    SynthSample {
        name: format!("{}_{}_{:04}.png", recipe.label, split, index),
        label: recipe.label,
        split,
        source,
        lungs,
        blobs,
        pixels,
        mask,
    }
}

/// Renders the whole dataset in memory, classes in config order, train before test.
pub fn render(cfg: &SyntheticConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut known_pos = 0;
    for recipe in &cfg.classes {
        let pos = known_pos;
        if !recipe.label.is_held_out() {
            known_pos += 1;
            out.extend(
                (0..cfg.counts.train).map(|i| render_one(cfg, recipe, Split::Train, i, pos)),
            );
        }
        out.extend((0..cfg.counts.test).map(|i| render_one(cfg, recipe, Split::Test, i, pos)));
    }
    Ok(out)
}

/// Writes `images/`, `masks/` (same file names) and `manifest.csv` under `dir`.
pub fn synth_generate(cfg: &SyntheticConfig, dir: &Path) -> Result<DatasetManifest> {
    let samples = render(cfg)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = Path::new("images").join(&s.name);
        atomic_write(
            &dir.join(&rel),
            &encode_png_gray(cfg.image_size, cfg.image_size, &s.pixels)?,
        )?;
        write_mask(&dir.join("masks").join(&s.name), &s.mask)?;
        records.push(ImageRecord {
            path: rel,
            label: s.label,
            split: s.split,
            source: format!("src{}", s.source),
        });
    }
    let manifest = DatasetManifest::new(records);
    atomic_write(&dir.join("manifest.csv"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            image_size: 32,
            counts: SynthCounts { train: 3, test: 4 },
            ..Default::default()
        }
    }

    #[test]
    fn held_out_class_never_trains() {
        let s = render(&small()).unwrap();
        assert!(s
            .iter()
            .all(|x| !(x.label.is_held_out() && x.split == Split::Train)));
        assert_eq!(s.len(), 3 + 4 + 3 + 4 + 4);
    }

    #[test]
    fn zero_strength_leaves_sources_indistinguishable() {
        let cfg = SyntheticConfig {
            artifact_strength: 0.0,
            ..small()
        };
        let s = render(&cfg).unwrap();
        let bg = (BACKGROUND * 255.0).round() as u8;
        for x in &s {
            for (i, &p) in x.pixels.iter().enumerate() {
                if x.mask.data()[i] == 0 {
                    assert_eq!(p, bg);
                }
            }
        }
    }

    #[test]
    fn markers_depend_on_source_only_outside_lungs() {
        let s = render(&small()).unwrap();
        for x in &s {
            let markers = (0..32 * 32)
                .filter(|&i| x.mask.data()[i] == 0 && x.pixels[i] > 100)
                .count();
            assert!(markers > 0, "source marker missing on {}", x.name);
        }
    }

    #[test]
    fn blob_counts_follow_recipe() {
        for x in render(&small()).unwrap() {
            let want = match x.label {
                Label::SyntheticA => 0,
                Label::SyntheticB => 1,
                _ => 2,
            };
            assert_eq!(x.blobs.len(), want);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SyntheticConfig {
            counts: SynthCounts { train: 0, test: 1 },
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            artifact_strength: -1.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            image_size: 4,
            ..small()
        }
        .validate()
        .is_err());
    }
}
