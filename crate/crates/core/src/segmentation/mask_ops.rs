use serde::{Deserialize, Serialize};

use crate::data::image::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Open,
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPostprocessConfig {
    pub threshold: f64,
    pub morph_kernel: usize,
    pub operations: Vec<MorphOp>,
}

impl Default for MaskPostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            morph_kernel: 3,
            operations: vec![MorphOp::Open, MorphOp::Close],
        }
    }
}

impl MaskPostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if self.morph_kernel == 0 || self.morph_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "morphology kernel {} must be odd and >= 1",
                self.morph_kernel
            )));
        }
        Ok(())
    }
}

/// Square-window min (`erode`) or max filter. The window is clipped at the
/// image border, which keeps erosion and dilation an adjoint pair.
fn window_filter(m: &BinaryMask, k: usize, erode: bool) -> BinaryMask {
    let r = k / 2;
    let (h, w) = (m.height(), m.width());
    // separable: rows then columns
    let pass = |src: &[u8], horizontal: bool| -> Vec<u8> {
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut acc = erode;
                for q in lo..=hi {
                    let v = if horizontal {
                        src[y * w + q]
                    } else {
                        src[q * w + x]
                    } == 1;
                    acc = if erode { acc && v } else { acc || v };
                }
                out[y * w + x] = u8::from(acc);
            }
        }
        out
    };
    let rows = pass(m.data(), true);
    BinaryMask::new(h, w, pass(&rows, false)).expect("same shape")
}

pub fn erode(m: &BinaryMask, k: usize) -> BinaryMask {
    window_filter(m, k, true)
}

pub fn dilate(m: &BinaryMask, k: usize) -> BinaryMask {
    window_filter(m, k, false)
}

pub fn open(m: &BinaryMask, k: usize) -> BinaryMask {
    dilate(&erode(m, k), k)
}

pub fn close(m: &BinaryMask, k: usize) -> BinaryMask {
    erode(&dilate(m, k), k)
}

/// Thresholds a soft mask (`>= threshold` is foreground) and applies the
/// configured morphology in order.
pub fn postprocess_mask<T: Scalar>(
    soft: &ImageTensor<T>,
    cfg: &MaskPostprocessConfig,
) -> Result<BinaryMask> {
    cfg.validate()?;
    if soft
        .pixels()
        .iter()
        .any(|v| !(v.to_f64_lossy() >= 0.0 && v.to_f64_lossy() <= 1.0))
    {
        return Err(Error::Range("soft mask values must lie in [0, 1]".into()));
    }
    let t = T::lit(cfg.threshold);
    let mut m = BinaryMask::new(
        soft.height(),
        soft.width(),
        soft.pixels().iter().map(|&v| u8::from(v >= t)).collect(),
    )?;
    for op in &cfg.operations {
        m = match op {
            MorphOp::Open => open(&m, cfg.morph_kernel),
            MorphOp::Close => close(&m, cfg.morph_kernel),
        };
    }
    Ok(m)
}

/// Sørensen–Dice coefficient; 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "dice: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| **x == 1 && **y == 1)
        .count();
    let total = a.count() + b.count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}
