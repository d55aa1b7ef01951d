//! Pixel preprocessing: grayscale, bilinear resize, range normalisation and
//! mask application. The full chain always runs in that order.

use serde::{Deserialize, Serialize};

use crate::data::image::{BinaryMask, ImageTensor, MultiChannelImage, OutputRange, ValueRange};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub output_range: OutputRange,
    pub interpolation: Interpolation,
}

impl PreprocessConfig {
    /// 128x128 in [-1, 1], the GAN input contract.
    pub fn gan() -> Self {
        Self {
            target_size: 128,
            output_range: OutputRange::Symmetric,
            interpolation: Interpolation::Bilinear,
        }
    }

    /// 256x256 in [0, 1], the segmentation input contract.
    pub fn segmentation() -> Self {
        Self {
            target_size: 256,
            output_range: OutputRange::Unit,
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::gan()
    }
}

pub fn to_grayscale<T: Scalar>(img: &MultiChannelImage<T>) -> Result<ImageTensor<T>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let [wr, wg, wb] = LUMA_WEIGHTS.map(T::lit);
    let (lo, hi) = (T::lit(img.range.lo), T::lit(img.range.hi));
    let px = img
        .data
        .chunks_exact(3)
        .map(|p| {
            // equal channels must come back unchanged; the weighted sum can be off by an ulp
            if p[0] == p[1] && p[1] == p[2] {
                p[0]
            } else {
                (wr * p[0] + wg * p[1] + wb * p[2]).max(lo).min(hi)
            }
        })
        .collect();
    ImageTensor::new(img.height, img.width, px, img.range)
}

/// Converts a decoded image with 1 or 3 channels to a single-channel tensor.
pub fn to_single_channel<T: Scalar>(img: &MultiChannelImage<T>) -> Result<ImageTensor<T>> {
    match img.channels {
        1 => ImageTensor::new(img.height, img.width, img.data.clone(), img.range),
        3 => to_grayscale(img),
        c => Err(Error::Shape(format!("unsupported channel count {c}"))),
    }
}

/// Bilinear resampling with half-pixel centres, clamped to the declared range.
pub fn resize<T: Scalar>(img: &ImageTensor<T>, size: usize) -> Result<ImageTensor<T>> {
    if size == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if img.height() == size && img.width() == size {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / size as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(size, h);
    let xs = axis(size, w);
    let range = img.range();
    let (lo, hi) = (T::lit(range.lo), T::lit(range.hi));
    let mut px = Vec::with_capacity(size * size);
    for &(y0, y1, fy) in &ys {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            let top = img.get(y0, x0) * (T::one() - fx) + img.get(y0, x1) * fx;
            let bot = img.get(y1, x0) * (T::one() - fx) + img.get(y1, x1) * fx;
            px.push((top * (T::one() - fy) + bot * fy).max(lo).min(hi));
        }
    }
    ImageTensor::new(size, size, px, range)
}

/// Affine map of the image's declared range onto `target`.
///
/// A degenerate source range (`lo == hi`) maps every pixel to the midpoint of `target`.
pub fn normalize<T: Scalar>(img: &ImageTensor<T>, target: ValueRange) -> Result<ImageTensor<T>> {
    let src = img.range();
    let (tlo, thi) = (T::lit(target.lo), T::lit(target.hi));
    let px: Vec<T> = if src.hi == src.lo {
        vec![T::lit(target.midpoint()); img.pixels().len()]
    } else {
        let scale = T::lit((target.hi - target.lo) / (src.hi - src.lo));
        let slo = T::lit(src.lo);
        img.pixels()
            .iter()
            .map(|&v| ((v - slo) * scale + tlo).max(tlo).min(thi))
            .collect()
    };
    ImageTensor::new(img.height(), img.width(), px, target)
}

/// Inverse of [`normalize`]: maps the image back onto `original`.
pub fn denormalize<T: Scalar>(
    img: &ImageTensor<T>,
    original: ValueRange,
) -> Result<ImageTensor<T>> {
    normalize(img, original)
}

/// Keeps pixels under the mask and sets the rest to the range minimum.
pub fn apply_mask<T: Scalar>(img: &ImageTensor<T>, mask: &BinaryMask) -> Result<ImageTensor<T>> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let bg = T::lit(img.range().lo);
    let px = img
        .pixels()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m == 1 { v } else { bg })
        .collect();
    ImageTensor::new(img.height(), img.width(), px, img.range())
}

/// grayscale -> resize -> normalize -> (optional) mask.
///
/// A mask of a different size is first resampled to the target size with
/// nearest-neighbour interpolation.
pub fn preprocess<T: Scalar>(
    img: &MultiChannelImage<T>,
    mask: Option<&BinaryMask>,
    cfg: &PreprocessConfig,
) -> Result<ImageTensor<T>> {
    cfg.validate()?;
    let gray = to_single_channel(img)?;
    let sized = resize(&gray, cfg.target_size)?;
    let normed = normalize(&sized, cfg.output_range.range())?;
    match mask {
        None => Ok(normed),
        Some(m) => {
            let m = if m.height() == cfg.target_size && m.width() == cfg.target_size {
                m.clone()
            } else {
                m.resize_nearest(cfg.target_size, cfg.target_size)?
            };
            apply_mask(&normed, &m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn byte_img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor<f64> {
        ImageTensor::new(
            h,
            w,
            (0..h * w).map(|i| f(i / w, i % w)).collect(),
            ValueRange::BYTE,
        )
        .unwrap()
    }

    #[test]
    fn gray_input_is_a_fixed_point() {
        let data: Vec<f64> = (0..12).flat_map(|i| [i as f64 * 20.0; 3]).collect();
        let img = MultiChannelImage {
            height: 3,
            width: 4,
            channels: 3,
            data,
            range: ValueRange::BYTE,
        };
        let g = to_grayscale(&img).unwrap();
        let want: Vec<f64> = (0..12).map(|i| i as f64 * 20.0).collect();
        assert_eq!(g.pixels(), &want[..]);
    }

    #[test]
    fn white_stays_white_and_colour_uses_luma() {
        let img = MultiChannelImage {
            height: 1,
            width: 2,
            channels: 3,
            data: vec![255.0, 255.0, 255.0, 100.0, 200.0, 50.0],
            range: ValueRange::BYTE,
        };
        let g = to_grayscale(&img).unwrap();
        assert_eq!(g.pixels()[0], 255.0);
        // independent per-pixel dot product
        let oracle = [100.0, 200.0, 50.0]
            .iter()
            .zip([0.299, 0.587, 0.114])
            .map(|(a, b)| a * b)
            .sum::<f64>();
        assert!((g.pixels()[1] - oracle).abs() < 1e-12);
        assert!((oracle - 153.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let img = MultiChannelImage {
            height: 1,
            width: 1,
            channels: 2,
            data: vec![0.0, 0.0],
            range: ValueRange::BYTE,
        };
        assert!(to_grayscale(&img).is_err());
    }

    #[test]
    fn identity_resize_is_bitwise() {
        let img = byte_img(128, 128, |y, x| ((y * 7 + x * 13) % 256) as f64);
        let r = resize(&img, 128).unwrap();
        assert_eq!(r, img);
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = byte_img(17, 9, |_, _| 42.0);
        for s in [1, 4, 30] {
            assert!(resize(&img, s).unwrap().pixels().iter().all(|&v| v == 42.0));
        }
    }

    #[test]
    fn checkerboard_downsamples_to_block_average() {
        // 4x4 checkerboard of 0/255; every output pixel sits at the centre of a
        // 2x2 block so bilinear weights are all 1/4.
        let img = byte_img(4, 4, |y, x| if (y + x) % 2 == 0 { 255.0 } else { 0.0 });
        let r = resize(&img, 2).unwrap();
        assert_eq!(r.pixels(), &[127.5; 4]);
        // a non-symmetric pattern: hand computed block means
        let img = byte_img(4, 4, |y, x| (y * 4 + x) as f64);
        let r = resize(&img, 2).unwrap();
        assert_eq!(r.pixels(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resize_zero_is_error() {
        assert!(resize(&byte_img(2, 2, |_, _| 0.0), 0).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let img = byte_img(1, 3, |_, x| [0.0, 127.5, 255.0][x]);
        let n = normalize(&img, ValueRange::SYMMETRIC).unwrap();
        assert_eq!(n.pixels(), &[-1.0, 0.0, 1.0]);
        assert_eq!(n.range(), ValueRange::SYMMETRIC);
    }

    #[test]
    fn degenerate_range_maps_to_target_midpoint() {
        let img =
            ImageTensor::new(1, 2, vec![3.0, 3.0], ValueRange::new(3.0, 3.0).unwrap()).unwrap();
        let n = normalize(&img, ValueRange::UNIT).unwrap();
        assert_eq!(n.pixels(), &[0.5, 0.5]);
    }

    #[test]
    fn mask_cases() {
        let img = normalize(&byte_img(4, 4, |_, _| 200.0), ValueRange::SYMMETRIC).unwrap();
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(apply_mask(&img, &full).unwrap(), img);
        let empty = BinaryMask::zeros(4, 4);
        assert!(apply_mask(&img, &empty)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == -1.0));
        let half = BinaryMask::from_fn(4, 4, |_, x| x < 2);
        let out = apply_mask(&img, &half).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if x < 2 { img.get(y, x) } else { -1.0 };
                assert_eq!(out.get(y, x), want);
            }
        }
        assert!(apply_mask(&img, &BinaryMask::zeros(3, 4)).is_err());
    }

    proptest! {
        #[test]
        fn normalize_round_trip(lo in -100.0f64..100.0, width in 0.01f64..500.0, vals in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let src = ValueRange::new(lo, lo + width).unwrap();
            let px: Vec<f64> = vals.iter().map(|t| lo + t * width).collect();
            let img = ImageTensor::new(1, px.len(), px.clone(), src).unwrap();
            let back = denormalize(&normalize(&img, ValueRange::SYMMETRIC).unwrap(), src).unwrap();
            for (a, b) in back.pixels().iter().zip(&px) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn apply_mask_is_idempotent(bits in prop::collection::vec(0u8..2, 36), vals in prop::collection::vec(-1.0f64..1.0, 36)) {
            let img = ImageTensor::new(6, 6, vals, ValueRange::SYMMETRIC).unwrap();
            let m = BinaryMask::new(6, 6, bits).unwrap();
            let once = apply_mask(&img, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }
    }
}
