use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Closed interval that every pixel of an image is declared to lie in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    pub const SYMMETRIC: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    pub const BYTE: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::Range(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// The two value ranges models consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRange {
    /// `[0, 1]`, segmentation input.
    Unit,
    /// `[-1, 1]`, GAN input.
    Symmetric,
}

impl OutputRange {
    pub fn range(self) -> ValueRange {
        match self {
            OutputRange::Unit => ValueRange::UNIT,
            OutputRange::Symmetric => ValueRange::SYMMETRIC,
        }
    }
}

/// Single-channel image with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
    range: ValueRange,
}

impl<T: Scalar> ImageTensor<T> {
    /// Builds an image, checking that every pixel lies in `range`.
    pub fn new(height: usize, width: usize, pixels: Vec<T>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must be non-empty".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !range.contains(v.to_f64_lossy())) {
            return Err(Error::Range(format!(
                "pixel {bad} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, value: T, range: ValueRange) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// `[1, h, w]` tensor view for stacking into model batches.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.height, self.width], self.pixels.clone())
            .expect("consistent image")
    }

    /// Reads sample `i` of a `[n, 1, h, w]` batch, clamping into `range`.
    pub fn from_batch(batch: &Tensor<T>, i: usize, range: ValueRange) -> Result<Self> {
        let (_, c, h, w) = batch.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "expected single-channel batch, got {c} channels"
            )));
        }
        let (lo, hi) = (T::lit(range.lo), T::lit(range.hi));
        let px = batch.sample(i).iter().map(|&v| v.max(lo).min(hi)).collect();
        Self::new(h, w, px, range)
    }
}

/// Interleaved multi-channel image, e.g. a decoded RGB file.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
    pub range: ValueRange,
}

/// Binary foreground mask (values 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Range("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Nearest-neighbour resampling (pixel centres mapped to the source grid).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config("mask size must be positive".into()));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Ok(Self::from_fn(height, width, |y, x| {
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(iy, ix)
        }))
    }
}
