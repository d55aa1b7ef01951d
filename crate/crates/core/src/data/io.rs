//! File formats: PNG images and masks, and the raw tensor file
//! (`height width range_lo range_hi\n` followed by little-endian `f32` pixels).

use std::io::Write;
use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage};

use crate::data::image::{BinaryMask, ImageTensor, MultiChannelImage, ValueRange};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Decodes an image file into 1 (grayscale) or 3 (RGB) channels in `[0, 255]`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<MultiChannelImage<T>> {
    let img = image::open(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img.color() {
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
            (1, img.into_luma8().into_raw())
        }
        _ => (3, img.into_rgb8().into_raw()),
    };
    Ok(MultiChannelImage {
        height,
        width,
        channels,
        data: raw.into_iter().map(|v| T::lit(f64::from(v))).collect(),
        range: ValueRange::BYTE,
    })
}

/// 8-bit grayscale rendering of an image, mapping its declared range onto `0..=255`.
pub fn to_gray8<T: Scalar>(img: &ImageTensor<T>) -> Vec<u8> {
    let r = img.range();
    let span = if r.hi > r.lo { r.hi - r.lo } else { 1.0 };
    img.pixels()
        .iter()
        .map(|v| {
            (((v.to_f64_lossy() - r.lo) / span) * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect()
}

pub fn encode_png_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Shape("pixel buffer does not match image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png<T: Scalar>(path: &Path, img: &ImageTensor<T>) -> Result<()> {
    atomic_write(
        path,
        &encode_png_gray(img.width(), img.height(), &to_gray8(img))?,
    )
}

/// Masks are stored as single-channel PNG, 0 background and 255 foreground.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    atomic_write(path, &encode_png_gray(mask.width(), mask.height(), &px)?)
}

/// Reads a mask PNG; any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(
        h,
        w,
        img.into_raw()
            .into_iter()
            .map(|v| u8::from(v > 0))
            .collect(),
    )
}

pub fn encode_tensor_file<T: Scalar>(img: &ImageTensor<T>) -> Vec<u8> {
    let r = img.range();
    let mut out = format!("{} {} {} {}\n", img.height(), img.width(), r.lo, r.hi).into_bytes();
    for v in img.pixels() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor_file<T: Scalar>(bytes: &[u8]) -> Result<ImageTensor<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Shape("tensor file lacks a header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Shape("tensor header is not UTF-8".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Shape(format!(
            "tensor header `{header}` needs 4 fields"
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Shape(format!("bad header field `{s}`")))
    };
    let (h, w) = (num(parts[0])? as usize, num(parts[1])? as usize);
    let range = ValueRange::new(num(parts[2])?, num(parts[3])?)?;
    let body = &bytes[nl + 1..];
    if body.len() != h * w * 4 {
        return Err(Error::Shape(format!(
            "tensor body holds {} bytes, header implies {}",
            body.len(),
            h * w * 4
        )));
    }
    let px = body
        .chunks_exact(4)
        .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    ImageTensor::new(h, w, px, range)
}

pub fn write_tensor_file<T: Scalar>(path: &Path, img: &ImageTensor<T>) -> Result<()> {
    atomic_write(path, &encode_tensor_file(img))
}

pub fn read_tensor_file<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor_file(&bytes)
}
