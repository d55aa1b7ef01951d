//! Minimal ROC chart renderer: unit square, chance diagonal and one polyline
//! per curve, written as an RGB PNG.

use image::{DynamicImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::fusion_eval::auc::RocPoint;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [0, 0, 0],
];
const MARGIN: u32 = 24;

struct Canvas {
    img: RgbImage,
    side: u32,
}

impl Canvas {
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let span = f64::from(self.side - 2 * MARGIN);
        (
            f64::from(MARGIN) + x.clamp(0.0, 1.0) * span,
            f64::from(self.side - MARGIN) - y.clamp(0.0, 1.0) * span,
        )
    }

    fn dot(&mut self, x: f64, y: f64, c: [u8; 3], thick: i64) {
        for dy in -thick / 2..=thick / 2 {
            for dx in -thick / 2..=thick / 2 {
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < self.side && (py as u32) < self.side {
                    self.img.put_pixel(px as u32, py as u32, Rgb(c));
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3], thick: i64, dashed: bool) {
        let (p, q) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        let steps = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            if dashed && (i / 4) % 2 == 1 {
                continue;
            }
            let t = i as f64 / steps as f64;
            self.dot(p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), c, thick);
        }
    }
}

/// PNG bytes of a `side x side` chart of the given curves.
pub fn render_roc_png(curves: &[Vec<RocPoint>], side: u32) -> Result<Vec<u8>> {
    if side < 4 * MARGIN {
        return Err(Error::Config(format!(
            "plot side must be at least {}",
            4 * MARGIN
        )));
    }
    if curves.is_empty() || curves.iter().any(Vec::is_empty) {
        return Err(Error::Empty("roc curve".into()));
    }
    let mut c = Canvas {
        img: RgbImage::from_pixel(side, side, Rgb([255, 255, 255])),
        side,
    };
    c.line((0.0, 0.0), (1.0, 1.0), [170, 170, 170], 1, true);
    for (a, b) in [
        ((0.0, 0.0), (1.0, 0.0)),
        ((1.0, 0.0), (1.0, 1.0)),
        ((1.0, 1.0), (0.0, 1.0)),
        ((0.0, 1.0), (0.0, 0.0)),
    ] {
        c.line(a, b, [0, 0, 0], 1, false);
    }
    for (k, pts) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for w in pts.windows(2) {
            c.line((w[0].fpr, w[0].tpr), (w[1].fpr, w[1].tpr), color, 2, false);
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(c.img).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_decodable_png() {
        let pts = vec![
            RocPoint {
                fpr: 0.0,
                tpr: 0.0,
                threshold: f64::INFINITY,
            },
            RocPoint {
                fpr: 0.0,
                tpr: 1.0,
                threshold: 1.0,
            },
            RocPoint {
                fpr: 1.0,
                tpr: 1.0,
                threshold: 0.0,
            },
        ];
        let png = render_roc_png(&[pts], 200).unwrap();
        let img = image::load_from_memory(&png).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (200, 200));
        // the perfect curve runs up the left edge in the first palette colour
        assert_eq!(img.get_pixel(MARGIN, 100).0, PALETTE[0]);
        assert!(render_roc_png(&[], 200).is_err());
    }
}
