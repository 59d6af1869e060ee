//! Rotation, scaling and flipping baselines with bilinear resampling about
//! the image centre. Samples falling outside the image take the nearest
//! edge pixel, so outputs keep the input size.

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mirror left to right.
    Horizontal,
    /// Mirror top to bottom.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricOp {
    /// Counter-clockwise as displayed, in degrees.
    Rotate(f64),
    /// Magnification about the centre.
    Scale(f64),
    Flip(Axis),
}

impl GeometricOp {
    pub fn tag(&self) -> String {
        match self {
            GeometricOp::Rotate(d) => format!("rot{d}"),
            GeometricOp::Scale(s) => format!("scale{s}"),
            GeometricOp::Flip(Axis::Horizontal) => "fliph".into(),
            GeometricOp::Flip(Axis::Vertical) => "flipv".into(),
        }
    }
}

/// Three rotations, one zoom and one mirror.
pub fn baseline_ops() -> Vec<GeometricOp> {
    vec![
        GeometricOp::Rotate(90.0),
        GeometricOp::Rotate(180.0),
        GeometricOp::Rotate(270.0),
        GeometricOp::Scale(1.2),
        GeometricOp::Flip(Axis::Horizontal),
    ]
}

fn bilinear(img: &Image, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Cosine and sine, exact at multiples of 90°.
fn cos_sin(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter == quarter.round() {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

pub fn geometric_augment(image: &Image, op: GeometricOp) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let px = match op {
        GeometricOp::Flip(axis) => (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                match axis {
                    Axis::Horizontal => image.get(y, w - 1 - x),
                    Axis::Vertical => image.get(h - 1 - y, x),
                }
            })
            .collect(),
        GeometricOp::Rotate(deg) => {
            if !deg.is_finite() {
                return Err(Error::invalid("rotation angle must be finite"));
            }
            let (c, s) = cos_sin(deg);
            (0..h * w)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    bilinear(image, cy + c * dy + s * dx, cx - s * dy + c * dx)
                })
                .collect()
        }
        GeometricOp::Scale(k) => {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::invalid("scale factor must be positive"));
            }
            (0..h * w)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    bilinear(image, cy + dy / k, cx + dx / k)
                })
                .collect()
        }
    };
    Image::from_clamped(h, w, px)
}
