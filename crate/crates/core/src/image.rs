//! Grayscale images and the raster file formats used by the pipeline.
//!
//! PGM (`P5`, 8-bit) is the native format; `.png` paths go through the
//! `image` crate. Intensities map linearly between `0..=255` and `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checksum::fnv1a_f64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest accepted edge length, set by the feature network's three 2×
/// pooling stages.
pub const MIN_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(Error::invalid(format!(
                "image is {height}x{width}; both extents must be at least {MIN_EXTENT}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "pixel {i} = {} lies outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Like [`Image::new`] but clamps intensities into `[0, 1]` first.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: "image pixel".into(),
                });
            }
            *p = p.clamp(0.0, 1.0);
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// `[1, height, width]` activation tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![1, self.height, self.width], self.pixels.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(Error::invalid(format!("expected one channel, got {c}")));
        }
        Self::new(h, w, t.data().to_vec())
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn checksum(&self) -> u64 {
        fnv1a_f64(&self.pixels)
    }

    /// Loads a `.pgm` or `.png` file.
    pub fn load(path: &Path) -> Result<Self> {
        match extension(path).as_deref() {
            Some("png") => {
                let img = image::open(path)?.into_luma8();
                let (w, h) = img.dimensions();
                let pixels = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
                Self::new(h as usize, w as usize, pixels)
            }
            _ => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                decode_pgm(&bytes).map_err(|e| match e {
                    Error::Format { reason, .. } => Error::format(path.display().to_string(), reason),
                    other => other,
                })
            }
        }
    }

    /// Writes 8-bit grayscale; PNG when the extension says so, PGM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| quantize(p)).collect();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        match extension(path).as_deref() {
            Some("png") => {
                image::save_buffer(
                    path,
                    &bytes,
                    self.width as u32,
                    self.height as u32,
                    image::ExtendedColorType::L8,
                )?;
                Ok(())
            }
            _ => {
                let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
                out.extend_from_slice(&bytes);
                fs::write(path, out).map_err(|e| Error::io(path, e))
            }
        }
    }

    /// The image as it would read back after an 8-bit save.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| quantize(p) as f64 / 255.0)
                .collect(),
        }
    }
}

fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |reason: &str| Error::format("PGM", reason);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 files are supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    let pixels = raster.iter().map(|&b| (b as f64 / maxval as f64).min(1.0)).collect();
    Image::new(h, w, pixels)
}

/// Writes an RGB raster: PNG for `.png`, binary PPM otherwise.
pub fn save_rgb(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::invalid("rgb buffer does not match extents"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    match extension(path).as_deref() {
        Some("png") => {
            image::save_buffer(path, &flat, width as u32, height as u32, image::ExtendedColorType::Rgb8)?;
            Ok(())
        }
        _ => {
            let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write!(f, "P6\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
            f.write_all(&flat).map_err(|e| Error::io(path, e))
        }
    }
}

/// Reads back a binary PPM written by [`save_rgb`].
pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::format("PPM", "truncated header"))?;
    let header = std::str::from_utf8(&bytes[..text_end]).map_err(|_| Error::format("PPM", "bad header"))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("P6") {
        return Err(Error::format("PPM", "expected P6"));
    }
    let mut num = || -> Result<usize> {
        it.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("PPM", "bad header field"))
    };
    let (w, h, _max) = (num()?, num()?, num()?);
    let data = bytes
        .get(text_end + 1..text_end + 1 + 3 * w * h)
        .ok_or_else(|| Error::format("PPM", "truncated raster"))?;
    Ok((w, h, data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()))
}
