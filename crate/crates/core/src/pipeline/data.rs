//! Two-class image corpora on disk: ingestion and synthetic generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::checksum::fnv1a_bytes;
use crate::classify::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Augmented,
    Denoised,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Augmented => "augmented",
            Provenance::Denoised => "denoised",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub label: Label,
}

/// A decoded corpus: `items[i]` was read into `images[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
    pub images: Vec<LabeledImage>,
    pub provenance: Provenance,
}

impl Dataset {
    /// `(benign, malignant)`.
    pub fn counts(&self) -> (usize, usize) {
        let m = self.items.iter().filter(|i| i.label == Label::Malignant).count();
        (self.items.len() - m, m)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Hash of every item's relative path, label and pixels, in order.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325;
        for (item, img) in self.items.iter().zip(&self.images) {
            let rel = item.path.strip_prefix(&self.root).unwrap_or(&item.path);
            h = fnv1a_bytes(h, rel.to_string_lossy().as_bytes());
            h = fnv1a_bytes(h, item.label.name().as_bytes());
            h = fnv1a_bytes(h, &img.image.checksum().to_le_bytes());
        }
        h
    }
}

/// Files that failed to decode, with the reason.
pub type Skipped = Vec<(PathBuf, String)>;

fn is_image_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    !name.starts_with('.') && matches!(ext.as_deref(), Some("pgm" | "png"))
}

/// Reads `root/benign` and `root/malignant` in lexicographic order. Any
/// `.pgm`/`.png` file that fails to decode aborts the ingest unless
/// `skip_bad` is set, in which case it is returned in the skipped list.
pub fn ingest(root: &Path, skip_bad: bool) -> Result<(Dataset, Skipped)> {
    let mut items = Vec::new();
    let mut images = Vec::new();
    let mut bad = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            return Err(Error::invalid(format!("{} is missing the {} subdirectory", root.display(), label.name())));
        }
        let mut paths = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && is_image_file(&path) {
                paths.push(path);
            }
        }
        paths.sort();
        for path in paths {
            match Image::load(&path) {
                Ok(image) => {
                    images.push(LabeledImage { image, label });
                    items.push(DatasetItem { path, label });
                }
                Err(e) => bad.push((path, e.to_string())),
            }
        }
    }
    if !bad.is_empty() && !skip_bad {
        let list: Vec<String> = bad.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect();
        return Err(Error::format("dataset", format!("undecodable files:\n  {}", list.join("\n  "))));
    }
    Ok((
        Dataset {
            root: root.to_path_buf(),
            items,
            images,
            provenance: Provenance::Original,
        },
        bad,
    ))
}

/// A mass image: textured background, a dark mass with a smooth (benign)
/// or lobulated (malignant) margin, posterior enhancement (benign) or
/// shadowing (malignant) below it, then multiplicative gamma speckle.
fn synth_one(rng: &mut ChaCha8Rng, label: Label, size: usize) -> Image {
    let s = size as f64;
    let speckle = Gamma::new(10.0, 0.1).expect("valid gamma");
    let cy = s * rng.random_range(0.38..0.52);
    let cx = s * rng.random_range(0.4..0.6);
    let a = s * rng.random_range(0.24..0.32);
    let b = s * rng.random_range(0.2..0.28);
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    let (lobes, amp, shift, posterior) = match label {
        Label::Benign => (0.0, 0.0, 0.0, rng.random_range(0.08..0.16)),
        Label::Malignant => (
            rng.random_range(3..=4) as f64,
            rng.random_range(0.35..0.5),
            rng.random_range(0.0..std::f64::consts::TAU),
            -rng.random_range(0.12..0.2),
        ),
    };
    let bg = rng.random_range(0.5..0.6);
    let (fy, fx, tp) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..6.3));
    let mass = rng.random_range(0.12..0.2);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = (dx * phi.cos() + dy * phi.sin()) / a;
            let v = (-dx * phi.sin() + dy * phi.cos()) / b;
            let rho = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let edge = 1.0 + amp * (lobes * theta + shift).sin();
            let inside = 1.0 / (1.0 + ((rho - edge) * 8.0).exp());
            // acoustic column below the mass, fading with depth
            let width = a.max(b);
            let column = if dy > 0.0 && dx.abs() < width { (1.0 - dx.abs() / width) * (-dy / s).exp() } else { 0.0 };
            let texture = bg + 0.04 * (fy * y as f64 / s * 6.3 + fx * x as f64 / s * 6.3 + tp).sin() + posterior * column;
            let clean = texture * (1.0 - inside) + mass * inside;
            px.push((clean * speckle.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Image::new(size, size, px).expect("pixels are clamped")
}

/// `per_class` benign then `per_class` malignant images, bit-identical for
/// a fixed seed. Identifiers are `benign_000`, `malignant_000`, ...
pub fn synthesize(per_class: usize, size: usize, seed: u64) -> Result<Vec<(String, LabeledImage)>> {
    if per_class == 0 || size < 16 {
        return Err(Error::invalid("need at least one image per class and size of at least 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for label in Label::ALL {
        for i in 0..per_class {
            let image = synth_one(&mut rng, label, size);
            out.push((format!("{}_{i:03}", label.name()), LabeledImage { image, label }));
        }
    }
    Ok(out)
}

/// Writes a synthetic corpus as PGM files under `root/<label>/` and
/// returns it as ingested from disk.
pub fn gen_synthetic(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    for label in Label::ALL {
        let dir = root.join(label.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (id, s) in synthesize(per_class, size, seed)? {
        s.image.save(&root.join(s.label.name()).join(format!("{id}.pgm")))?;
    }
    Ok(ingest(root, false)?.0)
}
