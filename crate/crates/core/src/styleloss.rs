//! Content and style losses: Gram form, second-order polynomial MMD form,
//! and the multi-reference max-Gram target with histogram specification.
//!
//! A feature map of `N` channels over `M` positions is read as an `N × M`
//! matrix `F` whose columns `f_k` are per-position channel vectors. For
//! matching `M`, the Gram loss `‖F̂F̂ᵀ − SSᵀ‖² / (4N²M²)` equals the
//! kernel sum `Σ(f̂ᵢᵀf̂ⱼ)² + Σ(sᵢᵀsⱼ)² − 2Σ(f̂ᵢᵀsⱼ)²` under the same scale;
//! [`kernel_expansion_check`] evaluates both sides independently.

pub mod histogram;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featnet::{FeatureStack, LayerId, Network};
use crate::image::Image;
use crate::tensor::Tensor;
pub use histogram::DensityHistogram;

pub const DEFAULT_HISTOGRAM_BINS: usize = 64;

/// Symmetric `N × N` matrix of channel inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    /// Accepts any matrix symmetric within 1e-12.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::invalid(format!("{n}x{n} matrix needs {} entries", n * n)));
        }
        for i in 0..n {
            for j in 0..i {
                if (entries[i * n + j] - entries[j * n + i]).abs() > 1e-12 {
                    return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gram matrix".into(),
            });
        }
        Ok(Self { n, entries })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Upper triangle including the diagonal, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n + 1) / 2);
        for i in 0..self.n {
            out.extend_from_slice(&self.entries[i * self.n + i..(i + 1) * self.n]);
        }
        out
    }

    fn from_upper_triangle(n: usize, upper: &[f64]) -> Self {
        let mut entries = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                entries[i * n + j] = upper[k];
                entries[j * n + i] = upper[k];
                k += 1;
            }
        }
        Self { n, entries }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.n, self.n, &self.entries);
        m.symmetric_eigenvalues().iter().copied().collect()
    }

    /// Positive semi-definite up to `-tol` on the smallest eigenvalue.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.eigenvalues().iter().all(|&l| l >= -tol)
    }
}

/// `(N, M)` of a feature map read as a channel-by-position matrix.
fn extents(f: &Tensor) -> Result<(usize, usize)> {
    let n = *f
        .shape()
        .first()
        .ok_or_else(|| Error::invalid("feature map has no channel axis"))?;
    if n == 0 || f.is_empty() {
        return Err(Error::invalid("empty feature map"));
    }
    Ok((n, f.len() / n))
}

/// `G = F Fᵀ`, summed over spatial positions. Computed on the upper
/// triangle and mirrored, so the result is exactly symmetric.
pub fn gram(f: &Tensor) -> Result<GramMatrix> {
    let (n, m) = extents(f)?;
    let d = f.data();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        let ri = &d[i * m..(i + 1) * m];
        for j in i..n {
            let rj = &d[j * m..(j + 1) * m];
            let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    Ok(GramMatrix { n, entries })
}

/// `Σ(G − T)² / (4 N² M²)`.
pub fn style_layer_loss(g_hat: &GramMatrix, g_ref: &GramMatrix, n_l: usize, m_l: usize) -> Result<f64> {
    if g_hat.n != g_ref.n {
        return Err(Error::ShapeMismatch {
            op: "style_layer_loss",
            left: vec![g_hat.n, g_hat.n],
            right: vec![g_ref.n, g_ref.n],
        });
    }
    if n_l == 0 || m_l == 0 {
        return Err(Error::invalid("N_l and M_l must be positive"));
    }
    let sq: f64 = g_hat
        .entries
        .iter()
        .zip(&g_ref.entries)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq * layer_scale(n_l, m_l))
}

fn layer_scale(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.0 / (4.0 * n * n * m * m)
}

/// Loss weights: `alpha` for content, `beta` for style, per-layer `w_l`, and
/// the style balance factor that scales the proposed loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub layer_weights: BTreeMap<LayerId, f64>,
    pub style_balance: f64,
}

impl LossWeights {
    /// `alpha = beta = 1`, `w_l = 1` on every given layer, balance 1.
    pub fn uniform(layers: &[LayerId]) -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            layer_weights: layers.iter().map(|&l| (l, 1.0)).collect(),
            style_balance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.style_balance]
            .into_iter()
            .chain(self.layer_weights.values().copied());
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {v} must be finite and nonnegative")));
            }
        }
        if !self.layer_weights.values().any(|&w| w > 0.0) {
            return Err(Error::invalid("at least one style layer weight must be positive"));
        }
        Ok(())
    }
}

/// `½ Σ (F̂ − F_c)²` on one layer.
pub fn content_loss(f_hat: &FeatureStack, f_c: &FeatureStack, layer: LayerId) -> Result<f64> {
    Ok(content_value_and_grad(f_hat.get(layer)?, f_c.get(layer)?)?.0)
}

/// Content loss value and its gradient `F̂ − F_c`.
pub fn content_value_and_grad(a: &Tensor, c: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape() != c.shape() {
        return Err(Error::ShapeMismatch {
            op: "content_loss",
            left: a.shape().to_vec(),
            right: c.shape().to_vec(),
        });
    }
    let diff: Vec<f64> = a.data().iter().zip(c.data()).map(|(x, y)| x - y).collect();
    let v = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
    Ok((v, Tensor::from_parts_unchecked(a.shape().to_vec(), diff)))
}

/// `Σ_l w_l E_l` with each `E_l` against the style image's own Gram.
pub fn style_loss(f_hat: &FeatureStack, f_s: &FeatureStack, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (&l, &w) in &weights.layer_weights {
        let a = f_hat.get(l)?;
        let s = f_s.get(l)?;
        if a.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "style_loss",
                left: a.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let (n, m) = extents(a)?;
        total += w * style_layer_loss(&gram(a)?, &gram(s)?, n, m)?;
    }
    Ok(total)
}

/// What to do when output and reference maps have different spatial sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnMatch {
    #[default]
    Strict,
    /// Keep a seeded uniform subset of the larger map's positions.
    Subsample { seed: u64 },
}

/// Columns of an `N × M` map as contiguous per-position vectors.
fn columns(f: &Tensor, keep: Option<&[usize]>) -> (usize, Vec<Vec<f64>>) {
    let n = f.shape()[0];
    let m = f.len() / n;
    let d = f.data();
    let cols: Vec<usize> = keep.map_or_else(|| (0..m).collect(), <[usize]>::to_vec);
    (n, cols.iter().map(|&k| (0..n).map(|i| d[i * m + k]).collect()).collect())
}

fn subsample(m: usize, keep: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, m, keep).into_vec();
    idx.sort_unstable();
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Double-double `hi + lo`. The kernel self and cross sums nearly cancel
/// when two maps have close Grams, so they are accumulated with exact
/// products and compensated additions.
#[derive(Debug, Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    const ZERO: Dd = Dd(0.0, 0.0);

    fn prod(a: f64, b: f64) -> Dd {
        let p = a * b;
        Dd(p, a.mul_add(b, -p))
    }

    fn renorm(s: f64, e: f64) -> Dd {
        let hi = s + e;
        Dd(hi, e - (hi - s))
    }

    fn add(self, o: Dd) -> Dd {
        let s = self.0 + o.0;
        let bb = s - self.0;
        let e = (self.0 - (s - bb)) + (o.0 - bb) + self.1 + o.1;
        Dd::renorm(s, e)
    }

    fn square(self) -> Dd {
        let p = self.0 * self.0;
        Dd::renorm(p, self.0.mul_add(self.0, -p) + 2.0 * self.0 * self.1)
    }

    /// Exact for powers of two.
    fn scale(self, k: f64) -> Dd {
        Dd(self.0 * k, self.1 * k)
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

fn kernel_sum_dd(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Dd {
    let mut acc = Dd::ZERO;
    for x in xs {
        for y in ys {
            let d = x.iter().zip(y).fold(Dd::ZERO, |a, (p, q)| a.add(Dd::prod(*p, *q)));
            acc = acc.add(d.square());
        }
    }
    acc
}

fn kernel_sum(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    kernel_sum_dd(xs, ys).value()
}

/// `Σk(x,x') + Σk(y,y') − 2Σk(x,y)` with the cancellation done in double-double.
fn kernel_mmd_raw(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    kernel_sum_dd(xs, xs)
        .add(kernel_sum_dd(ys, ys))
        .add(kernel_sum_dd(xs, ys).scale(-2.0))
        .value()
}

/// Full MMD² with kernel `k(x, y) = (xᵀy)²`, scaled by `1/(4N²M²)`:
/// self terms of both maps minus twice the cross term. Identical maps give
/// exactly 0.
pub fn mmd_poly2_style_loss(f_hat: &Tensor, f_s: &Tensor, matching: ColumnMatch) -> Result<f64> {
    let (n, m1) = extents(f_hat)?;
    let (ns, m2) = extents(f_s)?;
    if n != ns {
        return Err(Error::ShapeMismatch {
            op: "mmd_poly2_style_loss",
            left: f_hat.shape().to_vec(),
            right: f_s.shape().to_vec(),
        });
    }
    let (xs, ys, m) = if m1 == m2 {
        (columns(f_hat, None).1, columns(f_s, None).1, m1)
    } else {
        let ColumnMatch::Subsample { seed } = matching else {
            return Err(Error::ShapeMismatch {
                op: "mmd_poly2_style_loss (spatial sizes differ; enable subsampling)",
                left: f_hat.shape().to_vec(),
                right: f_s.shape().to_vec(),
            });
        };
        let m = m1.min(m2);
        let pick = |f: &Tensor, mf: usize| {
            if mf == m {
                columns(f, None).1
            } else {
                columns(f, Some(&subsample(mf, m, seed))).1
            }
        };
        (pick(f_hat, m1), pick(f_s, m2), m)
    };
    if f_hat.data() == f_s.data() {
        return Ok(0.0);
    }
    let raw = kernel_mmd_raw(&xs, &ys);
    Ok(raw * layer_scale(n, m))
}

/// Both sides of the Gram/kernel identity, evaluated independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionReport {
    pub gram_form: f64,
    pub kernel_form: f64,
    pub relative_gap: f64,
}

pub fn kernel_expansion_check(f_hat: &Tensor, f_s: &Tensor) -> Result<ExpansionReport> {
    if f_hat.shape() != f_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "kernel_expansion_check",
            left: f_hat.shape().to_vec(),
            right: f_s.shape().to_vec(),
        });
    }
    let (n, m) = extents(f_hat)?;
    let gram_form = style_layer_loss(&gram(f_hat)?, &gram(f_s)?, n, m)?;
    let (_, xs) = columns(f_hat, None);
    let (_, ys) = columns(f_s, None);
    let kernel_form = kernel_mmd_raw(&xs, &ys) * layer_scale(n, m);
    Ok(ExpansionReport {
        gram_form,
        kernel_form,
        relative_gap: relative_gap(gram_form, kernel_form),
    })
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

/// Target statistics for histogram specification of the combined Gram.
#[derive(Debug, Clone, PartialEq)]
pub enum HistogramTarget {
    /// Skip specification; the elementwise max is the target.
    Identity,
    /// Average entry histogram of the individual reference Grams.
    ReferenceAverage { bins: usize },
    Fixed(DensityHistogram),
}

impl Default for HistogramTarget {
    fn default() -> Self {
        HistogramTarget::ReferenceAverage {
            bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

/// Style references plus the histogram target for their combined Gram.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    images: Vec<Image>,
    pub histogram: HistogramTarget,
}

impl ReferenceSet {
    pub fn new(images: Vec<Image>, histogram: HistogramTarget) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("reference set is empty"));
        }
        Ok(Self { images, histogram })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Elementwise max of the reference Grams, then histogram specification of
/// the upper-triangle entries (mirrored to keep symmetry).
pub fn combine_reference_grams(grams: &[GramMatrix], target: &HistogramTarget) -> Result<GramMatrix> {
    let first = grams.first().ok_or_else(|| Error::invalid("no reference grams to combine"))?;
    let n = first.n;
    if let Some(g) = grams.iter().find(|g| g.n != n) {
        return Err(Error::ShapeMismatch {
            op: "combine_reference_grams",
            left: vec![n, n],
            right: vec![g.n, g.n],
        });
    }
    let mut upper = first.upper_triangle();
    for g in &grams[1..] {
        for (u, v) in upper.iter_mut().zip(g.upper_triangle()) {
            *u = u.max(v);
        }
    }
    let target_hist = match target {
        HistogramTarget::Identity => None,
        HistogramTarget::Fixed(h) => Some(h.clone()),
        HistogramTarget::ReferenceAverage { bins } => {
            let tris: Vec<Vec<f64>> = grams.iter().map(GramMatrix::upper_triangle).collect();
            let lo = tris.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            let hi = tris.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            match histogram::uniform_edges(lo, hi, *bins) {
                Some(edges) => {
                    let hists = tris
                        .iter()
                        .map(|t| DensityHistogram::from_samples(t, &edges))
                        .collect::<Result<Vec<_>>>()?;
                    Some(DensityHistogram::average(&hists)?)
                }
                // every entry identical: nothing to specify
                None => None,
            }
        }
    };
    if let Some(h) = target_hist {
        upper = histogram::match_histogram(&upper, &h)?;
    }
    Ok(GramMatrix::from_upper_triangle(n, &upper))
}

/// Per-layer style targets derived from a reference set, with the spatial
/// size `M_l` the output image is expected to have at each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTargets {
    grams: BTreeMap<LayerId, GramMatrix>,
    spatial: BTreeMap<LayerId, usize>,
}

impl StyleTargets {
    /// Runs every reference through `net`, takes per-layer Grams and
    /// combines them. `output_extent` is the `(height, width)` of the image
    /// being stylised; references of another size are rejected unless
    /// `matching` allows subsampling down to the output's positions.
    pub fn from_references(
        refs: &ReferenceSet,
        net: &Network,
        layers: &[LayerId],
        output_extent: (usize, usize),
        matching: ColumnMatch,
    ) -> Result<Self> {
        let probe = Image::filled(output_extent.0, output_extent.1, 0.0)?;
        let probe_acts = net.forward(&probe.to_tensor())?;
        let mut per_layer: BTreeMap<LayerId, Vec<GramMatrix>> = BTreeMap::new();
        let mut spatial = BTreeMap::new();
        for &l in layers {
            let t = probe_acts.get(l).ok_or(Error::UnknownLayer(l))?;
            spatial.insert(l, extents(t)?.1);
        }
        for (r, img) in refs.images.iter().enumerate() {
            let same = (img.height(), img.width()) == output_extent;
            if !same && matching == ColumnMatch::Strict {
                return Err(Error::ShapeMismatch {
                    op: "style reference extent (enable subsampling to mix sizes)",
                    left: vec![img.height(), img.width()],
                    right: vec![output_extent.0, output_extent.1],
                });
            }
            let acts = net.forward(&img.to_tensor())?;
            for &l in layers {
                let f = &acts[l];
                let (_, m) = extents(f)?;
                let want = spatial[&l];
                let g = if m == want {
                    gram(f)?
                } else if m > want {
                    let ColumnMatch::Subsample { seed } = matching else {
                        unreachable!("strict mode rejected above")
                    };
                    let keep = subsample(m, want, seed ^ ((r as u64) << 32) ^ l as u64);
                    gram(&select_columns(f, &keep))?
                } else {
                    return Err(Error::invalid(format!(
                        "reference {r} has {m} positions at layer {l}, fewer than the output's {want}"
                    )));
                };
                per_layer.entry(l).or_default().push(g);
            }
        }
        let grams = per_layer
            .into_iter()
            .map(|(l, gs)| Ok((l, combine_reference_grams(&gs, &refs.histogram)?)))
            .collect::<Result<_>>()?;
        Ok(Self { grams, spatial })
    }

    /// Targets given directly, e.g. a single style image's own Grams.
    pub fn from_grams(grams: BTreeMap<LayerId, GramMatrix>, spatial: BTreeMap<LayerId, usize>) -> Result<Self> {
        if grams.keys().ne(spatial.keys()) {
            return Err(Error::invalid("gram and spatial-size maps cover different layers"));
        }
        Ok(Self { grams, spatial })
    }

    pub fn get(&self, layer: LayerId) -> Result<&GramMatrix> {
        self.grams.get(&layer).ok_or(Error::UnknownLayer(layer))
    }

    pub fn spatial(&self, layer: LayerId) -> Result<usize> {
        self.spatial.get(&layer).copied().ok_or(Error::UnknownLayer(layer))
    }

    fn check(&self, layer: LayerId, f: &Tensor) -> Result<(usize, usize)> {
        let (n, m) = extents(f)?;
        let g = self.get(layer)?;
        let want = self.spatial(layer)?;
        if g.n != n || want != m {
            return Err(Error::ShapeMismatch {
                op: "style target",
                left: vec![n, m],
                right: vec![g.n, want],
            });
        }
        Ok((n, m))
    }
}

fn select_columns(f: &Tensor, keep: &[usize]) -> Tensor {
    let n = f.shape()[0];
    let m = f.len() / n;
    let d = f.data();
    let mut out = Vec::with_capacity(n * keep.len());
    for i in 0..n {
        out.extend(keep.iter().map(|&k| d[i * m + k]));
    }
    Tensor::from_parts_unchecked(vec![n, keep.len()], out)
}

/// Combined multi-reference Gram at one layer.
pub fn multi_ref_gram(refs: &ReferenceSet, net: &Network, layer: LayerId) -> Result<GramMatrix> {
    let img = &refs.images[0];
    let t = StyleTargets::from_references(refs, net, &[layer], (img.height(), img.width()), ColumnMatch::Strict)?;
    Ok(t.grams[&layer].clone())
}

/// `Σ_l w_l E_l` against the combined targets, Gram form.
pub fn multi_ref_style_loss(f_hat: &FeatureStack, targets: &StyleTargets, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (&l, &w) in &weights.layer_weights {
        let f = f_hat.get(l)?;
        let (n, m) = targets.check(l, f)?;
        total += w * style_layer_loss(&gram(f)?, targets.get(l)?, n, m)?;
    }
    Ok(total)
}

/// The style term driving augmentation, evaluated in kernel form against
/// the combined target `T`:
/// `Σ(f̂ᵢᵀf̂ⱼ)² + ‖T‖² − 2 Σ_k f̂_kᵀ T f̂_k`, scaled per layer by
/// `w_l / (4N²M²)` and overall by the style balance factor.
pub fn proposed_style_loss(f_hat: &FeatureStack, targets: &StyleTargets, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (&l, &w) in &weights.layer_weights {
        let f = f_hat.get(l)?;
        let (n, m) = targets.check(l, f)?;
        let t = targets.get(l)?;
        let (_, xs) = columns(f, None);
        let self_term = kernel_sum(&xs, &xs);
        let target_term: f64 = t.entries.iter().map(|v| v * v).sum();
        let cross: f64 = xs
            .iter()
            .map(|x| {
                (0..n)
                    .map(|i| x[i] * dot(&t.entries[i * n..(i + 1) * n], x))
                    .sum::<f64>()
            })
            .sum();
        total += w * (self_term + target_term - 2.0 * cross) * layer_scale(n, m);
    }
    Ok(weights.style_balance * total)
}

/// Value of [`proposed_style_loss`] (computed through Grams, which is far
/// cheaper for large `M`) and its gradient with respect to each style
/// layer's activations: `4 c (G − T) F` per layer.
pub fn proposed_style_value_and_grad(
    f_hat: &FeatureStack,
    targets: &StyleTargets,
    weights: &LossWeights,
) -> Result<(f64, Vec<(LayerId, Tensor)>)> {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (&l, &w) in &weights.layer_weights {
        let f = f_hat.get(l)?;
        let (n, m) = targets.check(l, f)?;
        let g = gram(f)?;
        let t = targets.get(l)?;
        let c = weights.style_balance * w * layer_scale(n, m);
        let diff: Vec<f64> = g.entries.iter().zip(&t.entries).map(|(a, b)| a - b).collect();
        total += c * diff.iter().map(|d| d * d).sum::<f64>();
        let fd = f.data();
        let mut grad = vec![0.0; fd.len()];
        for i in 0..n {
            for j in 0..n {
                let s = 4.0 * c * diff[i * n + j];
                if s == 0.0 {
                    continue;
                }
                let src = &fd[j * m..(j + 1) * m];
                for (o, v) in grad[i * m..(i + 1) * m].iter_mut().zip(src) {
                    *o += s * v;
                }
            }
        }
        grads.push((l, Tensor::from_parts_unchecked(f.shape().to_vec(), grad)));
    }
    Ok((total, grads))
}

/// `α·content + β·style`.
pub fn total_loss(content: f64, style: f64, weights: &LossWeights) -> Result<f64> {
    if !content.is_finite() || !style.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss terms (content {content}, style {style})"),
        });
    }
    Ok(weights.alpha * content + weights.beta * style)
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Tab-separated `iteration content style total`, one record per line,
/// after a header line. Floats use shortest round-trip formatting.
pub fn format_trace(records: &[LossRecord]) -> String {
    let mut s = String::from("iteration\tcontent\tstyle\ttotal\n");
    for r in records {
        let _ = writeln!(s, "{}\t{:?}\t{:?}\t{:?}", r.iteration, r.content, r.style, r.total);
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<LossRecord>> {
    let bad = |line: usize| Error::format("loss trace", format!("line {line}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            Ok(LossRecord {
                iteration: f[0].parse().map_err(|_| bad(i + 1))?,
                content: num(f[1])?,
                style: num(f[2])?,
                total: num(f[3])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featnet::{build_network, default_feature_spec, FeatureLayers};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_map(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        Tensor::from_fn(vec![n, m], |_| rng.random_range(-1.0..1.0))
    }

    fn stack(id: LayerId, t: Tensor) -> FeatureStack {
        let mut s = FeatureStack::default();
        s.insert(id, t);
        s
    }

    #[test]
    fn content_loss_cases() {
        let a = stack(1, Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let z = stack(1, Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        assert_eq!(content_loss(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(content_loss(&a, &z, 1).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 2, 3);
        let y = rand_map(&mut rng, 2, 3);
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                let d = x.data()[i * 3 + j] - y.data()[i * 3 + j];
                oracle += 0.5 * d * d;
            }
        }
        let v = content_loss(&stack(1, x), &stack(1, y), 1).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!(content_loss(&a, &z, 2).is_err());
    }

    #[test]
    fn gram_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram(&eye).unwrap().entries(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(gram(&Tensor::zeros(vec![3, 4])).unwrap().entries().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_map(&mut rng, 3, 4);
        let g = gram(&f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += f.data()[i * 4 + k] * f.data()[j * 4 + k];
                }
                assert!((g.get(i, j) - s).abs() < 1e-12);
            }
        }
        assert!(gram(&Tensor::zeros(vec![0, 4])).is_err());
    }

    #[test]
    fn style_layer_loss_cases() {
        let g4 = GramMatrix::new(1, vec![4.0]).unwrap();
        let g1 = GramMatrix::new(1, vec![1.0]).unwrap();
        assert_eq!(style_layer_loss(&g4, &g1, 1, 1).unwrap(), 9.0 / 4.0);
        assert_eq!(style_layer_loss(&g4, &g4, 1, 1).unwrap(), 0.0);
        let g2 = GramMatrix::new(2, vec![0.0; 4]).unwrap();
        assert!(style_layer_loss(&g4, &g2, 1, 1).is_err());
        assert!(GramMatrix::new(2, vec![1.0, 2.0, 3.0, 1.0]).is_err());
    }

    #[test]
    fn style_loss_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a1, a2) = (rand_map(&mut rng, 2, 5), rand_map(&mut rng, 3, 4));
        let (s1, s2) = (rand_map(&mut rng, 2, 5), rand_map(&mut rng, 3, 4));
        let mut fa = stack(1, a1.clone());
        fa.insert(2, a2.clone());
        let mut fs = stack(1, s1.clone());
        fs.insert(2, s2.clone());
        let mut w = LossWeights::uniform(&[1, 2]);
        w.layer_weights.insert(2, 2.0);
        let e1 = style_layer_loss(&gram(&a1).unwrap(), &gram(&s1).unwrap(), 2, 5).unwrap();
        let e2 = style_layer_loss(&gram(&a2).unwrap(), &gram(&s2).unwrap(), 3, 4).unwrap();
        assert!((style_loss(&fa, &fs, &w).unwrap() - (e1 + 2.0 * e2)).abs() < 1e-14);
        assert_eq!(style_loss(&fa, &fa, &w).unwrap(), 0.0);
        let one = LossWeights::uniform(&[1]);
        assert_eq!(style_loss(&fa, &fs, &one).unwrap(), e1);
    }

    #[test]
    fn mmd_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 2, 3);
        let y = rand_map(&mut rng, 2, 3);
        assert_eq!(mmd_poly2_style_loss(&x, &x, ColumnMatch::Strict).unwrap(), 0.0);
        // quadruple loop over column pairs and channels
        let col = |t: &Tensor, k: usize, i: usize| t.data()[i * 3 + k];
        let mut raw = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for i in 0..2 {
                    xx += col(&x, a, i) * col(&x, b, i);
                    yy += col(&y, a, i) * col(&y, b, i);
                    xy += col(&x, a, i) * col(&y, b, i);
                }
                raw += xx * xx + yy * yy - 2.0 * xy * xy;
            }
        }
        let oracle = raw / (4.0 * 4.0 * 9.0);
        let v = mmd_poly2_style_loss(&x, &y, ColumnMatch::Strict).unwrap();
        assert!(relative_gap(v, oracle) < 1e-12);
        let g = style_layer_loss(&gram(&x).unwrap(), &gram(&y).unwrap(), 2, 3).unwrap();
        assert!(relative_gap(v, g) < 1e-10);
        let z = rand_map(&mut rng, 2, 5);
        assert!(mmd_poly2_style_loss(&x, &z, ColumnMatch::Strict).is_err());
        let sub = mmd_poly2_style_loss(&x, &z, ColumnMatch::Subsample { seed: 1 }).unwrap();
        assert_eq!(sub, mmd_poly2_style_loss(&x, &z, ColumnMatch::Subsample { seed: 1 }).unwrap());
        assert!(mmd_poly2_style_loss(&x, &rand_map(&mut rng, 3, 3), ColumnMatch::Strict).is_err());
    }

    #[test]
    fn expansion_check_trivial_and_random() {
        let z = Tensor::zeros(vec![3, 4]);
        let r = kernel_expansion_check(&z, &z).unwrap();
        assert_eq!((r.gram_form, r.kernel_form), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_map(&mut rng, 3, 4);
        let r = kernel_expansion_check(&x, &x).unwrap();
        assert_eq!(r.gram_form, 0.0);
        assert!(r.kernel_form.abs() < 1e-14);
        for _ in 0..50 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=9);
            let r = kernel_expansion_check(&rand_map(&mut rng, n, m), &rand_map(&mut rng, n, m)).unwrap();
            assert!(r.relative_gap < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn combine_hand_max() {
        let a = GramMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let b = GramMatrix::new(2, vec![3.0, 0.0, 0.0, 3.0]).unwrap();
        let m = combine_reference_grams(&[a.clone(), b.clone()], &HistogramTarget::Identity).unwrap();
        assert_eq!(m.entries(), &[3.0, 2.0, 2.0, 3.0]);
        // single reference and identical references are fixed points under the default target
        let t = HistogramTarget::default();
        assert_eq!(combine_reference_grams(&[a.clone()], &t).unwrap(), a);
        assert_eq!(combine_reference_grams(&[a.clone(), a.clone(), a.clone()], &t).unwrap(), a);
        let h = combine_reference_grams(&[a, b], &t).unwrap();
        assert_eq!(h.get(0, 1), h.get(1, 0));
        assert!(combine_reference_grams(&[], &t).is_err());
    }

    fn synthetic(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn reduction_chain_on_network_features() {
        let net = build_network(&default_feature_spec(), 11).unwrap();
        let layers = FeatureLayers::default_for(&net).unwrap();
        let (out, style) = (synthetic(1), synthetic(2));
        let acts = net.forward(&out.to_tensor()).unwrap();
        let fa = FeatureStack::from_activations(&acts, &layers.style).unwrap();
        let fs = crate::featnet::extract_features(&net, &style, &layers.style).unwrap();
        let refs = ReferenceSet::new(vec![style.clone()], HistogramTarget::Identity).unwrap();
        let targets = StyleTargets::from_references(&refs, &net, &layers.style, (16, 16), ColumnMatch::Strict).unwrap();
        let w = LossWeights::uniform(&layers.style);
        let proposed = proposed_style_loss(&fa, &targets, &w).unwrap();
        let mmd: f64 = layers
            .style
            .iter()
            .map(|&l| mmd_poly2_style_loss(fa.get(l).unwrap(), fs.get(l).unwrap(), ColumnMatch::Strict).unwrap())
            .sum();
        let gram_form = style_loss(&fa, &fs, &w).unwrap();
        assert!(relative_gap(proposed, mmd) < 1e-10, "{proposed} vs {mmd}");
        assert!(relative_gap(mmd, gram_form) < 1e-10);
        let multi = multi_ref_style_loss(&fa, &targets, &w).unwrap();
        assert!(relative_gap(multi, gram_form) < 1e-12);
        let (fast, _) = proposed_style_value_and_grad(&fa, &targets, &w).unwrap();
        assert!(relative_gap(fast, proposed) < 1e-10);
        // a different size without subsampling is refused
        assert!(StyleTargets::from_references(&refs, &net, &layers.style, (8, 8), ColumnMatch::Strict).is_err());
        let sub = StyleTargets::from_references(&refs, &net, &layers.style, (8, 8), ColumnMatch::Subsample { seed: 3 });
        assert!(sub.is_ok());
    }

    #[test]
    fn multi_reference_composition() {
        let net = build_network(&default_feature_spec(), 12).unwrap();
        let layer = net.layer_id("stage2").unwrap();
        let refs = ReferenceSet::new(vec![synthetic(3), synthetic(4)], HistogramTarget::default()).unwrap();
        let combined = multi_ref_gram(&refs, &net, layer).unwrap();
        let g: Vec<GramMatrix> = refs
            .images()
            .iter()
            .map(|im| gram(&net.forward(&im.to_tensor()).unwrap()[layer]).unwrap())
            .collect();
        let max_only = combine_reference_grams(&g, &HistogramTarget::Identity).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(max_only.get(i, j), g[0].get(i, j).max(g[1].get(i, j)));
            }
        }
        assert_eq!(combined, combine_reference_grams(&g, &HistogramTarget::default()).unwrap());

        let out = synthetic(5);
        let acts = net.forward(&out.to_tensor()).unwrap();
        let fa = FeatureStack::from_activations(&acts, &[layer]).unwrap();
        let targets = StyleTargets::from_references(&refs, &net, &[layer], (16, 16), ColumnMatch::Strict).unwrap();
        let w = LossWeights::uniform(&[layer]);
        let (n, m) = (16, 64);
        let oracle = style_layer_loss(&gram(&acts[layer]).unwrap(), &combined, n, m).unwrap();
        assert!(relative_gap(multi_ref_style_loss(&fa, &targets, &w).unwrap(), oracle) < 1e-12);
        // brute-force kernel evaluation of the proposed term
        let f = &acts[layer];
        let col = |k: usize| (0..n).map(|i| f.data()[i * m + k]).collect::<Vec<_>>();
        let mut raw = 0.0;
        for a in 0..m {
            for b in 0..m {
                raw += dot(&col(a), &col(b)).powi(2);
            }
            let c = col(a);
            for i in 0..n {
                for j in 0..n {
                    raw -= 2.0 * c[i] * combined.get(i, j) * c[j];
                }
            }
        }
        raw += combined.entries().iter().map(|v| v * v).sum::<f64>();
        let mut w2 = w.clone();
        w2.style_balance = 2.5;
        let v = proposed_style_loss(&fa, &targets, &w2).unwrap();
        assert!(relative_gap(v, 2.5 * raw * layer_scale(n, m)) < 1e-10);
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = rand_map(&mut rng, 3, 5);
        let t = gram(&rand_map(&mut rng, 3, 5)).unwrap();
        let targets = StyleTargets::from_grams([(1, t)].into(), [(1, 5)].into()).unwrap();
        let w = LossWeights::uniform(&[1]);
        let (_, g) = proposed_style_value_and_grad(&stack(1, f.clone()), &targets, &w).unwrap();
        let h = 1e-6;
        for k in 0..f.len() {
            let mut p = f.clone();
            p.data_mut()[k] += h;
            let mut q = f.clone();
            q.data_mut()[k] -= h;
            let lp = proposed_style_loss(&stack(1, p), &targets, &w).unwrap();
            let lq = proposed_style_loss(&stack(1, q), &targets, &w).unwrap();
            let num = (lp - lq) / (2.0 * h);
            assert!(relative_gap(g[0].1.data()[k], num) < 1e-6, "{k}");
        }
    }

    #[test]
    fn total_loss_cases() {
        let mut w = LossWeights::uniform(&[1]);
        w.beta = 0.0;
        assert_eq!(total_loss(0.3, 9.0, &w).unwrap(), 0.3);
        w.alpha = 0.0;
        w.beta = 1.0;
        assert_eq!(total_loss(0.3, 9.0, &w).unwrap(), 9.0);
        w.alpha = 1.0;
        w.beta = 2.0;
        assert_eq!(total_loss(0.5, 0.25, &w).unwrap(), 1.0);
        assert!(total_loss(f64::NAN, 0.0, &w).is_err());
        w.layer_weights.insert(1, 0.0);
        assert!(w.validate().is_err());
    }

    #[test]
    fn trace_round_trip() {
        let recs = vec![
            LossRecord { iteration: 0, content: 0.0, style: 1.0 / 3.0, total: 1.0 / 3.0 },
            LossRecord { iteration: 1, content: 1e-300, style: 0.1, total: 0.1 },
        ];
        assert_eq!(parse_trace(&format_trace(&recs)).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(n in 1usize..6, m in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = gram(&rand_map(&mut rng, n, m)).unwrap();
            for i in 0..n { for j in 0..n { prop_assert_eq!(g.get(i, j), g.get(j, i)); } }
            prop_assert!(g.is_psd(1e-9));
        }

        #[test]
        fn style_layer_loss_symmetric_nonnegative(n in 1usize..5, m in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gram(&rand_map(&mut rng, n, m)).unwrap();
            let b = gram(&rand_map(&mut rng, n, m)).unwrap();
            let ab = style_layer_loss(&a, &b, n, m).unwrap();
            prop_assert_eq!(ab, style_layer_loss(&b, &a, n, m).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(style_layer_loss(&a, &a, n, m).unwrap(), 0.0);
        }

        #[test]
        fn gram_kernel_equivalence(n in 1usize..5, m in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = kernel_expansion_check(&rand_map(&mut rng, n, m), &rand_map(&mut rng, n, m)).unwrap();
            prop_assert!(r.relative_gap < 1e-10);
        }
    }
}
