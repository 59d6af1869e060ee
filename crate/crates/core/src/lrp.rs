//! Layer-wise relevance propagation with the α-β rule.
//!
//! Relevance moves backward one layer at a time. For a conv or dense
//! neuron `j` with input contributions `z_ij = a_i w_ij`,
//!
//! ```text
//! R_i = Σ_j ( α z_ij⁺ / z_j⁺  −  β z_ij⁻ / z_j⁻ ) R_j
//! ```
//!
//! where `z_j⁺ = Σ_i z_ij⁺ + b_j⁺` and `z_j⁻ = Σ_i z_ij⁻ + b_j⁻`. The bias
//! share of each denominator is absorbed, and reported by the audit. When
//! one part is empty the other carries the neuron's full relevance; when
//! nothing can carry it the relevance is absorbed if `epsilon > 0` and an
//! error otherwise.
//!
//! Pooling: average pools spread relevance uniformly over the window, max
//! pools give it to the maximum (ties split equally). Residual sums split
//! per element in proportion `a / (a + b)`. Activation functions pass
//! relevance through unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::featnet::{LayerId, LayerKind, Network};
use crate::image::{save_rgb, Image};
use crate::tensor::{self, PoolMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Added to each denominator with the denominator's sign.
    pub epsilon: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            epsilon: 1e-9,
        }
    }
}

impl LrpConfig {
    pub fn new(alpha: f64, beta: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { alpha, beta, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.epsilon >= 0.0) {
            return Err(Error::invalid("alpha, beta and epsilon must be nonnegative"));
        }
        if ((self.alpha - self.beta) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "alpha - beta must equal 1 for conservation (got {} - {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Where the explained quantity `f(x)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum RelevanceTarget {
    /// Sum of the last layer's activations; each output is its own relevance.
    OutputSum,
    /// Sum of one channel of one layer.
    Channel { layer: LayerId, channel: usize },
    /// One entry of a vector-valued output, e.g. a class logit.
    Logit(usize),
    /// `½ Σ (a − reference)²` at `layer`, each element seeded with its own term.
    ContentLoss { layer: LayerId, reference: Tensor },
}

/// Conservation check at one activation: relevance held on the cut through
/// the network just below it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerAudit {
    pub layer: LayerId,
    pub cut_sum: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    maps: BTreeMap<LayerId, Tensor>,
    output_value: f64,
    audit: Vec<LayerAudit>,
    absorbed: f64,
}

impl RelevanceMap {
    pub fn get(&self, layer: LayerId) -> Result<&Tensor> {
        self.maps.get(&layer).ok_or(Error::UnknownLayer(layer))
    }

    /// Relevance of the input pixels.
    pub fn pixels(&self) -> &Tensor {
        &self.maps[&0]
    }

    pub fn output_value(&self) -> f64 {
        self.output_value
    }

    /// One entry per activation from the seeded layer down to the input.
    pub fn audit(&self) -> &[LayerAudit] {
        &self.audit
    }

    /// Largest relative conservation error over all audited layers.
    pub fn max_relative_error(&self) -> f64 {
        self.audit.iter().map(|a| a.relative_error).fold(0.0, f64::max)
    }

    /// Relevance taken up by biases, stabilisers and dead neurons.
    pub fn absorbed(&self) -> f64 {
        self.absorbed
    }
}

/// Weights for the positive and negative parts, or `None` when neither
/// part can carry the relevance.
fn part_weights(zp: f64, zn: f64, cfg: &LrpConfig) -> Option<(f64, f64)> {
    match (zp != 0.0, zn != 0.0) {
        (true, true) => Some((cfg.alpha, cfg.beta)),
        (true, false) => Some((1.0, 0.0)),
        (false, true) if cfg.beta > 0.0 => Some((0.0, -1.0)),
        _ => None,
    }
}

/// Coefficients `(cp, cn)` so that `R_i = z⁺ cp + z⁻ cn`.
fn coefficients(zp: f64, zn: f64, r: f64, cfg: &LrpConfig, context: impl FnOnce() -> String) -> Result<(f64, f64)> {
    if r == 0.0 {
        return Ok((0.0, 0.0));
    }
    match part_weights(zp, zn, cfg) {
        Some((wp, wn)) => {
            let cp = if wp == 0.0 { 0.0 } else { wp * r / (zp + cfg.epsilon) };
            let cn = if wn == 0.0 { 0.0 } else { -wn * r / (zn - cfg.epsilon) };
            Ok((cp, cn))
        }
        None if cfg.epsilon > 0.0 => Ok((0.0, 0.0)),
        None => Err(Error::ZeroDenominator { context: context() }),
    }
}

/// α-β rule through a dense layer with weight `[out, in]`. Returns input
/// relevance and the amount absorbed.
pub fn lrp_dense(input: &[f64], weight: &Tensor, bias: &[f64], upstream: &[f64], cfg: &LrpConfig) -> Result<(Vec<f64>, f64)> {
    let (outs, ins) = match weight.shape() {
        &[o, i] => (o, i),
        s => {
            return Err(Error::ShapeMismatch {
                op: "lrp_dense weight",
                left: s.to_vec(),
                right: vec![upstream.len(), input.len()],
            })
        }
    };
    if ins != input.len() || outs != upstream.len() || bias.len() != outs {
        return Err(Error::ShapeMismatch {
            op: "lrp_dense",
            left: vec![input.len(), upstream.len()],
            right: vec![ins, outs],
        });
    }
    let w = weight.data();
    let mut rel = vec![0.0; ins];
    for j in 0..outs {
        let row = &w[j * ins..(j + 1) * ins];
        let (mut zp, mut zn) = (bias[j].max(0.0), bias[j].min(0.0));
        for (a, wv) in input.iter().zip(row) {
            let z = a * wv;
            if z > 0.0 {
                zp += z;
            } else {
                zn += z;
            }
        }
        let (cp, cn) = coefficients(zp, zn, upstream[j], cfg, || format!("dense output {j}"))?;
        for (i, (a, wv)) in input.iter().zip(row).enumerate() {
            let z = a * wv;
            rel[i] += if z > 0.0 { z * cp } else { z * cn };
        }
    }
    let absorbed = upstream.iter().sum::<f64>() - rel.iter().sum::<f64>();
    Ok((rel, absorbed))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Visits `(input flat index, kernel flat index within one output channel)`
    /// for every in-bounds tap of output position `(oy, ox)`.
    fn taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        for ci in 0..self.c {
            for ky in 0..self.k {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.k {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= self.w as isize {
                        continue;
                    }
                    f(
                        (ci * self.h + iy as usize) * self.w + ix as usize,
                        (ci * self.k + ky) * self.k + kx,
                    );
                }
            }
        }
    }
}

/// α-β rule through a convolution. Returns input relevance and the amount
/// absorbed.
pub fn lrp_conv(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
    upstream: &Tensor,
    cfg: &LrpConfig,
) -> Result<(Tensor, f64)> {
    let (c, h, w) = input.chw()?;
    let (o, kc, k) = match kernel.shape() {
        &[o, kc, kh, kw] if kh == kw => (o, kc, kh),
        s => {
            return Err(Error::ShapeMismatch {
                op: "lrp_conv kernel",
                left: s.to_vec(),
                right: input.shape().to_vec(),
            })
        }
    };
    let (uo, oh, ow) = upstream.chw()?;
    if kc != c || uo != o || bias.len() != o {
        return Err(Error::ShapeMismatch {
            op: "lrp_conv",
            left: upstream.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let geom = ConvGeom {
        c,
        h,
        w,
        oh,
        ow,
        k,
        stride,
        padding,
    };
    let a = input.data();
    let kd = kernel.data();
    let ksz = c * k * k;
    let mut rel = vec![0.0; a.len()];
    for oc in 0..o {
        let wk = &kd[oc * ksz..(oc + 1) * ksz];
        for oy in 0..geom.oh {
            for ox in 0..geom.ow {
                let r = upstream.data()[(oc * geom.oh + oy) * geom.ow + ox];
                if r == 0.0 {
                    continue;
                }
                let (mut zp, mut zn) = (bias[oc].max(0.0), bias[oc].min(0.0));
                geom.taps(oy, ox, |ii, ki| {
                    let z = a[ii] * wk[ki];
                    if z > 0.0 {
                        zp += z;
                    } else {
                        zn += z;
                    }
                });
                let (cp, cn) = coefficients(zp, zn, r, cfg, || format!("conv output ({oc}, {oy}, {ox})"))?;
                geom.taps(oy, ox, |ii, ki| {
                    let z = a[ii] * wk[ki];
                    rel[ii] += if z > 0.0 { z * cp } else { z * cn };
                });
            }
        }
    }
    let absorbed = upstream.sum() - rel.iter().sum::<f64>();
    Ok((Tensor::from_parts_unchecked(input.shape().to_vec(), rel), absorbed))
}

/// Pooling rule: uniform for average pools, winner-take-all (equal split on
/// ties) for max pools. Conserves the sum exactly.
pub fn lrp_pool(input: &Tensor, upstream: &Tensor, window: usize, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (uc, oh, ow) = upstream.chw()?;
    if uc != c || oh * window != h || ow * window != w {
        return Err(Error::ShapeMismatch {
            op: "lrp_pool",
            left: upstream.shape().to_vec(),
            right: input.shape().to_vec(),
        });
    }
    let mut rel = vec![0.0; input.len()];
    for ch in 0..c {
        let plane = &input.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let r = upstream.data()[(ch * oh + oy) * ow + ox];
                let targets: Vec<usize> = match mode {
                    PoolMode::Avg => (0..window * window)
                        .map(|t| (oy * window + t / window) * w + ox * window + t % window)
                        .collect(),
                    PoolMode::Max => tensor::max_winners(plane, w, oy, ox, window),
                };
                let share = r / targets.len() as f64;
                for t in targets {
                    rel[ch * h * w + t] += share;
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), rel))
}

/// Splits residual-sum relevance between the two summands in proportion to
/// their values. Returns `(branch, skip, absorbed)`.
fn lrp_residual(branch: &Tensor, skip: &Tensor, upstream: &Tensor, cfg: &LrpConfig, layer: usize) -> Result<(Tensor, Tensor, f64)> {
    let mut ra = vec![0.0; branch.len()];
    let mut rb = vec![0.0; skip.len()];
    for k in 0..branch.len() {
        let r = upstream.data()[k];
        if r == 0.0 {
            continue;
        }
        let (a, b) = (branch.data()[k], skip.data()[k]);
        let s = a + b;
        if s == 0.0 && cfg.epsilon == 0.0 {
            return Err(Error::ZeroDenominator {
                context: format!("residual junction at layer {layer}, element {k}"),
            });
        }
        let d = s + if s >= 0.0 { cfg.epsilon } else { -cfg.epsilon };
        ra[k] = a / d * r;
        rb[k] = b / d * r;
    }
    let absorbed = upstream.sum() - ra.iter().sum::<f64>() - rb.iter().sum::<f64>();
    Ok((
        Tensor::from_parts_unchecked(branch.shape().to_vec(), ra),
        Tensor::from_parts_unchecked(skip.shape().to_vec(), rb),
        absorbed,
    ))
}

/// Initial relevance and `f(x)` for a target.
fn seed(net: &Network, acts: &[Tensor], target: &RelevanceTarget) -> Result<(LayerId, Tensor, f64)> {
    let last = net.num_layers();
    let (layer, rel) = match target {
        RelevanceTarget::OutputSum => (last, acts[last].clone()),
        RelevanceTarget::Channel { layer, channel } => {
            let a = acts.get(*layer).ok_or(Error::UnknownLayer(*layer))?;
            let c = a.shape()[0];
            if *channel >= c {
                return Err(Error::invalid(format!("channel {channel} out of range for {c} channels")));
            }
            let per = a.len() / c;
            let r = Tensor::from_fn(a.shape().to_vec(), |i| if i / per == *channel { a.data()[i] } else { 0.0 });
            (*layer, r)
        }
        RelevanceTarget::Logit(k) => {
            let a = &acts[last];
            if a.shape().len() != 1 || *k >= a.len() {
                return Err(Error::invalid(format!("logit {k} not available on output shape {:?}", a.shape())));
            }
            (last, Tensor::from_fn(a.shape().to_vec(), |i| if i == *k { a.data()[i] } else { 0.0 }))
        }
        RelevanceTarget::ContentLoss { layer, reference } => {
            let a = acts.get(*layer).ok_or(Error::UnknownLayer(*layer))?;
            if a.shape() != reference.shape() {
                return Err(Error::ShapeMismatch {
                    op: "content-loss relevance seed",
                    left: a.shape().to_vec(),
                    right: reference.shape().to_vec(),
                });
            }
            let r = tensor::binary(tensor::BinaryOp::Sub, a, reference)?;
            (*layer, Tensor::from_fn(r.shape().to_vec(), |i| 0.5 * r.data()[i] * r.data()[i]))
        }
    };
    let f = rel.sum();
    Ok((layer, rel, f))
}

pub fn propagate(net: &Network, image: &Image, target: &RelevanceTarget, cfg: &LrpConfig) -> Result<RelevanceMap> {
    let acts = net.forward(&image.to_tensor())?;
    propagate_activations(net, &acts, target, cfg)
}

/// Relevance pass over an existing forward pass.
pub fn propagate_activations(net: &Network, acts: &[Tensor], target: &RelevanceTarget, cfg: &LrpConfig) -> Result<RelevanceMap> {
    cfg.validate()?;
    if acts.len() != net.num_activations() {
        return Err(Error::invalid("activation list does not match the network"));
    }
    let (top, rel, f) = seed(net, acts, target)?;
    let mut held: Vec<Option<Tensor>> = vec![None; acts.len()];
    held[top] = Some(rel);
    let mut absorbed = 0.0;
    let mut audit = Vec::with_capacity(top + 1);
    let rel_err = |cut: f64| {
        let d = (cut - f).abs();
        if f == 0.0 {
            d
        } else {
            d / f.abs()
        }
    };
    let cut_at = |held: &[Option<Tensor>], i: usize| held[..=i].iter().flatten().map(Tensor::sum).sum::<f64>();
    audit.push(LayerAudit {
        layer: top,
        cut_sum: f,
        relative_error: 0.0,
    });
    for i in (0..top).rev() {
        let x = &acts[i];
        let r = held[i + 1].clone().unwrap_or_else(|| Tensor::zeros(acts[i + 1].shape().to_vec()));
        let down = match net.layer_kind(i) {
            LayerKind::Conv { stride, padding, .. } => {
                let (k, b) = net.layer_params(i).expect("conv params");
                let (t, ab) = lrp_conv(x, k, b, *stride, *padding, &r, cfg)?;
                absorbed += ab;
                t
            }
            LayerKind::Dense { .. } => {
                let (wt, b) = net.layer_params(i).expect("dense params");
                let (v, ab) = lrp_dense(x.data(), wt, b, r.data(), cfg)?;
                absorbed += ab;
                Tensor::from_parts_unchecked(x.shape().to_vec(), v)
            }
            LayerKind::Activation(_) | LayerKind::Softmax => r,
            LayerKind::Pool { window, mode } => lrp_pool(x, &r, *window, *mode)?,
            LayerKind::GlobalPool => {
                let (c, h, w) = x.chw()?;
                let m = (h * w) as f64;
                Tensor::from_fn(vec![c, h, w], |k| r.data()[k / (h * w)] / m)
            }
            LayerKind::ResidualAdd { from } => {
                let (ra, rb, ab) = lrp_residual(x, &acts[*from], &r, cfg, i)?;
                absorbed += ab;
                accumulate(&mut held[*from], rb)?;
                ra
            }
        };
        if !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("relevance below layer {i}"),
            });
        }
        accumulate(&mut held[i], down)?;
        let cut = cut_at(&held, i);
        audit.push(LayerAudit {
            layer: i,
            cut_sum: cut,
            relative_error: rel_err(cut),
        });
    }
    let maps = held
        .into_iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect();
    Ok(RelevanceMap {
        maps,
        output_value: f,
        audit,
        absorbed,
    })
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) -> Result<()> {
    match slot {
        Some(s) => s.add_assign(&t),
        None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// Channel-summed relevance plane of a spatial layer, as `(height, width, values)`.
pub fn relevance_plane(map: &RelevanceMap, layer: LayerId) -> Result<(usize, usize, Vec<f64>)> {
    let t = map.get(layer)?;
    let (c, h, w) = t.chw()?;
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for (p, v) in plane.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *p += v;
        }
    }
    Ok((h, w, plane))
}

/// Diverging colour: white at zero, red for positive, blue for negative,
/// saturating at `|v| = scale`.
pub fn diverging_color(v: f64, scale: f64) -> [u8; 3] {
    if scale == 0.0 || v == 0.0 {
        return [255, 255, 255];
    }
    let t = (v.abs() / scale).min(1.0);
    let fade = (255.0 * (1.0 - t)).round() as u8;
    if v > 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Path of the text sidecar written next to a heatmap.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("txt")
}

/// Writes the heatmap raster (PNG or PPM by extension) and a text matrix
/// sidecar with one row per line.
pub fn render_heatmap(map: &RelevanceMap, layer: LayerId, out: &Path) -> Result<PathBuf> {
    let (h, w, plane) = relevance_plane(map, layer)?;
    let scale = plane.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let rgb: Vec<[u8; 3]> = plane.iter().map(|&v| diverging_color(v, scale)).collect();
    save_rgb(out, w, h, &rgb)?;
    let mut text = String::new();
    for row in plane.chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(text, "{}", cells.join(" "));
    }
    let side = sidecar_path(out);
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::format("relevance sidecar", format!("bad value {v}"))))
                .collect()
        })
        .collect()
}
