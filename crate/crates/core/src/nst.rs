//! Style transfer by projected gradient descent on the output pixels.
//!
//! Each iteration moves along the negative gradient scaled so the largest
//! pixel change equals the current step, clamps to `[0, 1]`, and accepts
//! the move only if the total loss does not increase. Rejected moves halve
//! the step; accepted ones grow it by `step_growth`. The loss trace is
//! therefore non-increasing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featnet::{FeatureLayers, FeatureStack, LayerId, Network};
use crate::image::Image;
use crate::styleloss::{
    content_value_and_grad, format_trace, proposed_style_value_and_grad, total_loss, ColumnMatch, LossRecord,
    LossWeights, ReferenceSet, StyleTargets,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    ContentCopy,
    Noise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NstConfig {
    pub iterations: usize,
    /// Initial largest per-pixel change of one step.
    pub step: f64,
    pub step_growth: f64,
    /// Backtracking gives up below this step.
    pub min_step: f64,
    pub weights: LossWeights,
    pub style_layers: Vec<LayerId>,
    pub content_layer: LayerId,
    pub init: InitMode,
    pub matching: ColumnMatch,
}

impl NstConfig {
    /// 1000 iterations, unit weights on the default style and content
    /// layers of `net`.
    pub fn for_network(net: &Network) -> Result<Self> {
        let layers = FeatureLayers::default_for(net)?;
        Ok(Self {
            iterations: 1000,
            step: 0.05,
            step_growth: 1.25,
            min_step: 1e-12,
            weights: LossWeights::uniform(&layers.style),
            style_layers: layers.style,
            content_layer: layers.content,
            init: InitMode::ContentCopy,
            matching: ColumnMatch::Strict,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.step > 0.0 && self.min_step > 0.0 && self.step_growth >= 1.0) {
            return Err(Error::invalid("step must be positive and growth at least 1"));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stylized {
    pub image: Image,
    /// Loss of the initial image.
    pub initial: LossRecord,
    /// One record per iteration, after that iteration's update.
    pub trace: Vec<LossRecord>,
}

impl Stylized {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(self.initial.total, |r| r.total)
    }
}

struct Objective<'a> {
    net: &'a Network,
    cfg: &'a NstConfig,
    content_ref: Tensor,
    targets: StyleTargets,
    seeded: Vec<LayerId>,
}

impl Objective<'_> {
    fn value(&self, x: &Tensor, want_grad: bool) -> Result<(f64, f64, f64, Option<Tensor>)> {
        let w = &self.cfg.weights;
        let acts = self.net.forward(x)?;
        let (c, gc) = content_value_and_grad(&acts[self.cfg.content_layer], &self.content_ref)?;
        let (s, gs) = if w.beta > 0.0 {
            let stack = FeatureStack::from_activations(&acts, &self.seeded)?;
            proposed_style_value_and_grad(&stack, &self.targets, w)?
        } else {
            (0.0, Vec::new())
        };
        let total = total_loss(c, s, w)?;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: "total loss".into(),
            });
        }
        if !want_grad {
            return Ok((c, s, total, None));
        }
        let gc = scale(gc, w.alpha);
        let gs: Vec<(LayerId, Tensor)> = gs.into_iter().map(|(l, g)| (l, scale(g, w.beta))).collect();
        let mut seeds: Vec<(LayerId, &Tensor)> = vec![(self.cfg.content_layer, &gc)];
        seeds.extend(gs.iter().map(|(l, g)| (*l, g)));
        let grads = self.net.backward(&acts, &seeds)?;
        Ok((c, s, total, Some(grads.input)))
    }
}

fn scale(mut t: Tensor, k: f64) -> Tensor {
    for v in t.data_mut() {
        *v *= k;
    }
    t
}

/// Gradient of the total loss with respect to the pixels of `x`, together
/// with the loss value.
pub fn total_loss_gradient(
    net: &Network,
    content: &Image,
    refs: &ReferenceSet,
    cfg: &NstConfig,
    x: &Image,
) -> Result<(f64, Tensor)> {
    let obj = objective(net, content, refs, cfg)?;
    let (_, _, total, g) = obj.value(&x.to_tensor(), true)?;
    Ok((total, g.expect("gradient requested")))
}

/// Total loss at an arbitrary (unclamped) pixel tensor; used by gradient checks.
pub fn total_loss_at(net: &Network, content: &Image, refs: &ReferenceSet, cfg: &NstConfig, x: &Tensor) -> Result<f64> {
    let obj = objective(net, content, refs, cfg)?;
    Ok(obj.value(x, false)?.2)
}

fn objective<'a>(net: &'a Network, content: &Image, refs: &ReferenceSet, cfg: &'a NstConfig) -> Result<Objective<'a>> {
    cfg.validate()?;
    let extent = (content.height(), content.width());
    let seeded: Vec<LayerId> = cfg.weights.layer_weights.keys().copied().collect();
    if seeded.iter().any(|l| !cfg.style_layers.contains(l)) {
        return Err(Error::invalid("a weighted style layer is missing from the style layer set"));
    }
    let targets = StyleTargets::from_references(refs, net, &seeded, extent, cfg.matching)?;
    let content_ref = net
        .forward(&content.to_tensor())?
        .get(cfg.content_layer)
        .cloned()
        .ok_or(Error::UnknownLayer(cfg.content_layer))?;
    Ok(Objective {
        net,
        cfg,
        content_ref,
        targets,
        seeded,
    })
}

pub fn stylize(content: &Image, refs: &ReferenceSet, net: &Network, cfg: &NstConfig) -> Result<Stylized> {
    let obj = objective(net, content, refs, cfg)?;
    let (h, w) = (content.height(), content.width());
    let mut x = match cfg.init {
        InitMode::ContentCopy => content.to_tensor(),
        InitMode::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(vec![1, h, w], |_| rng.random_range(0.0..1.0))
        }
    };
    let (c0, s0, t0, g0) = obj.value(&x, true)?;
    let initial = LossRecord {
        iteration: 0,
        content: c0,
        style: s0,
        total: t0,
    };
    let mut current = (c0, s0, t0);
    let mut grad = g0.expect("gradient requested");
    let mut step = cfg.step;
    let mut trace: Vec<LossRecord> = Vec::with_capacity(cfg.iterations);
    let totals = |trace: &[LossRecord]| trace.iter().map(|r| r.total).collect::<Vec<_>>();

    for it in 1..=cfg.iterations {
        // projected direction: drop components pushing a clamped pixel outward
        let mut dir: Vec<f64> = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&p, &g)| if (p <= 0.0 && g > 0.0) || (p >= 1.0 && g < 0.0) { 0.0 } else { -g })
            .collect();
        let norm = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut moved = false;
        if norm > 0.0 {
            for d in &mut dir {
                *d /= norm;
            }
            let slope: f64 = dir.iter().zip(grad.data()).map(|(d, g)| d * g).sum();
            loop {
                let cand = Tensor::from_fn(vec![1, h, w], |k| (x.data()[k] + step * dir[k]).clamp(0.0, 1.0));
                match obj.value(&cand, false) {
                    Ok((c, s, t, _)) if t <= current.2 => {
                        x = cand;
                        current = (c, s, t);
                        step = (step * cfg.step_growth).min(1.0);
                        moved = true;
                        break;
                    }
                    Ok(_) => {}
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged {
                            iteration: it,
                            trace: totals(&trace),
                        })
                    }
                    Err(e) => return Err(e),
                }
                step *= 0.5;
                if step < cfg.min_step {
                    // a descent direction whose predicted gain is below rounding
                    // noise means the iterate has converged
                    if (slope * cfg.step).abs() <= 1e-12 * current.2.abs().max(f64::MIN_POSITIVE) {
                        step = cfg.step;
                        break;
                    }
                    return Err(Error::StepUnderflow {
                        iteration: it,
                        trace: totals(&trace),
                    });
                }
            }
        }
        trace.push(LossRecord {
            iteration: it,
            content: current.0,
            style: current.1,
            total: current.2,
        });
        if moved && it < cfg.iterations {
            grad = obj.value(&x, true)?.3.expect("gradient requested");
        }
    }
    let image = Image::from_clamped(h, w, x.into_data())?;
    Ok(Stylized { image, initial, trace })
}

/// Which subsets of the references each content image is stylised with.
#[derive(Debug, Clone, PartialEq)]
pub enum CombinationPolicy {
    /// Every single reference, then the full set (when it has more than one).
    SinglesAndFull,
    Singles,
    Full,
    Explicit(Vec<Vec<usize>>),
}

impl CombinationPolicy {
    pub fn combinations(&self, n_refs: usize) -> Result<Vec<Vec<usize>>> {
        if n_refs == 0 {
            return Err(Error::invalid("no references"));
        }
        let singles = || (0..n_refs).map(|i| vec![i]).collect::<Vec<_>>();
        let combos = match self {
            CombinationPolicy::SinglesAndFull => {
                let mut c = singles();
                if n_refs > 1 {
                    c.push((0..n_refs).collect());
                }
                c
            }
            CombinationPolicy::Singles => singles(),
            CombinationPolicy::Full => vec![(0..n_refs).collect()],
            CombinationPolicy::Explicit(c) => {
                if c.is_empty() || c.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= n_refs)) {
                    return Err(Error::invalid("explicit combinations must be nonempty and index existing references"));
                }
                c.clone()
            }
        };
        Ok(combos)
    }

    pub fn name(&self) -> &'static str {
        match self {
            CombinationPolicy::SinglesAndFull => "singles+full",
            CombinationPolicy::Singles => "singles",
            CombinationPolicy::Full => "full",
            CombinationPolicy::Explicit(_) => "explicit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "singles+full" => Ok(Self::SinglesAndFull),
            "singles" => Ok(Self::Singles),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!("unknown combination policy {other}"))),
        }
    }
}

/// A content image with the identifier recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Content {
    pub id: String,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub source: String,
    pub refs: Vec<usize>,
    pub final_loss: f64,
    pub output: PathBuf,
    pub trace: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentManifest {
    pub policy: String,
    pub records: Vec<ManifestRecord>,
    pub path: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Stylises every content with every reference combination and writes the
/// outputs, per-output loss traces and a tab-separated manifest to
/// `out_dir`. Jobs are spread over `workers` threads; the outputs do not
/// depend on the worker count.
pub fn augment_batch(
    contents: &[Content],
    refs: &ReferenceSet,
    net: &Network,
    cfg: &NstConfig,
    policy: &CombinationPolicy,
    out_dir: &Path,
    workers: usize,
) -> Result<AugmentManifest> {
    if contents.is_empty() {
        return Err(Error::invalid("no content images to augment"));
    }
    cfg.validate()?;
    ensure_writable(out_dir)?;
    let combos = policy.combinations(refs.len())?;
    let jobs: Vec<(usize, usize)> = (0..contents.len())
        .flat_map(|c| (0..combos.len()).map(move |k| (c, k)))
        .collect();
    let run = |&(c, k): &(usize, usize)| -> Result<ManifestRecord> {
        let subset: Vec<Image> = combos[k].iter().map(|&i| refs.images()[i].clone()).collect();
        let set = ReferenceSet::new(subset, refs.histogram.clone())?;
        let out = stylize(&contents[c].image, &set, net, cfg)?;
        let tag: Vec<String> = combos[k].iter().map(usize::to_string).collect();
        let stem = format!("{:04}-{}__r{}", c, sanitize(&contents[c].id), tag.join("+"));
        let output = out_dir.join(format!("{stem}.pgm"));
        let trace = out_dir.join(format!("{stem}.trace.tsv"));
        out.image.save(&output)?;
        let mut records = vec![out.initial];
        records.extend_from_slice(&out.trace);
        fs::write(&trace, format_trace(&records)).map_err(|e| Error::io(&trace, e))?;
        Ok(ManifestRecord {
            source: contents[c].id.clone(),
            refs: combos[k].clone(),
            final_loss: out.final_loss(),
            output,
            trace,
        })
    };
    let records = crate::dist::parallel_map(&jobs, workers, run)?;
    let path = out_dir.join(MANIFEST_NAME);
    let mut text = format!("# policy {}\nsource\trefs\tfinal_loss\toutput\ttrace\n", policy.name());
    for r in &records {
        let tag: Vec<String> = r.refs.iter().map(usize::to_string).collect();
        let _ = writeln!(
            text,
            "{}\t{}\t{:?}\t{}\t{}",
            r.source,
            tag.join("+"),
            r.final_loss,
            r.output.display(),
            r.trace.display()
        );
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(AugmentManifest {
        policy: policy.name().to_string(),
        records,
        path,
    })
}

fn sanitize(id: &str) -> String {
    let base = Path::new(id).file_stem().and_then(|s| s.to_str()).unwrap_or(id);
    base.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Mean of `values[t..t + window]` for every full window.
pub fn windowed_means(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
