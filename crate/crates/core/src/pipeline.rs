//! End-to-end run: load or synthesise data, split, denoise, augment the
//! training split, explain, train before/after classifiers, evaluate and
//! benchmark. Every parameter, seed, artifact and metric goes into one
//! line-oriented manifest.
//!
//! The split happens before augmentation, so no derivative of a validation
//! or test image is ever trained on.

mod config;
mod data;
mod geometric;

pub use config::{AugmentMethod, AugmentSettings, BenchmarkSettings, PipelineConfig, Stages};
pub use data::{gen_synthetic, ingest, synthesize, Dataset, DatasetItem, Provenance, Skipped};
pub use geometric::{baseline_ops, geometric_augment, Axis, GeometricOp};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checksum::fnv1a;
use crate::classify::{
    compare_pre_post, evaluate, split_dataset, train_head, ClassifierModel, Label, LabeledImage, MetricsReport, Split,
};
use crate::dist::{speedup_benchmark, Clock, ScalingReport};
use crate::error::{Error, Result};
use crate::featnet::{build_network, default_feature_spec, FeatureLayers, Network};
use crate::image::Image;
use crate::lrp::{propagate, render_heatmap, RelevanceTarget};
use crate::nst::{augment_batch, Content, NstConfig};
use crate::srad::srad_multiscale;
use crate::styleloss::HistogramTarget;

pub const MANIFEST_FILE: &str = "run_manifest.txt";
/// Manifest keys with this prefix hold wall-clock measurements.
pub const TIMING_PREFIX: &str = "timing.";

/// Ordered `key\tvalue` lines closed by a checksum of the non-timing lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Hash over every entry except timing ones.
    pub fn checksum(&self) -> u64 {
        let text: String = self
            .entries
            .iter()
            .filter(|(k, _)| !k.starts_with(TIMING_PREFIX) && k != "checksum")
            .map(|(k, v)| format!("{k}\t{v}\n"))
            .collect();
        fnv1a(text.as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# run manifest; keys starting with {TIMING_PREFIX} are wall-clock and excluded from the checksum\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}\t{v}\n"));
        }
        s.push_str(&format!("checksum\t{:016x}\n", self.checksum()));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("run manifest", format!("line without a tab: {line:?}")))?;
            if k != "checksum" {
                m.push(k, v);
            }
        }
        Ok(m)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with("artifact."))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub stages_run: Vec<&'static str>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub pre: Option<MetricsReport>,
    pub post: Option<MetricsReport>,
    pub scaling: Option<ScalingReport>,
    pub augmented: usize,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    root: PathBuf,
    manifest: Manifest,
    artifacts: usize,
}

impl Run<'_> {
    fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.manifest.push(format!("artifact.{:05}", self.artifacts), rel.display());
        self.artifacts += 1;
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.artifact(&path);
        Ok(path)
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })?;
        self.manifest
            .push(format!("{TIMING_PREFIX}{name}_seconds"), format!("{:.3}", t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("item").to_string()
}

fn select(images: &[LabeledImage], idx: &[usize]) -> Vec<LabeledImage> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

fn push_metrics(m: &mut Manifest, prefix: &str, r: &MetricsReport) {
    let c = r.confusion;
    for (k, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
        m.push(format!("{prefix}.{k}"), v);
    }
    for (name, v) in r.named() {
        m.push(format!("{prefix}.{name}"), v.map_or("undefined".to_string(), |x| format!("{x:.6}")));
    }
}

/// Augmented training images with the source image index they came from.
struct Augmented {
    images: Vec<LabeledImage>,
    /// `(source index, output path)` of NST outputs, for explanation.
    nst_outputs: Vec<(usize, PathBuf)>,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let root = cfg.output.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut run = Run {
        cfg,
        root: root.clone(),
        manifest: Manifest::default(),
        artifacts: 0,
    };
    for (k, v) in cfg.pairs() {
        if k != "output" {
            run.manifest.push(format!("config.{k}"), v);
        }
    }
    let s = &cfg.stages;
    let mut report = RunReport {
        stages_run: Vec::new(),
        manifest: Manifest::default(),
        manifest_path: root.join(MANIFEST_FILE),
        pre: None,
        post: None,
        scaling: None,
        augmented: 0,
    };
    if s.denoise || s.augment || s.train || s.benchmark {
        let (ids, mut images) = run.stage("load", load)?;
        report.stages_run.push("load");
        let labels: Vec<Label> = images.iter().map(|s| s.label).collect();
        let split = if s.augment || s.train {
            let sp = split_dataset(&labels, cfg.split, cfg.seed.wrapping_add(3))?;
            for (name, part) in [("train", &sp.train), ("val", &sp.val), ("test", &sp.test)] {
                run.manifest.push(format!("split.{name}.count"), part.len());
                let list: Vec<String> = part.iter().map(usize::to_string).collect();
                run.manifest.push(format!("split.{name}.indices"), list.join(","));
            }
            Some(sp)
        } else {
            None
        };
        if s.denoise {
            run.stage("denoise", |r| denoise(r, &ids, &mut images))?;
            report.stages_run.push("denoise");
        }
        let net = build_network(&default_feature_spec(), cfg.seed)?;
        let mut augmented = Augmented {
            images: Vec::new(),
            nst_outputs: Vec::new(),
        };
        if s.augment {
            let sp = split.as_ref().expect("split exists when augmenting");
            augmented = run.stage("augment", |r| augment(r, &ids, &images, sp, &net))?;
            report.augmented = augmented.images.len();
            report.stages_run.push("augment");
        }
        if s.explain {
            run.stage("explain", |r| explain(r, &images, &augmented.nst_outputs, &net))?;
            report.stages_run.push("explain");
        }
        if s.train {
            let sp = split.as_ref().expect("split exists when training");
            let (pre, post) = run.stage("train", |r| train(r, &images, sp, &augmented.images))?;
            report.stages_run.push("train");
            if s.evaluate {
                let test = select(&images, &sp.test);
                let (a, b) = run.stage("evaluate", |r| evaluate_stage(r, &pre, post.as_ref(), &test))?;
                report.pre = Some(a);
                report.post = b;
                report.stages_run.push("evaluate");
            }
        }
        if s.benchmark {
            report.scaling = Some(run.stage("benchmark", |r| benchmark(r, &images, &net))?);
            report.stages_run.push("benchmark");
        }
    }
    for p in run.manifest.artifacts() {
        if !root.join(p).exists() {
            return Err(Error::invalid(format!("artifact {p} listed in the manifest is missing")));
        }
    }
    fs::write(&report.manifest_path, run.manifest.to_text()).map_err(|e| Error::io(&report.manifest_path, e))?;
    report.manifest = run.manifest;
    Ok(report)
}

fn load(run: &mut Run) -> Result<(Vec<String>, Vec<LabeledImage>)> {
    let cfg = run.cfg;
    let ds = match &cfg.input {
        Some(input) => {
            let (ds, skipped) = ingest(input, cfg.skip_bad)?;
            for (i, (p, why)) in skipped.iter().enumerate() {
                run.manifest.push(format!("data.skipped.{i}"), format!("{}: {why}", p.display()));
            }
            ds
        }
        None => gen_synthetic(&run.root.join("data"), cfg.synthetic_per_class, cfg.synthetic_size, cfg.seed)?,
    };
    if ds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let (b, m) = ds.counts();
    run.manifest.push("data.benign", b);
    run.manifest.push("data.malignant", m);
    run.manifest.push("data.checksum", format!("{:016x}", ds.checksum()));
    if cfg.input.is_none() {
        for item in &ds.items {
            let p = item.path.clone();
            run.artifact(&p);
        }
    }
    let ids = ds.items.iter().map(|i| format!("{}_{}", i.label.name(), stem(&i.path))).collect();
    Ok((ids, ds.images))
}

fn denoise(run: &mut Run, ids: &[String], images: &mut [LabeledImage]) -> Result<()> {
    let cfg = run.cfg;
    let used = if cfg.denoise_use_scale == 0 { cfg.denoise.scales } else { cfg.denoise_use_scale };
    run.manifest.push("denoise.used_scale", used);
    for (id, item) in ids.iter().zip(images.iter_mut()) {
        let series = srad_multiscale(&item.image, &cfg.denoise)?;
        for (k, img) in series.iter().enumerate() {
            let path = run.root.join("denoise").join(item.label.name()).join(format!("{id}_s{}.pgm", k + 1));
            img.save(&path)?;
            run.artifact(&path);
        }
        item.image = series[used - 1].clone();
    }
    run.manifest.push("denoise.images", images.len());
    run.manifest.push("denoise.scales_per_image", cfg.denoise.scales);
    let sum: Vec<f64> = images.iter().flat_map(|s| s.image.pixels().to_vec()).collect();
    run.manifest.push("denoise.checksum", format!("{:016x}", crate::checksum::fnv1a_f64(&sum)));
    Ok(())
}

fn augment(run: &mut Run, ids: &[String], images: &[LabeledImage], split: &Split, net: &Network) -> Result<Augmented> {
    let cfg = run.cfg;
    let a = &cfg.augment;
    let mut out = Augmented {
        images: Vec::new(),
        nst_outputs: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    for label in Label::ALL {
        let class: Vec<usize> = split.train.iter().copied().filter(|&i| images[i].label == label).collect();
        if class.is_empty() {
            continue;
        }
        let dir = run.root.join("augment").join(label.name());
        let before = out.images.len();
        let expected;
        match a.method {
            AugmentMethod::Geometric => {
                let ops = baseline_ops();
                expected = class.len() * ops.len();
                for &i in &class {
                    for op in &ops {
                        let img = geometric_augment(&images[i].image, *op)?;
                        let path = dir.join(format!("{}__{}.pgm", ids[i], op.tag()));
                        img.save(&path)?;
                        run.artifact(&path);
                        out.images.push(LabeledImage {
                            image: img.quantized(),
                            label,
                        });
                    }
                }
            }
            AugmentMethod::Nst => {
                let refs_idx: Vec<usize> = if a.references == 0 || a.references >= class.len() {
                    class.clone()
                } else {
                    let mut pick: Vec<usize> = sample(&mut rng, class.len(), a.references).into_iter().map(|k| class[k]).collect();
                    pick.sort_unstable();
                    pick
                };
                for (k, &r) in refs_idx.iter().enumerate() {
                    run.manifest.push(format!("augment.{}.reference.{k}", label.name()), &ids[r]);
                }
                let histogram = if a.histogram_bins == 0 {
                    HistogramTarget::Identity
                } else {
                    HistogramTarget::ReferenceAverage { bins: a.histogram_bins }
                };
                let refs = crate::styleloss::ReferenceSet::new(
                    refs_idx.iter().map(|&r| images[r].image.clone()).collect(),
                    histogram,
                )?;
                let mut ncfg = NstConfig::for_network(net)?;
                ncfg.iterations = a.iterations;
                ncfg.step = a.step;
                ncfg.weights.alpha = a.alpha;
                ncfg.weights.style_balance = a.style_balance;
                let contents: Vec<Content> = class
                    .iter()
                    .map(|&i| Content {
                        id: ids[i].clone(),
                        image: images[i].image.clone(),
                    })
                    .collect();
                expected = contents.len() * a.policy.combinations(refs.len())?.len();
                let m = augment_batch(&contents, &refs, net, &ncfg, &a.policy, &dir, a.workers)?;
                run.artifact(&m.path);
                // records run over contents first, then reference combinations
                let per = m.records.len() / class.len();
                for (j, rec) in m.records.iter().enumerate() {
                    let src = class[j / per];
                    run.artifact(&rec.output);
                    run.artifact(&rec.trace);
                    out.images.push(LabeledImage {
                        image: Image::load(&rec.output)?,
                        label,
                    });
                    out.nst_outputs.push((src, rec.output.clone()));
                }
            }
        }
        let produced = out.images.len() - before;
        run.manifest.push(format!("augment.{}.expected", label.name()), expected);
        run.manifest.push(format!("augment.{}.produced", label.name()), produced);
        if produced != expected {
            return Err(Error::invalid(format!(
                "{} augmentation produced {produced} images, expected {expected}",
                label.name()
            )));
        }
    }
    run.manifest.push("augment.total", out.images.len());
    Ok(out)
}

/// Relevance of the content loss between each stylised output and its
/// source, down to the pixels.
fn explain(run: &mut Run, images: &[LabeledImage], outputs: &[(usize, PathBuf)], net: &Network) -> Result<()> {
    let cfg = run.cfg;
    let layer = FeatureLayers::default_for(net)?.content;
    for (k, (src, path)) in outputs.iter().take(cfg.explain_count).enumerate() {
        let reference = net.forward(&images[*src].image.to_tensor())?.swap_remove(layer);
        let stylised = Image::load(path)?;
        let map = propagate(net, &stylised, &RelevanceTarget::ContentLoss { layer, reference }, &cfg.explain)?;
        let out = run.root.join("explain").join(format!("{}.ppm", stem(path)));
        let side = render_heatmap(&map, 0, &out)?;
        run.artifact(&out);
        run.artifact(&side);
        run.manifest.push(format!("explain.{k}.output_value"), format!("{:e}", map.output_value()));
        run.manifest.push(format!("explain.{k}.max_relative_error"), format!("{:e}", map.max_relative_error()));
    }
    Ok(())
}

fn train(
    run: &mut Run,
    images: &[LabeledImage],
    split: &Split,
    augmented: &[LabeledImage],
) -> Result<(ClassifierModel, Option<ClassifierModel>)> {
    let cfg = run.cfg;
    let train_set = select(images, &split.train);
    let val = select(images, &split.val);
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let fit = |run: &mut Run, name: &str, data: &[LabeledImage]| -> Result<ClassifierModel> {
        let model = ClassifierModel::new(&cfg.train, cfg.seed.wrapping_add(1))?;
        let (model, history) = train_head(model, data, &val, &cfg.train, cfg.seed.wrapping_add(2))?;
        run.write(&format!("models/{name}_history.tsv"), &history.to_text())?;
        let weights = run.root.join(format!("models/{name}.nstw"));
        fs::create_dir_all(weights.parent().expect("models dir")).map_err(|e| Error::io(&weights, e))?;
        model.eval_network()?.save_weights(&weights)?;
        run.artifact(&weights);
        run.manifest.push(format!("train.{name}.samples"), data.len());
        run.manifest.push(format!("train.{name}.epochs_run"), history.epochs.len());
        run.manifest.push(format!("train.{name}.best_epoch"), history.best_epoch);
        run.manifest.push(format!("train.{name}.parameters"), format!("{:016x}", crate::checksum::fnv1a_f64(&model.parameters())));
        Ok(model)
    };
    let pre = fit(run, "pre", &train_set)?;
    let post = if augmented.is_empty() {
        None
    } else {
        let mut all = train_set.clone();
        all.extend_from_slice(augmented);
        Some(fit(run, "post", &all)?)
    };
    Ok((pre, post))
}

fn evaluate_stage(
    run: &mut Run,
    pre: &ClassifierModel,
    post: Option<&ClassifierModel>,
    test: &[LabeledImage],
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let a = evaluate(pre, test)?;
    push_metrics(&mut run.manifest, "metrics.pre", &a);
    run.write("reports/pre_metrics.txt", &a.to_text())?;
    let b = match post {
        Some(m) => {
            let b = evaluate(m, test)?;
            push_metrics(&mut run.manifest, "metrics.post", &b);
            run.write("reports/post_metrics.txt", &b.to_text())?;
            let d = compare_pre_post(&a, &b);
            for (name, v) in &d.deltas {
                run.manifest
                    .push(format!("metrics.delta.{name}"), v.map_or("undefined".to_string(), |x| format!("{x:.6}")));
            }
            run.write("reports/pre_post_delta.txt", &d.to_text())?;
            Some(b)
        }
        None => None,
    };
    Ok((a, b))
}

fn benchmark(run: &mut Run, images: &[LabeledImage], net: &Network) -> Result<ScalingReport> {
    let cfg = run.cfg;
    let b = &cfg.benchmark;
    let contents: Vec<Content> = images
        .iter()
        .cycle()
        .take(b.jobs)
        .enumerate()
        .map(|(k, s)| Content {
            id: format!("job{k}"),
            image: s.image.clone(),
        })
        .collect();
    let refs = crate::styleloss::ReferenceSet::new(vec![images[0].image.clone()], HistogramTarget::Identity)?;
    let mut ncfg = NstConfig::for_network(net)?;
    ncfg.iterations = b.iterations;
    ncfg.weights.style_balance = cfg.augment.style_balance;
    let scratch = run.root.join("benchmark").join("scratch");
    let report = speedup_benchmark(&b.workers, b.jobs, b.clock, |w| {
        augment_batch(&contents, &refs, net, &ncfg, &crate::nst::CombinationPolicy::Full, &scratch.join(format!("w{w}")), w)
            .map(|_| ())
    })?;
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    let prefix = match b.clock {
        Clock::Simulated => "benchmark.".to_string(),
        Clock::WallClock => format!("{TIMING_PREFIX}benchmark."),
    };
    for r in &report.rows {
        run.manifest.push(format!("{prefix}w{}.parallel_time", r.workers), format!("{:.4}", r.parallel_time));
        run.manifest.push(format!("{prefix}w{}.serial_time", r.workers), format!("{:.4}", r.serial_time));
        run.manifest.push(format!("{prefix}w{}.speedup", r.workers), format!("{:.4}", r.speedup));
    }
    run.manifest.push("benchmark.hardware_threads", report.hardware_threads);
    let under: Vec<String> = report.under_provisioned.iter().map(usize::to_string).collect();
    run.manifest.push("benchmark.under_provisioned", under.join(","));
    let table = report.to_table();
    let path = run.write("benchmark/scaling.txt", &table)?;
    run.manifest.push("benchmark.table", path.strip_prefix(&run.root).unwrap_or(&path).display());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_checksum_ignores_timing() {
        let mut a = Manifest::default();
        a.push("x", 1);
        a.push("timing.load_seconds", "0.5");
        let mut b = Manifest::default();
        b.push("x", 1);
        b.push("timing.load_seconds", "9.5");
        assert_eq!(a.checksum(), b.checksum());
        let parsed = Manifest::parse(&a.to_text()).unwrap();
        assert_eq!(parsed, a);
        b.push("y", 2);
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn all_stages_disabled() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.output = dir.path().to_path_buf();
        for k in ["denoise", "augment", "explain", "train", "evaluate", "benchmark"] {
            cfg.set(&format!("stage.{k}"), "false").unwrap();
        }
        let r = run_pipeline(&cfg).unwrap();
        assert!(r.stages_run.is_empty());
        assert_eq!(r.manifest.artifacts().count(), 0);
        assert!(r.manifest_path.exists());
    }
}
