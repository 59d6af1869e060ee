use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nstaug::classify::{
    compare_pre_post, evaluate, evaluate_network, load_eval_network, split_dataset, train_head, ClassifierModel,
    ClassifierReplica, Label, LabeledImage, MetricsReport, TrainConfig,
};
use nstaug::dist::{distributed_train, speedup_benchmark, Clock, WorkerGroup};
use nstaug::featnet::{build_network, default_feature_spec, FeatureLayers};
use nstaug::image::Image;
use nstaug::lrp::{propagate, render_heatmap, LrpConfig, RelevanceTarget};
use nstaug::nst::{augment_batch, CombinationPolicy, Content, InitMode, NstConfig};
use nstaug::pipeline::{gen_synthetic, ingest, run_pipeline, synthesize, PipelineConfig};
use nstaug::srad::{srad_multiscale, Region, SradParams};
use nstaug::styleloss::{HistogramTarget, ReferenceSet};

#[derive(Parser)]
#[command(name = "nstaug", version, about = "Style-transfer augmentation for two-class ultrasound image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benign/malignant corpus as PGM files.
    GenSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Read a dataset root and report per-class counts.
    Ingest {
        root: PathBuf,
        #[arg(long)]
        skip_bad: bool,
    },
    /// Multiscale speckle-reducing diffusion of one image.
    Denoise {
        input: PathBuf,
        /// Outputs are written as <prefix>-s1.pgm .. <prefix>-sL.pgm.
        out_prefix: String,
        #[arg(long, default_value_t = 8)]
        scales: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Homogeneous rectangle as x,y,w,h.
        #[arg(long)]
        region: Option<String>,
    },
    /// Stylise content images with reference images.
    Augment(AugmentArgs),
    /// Relevance heatmap of an image.
    Explain(ExplainArgs),
    /// Train a classifier on the training split of a dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "model")]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Test-split metrics of a saved model, or of freshly trained
    /// pre/post-augmentation models.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Saved model; when absent, models are trained first.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Speedup table of a workload over worker counts.
    BenchmarkScaling {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        /// NST iterations per job, or training steps.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Workload::Augment)]
        workload: Workload,
        /// Stylisation jobs, or the total batch split across workers.
        #[arg(long, default_value_t = 8)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t = ClockArg::Wall)]
        clock: ClockArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline. Any configuration key can be given as `--key value`.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    Augment,
    Train,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Simulated,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Content,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    /// Content loss against --content at the content layer.
    ContentLoss,
    /// A class logit of --model.
    Logit,
    /// Sum of the feature network's last layer.
    OutputSum,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long, required = true, num_args = 1..)]
    content: Vec<PathBuf>,
    #[arg(long = "style", required = true, num_args = 1..)]
    styles: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Feature network seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "singles+full")]
    policy: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 1.25)]
    step_growth: f64,
    #[arg(long, default_value_t = 1e-12)]
    min_step: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Weight of the style term relative to content.
    #[arg(long, default_value_t = 1.0)]
    style_balance: f64,
    /// 0 disables histogram specification of the combined target.
    #[arg(long, default_value_t = 64)]
    histogram_bins: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Content)]
    init: InitArg,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct ExplainArgs {
    image: PathBuf,
    /// Heatmap path (.ppm or .png); a text sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::ContentLoss)]
    target: TargetArg,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "malignant")]
    class: String,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-9)]
    epsilon: f64,
    /// Feature network seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with benign/ and malignant/.
    #[arg(long)]
    data: PathBuf,
    /// Extra training images, same layout; added to the training split only.
    #[arg(long)]
    extra: Vec<PathBuf>,
    #[arg(long)]
    skip_bad: bool,
    /// Base seed: split uses seed+3, model init seed+1, shuffling seed+2.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
    split: Vec<f64>,
}

/// Unset flags keep the library defaults.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    min_learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_norm: Option<bool>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        take!(
            epochs,
            patience,
            learning_rate,
            momentum,
            plateau_factor,
            plateau_patience,
            min_learning_rate,
            batch_size,
            dropout,
            batch_norm
        );
        c.validate()?;
        Ok(c)
    }
}

struct Splits {
    train: Vec<LabeledImage>,
    val: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
    extra: Vec<LabeledImage>,
}

impl DataArgs {
    fn load(&self) -> Result<Splits> {
        let ratios: [f64; 3] = self
            .split
            .as_slice()
            .try_into()
            .map_err(|_| anyhow!("--split takes three ratios"))?;
        let images = load_root(&self.data, self.skip_bad)?;
        let labels: Vec<Label> = images.iter().map(|s| s.label).collect();
        let sp = split_dataset(&labels, ratios, self.seed.wrapping_add(3))?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
        let mut extra = Vec::new();
        for root in &self.extra {
            extra.extend(load_root(root, self.skip_bad)?);
        }
        Ok(Splits {
            train: pick(&sp.train),
            val: pick(&sp.val),
            test: pick(&sp.test),
            extra,
        })
    }
}

fn load_root(root: &Path, skip_bad: bool) -> Result<Vec<LabeledImage>> {
    let (ds, skipped) = ingest(root, skip_bad).with_context(|| format!("reading {}", root.display()))?;
    for (p, why) in skipped {
        eprintln!("skipped {}: {why}", p.display());
    }
    Ok(ds.images)
}

fn fit(data: &DataArgs, cfg: &TrainConfig, train: &[LabeledImage], val: &[LabeledImage]) -> Result<(ClassifierModel, String)> {
    if val.is_empty() {
        bail!("validation split is empty");
    }
    let model = ClassifierModel::new(cfg, data.seed.wrapping_add(1))?;
    let (model, history) = train_head(model, train, val, cfg, data.seed.wrapping_add(2))?;
    Ok((model, history.to_text()))
}

fn parse_region(s: &str) -> Result<Region> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("--region takes x,y,w,h")?;
    match v[..] {
        [x, y, width, height] => Ok(Region { x, y, width, height }),
        _ => bail!("--region takes x,y,w,h"),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn augment(a: AugmentArgs) -> Result<()> {
    let net = build_network(&default_feature_spec(), a.seed)?;
    let mut cfg = NstConfig::for_network(&net)?;
    cfg.iterations = a.iterations;
    cfg.step = a.step;
    cfg.step_growth = a.step_growth;
    cfg.min_step = a.min_step;
    cfg.weights.alpha = a.alpha;
    cfg.weights.style_balance = a.style_balance;
    cfg.init = match a.init {
        InitArg::Content => InitMode::ContentCopy,
        InitArg::Noise => InitMode::Noise { seed: a.noise_seed },
    };
    let histogram = if a.histogram_bins == 0 {
        HistogramTarget::Identity
    } else {
        HistogramTarget::ReferenceAverage { bins: a.histogram_bins }
    };
    let styles = a.styles.iter().map(|p| Image::load(p)).collect::<nstaug::Result<Vec<_>>>()?;
    let refs = ReferenceSet::new(styles, histogram)?;
    let contents = a
        .content
        .iter()
        .map(|p| {
            Ok(Content {
                id: p.display().to_string(),
                image: Image::load(p)?,
            })
        })
        .collect::<nstaug::Result<Vec<_>>>()?;
    let policy = CombinationPolicy::parse(&a.policy)?;
    let m = augment_batch(&contents, &refs, &net, &cfg, &policy, &a.out, a.workers)?;
    for r in &m.records {
        println!("{}\t{:.6e}", r.output.display(), r.final_loss);
    }
    println!("{} outputs, manifest {}", m.records.len(), m.path.display());
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let lrp = LrpConfig::new(a.alpha, a.beta, a.epsilon)?;
    let image = Image::load(&a.image)?;
    let (net, target) = match a.target {
        TargetArg::ContentLoss => {
            let net = build_network(&default_feature_spec(), a.seed)?;
            let src = a.content.as_ref().ok_or_else(|| anyhow!("--target content-loss needs --content"))?;
            let layer = FeatureLayers::default_for(&net)?.content;
            let reference = net.forward(&Image::load(src)?.to_tensor())?.swap_remove(layer);
            (net, RelevanceTarget::ContentLoss { layer, reference })
        }
        TargetArg::Logit => {
            let path = a.model.as_ref().ok_or_else(|| anyhow!("--target logit needs --model"))?;
            (load_eval_network(path)?, RelevanceTarget::Logit(Label::parse(&a.class)?.index()))
        }
        TargetArg::OutputSum => (build_network(&default_feature_spec(), a.seed)?, RelevanceTarget::OutputSum),
    };
    let map = propagate(&net, &image, &target, &lrp)?;
    let side = render_heatmap(&map, 0, &a.out)?;
    println!("explained value {:.6e}", map.output_value());
    println!("max conservation error {:.3e}", map.max_relative_error());
    println!("heatmap {}, sidecar {}", a.out.display(), side.display());
    Ok(())
}

fn report(name: &str, r: &MetricsReport) {
    println!("[{name}]\n{}", r.to_text());
}

fn benchmark(
    workers: Vec<usize>,
    steps: usize,
    workload: Workload,
    jobs: usize,
    clock: ClockArg,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let clock = match clock {
        ClockArg::Wall => Clock::WallClock,
        ClockArg::Simulated => Clock::Simulated,
    };
    let samples: Vec<LabeledImage> = synthesize(jobs.max(8), 16, seed)?.into_iter().map(|(_, s)| s).collect();
    let report = match workload {
        Workload::Augment => {
            let net = build_network(&default_feature_spec(), seed)?;
            let mut cfg = NstConfig::for_network(&net)?;
            cfg.iterations = steps;
            let contents: Vec<Content> = samples
                .iter()
                .take(jobs)
                .enumerate()
                .map(|(k, s)| Content {
                    id: format!("job{k}"),
                    image: s.image.clone(),
                })
                .collect();
            let refs = ReferenceSet::new(vec![samples[samples.len() - 1].image.clone()], HistogramTarget::Identity)?;
            let scratch = std::env::temp_dir().join(format!("nstaug-bench-{}", std::process::id()));
            let r = speedup_benchmark(&workers, jobs, clock, |w| {
                augment_batch(&contents, &refs, &net, &cfg, &CombinationPolicy::Full, &scratch, w).map(|_| ())
            });
            let _ = fs::remove_dir_all(&scratch);
            r?
        }
        Workload::Train => {
            let tc = TrainConfig {
                dropout: 0.0,
                ..TrainConfig::default()
            };
            speedup_benchmark(&workers, jobs, clock, |w| {
                let group = WorkerGroup::strided(w, samples.len(), seed)?;
                let per = jobs.div_ceil(w);
                distributed_train(
                    &group,
                    |rank| Ok(ClassifierReplica::new(ClassifierModel::new(&tc, seed)?, &samples, &tc, seed, rank)),
                    steps,
                    per,
                )
                .map(|_| ())
            })?
        }
    };
    let table = report.to_table();
    print!("{table}");
    if let Some(p) = out {
        write(&p, &table)?;
    }
    Ok(())
}

fn run(config: Option<PathBuf>, print_config: bool, overrides: Vec<String>) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let mut it = overrides.into_iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key value, got {flag:?}"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("--{key} needs a value"))?;
                (key.to_string(), v)
            }
        };
        cfg.set(&key, &value)?;
    }
    if print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let r = run_pipeline(&cfg)?;
    println!("stages: {}", r.stages_run.join(" "));
    if let Some(pre) = &r.pre {
        report("pre-augmentation", pre);
    }
    if let Some(post) = &r.post {
        report("post-augmentation", post);
    }
    if let (Some(a), Some(b)) = (&r.pre, &r.post) {
        print!("{}", compare_pre_post(a, b).to_text());
    }
    if let Some(s) = &r.scaling {
        print!("{}", s.to_table());
    }
    println!("manifest {} (checksum {:016x})", r.manifest_path.display(), r.manifest.checksum());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynthetic { out, per_class, size, seed } => {
            let ds = gen_synthetic(&out, per_class, size, seed)?;
            let (b, m) = ds.counts();
            println!("benign {b}\nmalignant {m}\nchecksum {:016x}", ds.checksum());
        }
        Command::Ingest { root, skip_bad } => {
            let (ds, skipped) = ingest(&root, skip_bad)?;
            let (b, m) = ds.counts();
            println!("benign {b}\nmalignant {m}\nchecksum {:016x}", ds.checksum());
            for (p, why) in skipped {
                println!("skipped {}: {why}", p.display());
            }
        }
        Command::Denoise {
            input,
            out_prefix,
            scales,
            iters,
            dt,
            region,
        } => {
            let params = SradParams {
                iterations_per_scale: iters,
                scales,
                dt,
                region: region.as_deref().map(parse_region).transpose()?,
            };
            let series = srad_multiscale(&Image::load(&input)?, &params)?;
            for (k, img) in series.iter().enumerate() {
                let p = PathBuf::from(format!("{out_prefix}-s{}.pgm", k + 1));
                img.save(&p)?;
                println!("{}", p.display());
            }
        }
        Command::Augment(a) => augment(a)?,
        Command::Explain(a) => explain(a)?,
        Command::Train { data, out, train } => {
            let cfg = train.config()?;
            let s = data.load()?;
            let mut set = s.train;
            set.extend(s.extra);
            let (model, history) = fit(&data, &cfg, &set, &s.val)?;
            fs::create_dir_all(&out)?;
            model.eval_network()?.save_weights(&out.join("model.nstw"))?;
            write(&out.join("history.tsv"), &history)?;
            print!("{history}");
            println!("trained on {} images; model {}", set.len(), out.join("model.nstw").display());
        }
        Command::Evaluate { data, model, train } => {
            let s = data.load()?;
            match model {
                Some(p) => report("model", &evaluate_network(&load_eval_network(&p)?, &s.test)?),
                None => {
                    let cfg = train.config()?;
                    let (pre, _) = fit(&data, &cfg, &s.train, &s.val)?;
                    let a = evaluate(&pre, &s.test)?;
                    report("pre-augmentation", &a);
                    if !s.extra.is_empty() {
                        let mut set = s.train.clone();
                        set.extend(s.extra);
                        let (post, _) = fit(&data, &cfg, &set, &s.val)?;
                        let b = evaluate(&post, &s.test)?;
                        report("post-augmentation", &b);
                        print!("{}", compare_pre_post(&a, &b).to_text());
                    }
                }
            }
        }
        Command::BenchmarkScaling {
            workers,
            steps,
            workload,
            jobs,
            clock,
            seed,
            out,
        } => benchmark(workers, steps, workload, jobs, clock, seed, out)?,
        Command::Run {
            config,
            print_config,
            overrides,
        } => run(config, print_config, overrides)?,
    }
    Ok(())
}
