//! Flat `key = value` run configuration. Keys are prefixed by stage
//! (`train.epochs`, `denoise.scales`, ...); `#` starts a comment.

use std::fs;
use std::path::{Path, PathBuf};

use crate::classify::TrainConfig;
use crate::dist::Clock;
use crate::error::{Error, Result};
use crate::lrp::LrpConfig;
use crate::nst::CombinationPolicy;
use crate::srad::SradParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMethod {
    Nst,
    Geometric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    pub denoise: bool,
    pub augment: bool,
    pub explain: bool,
    pub train: bool,
    pub evaluate: bool,
    pub benchmark: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSettings {
    pub method: AugmentMethod,
    pub policy: CombinationPolicy,
    /// References drawn per class from the training split; 0 takes all.
    pub references: usize,
    pub workers: usize,
    pub iterations: usize,
    pub step: f64,
    pub alpha: f64,
    pub style_balance: f64,
    /// 0 disables histogram specification.
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSettings {
    pub workers: Vec<usize>,
    pub jobs: usize,
    pub clock: Clock,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    /// Dataset root with `benign/` and `malignant/`; synthetic data when absent.
    pub input: Option<PathBuf>,
    pub skip_bad: bool,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    pub split: [f64; 3],
    pub stages: Stages,
    pub denoise: SradParams,
    /// Which scale (1-based) replaces the image downstream; 0 is the last.
    pub denoise_use_scale: usize,
    pub augment: AugmentSettings,
    pub explain: LrpConfig,
    pub explain_count: usize,
    pub train: TrainConfig,
    pub benchmark: BenchmarkSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output: PathBuf::from("nstaug-out"),
            input: None,
            skip_bad: false,
            synthetic_per_class: 20,
            synthetic_size: 16,
            split: [0.7, 0.15, 0.15],
            stages: Stages {
                denoise: true,
                augment: true,
                explain: true,
                train: true,
                evaluate: true,
                benchmark: true,
            },
            denoise: SradParams::default(),
            denoise_use_scale: 0,
            augment: AugmentSettings {
                method: AugmentMethod::Nst,
                policy: CombinationPolicy::Singles,
                references: 3,
                workers: 1,
                iterations: 200,
                step: 0.05,
                alpha: 1.0,
                style_balance: 1.0,
                histogram_bins: 64,
            },
            explain: LrpConfig::default(),
            explain_count: 4,
            train: TrainConfig::default(),
            benchmark: BenchmarkSettings {
                workers: vec![1, 2, 4, 8],
                jobs: 8,
                clock: Clock::Simulated,
                iterations: 20,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {v:?} for {key}"))),
    }
}

fn clock_name(c: Clock) -> &'static str {
    match c {
        Clock::WallClock => "wall",
        Clock::Simulated => "simulated",
    }
}

impl PipelineConfig {
    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.stages;
        let a = &self.augment;
        let t = &self.train;
        let b = &self.benchmark;
        let list: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output", self.output.display().to_string()),
            ("input", self.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("input.skip_bad", self.skip_bad.to_string()),
            ("synthetic.per_class", self.synthetic_per_class.to_string()),
            ("synthetic.size", self.synthetic_size.to_string()),
            ("split.train", self.split[0].to_string()),
            ("split.val", self.split[1].to_string()),
            ("split.test", self.split[2].to_string()),
            ("stage.denoise", s.denoise.to_string()),
            ("stage.augment", s.augment.to_string()),
            ("stage.explain", s.explain.to_string()),
            ("stage.train", s.train.to_string()),
            ("stage.evaluate", s.evaluate.to_string()),
            ("stage.benchmark", s.benchmark.to_string()),
            ("denoise.iterations_per_scale", self.denoise.iterations_per_scale.to_string()),
            ("denoise.scales", self.denoise.scales.to_string()),
            ("denoise.dt", self.denoise.dt.to_string()),
            ("denoise.use_scale", self.denoise_use_scale.to_string()),
            (
                "augment.method",
                match a.method {
                    AugmentMethod::Nst => "nst",
                    AugmentMethod::Geometric => "geometric",
                }
                .into(),
            ),
            ("augment.policy", a.policy.name().into()),
            ("augment.references", a.references.to_string()),
            ("augment.workers", a.workers.to_string()),
            ("augment.iterations", a.iterations.to_string()),
            ("augment.step", a.step.to_string()),
            ("augment.alpha", a.alpha.to_string()),
            ("augment.style_balance", a.style_balance.to_string()),
            ("augment.histogram_bins", a.histogram_bins.to_string()),
            ("explain.alpha", self.explain.alpha.to_string()),
            ("explain.beta", self.explain.beta.to_string()),
            ("explain.epsilon", self.explain.epsilon.to_string()),
            ("explain.count", self.explain_count.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.plateau_factor", t.plateau_factor.to_string()),
            ("train.plateau_patience", t.plateau_patience.to_string()),
            ("train.min_learning_rate", t.min_learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.batch_norm", t.batch_norm.to_string()),
            (
                "benchmark.workers",
                b.workers.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("benchmark.jobs", b.jobs.to_string()),
            ("benchmark.clock", clock_name(b.clock).into()),
            ("benchmark.iterations", b.iterations.to_string()),
        ];
        list.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn keys() -> Vec<String> {
        Self::default().pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "input" => self.input = (!v.is_empty()).then(|| PathBuf::from(v)),
            "input.skip_bad" => self.skip_bad = parse_bool(key, v)?,
            "synthetic.per_class" => self.synthetic_per_class = parse(key, v)?,
            "synthetic.size" => self.synthetic_size = parse(key, v)?,
            "split.train" => self.split[0] = parse(key, v)?,
            "split.val" => self.split[1] = parse(key, v)?,
            "split.test" => self.split[2] = parse(key, v)?,
            "stage.denoise" => self.stages.denoise = parse_bool(key, v)?,
            "stage.augment" => self.stages.augment = parse_bool(key, v)?,
            "stage.explain" => self.stages.explain = parse_bool(key, v)?,
            "stage.train" => self.stages.train = parse_bool(key, v)?,
            "stage.evaluate" => self.stages.evaluate = parse_bool(key, v)?,
            "stage.benchmark" => self.stages.benchmark = parse_bool(key, v)?,
            "denoise.iterations_per_scale" => self.denoise.iterations_per_scale = parse(key, v)?,
            "denoise.scales" => self.denoise.scales = parse(key, v)?,
            "denoise.dt" => self.denoise.dt = parse(key, v)?,
            "denoise.use_scale" => self.denoise_use_scale = parse(key, v)?,
            "augment.method" => {
                self.augment.method = match v {
                    "nst" => AugmentMethod::Nst,
                    "geometric" => AugmentMethod::Geometric,
                    _ => return Err(Error::invalid(format!("unknown augment method {v:?}"))),
                }
            }
            "augment.policy" => self.augment.policy = CombinationPolicy::parse(v)?,
            "augment.references" => self.augment.references = parse(key, v)?,
            "augment.workers" => self.augment.workers = parse(key, v)?,
            "augment.iterations" => self.augment.iterations = parse(key, v)?,
            "augment.step" => self.augment.step = parse(key, v)?,
            "augment.alpha" => self.augment.alpha = parse(key, v)?,
            "augment.style_balance" => self.augment.style_balance = parse(key, v)?,
            "augment.histogram_bins" => self.augment.histogram_bins = parse(key, v)?,
            "explain.alpha" => self.explain.alpha = parse(key, v)?,
            "explain.beta" => self.explain.beta = parse(key, v)?,
            "explain.epsilon" => self.explain.epsilon = parse(key, v)?,
            "explain.count" => self.explain_count = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.plateau_factor" => self.train.plateau_factor = parse(key, v)?,
            "train.plateau_patience" => self.train.plateau_patience = parse(key, v)?,
            "train.min_learning_rate" => self.train.min_learning_rate = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.dropout" => self.train.dropout = parse(key, v)?,
            "train.batch_norm" => self.train.batch_norm = parse_bool(key, v)?,
            "benchmark.workers" => {
                self.benchmark.workers = v
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "benchmark.jobs" => self.benchmark.jobs = parse(key, v)?,
            "benchmark.clock" => {
                self.benchmark.clock = match v {
                    "wall" => Clock::WallClock,
                    "simulated" => Clock::Simulated,
                    _ => return Err(Error::invalid(format!("unknown clock {v:?}"))),
                }
            }
            "benchmark.iterations" => self.benchmark.iterations = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("configuration", format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stages;
        if s.explain && !(s.augment && self.augment.method == AugmentMethod::Nst) {
            return Err(Error::invalid("stage.explain requires stage.augment with augment.method = nst"));
        }
        if s.evaluate && !s.train {
            return Err(Error::invalid("stage.evaluate requires stage.train"));
        }
        if self.synthetic_per_class == 0 || self.synthetic_size < 16 {
            return Err(Error::invalid("synthetic data needs per_class >= 1 and size >= 16"));
        }
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must be nonnegative and sum to 1"));
        }
        if s.denoise {
            self.denoise.validate()?;
            if self.denoise_use_scale > self.denoise.scales {
                return Err(Error::invalid("denoise.use_scale must not exceed denoise.scales"));
            }
        }
        if s.augment {
            let a = &self.augment;
            if a.workers == 0 || a.iterations == 0 || !(a.step > 0.0) {
                return Err(Error::invalid("augment workers, iterations and step must be positive"));
            }
            if !(a.alpha >= 0.0 && a.style_balance >= 0.0) {
                return Err(Error::invalid("augment weights must be nonnegative"));
            }
        }
        if s.explain {
            self.explain.validate()?;
        }
        if s.train {
            self.train.validate()?;
        }
        if s.benchmark && (self.benchmark.workers.is_empty() || self.benchmark.workers.contains(&0) || self.benchmark.jobs == 0) {
            return Err(Error::invalid("benchmark worker counts and job count must be positive"));
        }
        Ok(())
    }
}
