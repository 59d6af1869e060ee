//! Benign/malignant classifier used to measure what augmentation buys.
//!
//! The model is the classifier backbone (conv stages ending in global
//! average pooling) followed by a head of optional batch normalisation,
//! dropout and a two-unit dense layer with softmax cross-entropy. All
//! layers are trained together by SGD with momentum, with early stopping
//! and learning-rate reduction on a validation plateau.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{LocalStep, Replica};
use crate::error::{Error, Result};
use crate::featnet::{build_network, classifier_backbone_spec, softmax, LayerKind, LayerSpec, Network};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malignant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            _ => Err(Error::invalid(format!("class index {i} is not 0 or 1"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            _ => Err(Error::invalid(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    pub batch_size: usize,
    /// Zero disables dropout.
    pub dropout: f64,
    pub batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            patience: 7,
            learning_rate: 1e-4,
            momentum: 0.9,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_learning_rate: 1e-7,
            batch_size: 32,
            dropout: 0.5,
            batch_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if self.patience == 0 || self.patience > self.epochs {
            return bad("patience must lie in 1..=epochs");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_patience == 0 {
            return bad("plateau factor must lie in (0, 1) and its patience be at least 1");
        }
        if !(self.min_learning_rate >= 0.0) {
            return bad("learning-rate floor must be nonnegative");
        }
        Ok(())
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

/// Backbone plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    backbone: Network,
    bn: Option<BatchNorm>,
    /// `[2, C]`, row-major.
    dense_w: Vec<f64>,
    dense_b: [f64; 2],
    dropout: f64,
    features: usize,
}

/// Loss, parameter gradient and batch statistics of one training batch.
struct BatchPass {
    loss: f64,
    correct: usize,
    grad: Vec<f64>,
    /// Batch mean then variance of the pooled features (empty without BN).
    stats: Vec<f64>,
}

impl ClassifierModel {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let backbone = build_network(&classifier_backbone_spec(), seed)?;
        let features = pooled_features(&backbone.specs())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let bound = (6.0 / (features + 2) as f64).sqrt();
        let dense_w = (0..2 * features).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            backbone,
            bn: cfg.batch_norm.then(|| BatchNorm::new(features)),
            dense_w,
            dense_b: [0.0; 2],
            dropout: cfg.dropout,
            features,
        })
    }

    pub fn backbone(&self) -> &Network {
        &self.backbone
    }

    pub fn num_parameters(&self) -> usize {
        self.backbone.num_parameters() + self.bn.as_ref().map_or(0, |b| 2 * b.gamma.len()) + self.dense_w.len() + 2
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.backbone.parameters();
        if let Some(bn) = &self.bn {
            p.extend_from_slice(&bn.gamma);
            p.extend_from_slice(&bn.beta);
        }
        p.extend_from_slice(&self.dense_w);
        p.extend_from_slice(&self.dense_b);
        p
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::ShapeMismatch {
                op: "classifier parameters",
                left: vec![values.len()],
                right: vec![self.num_parameters()],
            });
        }
        let nb = self.backbone.num_parameters();
        self.backbone.set_parameters(&values[..nb])?;
        let mut k = nb;
        let c = self.features;
        if let Some(bn) = &mut self.bn {
            bn.gamma.copy_from_slice(&values[k..k + c]);
            bn.beta.copy_from_slice(&values[k + c..k + 2 * c]);
            k += 2 * c;
        }
        self.dense_w.copy_from_slice(&values[k..k + 2 * c]);
        self.dense_b.copy_from_slice(&values[k + 2 * c..]);
        Ok(())
    }

    /// Running normalisation statistics, mean then variance.
    pub fn running_stats(&self) -> Vec<f64> {
        self.bn
            .as_ref()
            .map(|b| [b.running_mean.clone(), b.running_var.clone()].concat())
            .unwrap_or_default()
    }

    fn update_running_stats(&mut self, stats: &[f64]) {
        if let Some(bn) = &mut self.bn {
            let c = bn.gamma.len();
            for i in 0..c {
                bn.running_mean[i] = (1.0 - BN_MOMENTUM) * bn.running_mean[i] + BN_MOMENTUM * stats[i];
                bn.running_var[i] = (1.0 - BN_MOMENTUM) * bn.running_var[i] + BN_MOMENTUM * stats[c + i];
            }
        }
    }

    /// Inference network with normalisation folded into the dense layer;
    /// its logits equal evaluation-mode logits of the model.
    pub fn eval_network(&self) -> Result<Network> {
        let c = self.features;
        let mut net = build_network(&eval_spec(self.backbone.specs())?, 0)?;
        let (mut w, mut b) = (self.dense_w.clone(), self.dense_b.to_vec());
        if let Some(bn) = &self.bn {
            for o in 0..2 {
                for i in 0..c {
                    let s = bn.gamma[i] / (bn.running_var[i] + BN_EPS).sqrt();
                    let wo = self.dense_w[o * c + i];
                    w[o * c + i] = wo * s;
                    b[o] += wo * (bn.beta[i] - s * bn.running_mean[i]);
                }
            }
        }
        let mut p = self.backbone.parameters();
        p.extend(w);
        p.extend(b);
        net.set_parameters(&p)?;
        Ok(net)
    }

    /// Forward and backward pass over one batch in training mode.
    fn batch_pass(&self, batch: &[&LabeledImage], rng: &mut ChaCha8Rng) -> Result<BatchPass> {
        let c = self.features;
        let nb = batch.len();
        let mut acts = Vec::with_capacity(nb);
        let mut z = Vec::with_capacity(nb);
        for s in batch {
            let a = self.backbone.forward(&s.image.to_tensor())?;
            z.push(a.last().expect("activations").data().to_vec());
            acts.push(a);
        }
        // normalisation over the batch
        let (mut xhat, mut inv_std, mut stats) = (z.clone(), vec![1.0; c], Vec::new());
        if self.bn.is_some() {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..c {
                mean[i] = z.iter().map(|v| v[i]).sum::<f64>() / nb as f64;
                var[i] = z.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / nb as f64;
                inv_std[i] = 1.0 / (var[i] + BN_EPS).sqrt();
            }
            for v in &mut xhat {
                for i in 0..c {
                    v[i] = (v[i] - mean[i]) * inv_std[i];
                }
            }
            stats = [mean, var].concat();
        }
        let y: Vec<Vec<f64>> = match &self.bn {
            Some(bn) => xhat
                .iter()
                .map(|v| (0..c).map(|i| bn.gamma[i] * v[i] + bn.beta[i]).collect())
                .collect(),
            None => xhat.clone(),
        };
        let keep = 1.0 - self.dropout;
        let masks: Vec<Vec<f64>> = (0..nb)
            .map(|_| {
                (0..c)
                    .map(|_| {
                        if self.dropout == 0.0 {
                            1.0
                        } else if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut gw = vec![0.0; 2 * c];
        let mut gb = [0.0; 2];
        let mut dy = vec![vec![0.0; c]; nb];
        for b in 0..nb {
            let h: Vec<f64> = y[b].iter().zip(&masks[b]).map(|(a, m)| a * m).collect();
            let logits = self.logits(&h);
            let p = softmax(&logits);
            let t = batch[b].label.index();
            loss -= p[t].max(f64::MIN_POSITIVE).ln();
            if argmax(&p) == t {
                correct += 1;
            }
            for o in 0..2 {
                let g = (p[o] - if o == t { 1.0 } else { 0.0 }) / nb as f64;
                gb[o] += g;
                for i in 0..c {
                    gw[o * c + i] += g * h[i];
                    dy[b][i] += g * self.dense_w[o * c + i] * masks[b][i];
                }
            }
        }
        loss /= nb as f64;
        let mut gbn = Vec::new();
        let dz: Vec<Vec<f64>> = match &self.bn {
            Some(bn) => {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dz = vec![vec![0.0; c]; nb];
                for i in 0..c {
                    let mut sum_dx = 0.0;
                    let mut sum_dx_x = 0.0;
                    for b in 0..nb {
                        dgamma[i] += dy[b][i] * xhat[b][i];
                        dbeta[i] += dy[b][i];
                        let dx = dy[b][i] * bn.gamma[i];
                        sum_dx += dx;
                        sum_dx_x += dx * xhat[b][i];
                    }
                    for b in 0..nb {
                        let dx = dy[b][i] * bn.gamma[i];
                        dz[b][i] = inv_std[i] * (dx - sum_dx / nb as f64 - xhat[b][i] * sum_dx_x / nb as f64);
                    }
                }
                gbn = [dgamma, dbeta].concat();
                dz
            }
            None => dy,
        };
        let top = self.backbone.num_layers();
        let mut grad = vec![0.0; self.backbone.num_parameters()];
        for (a, d) in acts.iter().zip(&dz) {
            let seed = Tensor::new(vec![c], d.clone())?;
            let g = self.backbone.backward(a, &[(top, &seed)])?;
            for (s, v) in grad.iter_mut().zip(&g.params) {
                *s += v;
            }
        }
        grad.extend(gbn);
        grad.extend(gw);
        grad.extend(gb);
        Ok(BatchPass {
            loss,
            correct,
            grad,
            stats,
        })
    }

    fn logits(&self, h: &[f64]) -> [f64; 2] {
        let c = self.features;
        let mut out = self.dense_b;
        for (o, v) in out.iter_mut().enumerate() {
            *v += self.dense_w[o * c..(o + 1) * c].iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Evaluation-mode class probabilities.
    pub fn predict_proba(&self, image: &Image) -> Result<[f64; 2]> {
        let a = self.backbone.forward(&image.to_tensor())?;
        let mut z = a.last().expect("activations").data().to_vec();
        if let Some(bn) = &self.bn {
            for (i, v) in z.iter_mut().enumerate() {
                *v = bn.gamma[i] * (*v - bn.running_mean[i]) / (bn.running_var[i] + BN_EPS).sqrt() + bn.beta[i];
            }
        }
        let p = softmax(&self.logits(&z));
        Ok([p[0], p[1]])
    }

    pub fn predict(&self, image: &Image) -> Result<Label> {
        Label::from_index(argmax(&self.predict_proba(image)?))
    }

    /// Mean evaluation-mode cross-entropy and accuracy.
    pub fn evaluate_loss(&self, data: &[LabeledImage]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty set"));
        }
        let mut loss = 0.0;
        let mut correct = 0;
        for s in data {
            let p = self.predict_proba(&s.image)?;
            loss -= p[s.label.index()].max(f64::MIN_POSITIVE).ln();
            correct += usize::from(argmax(&p) == s.label.index());
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

fn argmax(p: &[f64]) -> usize {
    if p[1] > p[0] {
        1
    } else {
        0
    }
}

fn pooled_features(spec: &[LayerSpec]) -> Result<usize> {
    spec.iter()
        .rev()
        .find_map(|s| match s.kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            _ => None,
        })
        .ok_or_else(|| Error::invalid("backbone has no conv layer"))
}

fn eval_spec(mut spec: Vec<LayerSpec>) -> Result<Vec<LayerSpec>> {
    let c = pooled_features(&spec)?;
    spec.push(LayerSpec::named("logits", LayerKind::Dense { inputs: c, outputs: 2 }));
    Ok(spec)
}

/// Reads weights written from [`ClassifierModel::eval_network`].
pub fn load_eval_network(path: &Path) -> Result<Network> {
    let mut net = build_network(&eval_spec(classifier_backbone_spec())?, 0)?;
    net.load_weights(path)?;
    Ok(net)
}

/// Class probabilities from an inference network.
pub fn network_proba(net: &Network, image: &Image) -> Result<[f64; 2]> {
    let a = net.forward(&image.to_tensor())?;
    let z = a.last().expect("activations").data();
    if z.len() != 2 {
        return Err(Error::invalid(format!("expected 2 logits, got {}", z.len())));
    }
    let p = softmax(z);
    Ok([p[0], p[1]])
}

/// SGD with momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, n: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}

/// Stops once `patience` consecutive observations fail to improve on the
/// best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` observations
/// without improvement, never going below `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    factor: f64,
    patience: usize,
    floor: f64,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        Self {
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch whose weights were kept (lowest validation loss).
    pub best_epoch: usize,
}

impl History {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\tlr\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\t{:e}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.learning_rate
            );
        }
        let _ = writeln!(s, "# best_epoch {}\n# stopped_early {}", self.best_epoch, self.stopped_early);
        s
    }
}

/// Trains all layers of `model`. Each epoch shuffles the training set,
/// takes SGD steps over mini-batches, then scores the validation set. The
/// returned model carries the weights of the best validation epoch.
pub fn train_head(
    mut model: ClassifierModel,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ClassifierModel, History)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    model.dropout = cfg.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, model.num_parameters());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History {
        epochs: Vec::new(),
        stopped_early: false,
        best_epoch: 0,
    };
    let mut best = model.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &train[i]).collect();
            let pass = model.batch_pass(&batch, &mut rng)?;
            if !pass.loss.is_finite() || pass.grad.iter().any(|g| !g.is_finite()) {
                let mut trace: Vec<f64> = history.epochs.iter().map(|e| e.train_loss).collect();
                trace.push(pass.loss);
                return Err(Error::Diverged { iteration: epoch, trace });
            }
            let mut p = model.parameters();
            opt.step(&mut p, &pass.grad);
            model.set_parameters(&p)?;
            model.update_running_stats(&pass.stats);
            loss_sum += pass.loss * batch.len() as f64;
            correct += pass.correct;
        }
        let (val_loss, val_accuracy) = model.evaluate_loss(val)?;
        if !val_loss.is_finite() {
            let trace = history.epochs.iter().map(|e| e.val_loss).chain([val_loss]).collect();
            return Err(Error::Diverged { iteration: epoch, trace });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            learning_rate: opt.learning_rate,
        });
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        opt.learning_rate = plateau.observe(val_loss, opt.learning_rate);
        if stop {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok((best, history))
}

/// Train/validation/test index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffle, then largest-remainder apportionment of each class
/// over the three partitions. Index lists are sorted.
pub fn split_dataset(labels: &[Label], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let parts = ratios.iter().filter(|r| **r > 0.0).count();
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < parts {
            return Err(Error::invalid(format!(
                "class {} has {} items, fewer than the {parts} nonempty partitions",
                label.name(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let quota: Vec<f64> = ratios.iter().map(|r| (n as f64 * r * 1e9).round() / 1e9).collect();
        let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        let mut by_frac: Vec<usize> = (0..3).filter(|&k| ratios[k] > 0.0).collect();
        by_frac.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())).then(a.cmp(&b)));
        for &k in by_frac.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[k] += 1;
            rest -= 1;
        }
        let mut start = 0;
        for k in 0..3 {
            out[k].extend_from_slice(&idx[start..start + counts[k]]);
            start += counts[k];
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    let [train, val, test] = out;
    Ok(Split { train, val, test })
}

/// Malignant is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                left: vec![truth.len()],
                right: vec![predicted.len()],
            });
        }
        let mut c = Confusion::default();
        for (t, p) in truth.iter().zip(predicted) {
            match (t, p) {
                (Label::Malignant, Label::Malignant) => c.tp += 1,
                (Label::Benign, Label::Malignant) => c.fp += 1,
                (Label::Benign, Label::Benign) => c.tn += 1,
                (Label::Malignant, Label::Benign) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Metrics are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let recall = ratio(c.tp, c.tp + c.fn_);
        let precision = ratio(c.tp, c.tp + c.fp);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            confusion: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            recall,
            specificity: ratio(c.tn, c.tn + c.fp),
            precision,
            f1,
        }
    }

    pub fn named(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("accuracy", self.accuracy),
            ("recall", self.recall),
            ("specificity", self.specificity),
            ("precision", self.precision),
            ("f1", self.f1),
        ]
    }

    /// Metric lines followed by the 2×2 matrix (rows are true classes).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.named() {
            let _ = writeln!(s, "{name}\t{}", fmt_metric(v));
        }
        let c = &self.confusion;
        let _ = writeln!(s, "true\\pred\tbenign\tmalignant");
        let _ = writeln!(s, "benign\t{}\t{}", c.tn, c.fp);
        let _ = writeln!(s, "malignant\t{}\t{}", c.fn_, c.tp);
        s
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

pub fn evaluate(model: &ClassifierModel, test: &[LabeledImage]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let truth: Vec<Label> = test.iter().map(|s| s.label).collect();
    let pred = test.iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_confusion(Confusion::from_predictions(&truth, &pred)?))
}

/// Same as [`evaluate`] for a saved inference network.
pub fn evaluate_network(net: &Network, test: &[LabeledImage]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let truth: Vec<Label> = test.iter().map(|s| s.label).collect();
    let pred = test
        .iter()
        .map(|s| Label::from_index(argmax(&network_proba(net, &s.image)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_confusion(Confusion::from_predictions(&truth, &pred)?))
}

/// Published pre/post accuracies for the ultrasound study, for side-by-side
/// display only: `(metric, pre, post, reported gain in points)`.
pub const PUBLISHED_ACCURACY: (&str, f64, f64, f64) = ("accuracy", 55.21, 92.47, 37.26);

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub pre: MetricsReport,
    pub post: MetricsReport,
    /// `post − pre` per metric; `None` if either side is undefined.
    pub deltas: Vec<(&'static str, Option<f64>)>,
}

pub fn compare_pre_post(pre: &MetricsReport, post: &MetricsReport) -> DeltaReport {
    let deltas = pre
        .named()
        .iter()
        .zip(post.named())
        .map(|((name, a), (_, b))| (*name, a.zip(b).map(|(a, b)| b - a)))
        .collect();
    DeltaReport {
        pre: *pre,
        post: *post,
        deltas,
    }
}

impl DeltaReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("metric\tpre\tpost\tdelta\n");
        for ((name, d), ((_, a), (_, b))) in self.deltas.iter().zip(self.pre.named().into_iter().zip(self.post.named())) {
            let _ = writeln!(s, "{name}\t{}\t{}\t{}", fmt_metric(a), fmt_metric(b), fmt_metric(*d));
        }
        let (m, a, b, g) = PUBLISHED_ACCURACY;
        let _ = writeln!(s, "# published {m} (unverified, not reproduced): {a:.2} -> {b:.2}, +{g:.2} points");
        s
    }
}

/// One data-parallel worker's copy of the classifier.
pub struct ClassifierReplica<'a> {
    pub model: ClassifierModel,
    data: &'a [LabeledImage],
    opt: Sgd,
    seed: u64,
    rank: usize,
}

impl<'a> ClassifierReplica<'a> {
    pub fn new(model: ClassifierModel, data: &'a [LabeledImage], cfg: &TrainConfig, seed: u64, rank: usize) -> Self {
        let n = model.num_parameters();
        Self {
            model,
            data,
            opt: Sgd::new(cfg.learning_rate, cfg.momentum, n),
            seed,
            rank,
        }
    }
}

impl Replica for ClassifierReplica<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.parameters()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.model.set_parameters(params)
    }

    fn local_step(&mut self, batch: &[usize], step: usize) -> Result<LocalStep> {
        let items = batch
            .iter()
            .map(|&i| self.data.get(i).ok_or_else(|| Error::invalid(format!("sample index {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((self.rank as u64) << 32) ^ step as u64);
        let pass = self.model.batch_pass(&items, &mut rng)?;
        Ok(LocalStep {
            loss: pass.loss,
            grad: pass.grad,
            stats: pass.stats,
        })
    }

    fn apply(&mut self, grad: &[f64], stats: &[f64]) -> Result<()> {
        let mut p = self.model.parameters();
        self.opt.step(&mut p, grad);
        self.model.set_parameters(&p)?;
        self.model.update_running_stats(stats);
        Ok(())
    }
}

/// Mean loss and gradient over `batch` in one pass, as a single process
/// would compute it.
pub fn batch_gradient(model: &ClassifierModel, data: &[LabeledImage], batch: &[usize], seed: u64) -> Result<(f64, Vec<f64>)> {
    let items: Vec<&LabeledImage> = batch.iter().map(|&i| &data[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pass = model.batch_pass(&items, &mut rng)?;
    Ok((pass.loss, pass.grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(seed: u64, label: Label) -> LabeledImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = if label == Label::Malignant { 0.7 } else { 0.3 };
        let px = (0..256).map(|_| (base + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        LabeledImage {
            image: Image::new(16, 16, px).unwrap(),
            label,
        }
    }

    fn set(n: usize, seed: u64) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| sample(seed + i as u64, if i % 2 == 0 { Label::Benign } else { Label::Malignant }))
            .collect()
    }

    fn loss_of(model: &ClassifierModel, data: &[LabeledImage]) -> f64 {
        let items: Vec<&LabeledImage> = data.iter().collect();
        model.batch_pass(&items, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for bn in [false, true] {
            let cfg = TrainConfig {
                dropout: 0.0,
                batch_norm: bn,
                ..TrainConfig::default()
            };
            let mut model = ClassifierModel::new(&cfg, 3).unwrap();
            let data = set(4, 10);
            let items: Vec<&LabeledImage> = data.iter().collect();
            let g = model.batch_pass(&items, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().grad;
            let p0 = model.parameters();
            let n = p0.len();
            let mut checked = 0;
            let mut bad = 0;
            for k in (0..n).step_by(37).chain(n - 70..n) {
                let h = 1e-5;
                let mut p = p0.clone();
                p[k] += h;
                model.set_parameters(&p).unwrap();
                let up = loss_of(&model, &data);
                p[k] -= 2.0 * h;
                model.set_parameters(&p).unwrap();
                let down = loss_of(&model, &data);
                let fd = (up - down) / (2.0 * h);
                checked += 1;
                if (fd - g[k]).abs() > 1e-4 * fd.abs().max(g[k].abs()).max(1e-6) {
                    bad += 1;
                }
            }
            model.set_parameters(&p0).unwrap();
            assert!(bad * 100 <= checked, "bn={bn}: {bad} of {checked} coordinates disagree");
        }
    }

    #[test]
    fn eval_network_matches_model() {
        let cfg = TrainConfig::default();
        let mut model = ClassifierModel::new(&cfg, 1).unwrap();
        model.update_running_stats(&[vec![0.3; 32], vec![2.0; 32]].concat());
        let net = model.eval_network().unwrap();
        for s in set(3, 4) {
            let p = model.predict_proba(&s.image).unwrap();
            let logits = net.forward(&s.image.to_tensor()).unwrap().pop().unwrap();
            let q = softmax(logits.data());
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nstw");
        net.save_weights(&path).unwrap();
        let loaded = load_eval_network(&path).unwrap();
        let test = set(3, 5);
        assert_eq!(evaluate_network(&loaded, &test).unwrap(), evaluate(&model, &test).unwrap());
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(7);
        let losses = [1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8];
        let stop_at = losses.iter().position(|&l| s.observe(l).1).map(|i| i + 1);
        assert_eq!(stop_at, Some(8));
    }

    #[test]
    fn plateau_rule() {
        let mut p = Plateau::new(0.5, 3, 1e-7);
        let mut lr = 1e-4;
        let mut seen = Vec::new();
        for l in [1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6] {
            lr = p.observe(l, lr);
            seen.push(lr);
        }
        assert_eq!(seen, vec![1e-4, 1e-4, 1e-4, 5e-5, 5e-5, 5e-5, 5e-5, 2.5e-5]);
        let mut p = Plateau::new(0.5, 1, 1e-7);
        let mut lr = 1.5e-7;
        for l in [1.0, 2.0, 2.0] {
            lr = p.observe(l, lr);
        }
        assert_eq!(lr, 1e-7);
    }

    #[test]
    fn memorises_one_sample() {
        let one = sample(5, Label::Malignant);
        let data = vec![one.clone(), LabeledImage { label: Label::Benign, ..sample(6, Label::Benign) }];
        let train: Vec<LabeledImage> = data.iter().cycle().take(8).cloned().collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            dropout: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let model = ClassifierModel::new(&cfg, 2).unwrap();
        let (_, h) = train_head(model, &train, &data, &cfg, 9).unwrap();
        assert_eq!(h.epochs.last().unwrap().train_accuracy, 1.0, "{}", h.to_text());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            patience: 3,
            learning_rate: 0.01,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let data = set(8, 20);
        let run = || {
            let m = ClassifierModel::new(&cfg, 7).unwrap();
            train_head(m, &data, &data[..4], &cfg, 11).unwrap()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn split_counts() {
        let mut labels = vec![Label::Benign; 348];
        labels.extend(vec![Label::Malignant; 452]);
        let s = split_dataset(&labels, [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (560, 120, 120));
        let mut all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..800).collect::<Vec<_>>());
        for (part, r) in [(&s.train, 0.7), (&s.val, 0.15), (&s.test, 0.15)] {
            for (label, n) in [(Label::Benign, 348.0), (Label::Malignant, 452.0)] {
                let k = part.iter().filter(|&&i| labels[i] == label).count() as f64;
                assert!((k - n * r).abs() <= 1.0);
            }
        }
        let s = split_dataset(&labels, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train.len(), 800);
        assert!(split_dataset(&labels, [0.5, 0.2, 0.2], 1).is_err());
        assert!(split_dataset(&[Label::Benign, Label::Benign], [0.7, 0.15, 0.15], 1).is_err());
    }

    #[test]
    fn published_confusion_matrix() {
        let c = Confusion { tp: 0, fp: 68, tn: 53, fn_: 0 };
        let m = MetricsReport::from_confusion(c);
        assert_eq!(m.accuracy, Some(53.0 / 121.0));
        assert!((m.accuracy.unwrap() - 0.438).abs() < 5e-4);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.precision, Some(0.0));
        assert!(m.to_text().contains("recall\tundefined"));
    }

    #[test]
    fn hand_counted_confusion() {
        use Label::{Benign as B, Malignant as M};
        let truth = [M, M, M, B, B, B, B, M, B, M];
        let pred = [M, B, M, B, M, B, B, M, M, B];
        let c = Confusion::from_predictions(&truth, &pred).unwrap();
        assert_eq!(c, Confusion { tp: 3, fp: 2, tn: 3, fn_: 2 });
        let m = MetricsReport::from_confusion(c);
        assert_eq!(m.accuracy, Some(0.6));
        assert_eq!(m.recall, Some(0.6));
        assert_eq!(m.specificity, Some(0.6));
        assert_eq!(m.f1, Some(2.0 * 0.6 * 0.6 / 1.2));
        let d = compare_pre_post(&m, &m);
        assert!(d.deltas.iter().all(|(_, v)| *v == Some(0.0)));
    }

    #[test]
    fn published_delta() {
        let (_, pre, post, gain) = PUBLISHED_ACCURACY;
        assert!((post - pre - gain).abs() < 1e-9);
        let report = |tp, tn| MetricsReport::from_confusion(Confusion { tp, fp: 50 - tn, tn, fn_: 50 - tp });
        let d = compare_pre_post(&report(28, 27), &report(46, 46));
        assert!((d.deltas[0].1.unwrap() - 0.37).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metric_identities(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let c = Confusion { tp, fp, tn, fn_ };
            let m = MetricsReport::from_confusion(c);
            prop_assert_eq!(m.confusion.total(), tp + fp + tn + fn_);
            if c.total() > 0 {
                prop_assert_eq!(m.accuracy, Some((tp + tn) as f64 / c.total() as f64));
            }
            for (_, v) in m.named() {
                if let Some(x) = v {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
            if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
                prop_assert!((f - 2.0 / (1.0 / p + 1.0 / r)).abs() < 1e-12);
            }
        }
    }
}
