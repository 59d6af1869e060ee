//! A small seeded convolutional network with explicit backpropagation.
//!
//! Layers form a chain with optional skip connections. Activations are
//! indexed by [`LayerId`]: id 0 is the network input and id `i + 1` is the
//! output of layer `i`. A [`LayerKind::ResidualAdd`] adds an earlier
//! activation to its input.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checksum::{fnv1a, fnv1a_f64};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{self, PoolMode, Tensor, UnaryOp};

pub type LayerId = usize;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Activation(UnaryOp),
    Pool {
        window: usize,
        mode: PoolMode,
    },
    ResidualAdd {
        from: LayerId,
    },
    GlobalPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: Option<String>,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { name: None, kind }
    }

    pub fn named(name: &str, kind: LayerKind) -> Self {
        Self {
            name: Some(name.to_string()),
            kind,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Activation(UnaryOp::Relu))
    }

    pub fn avg_pool(window: usize) -> Self {
        Self::new(LayerKind::Pool {
            window,
            mode: PoolMode::Avg,
        })
    }

    pub fn max_pool(window: usize) -> Self {
        Self::new(LayerKind::Pool {
            window,
            mode: PoolMode::Max,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    weight: Option<Tensor>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_channels: Option<usize>,
}

#[derive(Clone, Copy)]
struct ShapeState {
    channels: Option<usize>,
    vector: bool,
    downsample: usize,
}

/// Checks consecutive shapes and initialises weights with He scaling from
/// `seed`. Biases start at zero.
pub fn build_network(spec: &[LayerSpec], seed: u64) -> Result<Network> {
    if spec.is_empty() {
        return Err(Error::InvalidNetwork {
            layer: 0,
            reason: "empty layer list".into(),
        });
    }
    let input_channels = spec.iter().find_map(|l| match l.kind {
        LayerKind::Conv { in_channels, .. } => Some(in_channels),
        LayerKind::Dense { inputs, .. } => Some(inputs),
        _ => None,
    });
    let input_is_vector = matches!(
        spec.iter().find(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })),
        Some(LayerSpec { kind: LayerKind::Dense { .. }, .. })
    );
    let mut states = vec![ShapeState {
        channels: input_channels,
        vector: input_is_vector,
        downsample: 1,
    }];
    let mut names = BTreeMap::new();
    for (i, layer) in spec.iter().enumerate() {
        let s = states[i];
        let fail = |reason: String| Error::InvalidNetwork { layer: i, reason };
        let next = match &layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if s.vector {
                    return Err(fail("convolution after a vector-valued layer".into()));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(fail("kernel, stride and channel counts must be positive".into()));
                }
                if s.channels.is_some_and(|c| c != *in_channels) {
                    return Err(fail(format!(
                        "expects {in_channels} input channels, previous layer yields {}",
                        s.channels.unwrap()
                    )));
                }
                ShapeState {
                    channels: Some(*out_channels),
                    vector: false,
                    downsample: s.downsample * stride,
                }
            }
            LayerKind::Activation(_) => s,
            LayerKind::Pool { window, .. } => {
                if s.vector || *window == 0 {
                    return Err(fail("pooling needs a spatial input and a positive window".into()));
                }
                ShapeState {
                    downsample: s.downsample * window,
                    ..s
                }
            }
            LayerKind::ResidualAdd { from } => {
                if *from > i {
                    return Err(fail(format!("skip source {from} is not an earlier activation")));
                }
                let src = states[*from];
                if src.channels != s.channels || src.vector != s.vector || src.downsample != s.downsample {
                    return Err(fail(format!("skip source {from} has a different shape")));
                }
                s
            }
            LayerKind::GlobalPool => {
                if s.vector {
                    return Err(fail("global pooling of a vector".into()));
                }
                ShapeState {
                    vector: true,
                    ..s
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                if !s.vector {
                    return Err(fail("dense layer needs a vector input (add a global pool)".into()));
                }
                if s.channels.is_some_and(|c| c != *inputs) || *outputs == 0 {
                    return Err(fail(format!(
                        "expects {inputs} inputs, previous layer yields {:?}",
                        s.channels
                    )));
                }
                ShapeState {
                    channels: Some(*outputs),
                    vector: true,
                    downsample: s.downsample,
                }
            }
            LayerKind::Softmax => {
                if !s.vector {
                    return Err(fail("softmax needs a vector input".into()));
                }
                s
            }
        };
        if let Some(name) = &layer.name {
            if names.insert(name.clone(), i + 1).is_some() {
                return Err(fail(format!("duplicate layer name {name}")));
            }
        }
        states.push(next);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .iter()
        .map(|l| {
            let (shape, fan_in, nbias) = match l.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                LayerKind::Dense { inputs, outputs } => (vec![outputs, inputs], inputs, outputs),
                _ => {
                    return Layer {
                        spec: l.clone(),
                        weight: None,
                        bias: Vec::new(),
                    }
                }
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
            Layer {
                spec: l.clone(),
                weight: Some(weight),
                bias: vec![0.0; nbias],
            }
        })
        .collect();
    Ok(Network {
        layers,
        input_channels,
    })
}

/// Default feature extractor: four 3×3 conv stages of 8, 16, 16 and 32
/// channels with 2× average pooling in between and a residual block in
/// stage 3. Stage outputs are named `stage1`..`stage4`.
pub fn default_feature_spec() -> Vec<LayerSpec> {
    backbone_spec(UnaryOp::Relu)
}

/// Same topology with leaky-relu, followed by global average pooling.
pub fn classifier_backbone_spec() -> Vec<LayerSpec> {
    let mut spec = backbone_spec(UnaryOp::LeakyRelu(LEAKY_RELU_SLOPE));
    spec.push(LayerSpec::named("pooled", LayerKind::GlobalPool));
    spec
}

fn backbone_spec(act: UnaryOp) -> Vec<LayerSpec> {
    let act_layer = |name: Option<&str>| LayerSpec {
        name: name.map(str::to_string),
        kind: LayerKind::Activation(act),
    };
    vec![
        LayerSpec::conv(1, 8, 3),
        act_layer(Some("stage1")),
        LayerSpec::avg_pool(2),
        LayerSpec::conv(8, 16, 3),
        act_layer(Some("stage2")),
        LayerSpec::avg_pool(2), // activation 6, the skip source
        LayerSpec::conv(16, 16, 3),
        act_layer(None),
        LayerSpec::conv(16, 16, 3),
        LayerSpec::new(LayerKind::ResidualAdd { from: 6 }),
        act_layer(Some("stage3")),
        LayerSpec::avg_pool(2),
        LayerSpec::conv(16, 32, 3),
        act_layer(Some("stage4")),
    ]
}

/// Style and content layer choice for a feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayers {
    pub style: Vec<LayerId>,
    pub content: LayerId,
}

impl FeatureLayers {
    /// All four stage outputs for style, stage 3 for content.
    pub fn default_for(net: &Network) -> Result<Self> {
        let id = |n: &str| {
            net.layer_id(n)
                .ok_or_else(|| Error::invalid(format!("network has no layer named {n}")))
        };
        Ok(Self {
            style: vec![id("stage1")?, id("stage2")?, id("stage3")?, id("stage4")?],
            content: id("stage3")?,
        })
    }
}

/// Parameter gradients in [`Network::parameters`] order, plus the input
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<f64>,
}

impl Network {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of activations including the input.
    pub fn num_activations(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.input_channels
    }

    pub fn layer_kind(&self, layer: usize) -> &LayerKind {
        &self.layers[layer].spec.kind
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Activation id of a named layer output.
    pub fn layer_id(&self, name: &str) -> Option<LayerId> {
        self.layers
            .iter()
            .position(|l| l.spec.name.as_deref() == Some(name))
            .map(|i| i + 1)
    }

    pub fn layer_name(&self, id: LayerId) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .and_then(|l| l.spec.name.as_deref())
    }

    /// Weight and bias of a parameterised layer.
    pub fn layer_params(&self, layer: usize) -> Option<(&Tensor, &[f64])> {
        let l = self.layers.get(layer)?;
        l.weight.as_ref().map(|w| (w, l.bias.as_slice()))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_ref().map_or(0, Tensor::len) + l.bias.len())
            .sum()
    }

    /// All parameters flattened: per layer, weights then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            if let Some(w) = &l.weight {
                out.extend_from_slice(w.data());
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::ShapeMismatch {
                op: "set_parameters",
                left: vec![values.len()],
                right: vec![self.num_parameters()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "network parameters".into(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            if let Some(w) = &mut l.weight {
                let n = w.len();
                w.data_mut().copy_from_slice(&values[at..at + n]);
                at += n;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&values[at..at + nb]);
                at += nb;
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        fnv1a_f64(&self.parameters())
    }

    /// Runs the network and keeps every activation; `acts[0]` is the input.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        if let (Some(c), Some(&ic)) = (self.input_channels, input.shape().first()) {
            if c != ic {
                return Err(Error::ShapeMismatch {
                    op: "network input",
                    left: input.shape().to_vec(),
                    right: vec![c],
                });
            }
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = &acts[i];
            let y = match &layer.spec.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    tensor::conv2d(x, layer.weight.as_ref().expect("conv weight"), &layer.bias, *stride, *padding)?
                }
                LayerKind::Activation(op) => tensor::unary(*op, x),
                LayerKind::Pool { window, mode } => tensor::pool2d(x, *window, *mode)?,
                LayerKind::ResidualAdd { from } => tensor::binary(tensor::BinaryOp::Add, x, &acts[*from])?,
                LayerKind::GlobalPool => {
                    let v = tensor::global_avg_pool(x)?;
                    Tensor::from_parts_unchecked(vec![v.len()], v)
                }
                LayerKind::Dense { inputs, outputs } => {
                    if x.len() != *inputs {
                        return Err(Error::ShapeMismatch {
                            op: "dense input",
                            left: x.shape().to_vec(),
                            right: vec![*inputs],
                        });
                    }
                    let w = layer.weight.as_ref().expect("dense weight").data();
                    let out = (0..*outputs)
                        .map(|o| {
                            layer.bias[o]
                                + w[o * inputs..(o + 1) * inputs]
                                    .iter()
                                    .zip(x.data())
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>()
                        })
                        .collect();
                    Tensor::from_parts_unchecked(vec![*outputs], out)
                }
                LayerKind::Softmax => Tensor::from_parts_unchecked(x.shape().to_vec(), softmax(x.data())),
            };
            acts.push(y);
        }
        Ok(acts)
    }

    /// Reverse-mode pass. `seeds` are loss gradients with respect to
    /// activations; several layers may be seeded at once.
    pub fn backward(&self, acts: &[Tensor], seeds: &[(LayerId, &Tensor)]) -> Result<Gradients> {
        if acts.len() != self.layers.len() + 1 {
            return Err(Error::invalid("activation list does not match the network"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; acts.len()];
        for (id, g) in seeds {
            let a = acts.get(*id).ok_or(Error::UnknownLayer(*id))?;
            if a.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "backward seed",
                    left: g.shape().to_vec(),
                    right: a.shape().to_vec(),
                });
            }
            accumulate(&mut grads[*id], (*g).clone())?;
        }
        let mut param_grads: Vec<Option<(Tensor, Vec<f64>)>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let Some(gout) = grads[i + 1].take() else {
                continue;
            };
            let x = &acts[i];
            let gin = match &layer.spec.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let w = layer.weight.as_ref().expect("conv weight");
                    param_grads[i] = Some(tensor::conv2d_backward_params(x, &gout, w.shape(), *stride, *padding)?);
                    tensor::conv2d_backward_input(&gout, w, x.shape(), *stride, *padding)?
                }
                LayerKind::Activation(op) => {
                    let data = x
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&v, &g)| g * op.derivative(v))
                        .collect();
                    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
                }
                LayerKind::Pool { window, mode } => tensor::pool2d_backward(x, &gout, *window, *mode)?,
                LayerKind::ResidualAdd { from } => {
                    accumulate(&mut grads[*from], gout.clone())?;
                    gout
                }
                LayerKind::GlobalPool => {
                    let (c, h, w) = x.chw()?;
                    let m = (h * w) as f64;
                    Tensor::from_fn(vec![c, h, w], |k| gout.data()[k / (h * w)] / m)
                }
                LayerKind::Dense { inputs, outputs } => {
                    let w = layer.weight.as_ref().expect("dense weight").data();
                    let mut gw = vec![0.0; inputs * outputs];
                    let mut gx = vec![0.0; *inputs];
                    for o in 0..*outputs {
                        let g = gout.data()[o];
                        for k in 0..*inputs {
                            gw[o * inputs + k] = g * x.data()[k];
                            gx[k] += g * w[o * inputs + k];
                        }
                    }
                    param_grads[i] = Some((
                        Tensor::from_parts_unchecked(vec![*outputs, *inputs], gw),
                        gout.data().to_vec(),
                    ));
                    Tensor::from_parts_unchecked(vec![*inputs], gx)
                }
                LayerKind::Softmax => {
                    let y = acts[i + 1].data();
                    let dot: f64 = y.iter().zip(gout.data()).map(|(a, b)| a * b).sum();
                    let data = y.iter().zip(gout.data()).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
                }
            };
            accumulate(&mut grads[i], gin)?;
        }
        let mut params = Vec::with_capacity(self.num_parameters());
        for (layer, pg) in self.layers.iter().zip(param_grads) {
            if let Some(w) = &layer.weight {
                match pg {
                    Some((gw, gb)) => {
                        params.extend_from_slice(gw.data());
                        params.extend_from_slice(&gb);
                    }
                    None => params.extend(std::iter::repeat_n(0.0, w.len() + layer.bias.len())),
                }
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(acts[0].shape().to_vec()));
        Ok(Gradients { input, params })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.weight_file().write(path)
    }

    /// Loads parameters saved by [`Network::save_weights`]; shapes must
    /// match this network's architecture.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let file = WeightFile::read(path)?;
        let mine = self.weight_file();
        if file.records != mine.records {
            return Err(Error::format(
                path.display().to_string(),
                "parameter shapes do not match the network architecture",
            ));
        }
        self.set_parameters(&file.values)
    }

    pub(crate) fn weight_file(&self) -> WeightFile {
        WeightFile {
            records: self
                .layers
                .iter()
                .filter_map(|l| l.weight.as_ref().map(|w| (w.shape().to_vec(), l.bias.len())))
                .collect(),
            values: self.parameters(),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-layer activations keyed by activation id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStack {
    maps: BTreeMap<LayerId, Tensor>,
}

impl FeatureStack {
    pub fn from_activations(acts: &[Tensor], layers: &[LayerId]) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for &id in layers {
            let t = acts.get(id).ok_or(Error::UnknownLayer(id))?;
            maps.insert(id, t.clone());
        }
        Ok(Self { maps })
    }

    pub fn insert(&mut self, id: LayerId, map: Tensor) {
        self.maps.insert(id, map);
    }

    pub fn get(&self, id: LayerId) -> Result<&Tensor> {
        self.maps.get(&id).ok_or(Error::UnknownLayer(id))
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.maps.keys().copied()
    }

    /// Channel count `N_l`.
    pub fn n_l(&self, id: LayerId) -> Result<usize> {
        Ok(self.get(id)?.shape()[0])
    }

    /// Spatial size `M_l = H_l · W_l`.
    pub fn m_l(&self, id: LayerId) -> Result<usize> {
        let t = self.get(id)?;
        Ok(t.len() / t.shape()[0])
    }
}

pub fn extract_features(net: &Network, image: &Image, layers: &[LayerId]) -> Result<FeatureStack> {
    let acts = net.forward(&image.to_tensor())?;
    FeatureStack::from_activations(&acts, layers)
}

/// Flat binary parameter file, all integers little-endian:
///
/// ```text
/// "NSTW"            magic
/// u32               format version (1)
/// u32               L, number of parameter records
/// L × { u32 rank, rank × u32 dims, u32 bias_len }
/// f64 × Σ(Π dims + bias_len)   record 0 weights, record 0 bias, record 1 ...
/// u64               FNV-1a 64 of the parameter bytes
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub records: Vec<(Vec<usize>, usize)>,
    pub values: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"NSTW";

impl WeightFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (dims, nb) in &self.records {
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(*nb as u32).to_le_bytes());
        }
        let start = out.len();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a(&out[start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("weight file", r);
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        if u32_at(take(4)?) != 1 {
            return Err(bad("unsupported version"));
        }
        let count = u32_at(take(4)?);
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut total = 0usize;
        for _ in 0..count {
            let rank = u32_at(take(4)?);
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(u32_at(take(4)?));
            }
            let nb = u32_at(take(4)?);
            total = total
                .checked_add(dims.iter().product::<usize>() + nb)
                .ok_or_else(|| bad("size overflow"))?;
            records.push((dims, nb));
        }
        let data = take(total.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
        let expect = fnv1a(data);
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let trailer = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if trailer != expect {
            return Err(bad("checksum mismatch"));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { records, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_net() -> Network {
        let mut net = build_network(&[LayerSpec::conv(1, 1, 1)], 0).unwrap();
        net.set_parameters(&[1.0, 0.0]).unwrap();
        net
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network(&default_feature_spec(), 7).unwrap();
        let b = build_network(&default_feature_spec(), 7).unwrap();
        let c = build_network(&default_feature_spec(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_ne!(
            build_network(&default_feature_spec(), 1).unwrap().checksum(),
            build_network(&default_feature_spec(), 2).unwrap().checksum()
        );
    }

    #[test]
    fn build_rejects_bad_specs() {
        assert!(build_network(&[], 0).is_err());
        let err = build_network(&[LayerSpec::conv(1, 4, 3), LayerSpec::conv(3, 4, 3)], 0).unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork { layer: 1, .. }), "{err}");
        let err = build_network(
            &[LayerSpec::conv(1, 4, 3), LayerSpec::new(LayerKind::Dense { inputs: 4, outputs: 2 })],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork { layer: 1, .. }));
        let err = build_network(
            &[
                LayerSpec::conv(1, 4, 3),
                LayerSpec::avg_pool(2),
                LayerSpec::new(LayerKind::ResidualAdd { from: 1 }),
            ],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidNetwork { layer: 2, .. }));
    }

    #[test]
    fn default_architecture_has_residual_and_stages() {
        let net = build_network(&default_feature_spec(), 1).unwrap();
        assert!(net
            .specs()
            .iter()
            .any(|s| matches!(s.kind, LayerKind::ResidualAdd { .. })));
        let layers = FeatureLayers::default_for(&net).unwrap();
        assert_eq!(layers.content, layers.style[2]);
        let acts = net.forward(&random_image(1, 16, 16).to_tensor()).unwrap();
        let shapes: Vec<_> = layers.style.iter().map(|&id| acts[id].shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16], vec![16, 8, 8], vec![16, 4, 4], vec![32, 2, 2]]);
        // the 8x8 minimum still reaches the last stage
        let small = net.forward(&random_image(2, 8, 8).to_tensor()).unwrap();
        assert_eq!(small.last().unwrap().shape(), &[32, 1, 1]);
    }

    #[test]
    fn identity_network_features_and_gradient() {
        let net = identity_net();
        let img = random_image(3, 8, 8);
        let fs = extract_features(&net, &img, &[1]).unwrap();
        assert_eq!(fs.get(1).unwrap(), &img.to_tensor());
        let acts = net.forward(&img.to_tensor()).unwrap();
        let g = Tensor::from_fn(vec![1, 8, 8], |i| i as f64 - 3.0);
        let grads = net.backward(&acts, &[(1, &g)]).unwrap();
        assert_eq!(grads.input, g);
        assert!(extract_features(&net, &img, &[5]).is_err());
    }

    #[test]
    fn zero_image_bias_free_net_gives_zero_features() {
        let net = build_network(&default_feature_spec(), 4).unwrap();
        let img = Image::filled(16, 16, 0.0).unwrap();
        let acts = net.forward(&img.to_tensor()).unwrap();
        assert!(acts.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_reproducible_and_residual_exact() {
        let net = build_network(&default_feature_spec(), 5).unwrap();
        let img = random_image(4, 16, 16);
        let a = net.forward(&img.to_tensor()).unwrap();
        let b = net.forward(&img.to_tensor()).unwrap();
        assert_eq!(a, b);
        let fs = extract_features(&net, &img, &[3, 11]).unwrap();
        assert_eq!(fs.get(11).unwrap(), &a[11]);
        // layer 9 is the residual add: output = branch + skip exactly
        for k in 0..a[10].len() {
            assert_eq!(a[10].data()[k], a[9].data()[k] + a[6].data()[k]);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let net = build_network(&default_feature_spec(), 5).unwrap();
        let img = random_image(4, 16, 16);
        let acts = net.forward(&img.to_tensor()).unwrap();
        let z = Tensor::zeros(acts[14].shape().to_vec());
        let g = net.backward(&acts, &[(14, &z)]).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|&v| v == 0.0));
        let wrong = Tensor::zeros(vec![1, 2, 2]);
        assert!(net.backward(&acts, &[(14, &wrong)]).is_err());
    }

    // Loss = Σ c·a over two seeded layers; checked against central differences.
    fn finite_difference_check(spec: &[LayerSpec], seed: u64, h: usize) {
        let net = build_network(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut net = net;
        let jitter: Vec<f64> = net.parameters().iter().map(|p| p + rng.random_range(-0.05..0.05)).collect();
        net.set_parameters(&jitter).unwrap();
        let img = random_image(seed, h, h).to_tensor();
        let acts = net.forward(&img).unwrap();
        let last = acts.len() - 1;
        let mid = last / 2;
        let c_last = Tensor::from_fn(acts[last].shape().to_vec(), |_| rng.random_range(-1.0..1.0));
        let c_mid = Tensor::from_fn(acts[mid].shape().to_vec(), |_| rng.random_range(-1.0..1.0));
        let loss = |n: &Network, x: &Tensor| {
            let a = n.forward(x).unwrap();
            let dot = |t: &Tensor, c: &Tensor| t.data().iter().zip(c.data()).map(|(p, q)| p * q).sum::<f64>();
            dot(&a[last], &c_last) + dot(&a[mid], &c_mid)
        };
        let grads = net.backward(&acts, &[(last, &c_last), (mid, &c_mid)]).unwrap();
        let step = 1e-5;
        let mut checked = 0;
        let mut good = 0;
        let rel = |a: f64, n: f64| {
            let d = a.abs().max(n.abs());
            if d == 0.0 { 0.0 } else { (a - n).abs() / d }
        };
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += step;
            let mut m = img.clone();
            m.data_mut()[i] -= step;
            let num = (loss(&net, &p) - loss(&net, &m)) / (2.0 * step);
            checked += 1;
            good += (rel(grads.input.data()[i], num) < 1e-4) as usize;
        }
        let params = net.parameters();
        for i in (0..params.len()).step_by(7) {
            let mut q = params.clone();
            q[i] += step;
            let mut np = net.clone();
            np.set_parameters(&q).unwrap();
            let lp = loss(&np, &img);
            q[i] -= 2.0 * step;
            np.set_parameters(&q).unwrap();
            let lm = loss(&np, &img);
            let num = (lp - lm) / (2.0 * step);
            checked += 1;
            good += (rel(grads.params[i], num) < 1e-4) as usize;
        }
        assert!(good as f64 >= 0.99 * checked as f64, "{good}/{checked} coordinates agree");
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(&default_feature_spec(), 2, 8);
        finite_difference_check(&classifier_backbone_spec(), 3, 8);
        let mut with_head = classifier_backbone_spec();
        with_head.push(LayerSpec::new(LayerKind::Dense { inputs: 32, outputs: 2 }));
        with_head.push(LayerSpec::new(LayerKind::Softmax));
        finite_difference_check(&with_head, 4, 8);
        let maxpool = vec![
            LayerSpec::conv(1, 3, 3),
            LayerSpec::relu(),
            LayerSpec::max_pool(2),
            LayerSpec::new(LayerKind::Conv { in_channels: 3, out_channels: 2, kernel: 3, stride: 2, padding: 1 }),
        ];
        finite_difference_check(&maxpool, 5, 8);
    }

    #[test]
    fn weight_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_network(&default_feature_spec(), 9).unwrap();
        let p = dir.path().join("w.bin");
        net.save_weights(&p).unwrap();
        let mut other = build_network(&default_feature_spec(), 10).unwrap();
        other.load_weights(&p).unwrap();
        assert_eq!(other.checksum(), net.checksum());

        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(WeightFile::decode(&bytes).is_err());

        let mut tiny = build_network(&[LayerSpec::conv(1, 2, 3)], 0).unwrap();
        assert!(tiny.load_weights(&p).is_err());

        // header layout: magic, version, record count, first record's rank
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"NSTW");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(raw[12..16].try_into().unwrap()), 4);
    }
}
