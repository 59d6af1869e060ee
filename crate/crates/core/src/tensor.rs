//! Dense `f64` tensors and the handful of kernels the networks need.
//!
//! Layout is row-major. Activations are rank-3 `[channels, height, width]`,
//! convolution kernels rank-4 `[out, in, kh, kw]`, dense weights rank-2
//! `[out, in]`. Every operation takes its inputs by reference and returns a
//! fresh tensor.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor data at flat index {i}"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self { shape, data }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::invalid(format!(
                "expected a [channels, height, width] tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Adds `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Relu,
    LeakyRelu(f64),
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative at `x`; the kink at 0 takes the left-hand slope.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("elementwise", a, b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| op.apply(x, y))
        .collect();
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), data))
}

pub fn binary_scalar(op: BinaryOp, a: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() {
        return Err(Error::NonFinite {
            context: "elementwise scalar operand".into(),
        });
    }
    let data = a.data.iter().map(|&x| op.apply(x, s)).collect();
    Ok(Tensor::from_parts_unchecked(a.shape.clone(), data))
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|&x| op.apply(x)).collect();
    Tensor::from_parts_unchecked(a.shape.clone(), data)
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(
    input_shape: &[usize],
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(Error::invalid("convolution stride must be >= 1"));
    }
    let (in_c, in_h, in_w) = match input_shape {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d input",
                left: input_shape.to_vec(),
                right: kernel.shape.clone(),
            })
        }
    };
    let (out_c, k_in, kh, kw) = match kernel.shape.as_slice() {
        &[o, i, kh, kw] => (o, i, kh, kw),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel",
                left: input_shape.to_vec(),
                right: kernel.shape.clone(),
            })
        }
    };
    if k_in != in_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            left: input_shape.to_vec(),
            right: kernel.shape.clone(),
        });
    }
    let (Some(out_h), Some(out_w)) = (
        conv_out_extent(in_h, kh, stride, padding),
        conv_out_extent(in_w, kw, stride, padding),
    ) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel larger than padded input",
            left: input_shape.to_vec(),
            right: kernel.shape.clone(),
        });
    };
    Ok(ConvGeometry {
        in_c,
        in_h,
        in_w,
        out_c,
        kh,
        kw,
        out_h,
        out_w,
    })
}

/// Cross-correlation with zero padding:
/// `out[k, y, x] = b[k] + Σ_{c,m,n} w[k, c, m, n] · in[c, y·s + m − p, x·s + n − p]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(&input.shape, kernel, stride, padding)?;
    if bias.len() != g.out_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: vec![bias.len()],
            right: kernel.shape.clone(),
        });
    }
    let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
    let x = &input.data;
    let w = &kernel.data;
    for k in 0..g.out_c {
        let plane = &mut out[k * g.out_h * g.out_w..(k + 1) * g.out_h * g.out_w];
        plane.fill(bias[k]);
        for c in 0..g.in_c {
            let xin = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for m in 0..g.kh {
                for n in 0..g.kw {
                    let wv = w[((k * g.in_c + c) * g.kh + m) * g.kw + n];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = (oy * stride + m) as isize - padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let orow = &mut plane[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + n) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < g.in_w {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![g.out_c, g.out_h, g.out_w], out))
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input_shape, kernel, stride, padding)?;
    if grad_out.shape != [g.out_c, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape.clone(),
            right: vec![g.out_c, g.out_h, g.out_w],
        });
    }
    let mut gin = vec![0.0; g.in_c * g.in_h * g.in_w];
    let w = &kernel.data;
    for k in 0..g.out_c {
        let gplane = &grad_out.data[k * g.out_h * g.out_w..(k + 1) * g.out_h * g.out_w];
        for c in 0..g.in_c {
            let gi = &mut gin[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for m in 0..g.kh {
                for n in 0..g.kw {
                    let wv = w[((k * g.in_c + c) * g.kh + m) * g.kw + n];
                    for oy in 0..g.out_h {
                        let iy = (oy * stride + m) as isize - padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * stride + n) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < g.in_w {
                                gi[iy as usize * g.in_w + ix as usize] +=
                                    wv * gplane[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input_shape.to_vec(), gin))
}

/// Gradients of a convolution with respect to kernel and bias.
pub fn conv2d_backward_params(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let probe = Tensor::zeros(kernel_shape.to_vec());
    let g = conv_geometry(&input.shape, &probe, stride, padding)?;
    if grad_out.shape != [g.out_c, g.out_h, g.out_w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape.clone(),
            right: vec![g.out_c, g.out_h, g.out_w],
        });
    }
    let mut gw = vec![0.0; probe.len()];
    let mut gb = vec![0.0; g.out_c];
    for k in 0..g.out_c {
        let gplane = &grad_out.data[k * g.out_h * g.out_w..(k + 1) * g.out_h * g.out_w];
        gb[k] = gplane.iter().sum();
        for c in 0..g.in_c {
            let xin = &input.data[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for m in 0..g.kh {
                for n in 0..g.kw {
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let iy = (oy * stride + m) as isize - padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * stride + n) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < g.in_w {
                                acc += xin[iy as usize * g.in_w + ix as usize]
                                    * gplane[oy * g.out_w + ox];
                            }
                        }
                    }
                    gw[((k * g.in_c + c) * g.kh + m) * g.kw + n] = acc;
                }
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(kernel_shape.to_vec(), gw), gb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Non-overlapping `window × window` pooling. Extents must be divisible by
/// the window; callers pad beforehand if they need otherwise.
pub fn pool2d(input: &Tensor, window: usize, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if window == 0 {
        return Err(Error::invalid("pool window must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::ShapeMismatch {
            op: "pool2d window larger than input",
            left: input.shape.clone(),
            right: vec![window, window],
        });
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::ShapeMismatch {
            op: "pool2d window must divide spatial extents",
            left: input.shape.clone(),
            right: vec![window, window],
        });
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh * ow);
    let area = (window * window) as f64;
    for ch in 0..c {
        let plane = &input.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = (0..window).flat_map(|dy| {
                    (0..window).map(move |dx| plane[(oy * window + dy) * w + ox * window + dx])
                });
                out.push(match mode {
                    PoolMode::Max => cells.fold(f64::NEG_INFINITY, f64::max),
                    PoolMode::Avg => cells.sum::<f64>() / area,
                });
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![c, oh, ow], out))
}

/// Gradient of [`pool2d`]. Max-pool ties share the gradient equally.
pub fn pool2d_backward(
    input: &Tensor,
    grad_out: &Tensor,
    window: usize,
    mode: PoolMode,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (h / window, w / window);
    if grad_out.shape != [c, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "pool2d backward",
            left: grad_out.shape.clone(),
            right: vec![c, oh, ow],
        });
    }
    let mut gin = vec![0.0; input.len()];
    let area = (window * window) as f64;
    for ch in 0..c {
        let plane = &input.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data[(ch * oh + oy) * ow + ox];
                let idx = |dy: usize, dx: usize| (oy * window + dy) * w + ox * window + dx;
                match mode {
                    PoolMode::Avg => {
                        for dy in 0..window {
                            for dx in 0..window {
                                gin[ch * h * w + idx(dy, dx)] += g / area;
                            }
                        }
                    }
                    PoolMode::Max => {
                        let winners = max_winners(plane, w, oy, ox, window);
                        let share = g / winners.len() as f64;
                        for i in winners {
                            gin[ch * h * w + i] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(input.shape.clone(), gin))
}

/// Flat in-plane indices of the maximal cells of one pooling window.
pub(crate) fn max_winners(plane: &[f64], w: usize, oy: usize, ox: usize, window: usize) -> Vec<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut winners = Vec::new();
    for dy in 0..window {
        for dx in 0..window {
            let i = (oy * window + dy) * w + ox * window + dx;
            let v = plane[i];
            if v > best {
                best = v;
                winners.clear();
                winners.push(i);
            } else if v == best {
                winners.push(i);
            }
        }
    }
    winners
}

/// Mean over the spatial extent, one value per channel.
pub fn global_avg_pool(input: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = input.chw()?;
    let m = (h * w) as f64;
    Ok((0..c)
        .map(|ch| input.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / m)
        .collect())
}
