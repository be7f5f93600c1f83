use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

/// How a convolution reads outside the input border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    /// Edge values repeated outward.
    #[default]
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            pad_mode: PadMode::Replicate,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.kernel < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Config(format!(
                    "input extent {n} too small for kernel {} with padding {}",
                    self.kernel, self.padding
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// One layer of a feed-forward stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM

/// `c = a * b + beta * c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes buffers whose extents cover the strided ranges
    // described by (m, k, n, strides); `c` is a dense m x n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[inline]
fn source_index(pos: isize, n: usize, mode: PadMode) -> Option<usize> {
    if pos >= 0 && (pos as usize) < n {
        Some(pos as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(pos.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Unfolds the input into a `(C_in * k * k) x (H' * W')` patch matrix.
fn im2col(input: &Tensor, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = spec.kernel;
    let plane = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * plane];
    let x = input.data();
    let pad = spec.padding as isize;
    let s = spec.stride as isize;
    for c in 0..c_in {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = source_index(oy as isize * s - pad + ki as isize, h, spec.pad_mode);
                    let Some(iy) = iy else { continue };
                    let line = &src[iy * w..(iy + 1) * w];
                    let out_line = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_line.iter_mut().enumerate() {
                        if let Some(ix) =
                            source_index(ox as isize * s - pad + kj as isize, w, spec.pad_mode)
                        {
                            *o = line[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: &[f64], spec: &ConvSpec, shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
    let (c_in, h, w) = shape;
    let k = spec.kernel;
    let plane = oh * ow;
    let mut out = Tensor::zeros(&[c_in, h, w]);
    let pad = spec.padding as isize;
    let s = spec.stride as isize;
    let data = out.data_mut();
    for c in 0..c_in {
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = source_index(oy as isize * s - pad + ki as isize, h, spec.pad_mode);
                    let Some(iy) = iy else { continue };
                    for ox in 0..ow {
                        if let Some(ix) =
                            source_index(ox as isize * s - pad + kj as isize, w, spec.pad_mode)
                        {
                            dst[iy * w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_conv_params(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let (c, _, _) = input.dims3()?;
    if c != spec.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    let wshape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
    if weights.shape() != wshape || bias.shape() != [spec.out_channels] {
        return Err(Error::Config(format!(
            "conv parameter shapes {:?}/{:?} do not match spec {spec:?}",
            weights.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

/// Cross-correlation of a `C_in x H x W` input with `weights` (`C_out x C_in x k x k`) plus bias.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    check_conv_params(input, weights, bias, spec)?;
    let (_, h, w) = input.dims3()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    let plane = oh * ow;
    let cols = im2col(input, spec, oh, ow);
    let mut out = Tensor::zeros(&[spec.out_channels, oh, ow]);
    {
        let o = out.data_mut();
        for (co, &b) in bias.data().iter().enumerate() {
            o[co * plane..(co + 1) * plane].fill(b);
        }
        let kk = spec.patch_len();
        gemm(
            spec.out_channels,
            kk,
            plane,
            weights.data(),
            kk as isize,
            1,
            &cols,
            plane as isize,
            1,
            1.0,
            o,
        );
    }
    Ok(out)
}

pub struct ConvGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient and the forward input.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let (c_in, h, w) = cached_input.dims3()?;
    let (oh, ow) = spec.output_hw(h, w)?;
    if grad_out.shape() != [spec.out_channels, oh, ow] {
        return Err(Error::Config(format!(
            "conv grad_out shape {:?}, forward output was {:?}",
            grad_out.shape(),
            [spec.out_channels, oh, ow]
        )));
    }
    let plane = oh * ow;
    let kk = spec.patch_len();
    let cols = im2col(cached_input, spec, oh, ow);
    let g = grad_out.data();

    let mut grad_w = Tensor::zeros(weights.shape());
    // grad_w = grad_out (C_out x P) * cols^T (P x kk)
    gemm(
        spec.out_channels,
        plane,
        kk,
        g,
        plane as isize,
        1,
        &cols,
        1,
        plane as isize,
        0.0,
        grad_w.data_mut(),
    );

    let grad_b: Vec<f64> = (0..spec.out_channels)
        .map(|co| g[co * plane..(co + 1) * plane].iter().sum())
        .collect();

    let input = if need_input_grad {
        let mut grad_cols = vec![0.0; kk * plane];
        // grad_cols = W^T (kk x C_out) * grad_out (C_out x P)
        gemm(
            kk,
            spec.out_channels,
            plane,
            weights.data(),
            1,
            kk as isize,
            g,
            plane as isize,
            1,
            0.0,
            &mut grad_cols,
        );
        Some(col2im(&grad_cols, spec, (c_in, h, w), oh, ow))
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weights: grad_w,
        bias: Tensor::from_vec(&[spec.out_channels], grad_b)?,
    })
}

// ---------------------------------------------------------------------------
// Elementwise activations

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(x: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    match *spec {
        LayerSpec::LeakyRelu { slope } => Ok(x.map(|v| if v >= 0.0 { v } else { slope * v })),
        LayerSpec::Sigmoid => Ok(x.map(sigmoid)),
        LayerSpec::Tanh => Ok(x.map(f64::tanh)),
        _ => Err(Error::Usage(format!("{spec:?} is not an activation"))),
    }
}

/// Gradient with respect to the activation input, given the forward input `x`.
pub fn activation_backward(x: &Tensor, grad_out: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    x.check_same_shape(grad_out)?;
    let mut g = grad_out.clone();
    match *spec {
        LayerSpec::LeakyRelu { slope } => {
            for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                if xv < 0.0 {
                    *gv *= slope;
                }
            }
        }
        LayerSpec::Sigmoid => {
            for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                let s = sigmoid(xv);
                *gv *= s * (1.0 - s);
            }
        }
        LayerSpec::Tanh => {
            for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                let t = xv.tanh();
                *gv *= 1.0 - t * t;
            }
        }
        _ => return Err(Error::Usage(format!("{spec:?} is not an activation"))),
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Linear

/// `y = W x + b` with `x` flattened; `W` is `out x in`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_f, in_f) = match weights.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Config(format!("linear weights must be 2-D, got {s:?}"))),
    };
    if input.len() != in_f || bias.len() != out_f {
        return Err(Error::Config(format!(
            "linear {in_f}->{out_f} got input of {} values and bias of {}",
            input.len(),
            bias.len()
        )));
    }
    let mut y = bias.data().to_vec();
    gemm(out_f, in_f, 1, weights.data(), in_f as isize, 1, input.data(), 1, 1, 1.0, &mut y);
    Tensor::from_vec(&[out_f], y)
}

pub fn linear_backward(grad_out: &Tensor, cached_input: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (out_f, in_f) = (weights.shape()[0], weights.shape()[1]);
    if grad_out.len() != out_f || cached_input.len() != in_f {
        return Err(Error::Config("linear backward shape mismatch".into()));
    }
    let g = grad_out.data();
    let x = cached_input.data();
    let mut gw = Tensor::zeros(&[out_f, in_f]);
    for (o, row) in gw.data_mut().chunks_mut(in_f).enumerate() {
        for (r, &xi) in row.iter_mut().zip(x) {
            *r = g[o] * xi;
        }
    }
    let mut gx = vec![0.0; in_f];
    gemm(in_f, out_f, 1, weights.data(), 1, in_f as isize, g, 1, 1, 0.0, &mut gx);
    Ok((
        Tensor::from_vec(cached_input.shape(), gx)?,
        gw,
        Tensor::from_vec(&[out_f], g.to_vec())?,
    ))
}

// ---------------------------------------------------------------------------
// Layer stacks

/// A layer with its own parameters (if any).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Parameter>,
    pub bias: Option<Parameter>,
}

/// Glorot-uniform weights, zero bias.
fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Parameter {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Parameter::new(Tensor::uniform(shape, -limit, limit, rng))
}

impl Layer {
    pub fn new<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        let (weights, bias) = match spec {
            LayerSpec::Conv2d(c) => {
                c.validate()?;
                let kk = c.kernel * c.kernel;
                (
                    Some(glorot(
                        &[c.out_channels, c.in_channels, c.kernel, c.kernel],
                        c.in_channels * kk,
                        c.out_channels * kk,
                        rng,
                    )),
                    Some(Parameter::new(Tensor::zeros(&[c.out_channels]))),
                )
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features < 1 || out_features < 1 {
                    return Err(Error::Config(format!("invalid linear spec {spec:?}")));
                }
                (
                    Some(glorot(&[out_features, in_features], in_features, out_features, rng)),
                    Some(Parameter::new(Tensor::zeros(&[out_features]))),
                )
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(0.0..1.0).contains(&slope) {
                    return Err(Error::Config(format!("leaky slope {slope} outside [0, 1)")));
                }
                (None, None)
            }
            LayerSpec::Sigmoid | LayerSpec::Tanh => (None, None),
        };
        Ok(Layer { spec, weights, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.spec, &self.weights, &self.bias) {
            (LayerSpec::Conv2d(c), Some(w), Some(b)) => conv2d_forward(x, &w.value, &b.value, c),
            (LayerSpec::Linear { .. }, Some(w), Some(b)) => linear_forward(x, &w.value, &b.value),
            (LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid | LayerSpec::Tanh, _, _) => activation_forward(x, &self.spec),
            _ => Err(Error::Config(format!("layer {:?} has no parameters", self.spec))),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        match (&self.spec, &mut self.weights, &mut self.bias) {
            (LayerSpec::Conv2d(c), Some(w), Some(b)) => {
                let g = conv2d_backward(grad_out, x, &w.value, c, need_input_grad)?;
                w.grad.add_scaled(&g.weights, 1.0)?;
                b.grad.add_scaled(&g.bias, 1.0)?;
                Ok(g.input)
            }
            (LayerSpec::Linear { .. }, Some(w), Some(b)) => {
                let (gx, gw, gb) = linear_backward(grad_out, x, &w.value)?;
                w.grad.add_scaled(&gw, 1.0)?;
                b.grad.add_scaled(&gb, 1.0)?;
                Ok(need_input_grad.then_some(gx))
            }
            (LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid | LayerSpec::Tanh, _, _) => {
                Ok(Some(activation_backward(x, grad_out, &self.spec)?))
            }
            _ => Err(Error::Config(format!("layer {:?} has no parameters", self.spec))),
        }
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_input(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        match (&self.spec, &self.weights) {
            (LayerSpec::Conv2d(c), Some(w)) => conv2d_backward(grad_out, x, &w.value, c, true)?
                .input
                .ok_or_else(|| Error::Usage("missing input gradient".into())),
            (LayerSpec::Linear { .. }, Some(w)) => Ok(linear_backward(grad_out, x, &w.value)?.0),
            _ => activation_backward(x, grad_out, &self.spec),
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.weights.iter().chain(self.bias.iter())
    }
}

/// Inputs seen by each layer during a forward pass; consumed by backward.
#[derive(Debug, Clone, Default)]
pub struct StackTrace {
    pub inputs: Vec<Tensor>,
}

/// A sequential chain of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs.iter().map(|s| Layer::new(*s, rng)).collect::<Result<_>>()?;
        Ok(Stack { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.layers.iter().try_fold(x.clone(), |acc, l| l.forward(&acc))
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, StackTrace)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let next = l.forward(&cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok((cur, StackTrace { inputs }))
    }

    fn check_trace(&self, trace: &StackTrace) -> Result<()> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "missing forward cache: stack has {} layers, trace holds {}",
                self.layers.len(),
                trace.inputs.len()
            )));
        }
        Ok(())
    }

    /// Backpropagates through the stack, accumulating parameter gradients.
    /// Returns the gradient at the stack input when `need_input_grad` is set.
    pub fn backward(&mut self, trace: &StackTrace, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        self.check_trace(trace)?;
        let mut g = grad_out.clone();
        let n = self.layers.len();
        for (i, (layer, x)) in self.layers.iter_mut().zip(&trace.inputs).enumerate().rev() {
            let want = need_input_grad || i > 0;
            match layer.backward(x, &g, want)? {
                Some(next) => g = next,
                None => {
                    debug_assert!(i == 0 && n > 0);
                    return Ok(None);
                }
            }
        }
        Ok(Some(g))
    }

    /// Input gradient only; parameters are treated as constants.
    pub fn backward_input(&self, trace: &StackTrace, grad_out: &Tensor) -> Result<Tensor> {
        self.check_trace(trace)?;
        let mut g = grad_out.clone();
        for (layer, x) in self.layers.iter().zip(&trace.inputs).rev() {
            g = layer.backward_input(x, &g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    /// Pre-activation sign pattern of every leaky-ReLU input, used to detect
    /// finite-difference probes that straddle a kink.
    pub fn kink_signature(&self, trace: &StackTrace) -> Vec<bool> {
        self.layers
            .iter()
            .zip(&trace.inputs)
            .filter(|(l, _)| matches!(l.spec, LayerSpec::LeakyRelu { .. }))
            .flat_map(|(_, x)| x.data().iter().map(|v| *v >= 0.0))
            .collect()
    }
}
