//! A minimal deterministic network engine: dense and 3x3 convolution layers
//! on `[h, w, c]` tensors, manual reverse-mode gradients, bias-corrected
//! Adam, a finite-difference gradient checker, and a raw checkpoint format.
//!
//! There is no graph compiler and no general autodiff; a [`Network`] is a
//! plain sequence of layers and [`Network::backward`] walks it in reverse.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether stochastic layers (Gaussian noise) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One parameter tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Adam hyperparameters; the defaults are used by every block in the
/// training engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam update for one parameter; zeroes the gradient
/// afterward. A non-finite gradient aborts before any state is touched.
pub fn adam_step_param(p: &mut Param, hyper: &AdamHyper) -> Result<()> {
    if !p.grad.all_finite() {
        return Err(Error::Numeric(
            "non-finite gradient entering Adam step".into(),
        ));
    }
    p.step_count += 1;
    let bc1 = 1.0 - hyper.beta1.powi(p.step_count as i32);
    let bc2 = 1.0 - hyper.beta2.powi(p.step_count as i32);
    let n = p.value.len();
    for i in 0..n {
        let g = p.grad.data()[i];
        let m = hyper.beta1 * p.adam_m.data()[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * p.adam_v.data()[i] + (1.0 - hyper.beta2) * g * g;
        p.adam_m.data_mut()[i] = m;
        p.adam_v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        p.value.data_mut()[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps_hat);
    }
    p.zero_grad();
    Ok(())
}

/// Layer kinds. Spatial tensors are `[h, w, c]`; `Dense` acts per pixel.
/// Convolutions use a 3x3 kernel with zero padding of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { in_features: usize, out_features: usize },
    Conv3x3 { in_channels: usize, out_channels: usize, stride: usize },
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxPerPixel,
    GaussianNoise { std: f64 },
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return Err(Error::Config("dense layer needs positive sizes".into()));
                }
            }
            LayerSpec::Conv3x3 { in_channels, out_channels, stride } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(Error::Config("conv layer needs positive channel counts".into()));
                }
                if stride != 1 && stride != 2 {
                    return Err(Error::Config(format!(
                        "conv stride must be 1 or 2, got {stride}"
                    )));
                }
            }
            LayerSpec::GaussianNoise { std } => {
                if !(std >= 0.0 && std.is_finite()) {
                    return Err(Error::Config(format!(
                        "noise std must be finite and >= 0, got {std}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of this layer's parameter tensors: `[weight, bias]` for the
    /// parameterized kinds, empty otherwise.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_features, out_features } => {
                vec![vec![in_features, out_features], vec![out_features]]
            }
            LayerSpec::Conv3x3 { in_channels, out_channels, .. } => {
                vec![vec![3, 3, in_channels, out_channels], vec![out_channels]]
            }
            _ => Vec::new(),
        }
    }

    fn fan_in_out(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { in_features, out_features } => Some((in_features, out_features)),
            LayerSpec::Conv3x3 { in_channels, out_channels, .. } => {
                Some((9 * in_channels, 9 * out_channels))
            }
            _ => None,
        }
    }

    /// Output shape for a given input shape, or a structural error when the
    /// input does not fit.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let want3 = |what: &str| -> Result<(usize, usize, usize)> {
            if input.len() != 3 {
                return Err(Error::Structure(format!(
                    "{what} expects a [h, w, c] input, got {input:?}"
                )));
            }
            Ok((input[0], input[1], input[2]))
        };
        match *self {
            LayerSpec::Dense { in_features, out_features } => {
                let (h, w, c) = want3("dense layer")?;
                if c != in_features {
                    return Err(Error::Structure(format!(
                        "dense layer expects {in_features} input channels, got {c}"
                    )));
                }
                Ok(vec![h, w, out_features])
            }
            LayerSpec::Conv3x3 { in_channels, out_channels, stride } => {
                let (h, w, c) = want3("conv layer")?;
                if c != in_channels {
                    return Err(Error::Structure(format!(
                        "conv layer expects {in_channels} input channels, got {c}"
                    )));
                }
                Ok(vec![(h - 1) / stride + 1, (w - 1) / stride + 1, out_channels])
            }
            LayerSpec::SoftmaxPerPixel => {
                let (h, w, k) = want3("per-pixel softmax")?;
                Ok(vec![h, w, k])
            }
            _ => Ok(input.to_vec()),
        }
    }
}

/// A layer specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
}

/// An ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Activation record from one forward pass: the original input plus every
/// layer output, as consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    outputs: Vec<Tensor>,
}

impl Trace {
    /// Output of the final layer.
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Per-layer outputs, in forward order.
    pub fn activations(&self) -> &[Tensor] {
        &self.outputs
    }
}

impl Network {
    /// Builds the stack with uniform Xavier initialization: weights drawn
    /// from `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let mut params = Vec::new();
            let shapes = spec.param_shapes();
            if !shapes.is_empty() {
                let (fan_in, fan_out) = spec.fan_in_out().expect("parameterized layer");
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut weight = Tensor::zeros(&shapes[0]);
                for v in weight.data_mut() {
                    *v = rng.gen_range(-s..s);
                }
                params.push(Param::new(weight));
                params.push(Param::new(Tensor::zeros(&shapes[1])));
            }
            layers.push(Layer { spec: *spec, params });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Drops all Adam moment estimates and step counts, as after a fresh
    /// build. Used when the training objective changes discontinuously:
    /// second moments estimated under the old loss misscale the first steps
    /// of the new one.
    pub fn reset_optimizer_state(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
            p.adam_m.data_mut().fill(0.0);
            p.adam_v.data_mut().fill(0.0);
            p.step_count = 0;
        }
    }

    /// Applies one Adam step to every parameter, then clears all gradients.
    pub fn adam_step(&mut self, hyper: &AdamHyper) -> Result<()> {
        for p in self.params_mut() {
            adam_step_param(p, hyper)?;
        }
        Ok(())
    }

    /// Little-endian bytes of all parameter values, for exact comparisons.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for p in self.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Expected output shape for an input shape, without running anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    fn needs_rng(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.spec, LayerSpec::GaussianNoise { std } if std > 0.0))
    }

    /// Runs the stack on `input`. In train mode, Gaussian-noise layers draw
    /// from `rng` (required then); in eval mode they are the identity.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace> {
        if mode == Mode::Train && self.needs_rng() && rng.is_none() {
            return Err(Error::Structure(
                "train-mode forward through Gaussian noise needs an rng".into(),
            ));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for layer in &self.layers {
            let out = layer_forward(layer, current, mode, rng.as_deref_mut())?;
            if !out.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation after {:?}",
                    layer.spec
                )));
            }
            outputs.push(out);
            current = outputs.last().unwrap();
        }
        Ok(Trace {
            input: input.clone(),
            outputs,
        })
    }

    /// Reverse-mode pass. Accumulates parameter gradients in place and
    /// returns the gradient with respect to the network input.
    ///
    /// The trace must come from a forward pass of this same stack; any shape
    /// drift is a structural error.
    pub fn backward(&mut self, trace: &Trace, output_grad: &Tensor) -> Result<Tensor> {
        if trace.outputs.len() != self.layers.len() {
            return Err(Error::Structure(format!(
                "trace has {} layer outputs, network has {} layers",
                trace.outputs.len(),
                self.layers.len()
            )));
        }
        // Re-derive the shape chain so a stale trace cannot slip through.
        let mut shape = trace.input.shape().to_vec();
        for (layer, out) in self.layers.iter().zip(&trace.outputs) {
            shape = layer.spec.output_shape(&shape)?;
            if out.shape() != shape {
                return Err(Error::Structure(format!(
                    "stale trace: {:?} output recorded as {:?}, expected {:?}",
                    layer.spec,
                    out.shape(),
                    shape
                )));
            }
        }
        if output_grad.shape() != shape {
            return Err(Error::Structure(format!(
                "output grad shape {:?} does not match network output {:?}",
                output_grad.shape(),
                shape
            )));
        }
        let mut grad = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let layer_input = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let layer_output = &trace.outputs[i];
            grad = layer_backward(&mut self.layers[i], layer_input, layer_output, &grad)?;
        }
        Ok(grad)
    }
}

fn layer_forward(
    layer: &Layer,
    input: &Tensor,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let out_shape = layer.spec.output_shape(input.shape())?;
    match layer.spec {
        LayerSpec::Dense { in_features, out_features } => {
            let w = layer.params[0].value.data();
            let b = layer.params[1].value.data();
            let mut out = Tensor::zeros(&out_shape);
            let pixels = input.len() / in_features;
            let x = input.data();
            let y = out.data_mut();
            for p in 0..pixels {
                let xb = p * in_features;
                let yb = p * out_features;
                y[yb..yb + out_features].copy_from_slice(b);
                for i in 0..in_features {
                    let xv = x[xb + i];
                    let wb = i * out_features;
                    for o in 0..out_features {
                        y[yb + o] += xv * w[wb + o];
                    }
                }
            }
            Ok(out)
        }
        LayerSpec::Conv3x3 { in_channels, out_channels, stride } => {
            let (h, w_dim) = (input.shape()[0], input.shape()[1]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let wt = layer.params[0].value.data();
            let b = layer.params[1].value.data();
            let mut out = Tensor::zeros(&out_shape);
            let x = input.data();
            let y = out.data_mut();
            for oy in 0..oh {
                for ox in 0..ow {
                    let yb = (oy * ow + ox) * out_channels;
                    y[yb..yb + out_channels].copy_from_slice(b);
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w_dim as isize {
                                continue;
                            }
                            let xb = (iy as usize * w_dim + ix as usize) * in_channels;
                            let wb0 = (ky * 3 + kx) * in_channels * out_channels;
                            for ic in 0..in_channels {
                                let xv = x[xb + ic];
                                let wb = wb0 + ic * out_channels;
                                for oc in 0..out_channels {
                                    y[yb + oc] += xv * wt[wb + oc];
                                }
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        LayerSpec::Relu => {
            let mut out = input.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        LayerSpec::Tanh => {
            let mut out = input.clone();
            for v in out.data_mut() {
                *v = v.tanh();
            }
            Ok(out)
        }
        LayerSpec::Sigmoid => {
            let mut out = input.clone();
            for v in out.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
            Ok(out)
        }
        LayerSpec::SoftmaxPerPixel => {
            let k = out_shape[2];
            let mut out = input.clone();
            let y = out.data_mut();
            for p in 0..y.len() / k {
                let base = p * k;
                let row = &mut y[base..base + k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Ok(out)
        }
        LayerSpec::GaussianNoise { std } => {
            let mut out = input.clone();
            if mode == Mode::Train && std > 0.0 {
                let rng = rng.expect("checked by Network::forward");
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("bad noise std: {e}")))?;
                for v in out.data_mut() {
                    *v += dist.sample(rng);
                }
            }
            Ok(out)
        }
    }
}

fn layer_backward(
    layer: &mut Layer,
    input: &Tensor,
    output: &Tensor,
    gout: &Tensor,
) -> Result<Tensor> {
    match layer.spec {
        LayerSpec::Dense { in_features, out_features } => {
            let pixels = input.len() / in_features;
            let mut gin = Tensor::zeros(input.shape());
            {
                let w = layer.params[0].value.data().to_vec();
                let gw = layer.params[0].grad.data_mut();
                let x = input.data();
                let go = gout.data();
                let gi = gin.data_mut();
                for p in 0..pixels {
                    let xb = p * in_features;
                    let yb = p * out_features;
                    for i in 0..in_features {
                        let xv = x[xb + i];
                        let wb = i * out_features;
                        let mut acc = 0.0;
                        for o in 0..out_features {
                            let g = go[yb + o];
                            gw[wb + o] += xv * g;
                            acc += w[wb + o] * g;
                        }
                        gi[xb + i] = acc;
                    }
                }
            }
            {
                let gb = layer.params[1].grad.data_mut();
                let go = gout.data();
                for p in 0..pixels {
                    let yb = p * out_features;
                    for o in 0..out_features {
                        gb[o] += go[yb + o];
                    }
                }
            }
            Ok(gin)
        }
        LayerSpec::Conv3x3 { in_channels, out_channels, stride } => {
            let (h, w_dim) = (input.shape()[0], input.shape()[1]);
            let (oh, ow) = (output.shape()[0], output.shape()[1]);
            let mut gin = Tensor::zeros(input.shape());
            let wt = layer.params[0].value.data().to_vec();
            {
                let gw = layer.params[0].grad.data_mut();
                let x = input.data();
                let go = gout.data();
                let gi = gin.data_mut();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let yb = (oy * ow + ox) * out_channels;
                        for ky in 0..3usize {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= w_dim as isize {
                                    continue;
                                }
                                let xb = (iy as usize * w_dim + ix as usize) * in_channels;
                                let wb0 = (ky * 3 + kx) * in_channels * out_channels;
                                for ic in 0..in_channels {
                                    let xv = x[xb + ic];
                                    let wb = wb0 + ic * out_channels;
                                    let mut acc = 0.0;
                                    for oc in 0..out_channels {
                                        let g = go[yb + oc];
                                        gw[wb + oc] += xv * g;
                                        acc += wt[wb + oc] * g;
                                    }
                                    gi[xb + ic] += acc;
                                }
                            }
                        }
                    }
                }
            }
            {
                let gb = layer.params[1].grad.data_mut();
                let go = gout.data();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let yb = (oy * ow + ox) * out_channels;
                        for oc in 0..out_channels {
                            gb[oc] += go[yb + oc];
                        }
                    }
                }
            }
            Ok(gin)
        }
        LayerSpec::Relu => {
            let mut gin = gout.clone();
            for (g, x) in gin.data_mut().iter_mut().zip(input.data()) {
                if *x <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(gin)
        }
        LayerSpec::Tanh => {
            let mut gin = gout.clone();
            for (g, y) in gin.data_mut().iter_mut().zip(output.data()) {
                *g *= 1.0 - y * y;
            }
            Ok(gin)
        }
        LayerSpec::Sigmoid => {
            let mut gin = gout.clone();
            for (g, y) in gin.data_mut().iter_mut().zip(output.data()) {
                *g *= y * (1.0 - y);
            }
            Ok(gin)
        }
        LayerSpec::SoftmaxPerPixel => {
            let k = output.shape()[2];
            let mut gin = Tensor::zeros(input.shape());
            let y = output.data();
            let go = gout.data();
            let gi = gin.data_mut();
            for p in 0..y.len() / k {
                let base = p * k;
                let mut dot = 0.0;
                for c in 0..k {
                    dot += go[base + c] * y[base + c];
                }
                for c in 0..k {
                    gi[base + c] = y[base + c] * (go[base + c] - dot);
                }
            }
            Ok(gin)
        }
        LayerSpec::GaussianNoise { .. } => Ok(gout.clone()),
    }
}

/// A differentiable scalar objective over a network output, used by the
/// gradient checker.
pub trait ScalarLoss {
    fn value(&self, output: &Tensor) -> f64;
    fn grad(&self, output: &Tensor) -> Tensor;
}

/// `0.5 * sum((y - target)^2)`.
pub struct QuadraticLoss {
    pub target: Tensor,
}

impl ScalarLoss for QuadraticLoss {
    fn value(&self, output: &Tensor) -> f64 {
        output
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(y, t)| 0.5 * (y - t) * (y - t))
            .sum()
    }

    fn grad(&self, output: &Tensor) -> Tensor {
        let mut g = output.clone();
        for (v, t) in g.data_mut().iter_mut().zip(self.target.data()) {
            *v -= t;
        }
        g
    }
}

/// Compares backward-mode parameter gradients against central differences,
/// parameter by parameter, returning the maximum relative error
/// `|analytic - fd| / max(1, |analytic|)`.
///
/// With `plant_fault` set, the analytic gradient of the single
/// largest-magnitude weight entry is doubled first; a healthy checker must
/// then report a large error.
pub fn finite_diff_check(
    net: &mut Network,
    input: &Tensor,
    loss: &dyn ScalarLoss,
    h: f64,
    plant_fault: bool,
) -> Result<f64> {
    if !(h > 1e-8 && h < 1e-3) {
        return Err(Error::Config(format!(
            "finite-difference step must lie in (1e-8, 1e-3), got {h}"
        )));
    }
    net.zero_grads();
    let trace = net.forward(input, Mode::Eval, None)?;
    let output_grad = loss.grad(trace.output());
    net.backward(&trace, &output_grad)?;
    let mut analytic: Vec<Vec<f64>> = net
        .params()
        .map(|p| p.grad.data().to_vec())
        .collect();
    net.zero_grads();
    if plant_fault {
        let mut best = (0usize, 0usize, 0.0f64);
        for (pi, g) in analytic.iter().enumerate() {
            for (i, v) in g.iter().enumerate() {
                if v.abs() > best.2 {
                    best = (pi, i, v.abs());
                }
            }
        }
        analytic[best.0][best.1] *= 2.0;
    }
    let mut max_rel = 0.0f64;
    let n_params = analytic.len();
    for pi in 0..n_params {
        for i in 0..analytic[pi].len() {
            let eval_at = |net: &Network, delta: f64| -> Result<f64> {
                let mut probe = net.clone();
                let p = probe.params_mut().nth(pi).expect("param index in range");
                p.value.data_mut()[i] += delta;
                let t = probe.forward(input, Mode::Eval, None)?;
                Ok(loss.value(t.output()))
            };
            let plus = eval_at(net, h)?;
            let minus = eval_at(net, -h)?;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

const CKPT_MAGIC: &[u8; 8] = b"ADPTCKPT";
const CKPT_VERSION: u32 = 1;

/// Writes named networks (parameter values only) to a checkpoint file.
pub fn save_networks(path: &Path, nets: &[(&str, &Network)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for (name, net) in nets {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let params: Vec<&Param> = net.params().collect();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for d in p.value.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Loads parameter values from a checkpoint into existing networks of
/// matching names and shapes. Optimizer state is left untouched.
pub fn load_networks_into(path: &Path, nets: &mut [(&str, &mut Network)]) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    if count != nets.len() {
        return Err(Error::Structure(format!(
            "checkpoint holds {count} networks, expected {}",
            nets.len()
        )));
    }
    for (expect_name, net) in nets.iter_mut() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Data("checkpoint network name is not UTF-8".into()))?;
        if name != *expect_name {
            return Err(Error::Structure(format!(
                "checkpoint network '{name}' where '{expect_name}' was expected"
            )));
        }
        let n_params = read_u32(&mut r)? as usize;
        let params: Vec<&mut Param> = net.params_mut().collect();
        if n_params != params.len() {
            return Err(Error::Structure(format!(
                "checkpoint '{name}' holds {n_params} parameters, network has {}",
                params.len()
            )));
        }
        for p in params {
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != p.value.shape() {
                return Err(Error::Structure(format!(
                    "checkpoint '{name}' parameter shape {shape:?} does not match {:?}",
                    p.value.shape()
                )));
            }
            for v in p.value.data_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            if !p.value.all_finite() {
                return Err(Error::Numeric(format!(
                    "checkpoint '{name}' holds non-finite parameter values"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn dense_zero_weights_outputs_bias() {
        let mut net = Network::new(
            &[LayerSpec::Dense { in_features: 3, out_features: 2 }],
            &mut rng(0),
        )
        .unwrap();
        for p in net.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        {
            let bias = net.layers[0].params[1].value.data_mut();
            bias.copy_from_slice(&[0.7, -0.2]);
        }
        let input = random_tensor(&[4, 4, 3], &mut rng(1));
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        for p in 0..16 {
            assert_eq!(trace.output().data()[p * 2], 0.7);
            assert_eq!(trace.output().data()[p * 2 + 1], -0.2);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_interior() {
        let mut net = Network::new(
            &[LayerSpec::Conv3x3 { in_channels: 1, out_channels: 1, stride: 1 }],
            &mut rng(0),
        )
        .unwrap();
        {
            let w = net.layers[0].params[0].value.data_mut();
            w.fill(0.0);
            // kernel center: ky = kx = 1, single channel pair
            w[(1 * 3 + 1) * 1 * 1] = 1.0;
            net.layers[0].params[1].value.data_mut().fill(0.0);
        }
        let input = random_tensor(&[5, 5, 1], &mut rng(2));
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        assert_eq!(trace.output().shape(), input.shape());
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(trace.output().at3(y, x, 0), input.at3(y, x, 0));
            }
        }
    }

    #[test]
    fn conv_stride_two_halves_spatial_dims() {
        let net = Network::new(
            &[
                LayerSpec::Conv3x3 { in_channels: 3, out_channels: 8, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv3x3 { in_channels: 8, out_channels: 1, stride: 2 },
                LayerSpec::Sigmoid,
            ],
            &mut rng(3),
        )
        .unwrap();
        assert_eq!(net.output_shape(&[32, 32, 3]).unwrap(), vec![8, 8, 1]);
        let input = random_tensor(&[32, 32, 3], &mut rng(4));
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        assert_eq!(trace.output().shape(), &[8, 8, 1]);
        for v in trace.output().data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn softmax_is_symmetric_and_normalized() {
        let net = Network::new(&[LayerSpec::SoftmaxPerPixel], &mut rng(0)).unwrap();
        let zeros = Tensor::zeros(&[1, 1, 2]);
        let trace = net.forward(&zeros, Mode::Eval, None).unwrap();
        assert_eq!(trace.output().data(), &[0.5, 0.5]);

        let logits = random_tensor(&[3, 4, 6], &mut rng(9));
        let trace = net.forward(&logits, Mode::Eval, None).unwrap();
        for p in 0..12 {
            let row = &trace.output().data()[p * 6..(p + 1) * 6];
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn gaussian_noise_is_identity_in_eval_and_seeded_in_train() {
        let net = Network::new(&[LayerSpec::GaussianNoise { std: 0.1 }], &mut rng(0)).unwrap();
        let input = random_tensor(&[4, 4, 2], &mut rng(5));
        let eval = net.forward(&input, Mode::Eval, None).unwrap();
        assert_eq!(eval.output().data(), input.data());

        assert!(net.forward(&input, Mode::Train, None).is_err());
        let a = net
            .forward(&input, Mode::Train, Some(&mut rng(77)))
            .unwrap();
        let b = net
            .forward(&input, Mode::Train, Some(&mut rng(77)))
            .unwrap();
        assert_eq!(a.output().data(), b.output().data());
        assert_ne!(a.output().data(), input.data());

        // Identity backward regardless of mode.
        let mut net = net;
        let g = random_tensor(&[4, 4, 2], &mut rng(6));
        let gin = net.backward(&a, &g).unwrap();
        assert_eq!(gin.data(), g.data());
    }

    #[test]
    fn dense_backward_is_the_outer_product() {
        let mut net = Network::new(
            &[LayerSpec::Dense { in_features: 3, out_features: 2 }],
            &mut rng(7),
        )
        .unwrap();
        let input = Tensor::new(vec![1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        let gout = Tensor::new(vec![1, 1, 2], vec![3.0, -1.0]).unwrap();
        net.backward(&trace, &gout).unwrap();
        let gw = net.layers[0].params[0].grad.data();
        // weight layout [in, out]: grad[i][o] = input[i] * gout[o]
        let expect = [3.0, -1.0, -6.0, 2.0, 1.5, -0.5];
        for (a, e) in gw.iter().zip(expect) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
        assert_eq!(net.layers[0].params[1].grad.data(), gout.data());
    }

    #[test]
    fn relu_passes_gradient_where_positive() {
        let mut net = Network::new(&[LayerSpec::Relu], &mut rng(0)).unwrap();
        let input = Tensor::new(vec![1, 1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        let gout = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let gin = net.backward(&trace, &gout).unwrap();
        assert_eq!(gin.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn finite_differences_on_linear_net_are_exact() {
        let mut net = Network::new(
            &[
                LayerSpec::Dense { in_features: 3, out_features: 4 },
                LayerSpec::Dense { in_features: 4, out_features: 2 },
            ],
            &mut rng(11),
        )
        .unwrap();
        let input = random_tensor(&[2, 2, 3], &mut rng(12));
        let loss = QuadraticLoss {
            target: random_tensor(&[2, 2, 2], &mut rng(13)),
        };
        let err = finite_diff_check(&mut net, &input, &loss, 1e-5, false).unwrap();
        assert!(err < 1e-9, "max relative error {err}");
    }

    #[test]
    fn finite_differences_on_random_nets() {
        // Three random toy stacks covering every differentiable layer kind.
        let stacks: Vec<Vec<LayerSpec>> = vec![
            vec![
                LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_features: 3, out_features: 2 },
            ],
            vec![
                LayerSpec::Dense { in_features: 2, out_features: 5 },
                LayerSpec::Tanh,
                LayerSpec::Conv3x3 { in_channels: 5, out_channels: 2, stride: 2 },
                LayerSpec::Sigmoid,
            ],
            vec![
                LayerSpec::Conv3x3 { in_channels: 2, out_channels: 4, stride: 1 },
                LayerSpec::SoftmaxPerPixel,
            ],
        ];
        for (i, specs) in stacks.iter().enumerate() {
            let mut net = Network::new(specs, &mut rng(20 + i as u64)).unwrap();
            let input = random_tensor(&[4, 4, 2], &mut rng(30 + i as u64));
            let out_shape = net.output_shape(&[4, 4, 2]).unwrap();
            let loss = QuadraticLoss {
                target: random_tensor(&out_shape, &mut rng(40 + i as u64)),
            };
            let err = finite_diff_check(&mut net, &input, &loss, 1e-5, false).unwrap();
            assert!(err < 1e-4, "stack {i}: max relative error {err}");
        }
    }

    #[test]
    fn planted_fault_is_detected() {
        let mut net = Network::new(
            &[
                LayerSpec::Dense { in_features: 2, out_features: 3 },
                LayerSpec::Tanh,
                LayerSpec::Dense { in_features: 3, out_features: 2 },
            ],
            &mut rng(50),
        )
        .unwrap();
        let mut r = rng(51);
        let mut input = random_tensor(&[3, 3, 2], &mut r);
        for v in input.data_mut() {
            *v *= 3.0; // larger activations -> gradient entries above 1
        }
        let mut target = random_tensor(&[3, 3, 2], &mut r);
        for v in target.data_mut() {
            *v += 3.0;
        }
        let loss = QuadraticLoss { target };
        let clean = finite_diff_check(&mut net, &input, &loss, 1e-5, false).unwrap();
        assert!(clean < 1e-4, "clean run reported {clean}");
        let faulty = finite_diff_check(&mut net, &input, &loss, 1e-5, true).unwrap();
        assert!(faulty > 0.4, "planted fault only reported {faulty}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let mut net = Network::new(
            &[LayerSpec::Dense { in_features: 1, out_features: 1 }],
            &mut rng(0),
        )
        .unwrap();
        let input = Tensor::filled(&[1, 1, 1], 1.0);
        let loss = QuadraticLoss {
            target: Tensor::zeros(&[1, 1, 1]),
        };
        assert!(finite_diff_check(&mut net, &input, &loss, 1e-2, false).is_err());
        assert!(finite_diff_check(&mut net, &input, &loss, 1e-9, false).is_err());
    }

    #[test]
    fn adam_first_step_is_minus_lr_times_sign() {
        let mut p = Param::new(Tensor::filled(&[1], 0.0));
        p.grad.data_mut()[0] = 2.0;
        adam_step_param(&mut p, &AdamHyper::default()).unwrap();
        assert_abs_diff_eq!(p.value.data()[0], -1e-3, epsilon = 1e-8);
        assert_eq!(p.step_count, 1);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn adam_zero_grad_leaves_value_unchanged() {
        let mut p = Param::new(Tensor::filled(&[3], 1.5));
        adam_step_param(&mut p, &AdamHyper::default()).unwrap();
        assert_eq!(p.value.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn adam_steps_do_not_grow_under_constant_gradient() {
        let mut p = Param::new(Tensor::filled(&[1], 0.0));
        p.grad.data_mut()[0] = 0.7;
        adam_step_param(&mut p, &AdamHyper::default()).unwrap();
        let d1 = p.value.data()[0].abs();
        let before = p.value.data()[0];
        p.grad.data_mut()[0] = 0.7;
        adam_step_param(&mut p, &AdamHyper::default()).unwrap();
        let d2 = (p.value.data()[0] - before).abs();
        assert!(d2 <= d1 * (1.0 + 1e-6), "d1={d1}, d2={d2}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Param::new(Tensor::filled(&[2], 0.0));
        p.grad.data_mut()[1] = f64::NAN;
        let before = p.value.data().to_vec();
        assert!(matches!(
            adam_step_param(&mut p, &AdamHyper::default()),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p.value.data(), &before[..]);
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn adam_is_invariant_to_update_order() {
        let make = || {
            let mut a = Param::new(Tensor::filled(&[1], 0.3));
            let mut b = Param::new(Tensor::filled(&[1], -0.8));
            a.grad.data_mut()[0] = 1.1;
            b.grad.data_mut()[0] = -0.4;
            (a, b)
        };
        let hyper = AdamHyper::default();
        let (mut a1, mut b1) = make();
        adam_step_param(&mut a1, &hyper).unwrap();
        adam_step_param(&mut b1, &hyper).unwrap();
        let (mut a2, mut b2) = make();
        adam_step_param(&mut b2, &hyper).unwrap();
        adam_step_param(&mut a2, &hyper).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn backward_is_linear_in_the_output_gradient() {
        let specs = [
            LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1 },
            LayerSpec::Tanh,
            LayerSpec::Dense { in_features: 3, out_features: 2 },
        ];
        let mut net = Network::new(&specs, &mut rng(60)).unwrap();
        let input = random_tensor(&[3, 3, 2], &mut rng(61));
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        let g1 = random_tensor(&[3, 3, 2], &mut rng(62));
        let g2 = random_tensor(&[3, 3, 2], &mut rng(63));
        let (alpha, beta) = (0.6, -1.7);

        let grads_for = |net: &mut Network, g: &Tensor, trace: &Trace| {
            net.zero_grads();
            let gin = net.backward(trace, g).unwrap();
            let pg: Vec<Vec<f64>> = net.params().map(|p| p.grad.data().to_vec()).collect();
            (gin, pg)
        };
        let (gin1, pg1) = grads_for(&mut net, &g1, &trace);
        let (gin2, pg2) = grads_for(&mut net, &g2, &trace);
        let mut combo = g1.clone();
        for (c, (a, b)) in combo.data_mut().iter_mut().zip(g1.data().iter().zip(g2.data())) {
            *c = alpha * a + beta * b;
        }
        let (gin_c, pg_c) = grads_for(&mut net, &combo, &trace);
        for ((c, a), b) in gin_c.data().iter().zip(gin1.data()).zip(gin2.data()) {
            assert_abs_diff_eq!(*c, alpha * a + beta * b, epsilon = 1e-10);
        }
        for (pc, (pa, pb)) in pg_c.iter().zip(pg1.iter().zip(pg2.iter())) {
            for ((c, a), b) in pc.iter().zip(pa).zip(pb) {
                assert_abs_diff_eq!(*c, alpha * a + beta * b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn init_and_forward_are_deterministic() {
        let specs = [
            LayerSpec::Conv3x3 { in_channels: 2, out_channels: 4, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_features: 4, out_features: 3 },
            LayerSpec::SoftmaxPerPixel,
        ];
        let net1 = Network::new(&specs, &mut rng(99)).unwrap();
        let net2 = Network::new(&specs, &mut rng(99)).unwrap();
        assert_eq!(net1.value_bytes(), net2.value_bytes());
        let input = random_tensor(&[4, 4, 2], &mut rng(100));
        let t1 = net1.forward(&input, Mode::Eval, None).unwrap();
        let t2 = net2.forward(&input, Mode::Eval, None).unwrap();
        assert_eq!(t1.output().data(), t2.output().data());
    }

    #[test]
    fn xavier_bounds_respected() {
        let net = Network::new(
            &[LayerSpec::Dense { in_features: 10, out_features: 14 }],
            &mut rng(5),
        )
        .unwrap();
        let s = (6.0 / 24.0f64).sqrt();
        for v in net.layers[0].params[0].value.data() {
            assert!(v.abs() < s);
        }
        assert!(net.layers[0].params[1].value.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatches_are_structural_errors() {
        let mut net = Network::new(
            &[LayerSpec::Dense { in_features: 3, out_features: 2 }],
            &mut rng(0),
        )
        .unwrap();
        let bad = Tensor::zeros(&[4, 4, 5]);
        assert!(matches!(
            net.forward(&bad, Mode::Eval, None),
            Err(Error::Structure(_))
        ));
        let input = Tensor::zeros(&[4, 4, 3]);
        let trace = net.forward(&input, Mode::Eval, None).unwrap();
        let bad_grad = Tensor::zeros(&[4, 4, 7]);
        assert!(matches!(
            net.backward(&trace, &bad_grad),
            Err(Error::Structure(_))
        ));
        // A trace from a different architecture is rejected.
        let mut other = Network::new(
            &[LayerSpec::Dense { in_features: 3, out_features: 5 }],
            &mut rng(1),
        )
        .unwrap();
        let gout = Tensor::zeros(&[4, 4, 2]);
        assert!(matches!(
            other.backward(&trace, &gout),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let specs_e = [LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1 }];
        let specs_s = [
            LayerSpec::Dense { in_features: 3, out_features: 4 },
            LayerSpec::SoftmaxPerPixel,
        ];
        let e = Network::new(&specs_e, &mut rng(7)).unwrap();
        let s = Network::new(&specs_s, &mut rng(8)).unwrap();
        save_networks(&path, &[("encoder", &e), ("classifier", &s)]).unwrap();

        let mut e2 = Network::new(&specs_e, &mut rng(70)).unwrap();
        let mut s2 = Network::new(&specs_s, &mut rng(80)).unwrap();
        assert_ne!(e.value_bytes(), e2.value_bytes());
        load_networks_into(&path, &mut [("encoder", &mut e2), ("classifier", &mut s2)])
            .unwrap();
        assert_eq!(e.value_bytes(), e2.value_bytes());
        assert_eq!(s.value_bytes(), s2.value_bytes());

        // Wrong name ordering is refused.
        let mut e3 = Network::new(&specs_e, &mut rng(7)).unwrap();
        let mut s3 = Network::new(&specs_s, &mut rng(8)).unwrap();
        assert!(load_networks_into(&path, &mut [("classifier", &mut s3), ("encoder", &mut e3)])
            .is_err());

        // Corrupted magic is refused.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_networks_into(&path, &mut [("encoder", &mut e3), ("classifier", &mut s3)])
            .is_err());
    }
}
