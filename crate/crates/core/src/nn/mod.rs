//! Minimal fixed-point neural-network engine with exact reverse-mode input
//! gradients.
//!
//! Sequential models only: conv2d / fc / relu / maxpool / avgpool / flatten
//! with a softmax cross-entropy loss at the end. Convolutions are lowered to
//! im2col + matmul so a linear layer can be swapped between its software
//! weights and a hardware [`LinearOp`] backend without touching the rest of
//! the graph. Activation noise is injected through per-layer hooks; the
//! gradient path never sees hooks (noisy tapes are rejected by
//! [`LayerGraph::input_gradient`]).

pub mod checkpoint;
pub mod linalg;
pub mod train;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dequantize, quantize_with, QuantParams, Tensor};
use linalg::{col2im, conv_out_dims, expect_chw, im2col, matmul, matmul_a_bt, matmul_at_b};
use serde::{Deserialize, Serialize};

/// Linear operator backend: software weights or a mapped crossbar.
///
/// Operates on patch matrices of shape (in_features, cols); an fc input is
/// the cols = 1 case. `backward_mat` applies the exact transpose of whatever
/// `forward_mat` applies, so gradients through a hardware backend are
/// gradients of the hardware model.
pub trait LinearOp: Send + Sync + std::fmt::Debug {
    fn in_features(&self) -> usize;
    fn out_features(&self) -> usize;
    fn forward_mat(&self, x: &Tensor) -> Result<Tensor>;
    fn backward_mat(&self, grad: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    Fc,
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Whether the layer's output occupies an activation memory that noise
    /// hooks may target. Flatten is a view, not a stored activation.
    pub fn hookable(self) -> bool {
        !matches!(self, LayerKind::Flatten)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxXent,
}

/// One layer: kind, parameters, quantization metadata and optional hardware
/// backend.
#[derive(Clone, Debug)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Pool window (= stride) for pooling layers.
    pub window: usize,
    /// Whether this layer's activations are stored 8-bit.
    pub quantize_activations: bool,
    /// Calibrated activation quantization parameters.
    pub act_quant: Option<QuantParams>,
    /// Quantization parameters the weights were snapped to, if any.
    pub weight_quant: Option<QuantParams>,
    /// Hardware linear backend; None = software weights.
    pub backend: Option<Arc<dyn LinearOp>>,
}

impl Layer {
    fn of_kind(kind: LayerKind) -> Self {
        Layer {
            kind,
            weights: None,
            bias: None,
            window: 0,
            quantize_activations: kind.hookable(),
            act_quant: None,
            weight_quant: None,
            backend: None,
        }
    }
}

/// Layer blueprint used by [`LayerGraph::build`].
#[derive(Clone, Copy, Debug)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: usize },
    Fc { out_features: usize },
    Relu,
    MaxPool { window: usize },
    AvgPool { window: usize },
    Flatten,
}

/// Per-layer activation noise transform (e.g. SRAM bit-error injection).
pub trait ActivationHook: Send + Sync {
    fn layer_id(&self) -> usize;
    /// `act_quant` is the target layer's calibrated quantization; `sample`
    /// identifies the input so that noise substreams are reproducible and
    /// independent of evaluation order.
    fn apply(
        &self,
        activation: &Tensor,
        act_quant: Option<&QuantParams>,
        sample: u64,
    ) -> Result<Tensor>;
}

/// A set of hooks, at most one per layer.
#[derive(Clone, Default)]
pub struct HookSet {
    hooks: Vec<Arc<dyn ActivationHook>>,
}

impl HookSet {
    pub fn new(hooks: Vec<Arc<dyn ActivationHook>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for h in &hooks {
            if !seen.insert(h.layer_id()) {
                return Err(Error::Config(format!(
                    "duplicate noise hook on layer {}",
                    h.layer_id()
                )));
            }
        }
        Ok(HookSet { hooks })
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn get(&self, layer_id: usize) -> Option<&dyn ActivationHook> {
        self.hooks
            .iter()
            .find(|h| h.layer_id() == layer_id)
            .map(|h| h.as_ref())
    }

    fn validate(&self, model: &LayerGraph) -> Result<()> {
        for h in &self.hooks {
            let id = h.layer_id();
            let layer = model
                .layers
                .get(id)
                .ok_or_else(|| Error::Config(format!("noise hook on unknown layer {id}")))?;
            if !layer.kind.hookable() {
                return Err(Error::Config(format!(
                    "layer {id} ({}) has no activation memory to hook",
                    layer.kind.name()
                )));
            }
        }
        Ok(())
    }
}

/// Options for a forward pass.
#[derive(Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    pub hooks: Option<&'a HookSet>,
    /// Sample identifier, used to derive per-sample noise substreams.
    pub sample: u64,
    /// Apply 8-bit fake quantization on layers that are flagged and
    /// calibrated. Off by default: the gradient model is the smooth graph.
    pub quantize_activations: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Software,
    Hardware,
}

/// Activations cached by a forward pass; consumed by one backward pass.
pub struct GradientTape {
    input: Tensor,
    /// Per layer: output before the hook/quant step, and after it (None when
    /// unchanged).
    records: Vec<(Tensor, Option<Tensor>)>,
    mode: TapeMode,
    hooked: bool,
    fingerprint: u64,
}

impl GradientTape {
    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    /// Output of layer `i` before any hook or quantization step.
    pub fn pre_hook(&self, i: usize) -> &Tensor {
        &self.records[i].0
    }

    /// Output of layer `i` as consumed by layer `i + 1`.
    pub fn post_hook(&self, i: usize) -> &Tensor {
        self.records[i].1.as_ref().unwrap_or(&self.records[i].0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn input_to_layer(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            self.post_hook(i - 1)
        }
    }
}

/// Sequential model description.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
    input_shape: Vec<usize>,
    out_shapes: Vec<Vec<usize>>,
    num_classes: usize,
}

impl LayerGraph {
    /// Builds a graph from specs, validating shape compatibility. Weights
    /// are zero until [`LayerGraph::init_weights`] or an explicit setter.
    pub fn build(input_shape: Vec<usize>, specs: &[LayerSpec], loss: LossKind) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut out_shapes = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for (idx, spec) in specs.iter().enumerate() {
            let mut layer;
            match *spec {
                LayerSpec::Conv2d { out_channels, kernel } => {
                    let (c, h, w) = expect_shape_chw(&shape, idx)?;
                    let (oh, ow) = conv_out_dims(h, w, kernel, kernel)?;
                    layer = Layer::of_kind(LayerKind::Conv2d);
                    layer.weights = Some(Tensor::zeros(vec![out_channels, c, kernel, kernel]));
                    layer.bias = Some(Tensor::zeros(vec![out_channels]));
                    shape = vec![out_channels, oh, ow];
                }
                LayerSpec::Fc { out_features } => {
                    let in_features = match shape.as_slice() {
                        [d] => *d,
                        other => {
                            return Err(Error::Config(format!(
                                "layer {idx} (fc) needs a flat input, got {other:?}"
                            )))
                        }
                    };
                    layer = Layer::of_kind(LayerKind::Fc);
                    layer.weights = Some(Tensor::zeros(vec![out_features, in_features]));
                    layer.bias = Some(Tensor::zeros(vec![out_features]));
                    shape = vec![out_features];
                }
                LayerSpec::Relu => {
                    layer = Layer::of_kind(LayerKind::Relu);
                }
                LayerSpec::MaxPool { window } | LayerSpec::AvgPool { window } => {
                    let (c, h, w) = expect_shape_chw(&shape, idx)?;
                    if window == 0 || h < window || w < window {
                        return Err(Error::Config(format!(
                            "layer {idx} pool window {window} does not fit {h}x{w}"
                        )));
                    }
                    layer = Layer::of_kind(match spec {
                        LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
                        _ => LayerKind::AvgPool,
                    });
                    layer.window = window;
                    shape = vec![c, h / window, w / window];
                }
                LayerSpec::Flatten => {
                    layer = Layer::of_kind(LayerKind::Flatten);
                    shape = vec![shape.iter().product()];
                }
            }
            layers.push(layer);
            out_shapes.push(shape.clone());
        }
        let num_classes = match shape.as_slice() {
            [k] => *k,
            other => {
                return Err(Error::Config(format!(
                    "model output must be a logit vector, got shape {other:?}"
                )))
            }
        };
        Ok(LayerGraph {
            layers,
            loss,
            input_shape,
            out_shapes,
            num_classes,
        })
    }

    /// Default desk-scale CNN:
    /// conv(16,3x3)-relu-maxpool-conv(32,3x3)-relu-maxpool-flatten-fc(128)-relu-fc(10).
    pub fn desk_cnn(input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::build(
            input_shape,
            &[
                LayerSpec::Conv2d { out_channels: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv2d { out_channels: 32, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Fc { out_features: 128 },
                LayerSpec::Relu,
                LayerSpec::Fc { out_features: num_classes },
            ],
            LossKind::SoftmaxXent,
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.out_shapes[layer]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_hardware_backend(&self) -> bool {
        self.layers.iter().any(|l| l.backend.is_some())
    }

    /// Structural fingerprint used to detect stale gradient tapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for d in &self.input_shape {
            mix(*d as u64);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            mix(i as u64);
            mix(layer.kind as u64 + 1);
            mix(layer.window as u64);
            mix(layer.backend.is_some() as u64);
            if let Some(w) = &layer.weights {
                for d in w.shape() {
                    mix(*d as u64);
                }
            }
        }
        h
    }

    /// He-normal initialization of all weights, deterministic per seed.
    pub fn init_weights(&mut self, seed: u64) {
        use rand_distr::{Distribution, Normal};
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Some(w) = &mut layer.weights else { continue };
            let fan_in: usize = w.shape()[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let mut rng = crate::rng::substream_indexed(seed, &["init"], i as u64);
            for v in w.data_mut() {
                *v = normal.sample(&mut rng);
            }
            // biases start at zero
        }
    }

    /// Forward pass returning logits and the gradient tape.
    pub fn forward(&self, x: &Tensor, opts: &ForwardOpts) -> Result<(Tensor, GradientTape)> {
        self.forward_impl(x, opts, true)
            .map(|(y, t)| (y, t.expect("tape requested")))
    }

    /// Forward pass without tape bookkeeping (evaluation fast path).
    pub fn infer(&self, x: &Tensor, opts: &ForwardOpts) -> Result<Tensor> {
        self.forward_impl(x, opts, false).map(|(y, _)| y)
    }

    fn forward_impl(
        &self,
        x: &Tensor,
        opts: &ForwardOpts,
        want_tape: bool,
    ) -> Result<(Tensor, Option<GradientTape>)> {
        if x.shape() != self.input_shape {
            return Err(Error::Config(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let hooks = opts.hooks.filter(|h| !h.is_empty());
        if let Some(h) = hooks {
            h.validate(self)?;
        }
        let mut records = Vec::new();
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = self.layer_forward(i, layer, &cur)?;
            if let Some(bad) = pre.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after layer {i} ({}) at flat index {bad}",
                    layer.kind.name()
                )));
            }
            let hook = hooks.and_then(|h| h.get(i));
            let post = if let Some(hook) = hook {
                Some(hook.apply(&pre, layer.act_quant.as_ref(), opts.sample)?)
            } else if opts.quantize_activations && layer.quantize_activations {
                layer
                    .act_quant
                    .map(|qp| dequantize(&quantize_with(&pre, qp)))
            } else {
                None
            };
            cur = post.clone().unwrap_or_else(|| pre.clone());
            if want_tape {
                records.push((pre, post));
            }
        }
        let tape = want_tape.then(|| GradientTape {
            input: x.clone(),
            records,
            mode: if self.has_hardware_backend() {
                TapeMode::Hardware
            } else {
                TapeMode::Software
            },
            hooked: hooks.is_some(),
            fingerprint: self.fingerprint(),
        });
        Ok((cur, tape))
    }

    fn layer_forward(&self, idx: usize, layer: &Layer, x: &Tensor) -> Result<Tensor> {
        match layer.kind {
            LayerKind::Conv2d => {
                let w = layer.weights.as_ref().expect("conv weights");
                let [oc, c, kh, kw] = *w.shape() else { unreachable!() };
                let (xc, h, wd) = expect_chw(x)?;
                if xc != c {
                    return Err(Error::Config(format!(
                        "layer {idx} (conv2d) expects {c} input channels, got {xc}"
                    )));
                }
                let (oh, ow) = conv_out_dims(h, wd, kh, kw)?;
                let xcol = im2col(x, kh, kw)?;
                let mut y = self.linear_apply(layer, &xcol, oc, c * kh * kw)?;
                let bias = layer.bias.as_ref().expect("conv bias");
                let cols = oh * ow;
                for o in 0..oc {
                    let b = bias.data()[o];
                    for v in &mut y.data_mut()[o * cols..(o + 1) * cols] {
                        *v += b;
                    }
                }
                y.reshape(vec![oc, oh, ow])
            }
            LayerKind::Fc => {
                let w = layer.weights.as_ref().expect("fc weights");
                let [of, inf] = *w.shape() else { unreachable!() };
                if x.shape() != [inf] {
                    return Err(Error::Config(format!(
                        "layer {idx} (fc) expects input [{inf}], got {:?}",
                        x.shape()
                    )));
                }
                let x_mat = x.reshape(vec![inf, 1])?;
                let mut y = self.linear_apply(layer, &x_mat, of, inf)?;
                let bias = layer.bias.as_ref().expect("fc bias");
                for (v, b) in y.data_mut().iter_mut().zip(bias.data()) {
                    *v += b;
                }
                y.reshape(vec![of])
            }
            LayerKind::Relu => Ok(x.map(|v| v.max(0.0))),
            LayerKind::MaxPool => pool(x, layer.window, PoolKind::Max),
            LayerKind::AvgPool => pool(x, layer.window, PoolKind::Avg),
            LayerKind::Flatten => x.reshape(vec![x.len()]),
        }
    }

    fn linear_apply(
        &self,
        layer: &Layer,
        x_mat: &Tensor,
        out_features: usize,
        in_features: usize,
    ) -> Result<Tensor> {
        if let Some(op) = &layer.backend {
            if op.in_features() != in_features || op.out_features() != out_features {
                return Err(Error::Config(format!(
                    "hardware backend is {}x{}, layer is {}x{}",
                    op.out_features(),
                    op.in_features(),
                    out_features,
                    in_features
                )));
            }
            op.forward_mat(x_mat)
        } else {
            let w = layer.weights.as_ref().expect("weights");
            let cols = x_mat.shape()[1];
            let y = matmul(w.data(), out_features, in_features, x_mat.data(), cols);
            Tensor::from_vec(vec![out_features, cols], y)
        }
    }

    /// Loss and logit gradient of softmax cross-entropy.
    pub fn loss_and_logit_grad(&self, logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        if label >= self.num_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        let z = logits.data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        let loss = lse - z[label];
        let mut g: Vec<f64> = z.iter().map(|v| (v - m).exp() / sum).collect();
        g[label] -= 1.0;
        Ok((loss, Tensor::from_vec(vec![z.len()], g)?))
    }

    /// dL/dx for the given tape. The tape must come from a matching hook-free
    /// forward on the same input; it is consumed by this call.
    pub fn input_gradient(&self, x: &Tensor, label: usize, tape: GradientTape) -> Result<Tensor> {
        let (_, grad, _) = self.backprop(x, label, tape, false)?;
        Ok(grad)
    }

    /// Reverse pass. Returns (loss, input gradient, per-layer parameter
    /// gradients when requested).
    pub(crate) fn backprop(
        &self,
        x: &Tensor,
        label: usize,
        tape: GradientTape,
        want_param_grads: bool,
    ) -> Result<(f64, Tensor, Option<Vec<Option<(Tensor, Tensor)>>>)> {
        if tape.fingerprint != self.fingerprint() || tape.records.len() != self.layers.len() {
            return Err(Error::Usage(
                "gradient tape does not belong to this model".into(),
            ));
        }
        if tape.input != *x {
            return Err(Error::Usage(
                "gradient tape was recorded for a different input".into(),
            ));
        }
        if tape.hooked {
            return Err(Error::Usage(
                "gradient tape was recorded with noise hooks; gradients must come from a hook-free forward"
                    .into(),
            ));
        }
        let logits = tape.post_hook(self.layers.len() - 1);
        let (loss, mut grad) = self.loss_and_logit_grad(logits, label)?;
        let mut param_grads: Vec<Option<(Tensor, Tensor)>> = Vec::new();
        if want_param_grads {
            param_grads.resize_with(self.layers.len(), || None);
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = tape.input_to_layer(i);
            // Quantization steps backpropagate straight-through.
            grad = match layer.kind {
                LayerKind::Conv2d => {
                    let w = layer.weights.as_ref().expect("conv weights");
                    let [oc, c, kh, kw] = *w.shape() else { unreachable!() };
                    let (_, h, wd) = expect_chw(input)?;
                    let cols = grad.len() / oc;
                    let g_mat = grad.reshape(vec![oc, cols])?;
                    if want_param_grads {
                        let xcol = im2col(input, kh, kw)?;
                        let dw = matmul_a_bt(g_mat.data(), oc, cols, xcol.data(), c * kh * kw);
                        let dw = Tensor::from_vec(vec![oc, c, kh, kw], dw)?;
                        let mut db = vec![0.0; oc];
                        for o in 0..oc {
                            db[o] = g_mat.data()[o * cols..(o + 1) * cols].iter().sum();
                        }
                        param_grads[i] = Some((dw, Tensor::from_vec(vec![oc], db)?));
                    }
                    let dxcol = self.linear_backward(layer, &g_mat, oc, c * kh * kw)?;
                    col2im(&dxcol, c, h, wd, kh, kw)?
                }
                LayerKind::Fc => {
                    let w = layer.weights.as_ref().expect("fc weights");
                    let [of, inf] = *w.shape() else { unreachable!() };
                    if want_param_grads {
                        let dw = matmul_a_bt(grad.data(), of, 1, input.data(), inf);
                        param_grads[i] = Some((
                            Tensor::from_vec(vec![of, inf], dw)?,
                            grad.clone(),
                        ));
                    }
                    let g_mat = grad.reshape(vec![of, 1])?;
                    let dx = self.linear_backward(layer, &g_mat, of, inf)?;
                    dx.reshape(vec![inf])?
                }
                LayerKind::Relu => {
                    let mut g = grad.clone();
                    for (gv, &iv) in g.data_mut().iter_mut().zip(input.data()) {
                        if iv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                LayerKind::MaxPool => pool_backward(input, &grad, layer.window, PoolKind::Max)?,
                LayerKind::AvgPool => pool_backward(input, &grad, layer.window, PoolKind::Avg)?,
                LayerKind::Flatten => grad.reshape(input.shape().to_vec())?,
            };
        }
        Ok((
            loss,
            grad,
            if want_param_grads { Some(param_grads) } else { None },
        ))
    }

    fn linear_backward(
        &self,
        layer: &Layer,
        g_mat: &Tensor,
        out_features: usize,
        in_features: usize,
    ) -> Result<Tensor> {
        if let Some(op) = &layer.backend {
            op.backward_mat(g_mat)
        } else {
            let w = layer.weights.as_ref().expect("weights");
            let cols = g_mat.shape()[1];
            let dx = matmul_at_b(w.data(), out_features, in_features, g_mat.data(), cols);
            Tensor::from_vec(vec![in_features, cols], dx)
        }
    }

    /// Snaps every weight tensor onto its 8-bit grid, recording the
    /// parameters used. Biases stay full precision.
    pub fn quantize_weights(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            let Some(w) = &layer.weights else { continue };
            let q = crate::tensor::quantize(w, 8)?;
            layer.weight_quant = Some(q.params);
            layer.weights = Some(dequantize(&q));
        }
        Ok(())
    }

    /// Calibrates per-layer activation quantization from max-abs statistics
    /// over a calibration batch (hook-free, unquantized forward).
    pub fn calibrate_activations(&mut self, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty calibration batch".into()));
        }
        let mut max_abs = vec![0.0f64; self.layers.len()];
        let opts = ForwardOpts::default();
        for x in batch {
            let (_, tape) = self.forward(x, &opts)?;
            for i in 0..self.layers.len() {
                max_abs[i] = max_abs[i].max(tape.pre_hook(i).max_abs());
            }
        }
        for (layer, m) in self.layers.iter_mut().zip(&max_abs) {
            if layer.quantize_activations {
                layer.act_quant = Some(QuantParams::from_range(-m, *m));
            }
        }
        Ok(())
    }
}

fn expect_shape_chw(shape: &[usize], idx: usize) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Config(format!(
            "layer {idx} expects a (C,H,W) input, got {other:?}"
        ))),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

fn pool(x: &Tensor, window: usize, kind: PoolKind) -> Result<Tensor> {
    let (c, h, w) = expect_chw(x)?;
    let (oh, ow) = (h / window, w / window);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if kind == PoolKind::Max {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                for dy in 0..window {
                    for dx in 0..window {
                        let v = xd[(ci * h + oy * window + dy) * w + ox * window + dx];
                        match kind {
                            PoolKind::Max => acc = acc.max(v),
                            PoolKind::Avg => acc += v,
                        }
                    }
                }
                if kind == PoolKind::Avg {
                    acc /= (window * window) as f64;
                }
                out[(ci * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out)
}

fn pool_backward(input: &Tensor, grad: &Tensor, window: usize, kind: PoolKind) -> Result<Tensor> {
    let (c, h, w) = expect_chw(input)?;
    let (oh, ow) = (h / window, w / window);
    let xd = input.data();
    let gd = grad.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(ci * oh + oy) * ow + ox];
                match kind {
                    PoolKind::Max => {
                        // route to the first maximum (deterministic ties)
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = (ci * h + oy * window + dy) * w + ox * window + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[best_idx] += g;
                    }
                    PoolKind::Avg => {
                        let share = g / (window * window) as f64;
                        for dy in 0..window {
                            for dx in 0..window {
                                out[(ci * h + oy * window + dy) * w + ox * window + dx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
