//! Minimal feed-forward network engine: conv2d, dense, ReLU, max pooling,
//! softmax cross-entropy and exact backpropagation, all in `f64`.
//!
//! A [`PruningState`] gates prunable units. Prunable units are the filters of
//! every conv layer followed by the hidden units of every dense layer except
//! the final classifier, enumerated in layer order.

mod layers;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::state::PruningState;
use crate::tensor::Tensor;

use layers::ConvGeom;
pub use loss::{cross_entropy, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Flatten,
    /// Non-overlapping `size x size` max pooling.
    MaxPool2d {
        size: usize,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, padding: usize) -> Self {
        Self::Conv2d { filters, kernel_h: kernel, kernel_w: kernel, stride: 1, padding }
    }

    pub fn dense(units: usize) -> Self {
        Self::Dense { units }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Self::Conv2d { .. } | Self::Dense { .. })
    }
}

/// Weight and bias of one parameterized layer.
///
/// Conv weights are `[filters, in_channels, kernel_h, kernel_w]`, dense
/// weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients, congruent with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Param>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        Self { layers }
    }

    /// All gradient values in the network's flat parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.layers.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }
}

/// Per-layer output gates derived from a pruning state.
pub(crate) type Gates = Vec<Option<Vec<bool>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// Output shape of each layer, without the batch dimension.
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Param>>,
}

/// Intermediate values kept for the backward pass.
struct Trace {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
    logits: Tensor,
}

fn infer_shapes(specs: &[LayerSpec], input_shape: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if specs.is_empty() {
        return Err(Error::EmptySpec);
    }
    if num_classes < 2 {
        return Err(Error::TooFewClasses(num_classes));
    }
    if input_shape.is_empty() || input_shape.len() == 2 || input_shape.len() > 3 || input_shape.contains(&0) {
        return Err(Error::Config(format!("input shape {input_shape:?} must be [C, H, W] or [F] with nonzero sizes")));
    }
    let mut shapes = Vec::with_capacity(specs.len());
    let mut cur = input_shape.to_vec();
    for (index, spec) in specs.iter().enumerate() {
        let fail = |reason: String| Error::Layer { index, reason };
        cur = match *spec {
            LayerSpec::Conv2d { filters, kernel_h, kernel_w, stride, padding } => {
                if filters == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(fail("conv2d filters, kernel dims and stride must be at least 1".into()));
                }
                let [_, h, w] = cur[..] else {
                    return Err(fail(format!("conv2d needs a [C, H, W] input, got {cur:?}")));
                };
                let oh = layers::conv_out(h, kernel_h, stride, padding);
                let ow = layers::conv_out(w, kernel_w, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![filters, oh, ow],
                    _ => return Err(fail(format!("kernel {kernel_h}x{kernel_w} does not fit input {cur:?}"))),
                }
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(fail("dense units must be at least 1".into()));
                }
                if cur.len() != 1 {
                    return Err(fail(format!("dense needs a flat input, got {cur:?}; insert flatten")));
                }
                vec![units]
            }
            LayerSpec::Relu => cur,
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::MaxPool2d { size } => {
                let [c, h, w] = cur[..] else {
                    return Err(fail(format!("maxpool2d needs a [C, H, W] input, got {cur:?}")));
                };
                if size == 0 || h < size || w < size {
                    return Err(fail(format!("pool size {size} does not fit input {cur:?}")));
                }
                vec![c, h / size, w / size]
            }
        };
        shapes.push(cur.clone());
    }
    let last = specs.len() - 1;
    match specs[last] {
        LayerSpec::Dense { units } if units == num_classes => Ok(shapes),
        _ => Err(Error::Layer { index: last, reason: format!("final layer must be dense with {num_classes} units") }),
    }
}

impl Network {
    /// Builds a network with weights drawn uniformly from `±sqrt(6 / fan_in)`
    /// and zero biases.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(specs, input_shape, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut in_shape = input_shape.to_vec();
        for (spec, out_shape) in specs.iter().zip(&shapes) {
            let wshape = match *spec {
                LayerSpec::Conv2d { filters, kernel_h, kernel_w, .. } => {
                    Some(vec![filters, in_shape[0], kernel_h, kernel_w])
                }
                LayerSpec::Dense { units } => Some(vec![units, in_shape[0]]),
                _ => None,
            };
            params.push(wshape.map(|ws| {
                let fan_in: usize = ws[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let len: usize = ws.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Param { bias: Tensor::zeros(vec![ws[0]]), weight: Tensor::new(ws, data).expect("sized") }
            }));
            in_shape = out_shape.clone();
        }
        Ok(Self { specs: specs.to_vec(), input_shape: input_shape.to_vec(), num_classes, shapes, params })
    }

    /// Reassembles a network from stored parts, validating every shape.
    pub fn from_parts(
        specs: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        num_classes: usize,
        params: Vec<Option<Param>>,
    ) -> Result<Self> {
        let mut net = Self::build(&specs, &input_shape, num_classes, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!("expected {} layers, found {}", net.params.len(), params.len())));
        }
        for (index, (want, got)) in net.params.iter().zip(&params).enumerate() {
            let ok = match (want, got) {
                (None, None) => true,
                (Some(a), Some(b)) => a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape(),
                _ => false,
            };
            if !ok {
                return Err(Error::Layer { index, reason: "parameter shapes do not match spec".into() });
            }
        }
        net.params = params;
        Ok(net)
    }

    /// Assembles a network without spec validation. Zero-width layers are
    /// allowed, which lets oracles express physically removed units.
    pub(crate) fn from_raw(
        specs: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        num_classes: usize,
        shapes: Vec<Vec<usize>>,
        params: Vec<Option<Param>>,
    ) -> Self {
        Self { specs, input_shape, num_classes, shapes, params }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<Param>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Param>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Flat offsets `(weight, bias)` of each parameterized layer in the
    /// concatenated parameter vector.
    pub fn param_offsets(&self) -> Vec<Option<(usize, usize)>> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    let w = offset;
                    let b = w + p.weight.len();
                    offset = b + p.bias.len();
                    (w, b)
                })
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.params.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    /// Mutable access to flat parameter `index`.
    pub fn flat_param_mut(&mut self, mut index: usize) -> &mut f64 {
        for p in self.params.iter_mut().flatten() {
            let wl = p.weight.len();
            if index < wl {
                return &mut p.weight.data_mut()[index];
            }
            index -= wl;
            let bl = p.bias.len();
            if index < bl {
                return &mut p.bias.data_mut()[index];
            }
            index -= bl;
        }
        panic!("parameter index out of range");
    }

    /// Index of the final classification layer.
    pub fn classifier_layer(&self) -> usize {
        self.specs.len() - 1
    }

    /// `(layer index, unit count)` for each prunable layer in state-bit order.
    pub fn prunable_layers(&self) -> Vec<(usize, usize)> {
        let last = self.classifier_layer();
        self.specs
            .iter()
            .enumerate()
            .filter_map(|(i, spec)| match *spec {
                LayerSpec::Conv2d { filters, .. } => Some((i, filters)),
                LayerSpec::Dense { units } if i != last => Some((i, units)),
                _ => None,
            })
            .collect()
    }

    pub fn num_units(&self) -> usize {
        self.prunable_layers().iter().map(|&(_, n)| n).sum()
    }

    pub(crate) fn gates(&self, mask: Option<&PruningState>) -> Result<Option<Gates>> {
        let Some(state) = mask else { return Ok(None) };
        state.check_len(self.num_units())?;
        let mut gates: Gates = vec![None; self.specs.len()];
        let mut d = 0;
        for (layer, units) in self.prunable_layers() {
            gates[layer] = Some(state.bits()[d..d + units].to_vec());
            d += units;
        }
        Ok(Some(gates))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::Shape { expected, found: x.shape().to_vec() });
        }
        Ok(())
    }

    fn in_shape(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    fn conv_geom(&self, layer: usize) -> ConvGeom {
        let LayerSpec::Conv2d { filters, kernel_h, kernel_w, stride, padding } = self.specs[layer] else {
            unreachable!("not a conv layer")
        };
        let inp = self.in_shape(layer);
        let out = &self.shapes[layer];
        ConvGeom {
            in_c: inp[0],
            in_h: inp[1],
            in_w: inp[2],
            filters,
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
            out_h: out[1],
            out_w: out[2],
        }
    }

    fn run(&self, x: &Tensor, gates: Option<&Gates>, keep: bool) -> Trace {
        let batch = x.batch();
        let mut inputs = Vec::new();
        let mut argmax = Vec::new();
        let mut cur = x.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let gate = gates.and_then(|g| g[i].as_deref());
            let mut out_shape = vec![batch];
            out_shape.extend_from_slice(&self.shapes[i]);
            let mut pool_arg = None;
            let next = match *spec {
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let g = self.conv_geom(i);
                    layers::conv2d_forward(&g, cur.data(), batch, p.weight.data(), p.bias.data(), gate)
                }
                LayerSpec::Dense { units } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let in_f = self.in_shape(i)[0];
                    layers::dense_forward(cur.data(), batch, in_f, units, p.weight.data(), p.bias.data(), gate)
                }
                LayerSpec::Relu => layers::relu_forward(&cur).into_data(),
                LayerSpec::Flatten => cur.data().to_vec(),
                LayerSpec::MaxPool2d { size } => {
                    let s = self.in_shape(i);
                    let (out, arg) = layers::maxpool_forward(cur.data(), batch, s[0], s[1], s[2], size);
                    pool_arg = Some(arg);
                    out
                }
            };
            let next = Tensor::new(out_shape, next).expect("layer output sized by shape inference");
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
                argmax.push(pool_arg);
            } else {
                cur = next;
            }
        }
        Trace { inputs, argmax, logits: cur }
    }

    /// Logits `[N, C]` for an input batch `[N, ...input_shape]`, with units
    /// gated off by `mask` producing identically zero outputs.
    pub fn forward(&self, x: &Tensor, mask: Option<&PruningState>) -> Result<Tensor> {
        self.check_input(x)?;
        let gates = self.gates(mask)?;
        Ok(self.run(x, gates.as_ref(), false).logits)
    }

    /// Masked mean cross-entropy loss.
    pub fn loss(&self, x: &Tensor, targets: &[usize], mask: Option<&PruningState>) -> Result<f64> {
        cross_entropy(&self.forward(x, mask)?, targets)
    }

    /// Exact gradients of the masked cross-entropy loss. Returns the loss too.
    pub fn backward(&self, x: &Tensor, targets: &[usize], mask: Option<&PruningState>) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        if x.batch() != targets.len() {
            return Err(Error::Shape { expected: vec![targets.len()], found: vec![x.batch()] });
        }
        loss::check_targets(targets, self.num_classes)?;
        let gates = self.gates(mask)?;
        let trace = self.run(x, gates.as_ref(), true);
        let loss = cross_entropy(&trace.logits, targets)?;
        let batch = x.batch();
        let mut grads = Gradients::zeros_like(self);
        let mut grad = loss::cross_entropy_grad(&trace.logits, targets);
        for i in (0..self.specs.len()).rev() {
            let input = &trace.inputs[i];
            let gate = gates.as_ref().and_then(|g| g[i].as_deref());
            grad = match self.specs[i] {
                LayerSpec::Conv2d { .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let g = self.conv_geom(i);
                    let (gx, gw, gb) = layers::conv2d_backward(&g, input.data(), batch, p.weight.data(), &grad, gate);
                    let slot = grads.layers[i].as_mut().expect("conv grads");
                    slot.weight.data_mut().copy_from_slice(&gw);
                    slot.bias.data_mut().copy_from_slice(&gb);
                    gx
                }
                LayerSpec::Dense { units } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let in_f = self.in_shape(i)[0];
                    let (gx, gw, gb) =
                        layers::dense_backward(input.data(), batch, in_f, units, p.weight.data(), &grad, gate);
                    let slot = grads.layers[i].as_mut().expect("dense grads");
                    slot.weight.data_mut().copy_from_slice(&gw);
                    slot.bias.data_mut().copy_from_slice(&gb);
                    gx
                }
                LayerSpec::Relu => layers::relu_backward(input, &grad),
                LayerSpec::Flatten => grad,
                LayerSpec::MaxPool2d { .. } => {
                    let arg = trace.argmax[i].as_ref().expect("pool indices");
                    layers::maxpool_backward(input.len(), arg, &grad)
                }
            };
        }
        Ok((loss, grads))
    }
}

/// Network presets used by the command line and tests.
pub mod presets {
    use super::LayerSpec;

    /// Two conv layers with 4 and 6 filters feeding a dense classifier,
    /// giving exactly 10 prunable units.
    pub fn toy10() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(4, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::conv(6, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
        ]
    }

    pub fn smallcnn() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(8, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::conv(16, 3, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(32),
            LayerSpec::Relu,
        ]
    }

    pub fn mlp() -> Vec<LayerSpec> {
        vec![LayerSpec::Flatten, LayerSpec::dense(32), LayerSpec::Relu]
    }

    /// Appends the classifier layer for `num_classes`.
    pub fn with_classifier(mut body: Vec<LayerSpec>, num_classes: usize) -> Vec<LayerSpec> {
        body.push(LayerSpec::dense(num_classes));
        body
    }

    pub fn by_name(name: &str, num_classes: usize) -> Option<Vec<LayerSpec>> {
        let body = match name {
            "toy10" => toy10(),
            "smallcnn" => smallcnn(),
            "mlp" => mlp(),
            _ => return None,
        };
        Some(with_classifier(body, num_classes))
    }
}
