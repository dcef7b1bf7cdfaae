//! A small CNN engine: sequential networks over NHWC tensors with explicit
//! forward traces, backpropagation, seeded initialization, and per-layer
//! freeze flags.

mod layers;

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod serialize;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{all_finite, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        kernel: [usize; 2],
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        window: [usize; 2],
        stride: usize,
    },
    Relu,
    GlobalMaxPool,
    GlobalAvgPool,
    FullyConnected {
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    Sigmoid,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "max_pool2d",
            LayerKind::Relu => "relu",
            LayerKind::GlobalMaxPool => "global_max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn conv2d(kh: usize, kw: usize, out_channels: usize, stride: usize, padding: Padding) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                kernel: [kh, kw],
                out_channels,
                stride,
                padding,
            },
            frozen: false,
        }
    }

    pub fn max_pool2d(ph: usize, pw: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2d {
                window: [ph, pw],
                stride,
            },
            frozen: false,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            frozen: false,
        }
    }

    pub fn global_max_pool() -> Self {
        LayerSpec {
            kind: LayerKind::GlobalMaxPool,
            frozen: false,
        }
    }

    pub fn global_avg_pool() -> Self {
        LayerSpec {
            kind: LayerKind::GlobalAvgPool,
            frozen: false,
        }
    }

    pub fn fully_connected(units: usize) -> Self {
        LayerSpec {
            kind: LayerKind::FullyConnected { units },
            frozen: false,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec {
            kind: LayerKind::Dropout { rate },
            frozen: false,
        }
    }

    pub fn softmax() -> Self {
        LayerSpec {
            kind: LayerKind::Softmax,
            frozen: false,
        }
    }

    pub fn sigmoid() -> Self {
        LayerSpec {
            kind: LayerKind::Sigmoid,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Layer<F: Scalar> {
    pub(crate) spec: LayerSpec,
    pub(crate) weights: Option<Tensor<F>>,
    pub(crate) bias: Option<Tensor<F>>,
}

impl<F: Scalar> Layer<F> {
    /// Wrap explicit parameters in a layer. Shapes are validated when the
    /// layer list is assembled into a network.
    pub fn new(spec: LayerSpec, weights: Option<Tensor<F>>, bias: Option<Tensor<F>>) -> Layer<F> {
        Layer {
            spec,
            weights,
            bias,
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> Option<&Tensor<F>> {
        self.weights.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor<F>> {
        self.bias.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.len()) + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Mode for a forward pass. Training mode activates dropout, drawing masks
/// from the supplied stream.
pub enum ForwardMode<'r> {
    Infer,
    Train(&'r mut ChaCha8Rng),
}

/// Everything backward needs from a forward pass: the (batched) input, one
/// activation tensor per layer, and any dropout masks that were drawn.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F: Scalar> {
    input: Tensor<F>,
    outputs: Vec<Tensor<F>>,
    masks: Vec<Option<Tensor<F>>>,
    fingerprint: u64,
}

impl<F: Scalar> ForwardTrace<F> {
    /// Final network output, batched (N, ...).
    pub fn output(&self) -> &Tensor<F> {
        self.outputs.last().expect("networks have at least one layer")
    }

    /// Per-layer activations, batched (N, ...).
    pub fn outputs(&self) -> &[Tensor<F>] {
        &self.outputs
    }

    pub fn input(&self) -> &Tensor<F> {
        &self.input
    }
}

/// Per-tensor gradients for one layer.
#[derive(Clone, Debug)]
pub struct LayerGrads<F: Scalar> {
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients from a backward pass: one entry per parameterized layer (zeros
/// for frozen layers) plus the gradient with respect to the network input.
#[derive(Clone, Debug)]
pub struct Gradients<F: Scalar> {
    pub layers: Vec<Option<LayerGrads<F>>>,
    pub input: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Network<F: Scalar> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<F>>,
    /// Per-sample output shape of every layer (no batch axis).
    shapes: Vec<Vec<usize>>,
    rng_seed: u64,
    trained: bool,
    fingerprint: u64,
}

/// Per-sample output shapes for a layer stack, validating the stack as it goes.
fn propagate_shapes(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if specs.is_empty() {
        return Err(Error::Invalid("network needs at least one layer".into()));
    }
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!(
            "input shape must be positive dimensions, got {input_shape:?}"
        )));
    }
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{}_{i}", spec.kind.name());
        let need3 = |shape: &[usize]| -> Result<(usize, usize, usize)> {
            if shape.len() != 3 {
                return Err(Error::Shape {
                    layer: name.clone(),
                    expected: vec![0, 0, 0],
                    actual: shape.to_vec(),
                });
            }
            Ok((shape[0], shape[1], shape[2]))
        };
        shape = match &spec.kind {
            LayerKind::Conv2d {
                kernel,
                out_channels,
                stride,
                padding,
            } => {
                let (h, w, _c) = need3(&shape)?;
                if kernel[0] == 0 || kernel[1] == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(Error::Invalid(format!(
                        "{name}: kernel, stride and out_channels must be positive"
                    )));
                }
                let geo = layers::conv_geometry(
                    h,
                    w,
                    kernel[0],
                    kernel[1],
                    *stride,
                    *padding == Padding::Same,
                )
                .ok_or_else(|| Error::Shape {
                    layer: name.clone(),
                    expected: vec![kernel[0], kernel[1]],
                    actual: vec![h, w],
                })?;
                vec![geo.out_h, geo.out_w, *out_channels]
            }
            LayerKind::MaxPool2d { window, stride } => {
                let (h, w, c) = need3(&shape)?;
                if window[0] == 0 || window[1] == 0 || *stride == 0 {
                    return Err(Error::Invalid(format!(
                        "{name}: window and stride must be positive"
                    )));
                }
                if h < window[0] || w < window[1] {
                    return Err(Error::Shape {
                        layer: name.clone(),
                        expected: vec![window[0], window[1]],
                        actual: vec![h, w],
                    });
                }
                vec![
                    (h - window[0]) / stride + 1,
                    (w - window[1]) / stride + 1,
                    c,
                ]
            }
            LayerKind::GlobalMaxPool | LayerKind::GlobalAvgPool => {
                let (_h, _w, c) = need3(&shape)?;
                vec![c]
            }
            LayerKind::FullyConnected { units } => {
                if *units == 0 {
                    return Err(Error::Invalid(format!("{name}: units must be positive")));
                }
                vec![*units]
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Invalid(format!(
                        "{name}: dropout rate must be in [0, 1), got {rate}"
                    )));
                }
                shape
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax => shape,
        };
        out.push(shape.clone());
    }
    Ok(out)
}

fn fingerprint(input_shape: &[usize], specs: &[LayerSpec]) -> u64 {
    let mut h = DefaultHasher::new();
    input_shape.hash(&mut h);
    for spec in specs {
        spec.kind.name().hash(&mut h);
        format!("{:?}", spec.kind).hash(&mut h);
    }
    h.finish()
}

impl<F: Scalar> Network<F> {
    /// Build a network with He-initialized weights (fan-in Gaussian,
    /// `sqrt(2/fan_in)` standard deviation) and zero biases, drawn from a
    /// stream seeded with `rng_seed`.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, rng_seed: u64) -> Result<Self> {
        let shapes = propagate_shapes(input_shape, &specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut in_shape = input_shape.to_vec();
        for (spec, out_shape) in specs.into_iter().zip(&shapes) {
            let (weights, bias) = match &spec.kind {
                LayerKind::Conv2d {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let cin = in_shape[2];
                    let fan_in = kernel[0] * kernel[1] * cin;
                    let w = he_init(&[kernel[0], kernel[1], cin, *out_channels], fan_in, &mut rng);
                    (Some(w), Some(layers::bias_like::<F>(*out_channels)))
                }
                LayerKind::FullyConnected { units } => {
                    let d: usize = in_shape.iter().product();
                    let w = he_init(&[d, *units], d, &mut rng);
                    (Some(w), Some(layers::bias_like::<F>(*units)))
                }
                _ => (None, None),
            };
            layers.push(Layer {
                spec,
                weights,
                bias,
            });
            in_shape = out_shape.clone();
        }
        let fp = fingerprint(input_shape, &layers.iter().map(|l| l.spec.clone()).collect::<Vec<_>>());
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            rng_seed,
            trained: false,
            fingerprint: fp,
        })
    }

    /// Assemble a network from existing layers (deserialization, fine-tune
    /// head grafting). Parameter shapes are validated against the stack.
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<Layer<F>>,
        rng_seed: u64,
        trained: bool,
    ) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec.clone()).collect();
        let shapes = propagate_shapes(input_shape, &specs)?;
        let mut in_shape = input_shape.to_vec();
        for (i, (layer, out_shape)) in layers.iter().zip(&shapes).enumerate() {
            let name = format!("{}_{i}", layer.spec.kind.name());
            let expected = expected_param_shapes(&layer.spec.kind, &in_shape);
            let actual = (
                layer.weights.as_ref().map(|w| w.shape().to_vec()),
                layer.bias.as_ref().map(|b| b.shape().to_vec()),
            );
            if expected != actual {
                return Err(Error::Shape {
                    layer: name,
                    expected: expected.0.unwrap_or_default(),
                    actual: actual.0.unwrap_or_default(),
                });
            }
            in_shape = out_shape.clone();
        }
        let fp = fingerprint(input_shape, &specs);
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            rng_seed,
            trained,
            fingerprint: fp,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn layer_name(&self, i: usize) -> String {
        format!("{}_{i}", self.layers[i].spec.kind.name())
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample shape of the network output.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least one layer")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.spec.frozen)
            .map(Layer::param_count)
            .sum()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Index of the layer producing pre-activation logits: the layer below a
    /// terminal softmax/sigmoid, or the last layer itself.
    pub fn logits_layer(&self) -> usize {
        let last = self.layers.len() - 1;
        match self.layers[last].spec.kind {
            LayerKind::Softmax | LayerKind::Sigmoid if last > 0 => last - 1,
            _ => last,
        }
    }

    /// Indices of conv2d layers in stack order.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec.kind, LayerKind::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Run the network on `input`, which is a single sample matching the
    /// declared input shape or a batch with one extra leading axis.
    pub fn forward(&self, input: &Tensor<F>, mode: ForwardMode) -> Result<ForwardTrace<F>> {
        let batched = self.batch_input(input)?;
        let mut mode = mode;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut masks: Vec<Option<Tensor<F>>> = vec![None; self.layers.len()];
        let mut x = batched.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match &layer.spec.kind {
                LayerKind::Conv2d {
                    stride, padding, ..
                } => layers::conv_forward(
                    &x,
                    layer.weights.as_ref().expect("conv has weights"),
                    layer.bias.as_ref().expect("conv has bias"),
                    *stride,
                    *padding == Padding::Same,
                ),
                LayerKind::MaxPool2d { window, stride } => {
                    layers::max_pool_forward(&x, window[0], window[1], *stride)
                }
                LayerKind::Relu => layers::relu_forward(&x),
                LayerKind::GlobalMaxPool => layers::global_max_pool_forward(&x),
                LayerKind::GlobalAvgPool => layers::global_avg_pool_forward(&x),
                LayerKind::FullyConnected { .. } => layers::fully_connected_forward(
                    &x,
                    layer.weights.as_ref().expect("fc has weights"),
                    layer.bias.as_ref().expect("fc has bias"),
                ),
                LayerKind::Dropout { rate } => match &mut mode {
                    ForwardMode::Train(rng) => {
                        let mask = layers::dropout_mask::<F>(x.shape(), *rate, rng);
                        let out = &x * &mask;
                        masks[i] = Some(mask);
                        out
                    }
                    ForwardMode::Infer => x.clone(),
                },
                LayerKind::Softmax => layers::softmax_forward(&x),
                LayerKind::Sigmoid => layers::sigmoid_forward(&x),
            };
            outputs.push(x.clone());
        }
        Ok(ForwardTrace {
            input: batched,
            outputs,
            masks,
            fingerprint: self.fingerprint,
        })
    }

    /// Full backward pass from the network output.
    pub fn backward(&self, trace: &ForwardTrace<F>, upstream: &Tensor<F>) -> Result<Gradients<F>> {
        self.backward_from(trace, self.layers.len() - 1, upstream)
    }

    /// Backward pass that starts at the output of layer `from` (used to skip
    /// a terminal activation whose gradient is already folded into the loss).
    /// Layers above `from` receive no parameter gradients.
    pub fn backward_from(
        &self,
        trace: &ForwardTrace<F>,
        from: usize,
        upstream: &Tensor<F>,
    ) -> Result<Gradients<F>> {
        self.check_trace(trace)?;
        self.check_upstream(trace, from, upstream)?;
        let mut grads: Vec<Option<LayerGrads<F>>> = (0..self.layers.len())
            .map(|i| {
                self.layers[i].spec.kind.has_params().then(|| LayerGrads {
                    weights: Tensor::zeros(IxDyn(
                        self.layers[i].weights.as_ref().expect("has params").shape(),
                    )),
                    bias: Tensor::zeros(IxDyn(
                        self.layers[i].bias.as_ref().expect("has params").shape(),
                    )),
                })
            })
            .collect();
        let mut g = upstream.clone();
        for i in (0..=from).rev() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let want_params = self.layers[i].spec.kind.has_params() && !self.layers[i].spec.frozen;
            let (dx, pg) = self.layer_backward(i, input, trace, &g, want_params)?;
            if let Some((dw, db)) = pg {
                grads[i] = Some(LayerGrads {
                    weights: dw,
                    bias: db,
                });
            }
            g = dx;
        }
        Ok(Gradients {
            layers: grads,
            input: g,
        })
    }

    /// Propagate `upstream` (a gradient at the output of layer `upper`) down
    /// to the output of layer `lower`, or to the network input when `lower`
    /// is `None`. No parameter gradients are computed.
    pub fn backward_span(
        &self,
        trace: &ForwardTrace<F>,
        upper: usize,
        lower: Option<usize>,
        upstream: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        self.check_trace(trace)?;
        self.check_upstream(trace, upper, upstream)?;
        if let Some(lo) = lower {
            if lo >= upper {
                return Err(Error::Invalid(format!(
                    "backward_span needs lower < upper, got {lo} and {upper}"
                )));
            }
        }
        let stop = lower.map_or(0, |lo| lo + 1);
        let mut g = upstream.clone();
        for i in (stop..=upper).rev() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let (dx, _) = self.layer_backward(i, input, trace, &g, false)?;
            g = dx;
        }
        Ok(g)
    }

    fn layer_backward(
        &self,
        i: usize,
        input: &Tensor<F>,
        trace: &ForwardTrace<F>,
        g: &Tensor<F>,
        want_params: bool,
    ) -> Result<(Tensor<F>, Option<(Tensor<F>, Tensor<F>)>)> {
        let out = &trace.outputs[i];
        Ok(match &self.layers[i].spec.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => layers::conv_backward(
                input,
                self.layers[i].weights.as_ref().expect("conv has weights"),
                g,
                *stride,
                *padding == Padding::Same,
                want_params,
            ),
            LayerKind::MaxPool2d { window, stride } => (
                layers::max_pool_backward(input, g, window[0], window[1], *stride),
                None,
            ),
            LayerKind::Relu => (layers::relu_backward(out, g), None),
            LayerKind::GlobalMaxPool => (layers::global_max_pool_backward(input, g), None),
            LayerKind::GlobalAvgPool => (
                layers::global_avg_pool_backward(input.shape(), g),
                None,
            ),
            LayerKind::FullyConnected { .. } => layers::fully_connected_backward(
                input,
                self.layers[i].weights.as_ref().expect("fc has weights"),
                g,
                want_params,
            ),
            LayerKind::Dropout { .. } => match &trace.masks[i] {
                Some(mask) => (g * mask, None),
                None => (g.clone(), None),
            },
            LayerKind::Softmax => (layers::softmax_backward(out, g), None),
            LayerKind::Sigmoid => (layers::sigmoid_backward(out, g), None),
        })
    }

    fn batch_input(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.input_shape.len();
        let shape_err = || Error::Shape {
            layer: "input".into(),
            expected: self.input_shape.clone(),
            actual: input.shape().to_vec(),
        };
        if input.ndim() == d {
            if input.shape() != &self.input_shape[..] {
                return Err(shape_err());
            }
            let mut batched = input.clone();
            batched.insert_axis_inplace(ndarray::Axis(0));
            Ok(batched)
        } else if input.ndim() == d + 1 {
            if &input.shape()[1..] != &self.input_shape[..] || input.shape()[0] == 0 {
                return Err(shape_err());
            }
            Ok(input.clone())
        } else {
            Err(shape_err())
        }
    }

    fn check_trace(&self, trace: &ForwardTrace<F>) -> Result<()> {
        if trace.fingerprint != self.fingerprint || trace.outputs.len() != self.layers.len() {
            return Err(Error::ActivationMismatch);
        }
        Ok(())
    }

    fn check_upstream(
        &self,
        trace: &ForwardTrace<F>,
        layer: usize,
        upstream: &Tensor<F>,
    ) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Invalid(format!(
                "layer index {layer} out of range ({} layers)",
                self.layers.len()
            )));
        }
        if upstream.shape() != trace.outputs[layer].shape() {
            return Err(Error::Shape {
                layer: self.layer_name(layer),
                expected: trace.outputs[layer].shape().to_vec(),
                actual: upstream.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// True when every parameter tensor is finite.
    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.as_ref().map_or(true, all_finite) && l.bias.as_ref().map_or(true, all_finite)
        })
    }
}

fn he_init<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<F> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::cast(z * std)
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("sizes agree")
}

fn expected_param_shapes(
    kind: &LayerKind,
    in_shape: &[usize],
) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    match kind {
        LayerKind::Conv2d {
            kernel,
            out_channels,
            ..
        } => (
            Some(vec![kernel[0], kernel[1], in_shape[2], *out_channels]),
            Some(vec![*out_channels]),
        ),
        LayerKind::FullyConnected { units } => (
            Some(vec![in_shape.iter().product(), *units]),
            Some(vec![*units]),
        ),
        _ => (None, None),
    }
}
