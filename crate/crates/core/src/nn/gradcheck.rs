//! Central finite-difference verification of the analytic backward pass.
//!
//! Runs in double precision. The loss is supplied by the caller as a closure
//! from the network output to a scalar plus the output gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{ForwardMode, ForwardTrace, Gradients, Network};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_SAMPLES_PER_LAYER: usize = 100;

/// Relative errors are measured against max(|analytic|, |numeric|, FLOOR) so
/// finite-difference cancellation noise on true-zero gradients (dead ReLU
/// paths) does not register as failure.
const REL_ERR_FLOOR: f64 = 1e-5;

// Dropout masks must replay identically across the finite-difference
// evaluations, so every forward here uses the same mask stream.
const MASK_SEED: u64 = 0x6d61_736b;

pub type LossFn<'a> = &'a dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>);

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: String,
    pub params_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }
}

fn forward_replayed(net: &Network<f64>, input: &Tensor<f64>) -> Result<ForwardTrace<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
    net.forward(input, ForwardMode::Train(&mut rng))
}

fn loss_at(net: &Network<f64>, input: &Tensor<f64>, loss: LossFn) -> Result<f64> {
    let trace = forward_replayed(net, input)?;
    Ok(loss(trace.output()).0)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check the network's own backward pass against central finite differences,
/// sampling up to `samples_per_layer` parameters in each parameterized layer.
pub fn gradient_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    loss: LossFn,
    samples_per_layer: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = {
        let trace = forward_replayed(net, input)?;
        let (_, dout) = loss(trace.output());
        net.backward(&trace, &dout)?
    };
    gradient_check_against(net, input, loss, &analytic, samples_per_layer, epsilon, seed)
}

/// Check externally supplied gradients against finite differences. Exists so
/// tests can prove the checker catches a corrupted backward pass.
pub fn gradient_check_against(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    loss: LossFn,
    analytic: &Gradients<f64>,
    samples_per_layer: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { layers: Vec::new() };
    for li in 0..net.layers().len() {
        if !net.layers()[li].spec().kind.has_params() {
            continue;
        }
        let layer_name = net.layer_name(li);
        let grads = analytic.layers[li]
            .as_ref()
            .expect("param layer has gradients");
        let w_len = grads.weights.len();
        let total = w_len + grads.bias.len();
        let picks: Vec<usize> = if total <= samples_per_layer {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, samples_per_layer).into_vec()
        };
        let mut max_err = 0.0f64;
        for flat in &picks {
            let a = if *flat < w_len {
                grads.weights.as_slice().expect("standard layout")[*flat]
            } else {
                grads.bias.as_slice().expect("standard layout")[*flat - w_len]
            };
            let numeric = {
                let original = *param_mut(net, li, *flat, w_len);
                *param_mut(net, li, *flat, w_len) = original + epsilon;
                let up = loss_at(net, input, loss)?;
                *param_mut(net, li, *flat, w_len) = original - epsilon;
                let down = loss_at(net, input, loss)?;
                *param_mut(net, li, *flat, w_len) = original;
                (up - down) / (2.0 * epsilon)
            };
            max_err = max_err.max(rel_err(a, numeric));
        }
        report.layers.push(LayerCheck {
            layer: layer_name,
            params_checked: picks.len(),
            max_rel_err: max_err,
        });
    }
    Ok(report)
}

/// Finite-difference check of the gradient with respect to the *input*,
/// which exercises the backward pass of parameterless layers.
pub fn input_gradient_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    loss: LossFn,
    samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let analytic = {
        let trace = forward_replayed(net, input)?;
        let (_, dout) = loss(trace.output());
        net.backward(&trace, &dout)?.input
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = input.len();
    let picks: Vec<usize> = if len <= samples {
        (0..len).collect()
    } else {
        rand::seq::index::sample(&mut rng, len, samples).into_vec()
    };
    // `analytic.input` is batched; when the caller passed an unbatched input
    // the flat element order is unchanged, so flat indexing lines up.
    let a_slice = analytic.as_slice().expect("standard layout").to_vec();
    let mut x = input.clone();
    let mut max_err = 0.0f64;
    for flat in picks {
        let original = x.as_slice().expect("standard layout")[flat];
        x.as_slice_mut().expect("standard layout")[flat] = original + epsilon;
        let up = loss_at_input(net, &x, loss)?;
        x.as_slice_mut().expect("standard layout")[flat] = original - epsilon;
        let down = loss_at_input(net, &x, loss)?;
        x.as_slice_mut().expect("standard layout")[flat] = original;
        let numeric = (up - down) / (2.0 * epsilon);
        max_err = max_err.max(rel_err(a_slice[flat], numeric));
    }
    Ok(max_err)
}

fn loss_at_input(net: &Network<f64>, input: &Tensor<f64>, loss: LossFn) -> Result<f64> {
    let trace = forward_replayed(net, input)?;
    Ok(loss(trace.output()).0)
}

fn param_mut(net: &mut Network<f64>, li: usize, idx: usize, w_len: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[li];
    if idx < w_len {
        &mut layer
            .weights
            .as_mut()
            .expect("has params")
            .as_slice_mut()
            .expect("standard layout")[idx]
    } else {
        &mut layer
            .bias
            .as_mut()
            .expect("has params")
            .as_slice_mut()
            .expect("standard layout")[idx - w_len]
    }
}
