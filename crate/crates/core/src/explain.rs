//! Model interpretation: class activation maps for globally pooled
//! classifiers and activation maximization for individual filters.
//!
//! The CAM of class `c` is the channel-weighted sum of the activation maps
//! entering the global pooling layer, with weights taken as the gradient of
//! the class logit with respect to the pooled features. Activation
//! maximization synthesizes an input by gradient descent on the negated sum
//! of one filter's activations, clamping pixels to [0,1] after each step.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{ForwardMode, LayerKind, Network};
use crate::tensor::{from_vec, Scalar, Tensor};

/// Threshold on the normalized heatmap for the high-attention mask.
pub const CAM_MASK_THRESHOLD: f64 = 0.75;

/// Post-processed class activation map.
#[derive(Clone, Debug)]
pub struct CamHeatmap {
    /// Raw weighted activation sum at last-conv resolution.
    pub raw: Array2<f64>,
    /// Clipped, max-normalized map resized to the requested dimensions.
    pub normalized: Array2<f64>,
    /// High-attention mask (normalized value ≥ 0.75), nearest-resized.
    pub mask: Array2<bool>,
    /// Set when the raw map had no positive values and the output is zero.
    pub warning: Option<String>,
}

fn global_pool_index<F: Scalar>(net: &Network<F>) -> Result<usize> {
    let g = net
        .layers()
        .iter()
        .rposition(|l| {
            matches!(
                l.spec().kind,
                LayerKind::GlobalMaxPool | LayerKind::GlobalAvgPool
            )
        })
        .ok_or_else(|| {
            Error::Invalid("class activation maps need a global pooling layer".into())
        })?;
    if g == 0 {
        return Err(Error::Invalid(
            "global pooling sits directly on the input; no activation maps below it".into(),
        ));
    }
    Ok(g)
}

/// Raw class activation map of `class` for one input patch.
///
/// The map is Σ_i w_i · A_i over the channels entering the global pooling
/// layer, with w_i the gradient of the class logit w.r.t. pooled feature i.
pub fn cam<F: Scalar>(net: &Network<F>, input: &Tensor<F>, class: usize) -> Result<Array2<f64>> {
    let pool = global_pool_index(net)?;
    let logits = net.logits_layer();
    if logits <= pool {
        return Err(Error::Invalid(
            "no classifier head above the global pooling layer".into(),
        ));
    }
    let trace = net.forward(input, ForwardMode::Infer)?;
    let logit_shape = trace.outputs()[logits].shape().to_vec();
    if logit_shape.len() != 2 {
        return Err(Error::Invalid(format!(
            "classifier output has shape {logit_shape:?}, expected (1, classes)"
        )));
    }
    let n_classes = logit_shape[1];
    if class >= n_classes {
        return Err(Error::Invalid(format!(
            "class {class} out of range for {n_classes} outputs"
        )));
    }
    let mut one_hot = Tensor::<F>::zeros(ndarray::IxDyn(&logit_shape));
    one_hot[[0, class]] = F::one();
    let pooled_grad = net.backward_span(&trace, logits, Some(pool), &one_hot)?;

    // activations entering the pooling layer: (1, H', W', C)
    let activations = &trace.outputs()[pool - 1];
    let a_shape = activations.shape();
    if a_shape.len() != 4 {
        return Err(Error::Invalid(format!(
            "activations below pooling have shape {a_shape:?}, expected (1, H, W, C)"
        )));
    }
    let (height, width, channels) = (a_shape[1], a_shape[2], a_shape[3]);
    let mut raw = Array2::<f64>::zeros((height, width));
    for i in 0..channels {
        let w = pooled_grad[[0, i]].as_f64();
        if w == 0.0 {
            continue;
        }
        for m in 0..height {
            for n in 0..width {
                raw[[m, n]] += w * activations[[0, m, n, i]].as_f64();
            }
        }
    }
    Ok(raw)
}

fn resize_bilinear_f64(map: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = map.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return map.clone();
    }
    let scale_y = sh as f64 / th as f64;
    let scale_x = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let sx = ((x as f64 + 0.5) * scale_x - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(sh - 1);
        let x0 = (sx.floor() as usize).min(sw - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        (1.0 - fy) * (1.0 - fx) * map[[y0, x0]]
            + (1.0 - fy) * fx * map[[y0, x1]]
            + fy * (1.0 - fx) * map[[y1, x0]]
            + fy * fx * map[[y1, x1]]
    })
}

fn resize_nearest_bool(mask: &Array2<bool>, target: (usize, usize)) -> Array2<bool> {
    let (sh, sw) = mask.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return mask.clone();
    }
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * sh as f64 / th as f64).floor() as usize).min(sh - 1);
        let sx = (((x as f64 + 0.5) * sw as f64 / tw as f64).floor() as usize).min(sw - 1);
        mask[[sy, sx]]
    })
}

/// Clips negatives, normalizes by the maximum, thresholds the attention
/// mask at 0.75, and resizes to `dims` (bilinear map, nearest mask).
///
/// A raw map with no positive values produces an all-zero heatmap and empty
/// mask, flagged by `warning`, instead of dividing by zero.
pub fn cam_postprocess(raw: &Array2<f64>, dims: (usize, usize)) -> CamHeatmap {
    let clipped = raw.mapv(|v| v.max(0.0));
    let max = clipped.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return CamHeatmap {
            raw: raw.clone(),
            normalized: Array2::zeros(dims),
            mask: Array2::from_elem(dims, false),
            warning: Some("raw activation map has no positive values".into()),
        };
    }
    let normalized_raw = clipped.mapv(|v| v / max);
    let mask_raw = normalized_raw.mapv(|v| v >= CAM_MASK_THRESHOLD);
    CamHeatmap {
        raw: raw.clone(),
        normalized: resize_bilinear_f64(&normalized_raw, dims),
        mask: resize_nearest_bool(&mask_raw, dims),
        warning: None,
    }
}

/// Activation maximization outcome: the synthesized input and the loss
/// recorded at every step.
#[derive(Clone, Debug)]
pub struct AmResult<F: Scalar> {
    pub image: Tensor<F>,
    pub losses: Vec<f64>,
}

/// Clipped-Gaussian initialization for the synthesized input.
fn am_init<F: Scalar>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.5f64, 0.15).expect("valid Gaussian parameters");
    let n: usize = shape.iter().product();
    let draws: Vec<F> = (0..n)
        .map(|_| F::cast(normal.sample(&mut rng).clamp(0.0, 1.0)))
        .collect();
    from_vec(shape, draws).expect("shape matches draw count")
}

/// Synthesizes an input that maximizes filter `filter` of layer `layer` by
/// descending L = −Σ activations. Pixels clamp to [0,1] after every step.
pub fn activation_maximization<F: Scalar>(
    net: &Network<F>,
    layer: usize,
    filter: usize,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<AmResult<F>> {
    if layer >= net.layers().len() {
        return Err(Error::Invalid(format!(
            "layer {layer} out of range for {} layers",
            net.layers().len()
        )));
    }
    if step_size < 0.0 || !step_size.is_finite() {
        return Err(Error::Invalid("step size must be finite and ≥ 0".into()));
    }
    let mut image = am_init::<F>(net.input_shape(), seed);
    let mut losses = Vec::with_capacity(steps);
    let step = F::cast(step_size);

    for _ in 0..steps {
        let trace = net.forward(&image, ForwardMode::Infer)?;
        let out = &trace.outputs()[layer];
        let shape = out.shape().to_vec();
        let channel_axis = match shape.len() {
            4 => 3,
            2 => 1,
            _ => {
                return Err(Error::Invalid(format!(
                    "layer {layer} output has shape {shape:?}, no filter axis"
                )))
            }
        };
        if filter >= shape[channel_axis] {
            return Err(Error::Invalid(format!(
                "filter {filter} out of range for {} channels",
                shape[channel_axis]
            )));
        }
        let slice = out.index_axis(Axis(channel_axis), filter);
        let loss: f64 = -slice.iter().map(|v| v.as_f64()).sum::<f64>();
        losses.push(loss);

        let mut upstream = Tensor::<F>::zeros(ndarray::IxDyn(&shape));
        upstream
            .index_axis_mut(Axis(channel_axis), filter)
            .fill(F::cast(-1.0));
        let grad = net.backward_span(&trace, layer, None, &upstream)?;
        let grad = grad.index_axis(Axis(0), 0);
        image.zip_mut_with(&grad, |x, g| {
            *x = (*x - step * *g).min(F::one()).max(F::zero());
        });
    }

    Ok(AmResult { image, losses })
}

/// Writes the normalized heatmap as an 8-bit grayscale PNG.
pub fn write_cam_png(heatmap: &CamHeatmap, path: &Path) -> Result<()> {
    let (height, width) = heatmap.normalized.dim();
    let mut img = GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = (heatmap.normalized[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes the high-attention mask as a black/white PNG.
pub fn write_cam_mask_png(heatmap: &CamHeatmap, path: &Path) -> Result<()> {
    let (height, width) = heatmap.mask.dim();
    let mut img = GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = if heatmap.mask[[y, x]] { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes a synthesized [0,1] image (H,W,3) or (H,W,1) as a PNG.
pub fn write_am_png<F: Scalar>(image: &Tensor<F>, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[2] != 3 && shape[2] != 1) {
        return Err(Error::Invalid(format!(
            "expected (H, W, 3) or (H, W, 1) image, got {shape:?}"
        )));
    }
    let (height, width) = (shape[0], shape[1]);
    let px = |v: F| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    if shape[2] == 3 {
        let mut img = RgbImage::new(width as u32, height as u32);
        for y in 0..height {
            for x in 0..width {
                let rgb = [
                    px(image[[y, x, 0]]),
                    px(image[[y, x, 1]]),
                    px(image[[y, x, 2]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            }
        }
        img.save(path)?;
    } else {
        let mut img = GrayImage::new(width as u32, height as u32);
        for y in 0..height {
            for x in 0..width {
                img.put_pixel(x as u32, y as u32, image::Luma([px(image[[y, x, 0]])]));
            }
        }
        img.save(path)?;
    }
    Ok(())
}

/// Renders the per-step loss trace as CSV.
pub fn am_trace_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
