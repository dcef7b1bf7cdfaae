//! Training losses. Both losses return the batch-mean loss together with the
//! batch-mean gradient with respect to the pre-activation logits, so the
//! terminal softmax/sigmoid layer is folded in rather than backpropagated.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities below this are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Inverse-frequency class weights: `w_c = (C * N) / N_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<ClassWeights> {
        if counts.is_empty() {
            return Err(Error::Invalid("class counts are empty".into()));
        }
        let total: usize = counts.iter().sum();
        let c = counts.len();
        let mut weights = Vec::with_capacity(c);
        for (i, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::EmptyClass(format!("class {i}")));
            }
            weights.push((c * total) as f64 / n as f64);
        }
        Ok(ClassWeights { weights })
    }

    /// Weights given directly rather than derived from counts.
    pub fn explicit(weights: Vec<f64>) -> Result<ClassWeights> {
        if weights.is_empty() {
            return Err(Error::Invalid("class weights are empty".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::Invalid(format!(
                "class weights must be positive and finite, got {weights:?}"
            )));
        }
        Ok(ClassWeights { weights })
    }

    /// Unit weights, under which the weighted loss reduces to plain
    /// cross-entropy scaled by 1/C.
    pub fn uniform(classes: usize) -> ClassWeights {
        ClassWeights {
            weights: vec![1.0; classes],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weighted categorical cross-entropy over a batch:
/// `L = -(1/C) * sum_c w_c y_c log(p_c)`, averaged over samples.
///
/// `probs` are post-softmax rows (N, C); `targets` are one-hot rows of the
/// same shape. The returned gradient is with respect to the pre-softmax
/// logits, also (N, C), already divided by the batch size.
pub fn weighted_cross_entropy<F: Scalar>(
    probs: &Tensor<F>,
    targets: &Tensor<F>,
    weights: &ClassWeights,
) -> Result<(f64, Tensor<F>)> {
    let (n, c) = check_rows(probs, targets)?;
    if weights.len() != c {
        return Err(Error::Invalid(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    let ps = probs.as_slice().expect("standard layout");
    let ts = targets.as_slice().expect("standard layout");
    let w = weights.as_slice();
    let inv_c = 1.0 / c as f64;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::<F>::zeros(IxDyn(&[n, c]));
    let gs = grad.as_slice_mut().expect("freshly allocated");
    for r in 0..n {
        let off = r * c;
        // sum_c w_c y_c, which scales the softmax-composed gradient row
        let mut wy = 0.0;
        for i in 0..c {
            let y = ts[off + i].as_f64();
            if y != 0.0 {
                let p = ps[off + i].as_f64().max(LOG_FLOOR);
                loss -= inv_c * w[i] * y * p.ln();
                wy += w[i] * y;
            }
        }
        for i in 0..c {
            let p = ps[off + i].as_f64();
            let y = ts[off + i].as_f64();
            gs[off + i] = F::cast(inv_c * inv_n * (p * wy - w[i] * y));
        }
    }
    Ok((loss * inv_n, grad))
}

/// Binary cross-entropy over a batch of sigmoid outputs (shape (N,) or
/// (N, 1)), with the gradient taken with respect to the pre-sigmoid logit:
/// `(p - t) / N`.
pub fn binary_cross_entropy<F: Scalar>(
    probs: &Tensor<F>,
    targets: &Tensor<F>,
) -> Result<(f64, Tensor<F>)> {
    if probs.shape() != targets.shape() {
        return Err(Error::Shape {
            layer: "binary_cross_entropy".into(),
            expected: probs.shape().to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    let n = probs.shape()[0].max(1);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::<F>::zeros(IxDyn(probs.shape()));
    let ps = probs.as_slice().expect("standard layout");
    let ts = targets.as_slice().expect("standard layout");
    let gs = grad.as_slice_mut().expect("freshly allocated");
    for i in 0..ps.len() {
        let p = ps[i].as_f64();
        let t = ts[i].as_f64();
        loss -= t * p.max(LOG_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(LOG_FLOOR).ln();
        gs[i] = F::cast((p - t) * inv_n);
    }
    Ok((loss * inv_n, grad))
}

fn check_rows<F: Scalar>(probs: &Tensor<F>, targets: &Tensor<F>) -> Result<(usize, usize)> {
    if probs.ndim() != 2 || probs.shape() != targets.shape() {
        return Err(Error::Shape {
            layer: "cross_entropy".into(),
            expected: probs.shape().to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    Ok((probs.shape()[0], probs.shape()[1]))
}
