//! Parameter updates: plain SGD and Adam, plus the linear learning-rate decay
//! schedule used for the slide scorer.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Network};
use crate::tensor::{all_finite, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<F: Scalar> {
    m: Tensor<F>,
    v: Tensor<F>,
}

/// Optimizer with per-tensor state (Adam moments). One instance drives one
/// network through a training run.
pub struct Optimizer<F: Scalar> {
    kind: OptimizerKind,
    step_count: u64,
    // (weights, bias) moments per layer, allocated lazily for Adam
    moments: Vec<Option<(Moments<F>, Moments<F>)>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, net: &Network<F>) -> Optimizer<F> {
        Optimizer {
            kind,
            step_count: 0,
            moments: net.layers().iter().map(|_| None).collect(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Rejects non-finite gradients (naming the layer)
    /// before any parameter is touched; frozen layers are left untouched.
    pub fn step(&mut self, net: &mut Network<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(Error::ActivationMismatch);
        }
        for (i, g) in grads.layers.iter().enumerate() {
            if net.layers()[i].spec().frozen {
                continue;
            }
            if let Some(g) = g {
                if !all_finite(&g.weights) || !all_finite(&g.bias) {
                    return Err(Error::NonFinite {
                        layer: net.layer_name(i),
                        what: "gradient",
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for i in 0..net.layers().len() {
            if net.layers()[i].spec().frozen {
                continue;
            }
            let Some(g) = &grads.layers[i] else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    let layer = &mut net.layers_mut()[i];
                    sgd_update(layer.weights.as_mut().expect("has params"), &g.weights, lr);
                    sgd_update(layer.bias.as_mut().expect("has params"), &g.bias, lr);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if self.moments[i].is_none() {
                        self.moments[i] = Some((
                            Moments {
                                m: Tensor::zeros(g.weights.raw_dim()),
                                v: Tensor::zeros(g.weights.raw_dim()),
                            },
                            Moments {
                                m: Tensor::zeros(g.bias.raw_dim()),
                                v: Tensor::zeros(g.bias.raw_dim()),
                            },
                        ));
                    }
                    let (mw, mb) = self.moments[i].as_mut().expect("just set");
                    let layer = &mut net.layers_mut()[i];
                    adam_update(
                        layer.weights.as_mut().expect("has params"),
                        &g.weights,
                        mw,
                        lr,
                        beta1,
                        beta2,
                        eps,
                        t,
                    );
                    adam_update(
                        layer.bias.as_mut().expect("has params"),
                        &g.bias,
                        mb,
                        lr,
                        beta1,
                        beta2,
                        eps,
                        t,
                    );
                }
            }
        }
        Ok(())
    }
}

fn sgd_update<F: Scalar>(param: &mut Tensor<F>, grad: &Tensor<F>, lr: f64) {
    let lr = F::cast(lr);
    param.zip_mut_with(grad, |p, g| *p = *p - lr * *g);
}

#[allow(clippy::too_many_arguments)]
fn adam_update<F: Scalar>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    moments: &mut Moments<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let b1 = F::cast(beta1);
    let b2 = F::cast(beta2);
    let one = F::one();
    let corr1 = F::cast(1.0 - beta1.powi(t as i32));
    let corr2 = F::cast(1.0 - beta2.powi(t as i32));
    let lr = F::cast(lr);
    let eps = F::cast(eps);
    let ps = param.as_slice_mut().expect("standard layout");
    let gs = grad.as_slice().expect("standard layout");
    let ms = moments.m.as_slice_mut().expect("standard layout");
    let vs = moments.v.as_slice_mut().expect("standard layout");
    for i in 0..ps.len() {
        ms[i] = b1 * ms[i] + (one - b1) * gs[i];
        vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
        let m_hat = ms[i] / corr1;
        let v_hat = vs[i] / corr2;
        ps[i] = ps[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Linear decay to zero: `lr0 * (1 - epoch / total)` for 0-based epochs.
pub fn linear_decay(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * (1.0 - epoch as f64 / total_epochs as f64)
}
