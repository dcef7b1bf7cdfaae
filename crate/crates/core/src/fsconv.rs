//! The patch-level graders: a three-block convolutional base under a choice
//! of classification tops, plus the cribriform fine-tuning head.
//!
//! The base stacks three Conv/ReLU/MaxPool blocks (32, 128, 512 filters of
//! 3x3, stride-2 2x2 pooling) so that the receptive field grows to cover a
//! full gland cross-section by the last block. Tops differ in how they
//! collapse the (h, w, 512) feature volume:
//!
//! * `Gmp` / `Gap` - global max / average pooling straight into the class
//!   layer. With the published 224-pixel input the GMP variant has exactly
//!   630,276 trainable parameters.
//! * `Fc` - flatten into a 64-unit hidden layer with dropout.
//! * `GmpFc` / `GapFc` - global pooling into a 512-256 hidden stack with
//!   dropout (1,023,236 parameters for the GMP flavour at 224).
//!
//! Training is plain mini-batch SGD on class-weighted cross-entropy with
//! the rotation/translation augmentation from [`crate::patchwork`]; the
//! cribriform head trains with binary cross-entropy and adds brightness
//! jitter. All randomness (epoch shuffling, augmentation, dropout) is drawn
//! from one ChaCha8 stream seeded by [`TrainConfig::seed`], in that order,
//! so a seed pins the whole run.

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::{binary_cross_entropy, weighted_cross_entropy, ClassWeights};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::{ForwardMode, Layer, LayerKind, LayerSpec, Network, Padding};
use crate::patchwork::{augment, FoldAssignment, Patch};
use crate::types::Grade;

/// How a grader collapses the convolutional features into class scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopModelKind {
    /// Flatten into FC(64) + dropout before the class layer.
    Fc,
    /// Global max pooling straight into the class layer.
    Gmp,
    /// Global average pooling straight into the class layer.
    Gap,
    /// Global max pooling into an FC(512)-FC(256) stack with dropout.
    GmpFc,
    /// Global average pooling into an FC(512)-FC(256) stack with dropout.
    GapFc,
}

/// How much of the convolutional base stays fixed while the cribriform head
/// trains. Freezing `ConvN` freezes every layer up to and including the
/// N-th convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeDepth {
    Conv1,
    Conv2,
    Conv3,
}

impl FreezeDepth {
    fn ordinal(self) -> usize {
        match self {
            FreezeDepth::Conv1 => 0,
            FreezeDepth::Conv2 => 1,
            FreezeDepth::Conv3 => 2,
        }
    }
}

/// Hyper-parameters for [`train_grader`] and [`train_cribriform`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Apply random right-angle rotations and reflected translations.
    pub augment: bool,
    /// Also jitter brightness when augmenting (cribriform training).
    pub brightness: bool,
    /// Explicit per-class loss weights; `None` derives them from the
    /// training-split counts as `w_c = C * N / N_c`.
    pub class_weights: Option<[f64; 4]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 200,
            optimizer: OptimizerKind::Sgd,
            augment: true,
            brightness: false,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The cribriform fine-tuning recipe: lr 0.001, batch 32, 200 epochs,
    /// augmentation with brightness jitter.
    pub fn cribriform() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.001,
            brightness: true,
            ..TrainConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Invalid(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epoch count must be at least 1".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(Error::Invalid(format!(
                    "class weights must be positive and finite, got {w:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss and training accuracy for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch training record, one row per epoch in order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// `epoch,loss,accuracy` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

// ---------------------------------------------------------------------------
// architecture
// ---------------------------------------------------------------------------

fn base_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(3, 3, 32, 1, Padding::Same),
        LayerSpec::relu(),
        LayerSpec::max_pool2d(2, 2, 2),
        LayerSpec::conv2d(3, 3, 128, 1, Padding::Same),
        LayerSpec::relu(),
        LayerSpec::max_pool2d(2, 2, 2),
        LayerSpec::conv2d(3, 3, 512, 1, Padding::Same),
        LayerSpec::relu(),
        LayerSpec::max_pool2d(2, 2, 2),
    ]
}

fn top_specs(top: TopModelKind, num_classes: usize) -> Vec<LayerSpec> {
    match top {
        TopModelKind::Gmp => vec![
            LayerSpec::global_max_pool(),
            LayerSpec::fully_connected(num_classes),
            LayerSpec::softmax(),
        ],
        TopModelKind::Gap => vec![
            LayerSpec::global_avg_pool(),
            LayerSpec::fully_connected(num_classes),
            LayerSpec::softmax(),
        ],
        TopModelKind::Fc => vec![
            LayerSpec::fully_connected(64),
            LayerSpec::relu(),
            LayerSpec::dropout(0.5),
            LayerSpec::fully_connected(num_classes),
            LayerSpec::softmax(),
        ],
        TopModelKind::GmpFc | TopModelKind::GapFc => {
            let pool = if top == TopModelKind::GmpFc {
                LayerSpec::global_max_pool()
            } else {
                LayerSpec::global_avg_pool()
            };
            vec![
                pool,
                LayerSpec::fully_connected(512),
                LayerSpec::relu(),
                LayerSpec::dropout(0.5),
                LayerSpec::fully_connected(256),
                LayerSpec::relu(),
                LayerSpec::dropout(0.5),
                LayerSpec::fully_connected(num_classes),
                LayerSpec::softmax(),
            ]
        }
    }
}

/// Build an untrained patch grader: the three-block convolutional base under
/// the chosen top, taking `(input_side, input_side, 3)` RGB patches scaled
/// to [0, 1] and emitting `num_classes` softmax probabilities.
pub fn build_fsconv(
    top: TopModelKind,
    num_classes: usize,
    input_side: usize,
    seed: u64,
) -> Result<Network<f32>> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!(
            "a grader needs at least 2 classes, got {num_classes}"
        )));
    }
    // Three stride-2 pools need the side to survive three halvings.
    if input_side < 8 {
        return Err(Error::Invalid(format!(
            "input side must be at least 8, got {input_side}"
        )));
    }
    let mut specs = base_specs();
    specs.extend(top_specs(top, num_classes));
    Network::new(&[input_side, input_side, 3], specs, seed)
}

// ---------------------------------------------------------------------------
// grader training
// ---------------------------------------------------------------------------

fn check_patch_shapes(net: &Network<f32>, patches: &[Patch]) -> Result<()> {
    let want = net.input_shape();
    for p in patches {
        let got = p.pixels.shape();
        if got != want {
            return Err(Error::Shape {
                layer: format!("patch {} from slide {}", p.center.0, p.slide_id),
                expected: want.to_vec(),
                actual: got.to_vec(),
            });
        }
    }
    Ok(())
}

/// Stack patches (optionally augmented) into an (N, side, side, 3) batch.
fn batch_pixels(patches: &[&Patch]) -> ArrayD<f32> {
    let side_h = patches[0].pixels.shape()[0];
    let side_w = patches[0].pixels.shape()[1];
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[patches.len(), side_h, side_w, 3]));
    for (i, p) in patches.iter().enumerate() {
        for y in 0..side_h {
            for x in 0..side_w {
                for c in 0..3 {
                    out[[i, y, x, c]] = p.pixels[[y, x, c]] as f32 / 255.0;
                }
            }
        }
    }
    out
}

fn class_counts(patches: &[&Patch]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for p in patches {
        counts[p.label.index()] += 1;
    }
    counts
}

/// Train a four-class patch grader in place with mini-batch gradient descent
/// on class-weighted cross-entropy.
///
/// `folds` optionally restricts the training split: patches whose patient
/// falls in one of the `held_out` folds of the assignment are excluded.
/// With `None` every patch trains. Class weights come from the resulting
/// split's counts unless [`TrainConfig::class_weights`] overrides them; a
/// grade with no samples in the split is an error naming that grade.
///
/// One ChaCha8 stream seeded by `cfg.seed` drives, in order per batch, the
/// epoch shuffle, per-sample augmentation draws, and dropout masks, so runs
/// with equal seed and config are bit-identical.
pub fn train_grader(
    net: &mut Network<f32>,
    patches: &[Patch],
    folds: Option<(&FoldAssignment, &[usize])>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let out_shape = net.output_shape().to_vec();
    if out_shape != [Grade::COUNT] {
        return Err(Error::Invalid(format!(
            "grader must emit {} class probabilities, network emits {:?}",
            Grade::COUNT,
            out_shape
        )));
    }

    let split: Vec<&Patch> = match folds {
        None => patches.iter().collect(),
        Some((assignment, held_out)) => {
            for &f in held_out {
                if f >= assignment.n_folds() {
                    return Err(Error::Invalid(format!(
                        "held-out fold {f} out of range for {} folds",
                        assignment.n_folds()
                    )));
                }
            }
            patches
                .iter()
                .filter(|p| match assignment.fold_of(&p.patient_id) {
                    Some(f) => !held_out.contains(&f),
                    None => false,
                })
                .collect()
        }
    };
    if split.is_empty() {
        return Err(Error::Degenerate("training split is empty".into()));
    }
    check_patch_shapes(net, patches)?;

    let counts = class_counts(&split);
    for grade in Grade::ALL {
        if counts[grade.index()] == 0 {
            return Err(Error::EmptyClass(grade.label().to_string()));
        }
    }
    let weights = match &cfg.class_weights {
        Some(w) => ClassWeights::explicit(w.to_vec())?,
        None => ClassWeights::from_counts(&counts)?,
    };

    let mut optimizer = Optimizer::new(cfg.optimizer, net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let n = split.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let originals: Vec<&Patch> = chunk.iter().map(|&i| split[i]).collect();
            let batch = if cfg.augment {
                let aug: Vec<Patch> = originals
                    .iter()
                    .map(|p| augment(p, &mut rng, cfg.brightness))
                    .collect();
                batch_pixels(&aug.iter().collect::<Vec<_>>())
            } else {
                batch_pixels(&originals)
            };

            let b = chunk.len();
            let mut targets = ArrayD::<f32>::zeros(IxDyn(&[b, Grade::COUNT]));
            for (row, p) in originals.iter().enumerate() {
                targets[[row, p.label.index()]] = 1.0;
            }

            let trace = net.forward(&batch, ForwardMode::Train(&mut rng))?;
            let probs = trace.output();
            for (row, p) in originals.iter().enumerate() {
                let mut best = 0usize;
                for k in 1..Grade::COUNT {
                    if probs[[row, k]] >= probs[[row, best]] {
                        best = k;
                    }
                }
                if best == p.label.index() {
                    correct += 1;
                }
            }
            let (loss, grad) = weighted_cross_entropy(probs, &targets, &weights)?;
            let grads = net.backward_from(&trace, net.logits_layer(), &grad)?;
            optimizer.step(net, &grads, cfg.learning_rate)?;
            loss_sum += loss * b as f64;
        }

        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }

    net.set_trained(true);
    Ok(history)
}

/// Softmax class probabilities for one patch, indexed by [`Grade::index`].
///
/// Inference runs with dropout disabled, so the result is independent of
/// batch composition.
pub fn predict_patch(net: &Network<f32>, patch: &Patch) -> Result<[f64; 4]> {
    let out_shape = net.output_shape().to_vec();
    if out_shape != [Grade::COUNT] {
        return Err(Error::Invalid(format!(
            "grader must emit {} class probabilities, network emits {:?}",
            Grade::COUNT,
            out_shape
        )));
    }
    let input = patch.pixels_f32();
    let trace = net.forward(&input, ForwardMode::Infer)?;
    let out = trace.output();
    let mut probs = [0.0f64; 4];
    for k in 0..Grade::COUNT {
        probs[k] = out[[0, k]] as f64;
    }
    Ok(probs)
}

// ---------------------------------------------------------------------------
// cribriform head
// ---------------------------------------------------------------------------

/// Build the cribriform-pattern detector from a trained grader with a global
/// max pooling top: the convolutional base is copied, everything up to and
/// including the [`FreezeDepth`] convolution is frozen, and a fresh
/// GMP + one-sigmoid-neuron head replaces the class layer. The head's
/// initialization derives deterministically from the grader's seed.
pub fn build_cribriform(grader: &Network<f32>, freeze: FreezeDepth) -> Result<Network<f32>> {
    if !grader.trained() {
        return Err(Error::Invalid(
            "cribriform fine-tuning starts from a trained grader".into(),
        ));
    }
    let gmp = grader
        .layers()
        .iter()
        .position(|l| l.spec().kind == LayerKind::GlobalMaxPool)
        .ok_or_else(|| {
            Error::Invalid("cribriform fine-tuning needs a grader with a global max pooling top".into())
        })?;

    let conv_idxs = grader.conv_layer_indices();
    let ordinal = freeze.ordinal();
    if ordinal >= conv_idxs.len() {
        return Err(Error::Invalid(format!(
            "freeze depth names convolution {} but the base has {}",
            ordinal + 1,
            conv_idxs.len()
        )));
    }
    let cut = conv_idxs[ordinal];

    let mut layers: Vec<Layer<f32>> = Vec::with_capacity(gmp + 3);
    for (i, layer) in grader.layers()[..gmp].iter().enumerate() {
        let mut spec = layer.spec().clone();
        spec.frozen = i <= cut;
        layers.push(Layer::new(
            spec,
            layer.weights().cloned(),
            layer.bias().cloned(),
        ));
    }

    // Fresh head: harvest a seeded initialization for the single neuron from
    // a throwaway network over the pooled feature vector.
    let channels = grader.layer_output_shape(gmp).to_vec();
    let head_seed = grader.rng_seed() ^ 0x9e37_79b9_7f4a_7c15;
    let donor = Network::<f32>::new(&channels, vec![LayerSpec::fully_connected(1)], head_seed)?;
    let fc = donor.layers()[0].clone();

    layers.push(Layer::new(LayerSpec::global_max_pool(), None, None));
    layers.push(fc);
    layers.push(Layer::new(LayerSpec::sigmoid(), None, None));

    Network::from_parts(grader.input_shape(), layers, head_seed, false)
}

/// Fine-tune the cribriform detector on grade 4 patches with binary
/// cross-entropy. Every patch must carry the GG4 label; the split must
/// contain both cribriform and non-cribriform examples. Randomness follows
/// the same single-stream discipline as [`train_grader`].
pub fn train_cribriform(
    net: &mut Network<f32>,
    patches: &[Patch],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if net.output_shape() != [1] {
        return Err(Error::Invalid(format!(
            "cribriform detector must emit one probability, network emits {:?}",
            net.output_shape()
        )));
    }
    if patches.is_empty() {
        return Err(Error::Degenerate("training split is empty".into()));
    }
    for p in patches {
        if p.label != Grade::Gg4 {
            return Err(Error::Invalid(format!(
                "cribriform training expects GG4 patches, found {} in slide {}",
                p.label.label(),
                p.slide_id
            )));
        }
    }
    let positives = patches.iter().filter(|p| p.cribriform).count();
    if positives == 0 || positives == patches.len() {
        return Err(Error::Degenerate(
            "cribriform training needs both cribriform and non-cribriform patches".into(),
        ));
    }
    check_patch_shapes(net, patches)?;

    let mut optimizer = Optimizer::new(cfg.optimizer, net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let n = patches.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let originals: Vec<&Patch> = chunk.iter().map(|&i| &patches[i]).collect();
            let batch = if cfg.augment {
                let aug: Vec<Patch> = originals
                    .iter()
                    .map(|p| augment(p, &mut rng, cfg.brightness))
                    .collect();
                batch_pixels(&aug.iter().collect::<Vec<_>>())
            } else {
                batch_pixels(&originals)
            };

            let b = chunk.len();
            let mut targets = ArrayD::<f32>::zeros(IxDyn(&[b, 1]));
            for (row, p) in originals.iter().enumerate() {
                targets[[row, 0]] = if p.cribriform { 1.0 } else { 0.0 };
            }

            let trace = net.forward(&batch, ForwardMode::Train(&mut rng))?;
            let probs = trace.output();
            for (row, p) in originals.iter().enumerate() {
                if (probs[[row, 0]] > 0.5) == p.cribriform {
                    correct += 1;
                }
            }
            let (loss, grad) = binary_cross_entropy(probs, &targets)?;
            let grads = net.backward_from(&trace, net.logits_layer(), &grad)?;
            optimizer.step(net, &grads, cfg.learning_rate)?;
            loss_sum += loss * b as f64;
        }

        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }

    net.set_trained(true);
    Ok(history)
}

/// Probability that a patch shows a cribriform pattern.
pub fn predict_cribriform(net: &Network<f32>, patch: &Patch) -> Result<f64> {
    if net.output_shape() != [1] {
        return Err(Error::Invalid(format!(
            "cribriform detector must emit one probability, network emits {:?}",
            net.output_shape()
        )));
    }
    let input = patch.pixels_f32();
    let trace = net.forward(&input, ForwardMode::Infer)?;
    Ok(trace.output()[[0, 0]] as f64)
}

/// Decision rule over [`predict_cribriform`]: positive strictly above 0.5.
pub fn is_cribriform(probability: f64) -> bool {
    probability > 0.5
}
