//! Slide-level Gleason scoring: the threshold baseline over grade
//! percentages and the small two-headed MLP trained to predict primary and
//! secondary grades from the four tissue fractions.
//!
//! The MLP is a single trunk (4 → 16 → 8, ReLU) feeding eight output
//! logits; the first four are the primary head, the last four the secondary
//! head, each read through its own softmax. The training loss is the sum of
//! the two heads' categorical cross-entropies.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::LOG_FLOOR;
use crate::nn::optim::{linear_decay, Optimizer, OptimizerKind};
use crate::nn::{ForwardMode, LayerSpec, Network};
use crate::tensor::from_vec;
use crate::types::{Grade, GleasonScore, GradePercentages};

/// Minimum tissue fraction for a grade to enter the threshold score.
pub const SCORE_THRESHOLD: f64 = 0.10;

/// Baseline rule: rank the cancer-grade fractions (GG3/GG4/GG5) in
/// descending order, ties toward the higher grade. The largest becomes the
/// primary grade if it reaches `threshold`; the second-largest becomes the
/// secondary if it also reaches the threshold, otherwise the primary is
/// duplicated. If nothing reaches the threshold the slide is benign.
pub fn threshold_score(p: &GradePercentages, threshold: f64) -> GleasonScore {
    let mut ranked = [
        (p.get(Grade::Gg3), Grade::Gg3),
        (p.get(Grade::Gg4), Grade::Gg4),
        (p.get(Grade::Gg5), Grade::Gg5),
    ];
    // descending fraction; equal fractions put the higher grade first
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.index().cmp(&a.1.index()))
    });
    if ranked[0].0 < threshold {
        return GleasonScore::benign();
    }
    let primary = ranked[0].1;
    let secondary = if ranked[1].0 >= threshold {
        ranked[1].1
    } else {
        primary
    };
    GleasonScore::combine(primary, secondary)
}

/// One labeled slide for scorer training.
#[derive(Clone, Copy, Debug)]
pub struct ScorerSample {
    pub percentages: GradePercentages,
    pub primary: Grade,
    pub secondary: Grade,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            learning_rate: 0.01,
            epochs: 2000,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Builds the untrained two-headed scorer MLP (288 parameters).
pub fn build_scorer(seed: u64) -> Network<f32> {
    Network::new(
        &[4],
        vec![
            LayerSpec::fully_connected(16),
            LayerSpec::relu(),
            LayerSpec::fully_connected(8),
            LayerSpec::relu(),
            LayerSpec::fully_connected(8),
        ],
        seed,
    )
    .expect("scorer architecture is statically valid")
}

fn softmax4(logits: &[f64; 4]) -> [f64; 4] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0f64; 4];
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

fn argmax_grade(dist: &[f64; 4]) -> Grade {
    let mut best = Grade::Nc;
    let mut best_p = f64::NEG_INFINITY;
    for grade in Grade::ALL {
        if dist[grade.index()] >= best_p {
            best_p = dist[grade.index()];
            best = grade;
        }
    }
    best
}

/// Runs the model on a raw 4-vector and returns the two head distributions.
pub fn head_distributions(model: &Network<f32>, input: [f64; 4]) -> Result<([f64; 4], [f64; 4])> {
    let tensor = from_vec::<f32>(&[4], input.iter().map(|v| *v as f32).collect())
        .expect("4 values fill a length-4 tensor");
    let trace = model.forward(&tensor, ForwardMode::Infer)?;
    let out = trace.output();
    let mut heads = [[0.0f64; 4]; 2];
    for (h, head) in heads.iter_mut().enumerate() {
        let mut logits = [0.0f64; 4];
        for (k, l) in logits.iter_mut().enumerate() {
            *l = out[[0, 4 * h + k]] as f64;
        }
        *head = softmax4(&logits);
    }
    Ok((heads[0], heads[1]))
}

/// Scores a slide with the MLP: primary = argmax of the first head,
/// secondary = argmax of the second, combined via the score rule.
pub fn mlp_score(model: &Network<f32>, p: &GradePercentages) -> Result<GleasonScore> {
    let (primary, secondary) = head_distributions(model, p.as_array())?;
    Ok(GleasonScore::combine(
        argmax_grade(&primary),
        argmax_grade(&secondary),
    ))
}

/// Trains the scorer MLP with Adam and a linearly decaying learning rate.
/// Returns the trained model and the per-epoch mean loss history.
pub fn train_scorer(
    samples: &[ScorerSample],
    cfg: &ScorerConfig,
) -> Result<(Network<f32>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(
            "scorer training needs at least two samples".into(),
        ));
    }
    let distinct: std::collections::BTreeSet<(Grade, Grade)> = samples
        .iter()
        .map(|s| (s.primary, s.secondary))
        .collect();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(
            "scorer training needs at least two distinct label combinations".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Invalid(
            "scorer config needs positive epochs, batch size and learning rate".into(),
        ));
    }

    let mut net = build_scorer(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), &net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = linear_decay(cfg.learning_rate, epoch, cfg.epochs);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut input = Array2::<f32>::zeros((b, 4));
            for (row, idx) in chunk.iter().enumerate() {
                for (col, v) in samples[*idx].percentages.as_array().iter().enumerate() {
                    input[[row, col]] = *v as f32;
                }
            }
            let trace = net.forward(&input.into_dyn(), ForwardMode::Infer)?;
            let logits = trace.output();

            let mut upstream = Array2::<f32>::zeros((b, 8));
            let mut batch_loss = 0.0;
            for (row, idx) in chunk.iter().enumerate() {
                let sample = &samples[*idx];
                for (h, target) in [sample.primary, sample.secondary].iter().enumerate() {
                    let mut head = [0.0f64; 4];
                    for (k, l) in head.iter_mut().enumerate() {
                        *l = logits[[row, 4 * h + k]] as f64;
                    }
                    let probs = softmax4(&head);
                    batch_loss -= probs[target.index()].max(LOG_FLOOR).ln();
                    for (k, p) in probs.iter().enumerate() {
                        let y = f64::from(u8::from(k == target.index()));
                        upstream[[row, 4 * h + k]] = ((p - y) / b as f64) as f32;
                    }
                }
            }
            batch_loss /= b as f64;

            let grads = net.backward(&trace, &upstream.into_dyn())?;
            opt.step(&mut net, &grads, lr)?;
            epoch_loss += batch_loss * b as f64;
        }
        history.push(epoch_loss / n as f64);
    }

    net.set_trained(true);
    Ok((net, history))
}

/// Scoring method recorded in slide reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    Mlp,
    Threshold,
}

/// Per-slide score report written by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub slide_id: String,
    pub method: ScoringMethod,
    pub primary: Grade,
    pub secondary: Grade,
    pub combined: u8,
    pub percentages: GradePercentages,
}

impl ScoreReport {
    pub fn new(
        slide_id: impl Into<String>,
        method: ScoringMethod,
        score: GleasonScore,
        percentages: GradePercentages,
    ) -> Self {
        ScoreReport {
            slide_id: slide_id.into(),
            method,
            primary: score.primary,
            secondary: score.secondary,
            combined: score.combined,
            percentages,
        }
    }
}
