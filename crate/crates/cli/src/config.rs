//! Pipeline configuration: fully defaulted, loadable from JSON, with every
//! field overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::synth::SynthSpec;
use gleason_core::fsconv::{FreezeDepth, TopModelKind, TrainConfig};
use gleason_core::scorer::{ScorerConfig, SCORE_THRESHOLD};
use gleason_core::{Error, Result};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "GLEASON_CONFIG";

/// Everything a run needs. Defaults are desk-scale: 128-pixel patches
/// resized to a 64-pixel network input, so the whole pipeline finishes in
/// minutes on a laptop; the full-scale geometry (512-pixel patches, 224
/// input) is a matter of flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root directory for every artifact of this run.
    pub run_dir: PathBuf,
    /// Slide bundles to process; defaults to `<run_dir>/slides`.
    pub slides_dir: Option<PathBuf>,

    // tiling
    pub patch_size: usize,
    pub overlap: f64,
    pub min_tissue: f64,

    // model
    pub input_side: usize,
    pub top_model: TopModelKind,
    pub freeze: FreezeDepth,

    // training
    pub grader: TrainConfig,
    pub cribriform: TrainConfig,
    pub scorer: ScorerConfig,
    /// Synthetic percentage vectors used to teach the scorer.
    pub scorer_vectors: usize,

    // scoring
    pub threshold: f64,

    // splits
    pub n_folds: usize,
    pub test_fold: usize,

    // explainability
    pub am_steps: usize,
    pub am_step_size: f64,
    pub am_filters: usize,

    /// Master seed; stage seeds derive from it.
    pub seed: u64,

    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            run_dir: PathBuf::from("run"),
            slides_dir: None,
            patch_size: 128,
            overlap: 0.5,
            min_tissue: 0.2,
            input_side: 64,
            top_model: TopModelKind::Gmp,
            freeze: FreezeDepth::Conv2,
            grader: TrainConfig {
                epochs: 4,
                learning_rate: 0.002,
                ..TrainConfig::default()
            },
            cribriform: TrainConfig {
                epochs: 6,
                ..TrainConfig::cribriform()
            },
            scorer: ScorerConfig::default(),
            scorer_vectors: 300,
            threshold: SCORE_THRESHOLD,
            n_folds: 3,
            test_fold: 0,
            am_steps: 128,
            am_step_size: 0.1,
            am_filters: 3,
            seed: 0,
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn slides_dir(&self) -> PathBuf {
        self.slides_dir
            .clone()
            .unwrap_or_else(|| self.run_dir.join("slides"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Invalid("patch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Invalid(format!(
                "overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.min_tissue) {
            return Err(Error::Invalid(format!(
                "minimum tissue fraction must be in [0, 1], got {}",
                self.min_tissue
            )));
        }
        if self.input_side < 8 {
            return Err(Error::Invalid(format!(
                "network input side must be at least 8, got {}",
                self.input_side
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !self.threshold.is_finite() {
            return Err(Error::Invalid(format!(
                "score threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.n_folds < 2 {
            return Err(Error::Invalid(format!(
                "at least 2 folds are needed to hold a test fold out, got {}",
                self.n_folds
            )));
        }
        if self.test_fold >= self.n_folds {
            return Err(Error::Invalid(format!(
                "test fold {} out of range for {} folds",
                self.test_fold, self.n_folds
            )));
        }
        if self.scorer_vectors < 2 {
            return Err(Error::Invalid(
                "the scorer needs at least two teacher vectors".into(),
            ));
        }
        self.synth.validate()?;
        Ok(())
    }

    /// Parse a config file (strict: unknown fields are errors).
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub fn parse_top_model(s: &str) -> Result<TopModelKind> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "fc" => Ok(TopModelKind::Fc),
        "gmp" => Ok(TopModelKind::Gmp),
        "gap" => Ok(TopModelKind::Gap),
        "gmp_fc" => Ok(TopModelKind::GmpFc),
        "gap_fc" => Ok(TopModelKind::GapFc),
        other => Err(Error::Invalid(format!(
            "unknown top model '{other}' (expected fc, gmp, gap, gmp-fc, or gap-fc)"
        ))),
    }
}

pub fn parse_freeze(s: &str) -> Result<FreezeDepth> {
    match s.to_ascii_lowercase().as_str() {
        "conv1" => Ok(FreezeDepth::Conv1),
        "conv2" => Ok(FreezeDepth::Conv2),
        "conv3" => Ok(FreezeDepth::Conv3),
        other => Err(Error::Invalid(format!(
            "unknown freeze depth '{other}' (expected conv1, conv2, or conv3)"
        ))),
    }
}
