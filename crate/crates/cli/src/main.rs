use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gleason_cli::config::{parse_freeze, parse_top_model, PipelineConfig, CONFIG_ENV};
use gleason_cli::pipeline;
use gleason_core::{Error, Result};

/// Gleason grading pipeline over annotated prostate slide bundles.
#[derive(Parser)]
#[command(name = "gleason", version, about, max_term_width = 100)]
struct Cli {
    /// Configuration file (JSON); defaults to $GLEASON_CONFIG when set.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flag-level overrides, applied on top of the configuration file.
#[derive(Parser)]
struct Overrides {
    /// Root directory for run artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Slide bundle directory (default: <run-dir>/slides).
    #[arg(long, global = true, value_name = "DIR")]
    slides_dir: Option<PathBuf>,
    /// Tiling window in slide pixels.
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    /// Fractional window overlap in [0, 1).
    #[arg(long, global = true)]
    overlap: Option<f64>,
    /// Minimum tissue fraction for a window to become a patch.
    #[arg(long, global = true)]
    min_tissue: Option<f64>,
    /// Network input side; patches are resized to this.
    #[arg(long, global = true)]
    input_side: Option<usize>,
    /// Classifier head: fc, gmp, gap, gmp-fc, or gap-fc.
    #[arg(long, global = true)]
    top_model: Option<String>,
    /// Cribriform fine-tuning freeze depth: conv1, conv2, or conv3.
    #[arg(long, global = true)]
    freeze: Option<String>,
    /// Minimum tissue share before a grade enters the score.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Number of patient-exclusive folds.
    #[arg(long, global = true)]
    n_folds: Option<usize>,
    /// Fold held out for testing.
    #[arg(long, global = true)]
    test_fold: Option<usize>,
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grader training epochs.
    #[arg(long, global = true)]
    grader_epochs: Option<usize>,
    /// Grader learning rate.
    #[arg(long, global = true)]
    grader_lr: Option<f64>,
    /// Grader batch size.
    #[arg(long, global = true)]
    grader_batch: Option<usize>,
    /// Enable or disable training-time augmentation for both detectors.
    #[arg(long, global = true, value_name = "BOOL")]
    augment: Option<bool>,
    /// Cribriform fine-tuning epochs.
    #[arg(long, global = true)]
    cribriform_epochs: Option<usize>,
    /// Cribriform learning rate.
    #[arg(long, global = true)]
    cribriform_lr: Option<f64>,
    /// Scorer training epochs.
    #[arg(long, global = true)]
    scorer_epochs: Option<usize>,
    /// Scorer learning rate.
    #[arg(long, global = true)]
    scorer_lr: Option<f64>,
    /// Synthetic percentage vectors used to train the scorer.
    #[arg(long, global = true)]
    scorer_vectors: Option<usize>,
    /// Activation-maximization gradient steps.
    #[arg(long, global = true)]
    am_steps: Option<usize>,
    /// Number of deepest-convolution filters to visualize.
    #[arg(long, global = true)]
    am_filters: Option<usize>,
    /// Synthetic slides generated per score class.
    #[arg(long, global = true)]
    slides_per_class: Option<usize>,
    /// Synthetic slide side in pixels (square).
    #[arg(long, global = true)]
    slide_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide corpus.
    Synth,
    /// Tile slides into labeled patches and assign patient folds.
    Tile,
    /// Train the four-class patch grader on the training folds.
    TrainGrader,
    /// Fine-tune the cribriform detector from the trained grader.
    TrainCribriform,
    /// Run both detectors over every window of the held-out slides.
    Predict,
    /// Render per-grade probability maps and the class map.
    Reconstruct,
    /// Reduce class maps to tissue composition percentages.
    Percentages,
    /// Train the slide-level scorer on synthetic percentage vectors.
    TrainScorer,
    /// Score held-out slides with the threshold rule and the scorer.
    Score,
    /// Patch, cribriform, and slide-level metrics for the held-out fold.
    Evaluate,
    /// Class activation maps for one held-out patch per grade.
    ExplainCam,
    /// Activation maximization for the deepest convolution.
    ExplainAm,
    /// Match a slide's color distribution to a reference slide.
    StainNorm {
        /// Slide bundle to normalize.
        source: PathBuf,
        /// Slide bundle providing the target distribution.
        reference: PathBuf,
        /// Directory to write the normalized bundle into.
        out: PathBuf,
    },
    /// Run every stage after synth, in dependency order.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let explicit = cli.config.clone();
    let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let mut cfg = match explicit.or(from_env) {
        Some(path) => PipelineConfig::from_file(&path)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut PipelineConfig, o: &Overrides) -> Result<()> {
    if let Some(v) = &o.run_dir {
        cfg.run_dir = v.clone();
    }
    if let Some(v) = &o.slides_dir {
        cfg.slides_dir = Some(v.clone());
    }
    if let Some(v) = o.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = o.overlap {
        cfg.overlap = v;
    }
    if let Some(v) = o.min_tissue {
        cfg.min_tissue = v;
    }
    if let Some(v) = o.input_side {
        cfg.input_side = v;
    }
    if let Some(v) = &o.top_model {
        cfg.top_model = parse_top_model(v)?;
    }
    if let Some(v) = &o.freeze {
        cfg.freeze = parse_freeze(v)?;
    }
    if let Some(v) = o.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = o.n_folds {
        cfg.n_folds = v;
    }
    if let Some(v) = o.test_fold {
        cfg.test_fold = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.grader_epochs {
        cfg.grader.epochs = v;
    }
    if let Some(v) = o.grader_lr {
        cfg.grader.learning_rate = v;
    }
    if let Some(v) = o.grader_batch {
        cfg.grader.batch_size = v;
    }
    if let Some(v) = o.augment {
        cfg.grader.augment = v;
        cfg.cribriform.augment = v;
    }
    if let Some(v) = o.cribriform_epochs {
        cfg.cribriform.epochs = v;
    }
    if let Some(v) = o.cribriform_lr {
        cfg.cribriform.learning_rate = v;
    }
    if let Some(v) = o.scorer_epochs {
        cfg.scorer.epochs = v;
    }
    if let Some(v) = o.scorer_lr {
        cfg.scorer.learning_rate = v;
    }
    if let Some(v) = o.scorer_vectors {
        cfg.scorer_vectors = v;
    }
    if let Some(v) = o.am_steps {
        cfg.am_steps = v;
    }
    if let Some(v) = o.am_filters {
        cfg.am_filters = v;
    }
    if let Some(v) = o.slides_per_class {
        cfg.synth.slides_per_class = v;
    }
    if let Some(v) = o.slide_size {
        cfg.synth.slide_height = v;
        cfg.synth.slide_width = v;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::StainNorm { source, reference, out } = &cli.command {
        return pipeline::run_stain_norm(source, reference, out);
    }
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Synth => pipeline::run_synth(&cfg),
        Command::Tile => pipeline::run_tile(&cfg),
        Command::TrainGrader => pipeline::run_train_grader(&cfg),
        Command::TrainCribriform => pipeline::run_train_cribriform(&cfg),
        Command::Predict => pipeline::run_predict(&cfg),
        Command::Reconstruct => pipeline::run_reconstruct(&cfg),
        Command::Percentages => pipeline::run_percentages(&cfg),
        Command::TrainScorer => pipeline::run_train_scorer(&cfg),
        Command::Score => pipeline::run_score(&cfg),
        Command::Evaluate => pipeline::run_evaluate(&cfg),
        Command::ExplainCam => pipeline::run_explain_cam(&cfg),
        Command::ExplainAm => pipeline::run_explain_am(&cfg),
        Command::RunAll => pipeline::run_all(&cfg),
        Command::StainNorm { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage problem and shares the invalid-input exit code.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => Error::Invalid(String::new()).exit_code(),
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
