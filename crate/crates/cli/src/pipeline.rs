//! Pipeline stages and their artifact tree.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs back there, so any stage can resume from disk; a missing input
//! is reported as a dependency error naming the stage that produces it.
//! All randomness derives from the config seed, and artifacts are written
//! through deterministic serializers, so a rerun with the same config is
//! byte-identical.
//!
//! ```text
//! run/
//!   config.json          echoed configuration
//!   manifest.json        per-stage seeds and outputs
//!   slides/<id>/         slide bundles (synth or user-supplied)
//!   patches/             tiled patch store + fold assignment
//!   models/              grader.fscv, cribriform.fscv, scorer.fscv
//!   history/             training curves (CSV)
//!   predictions/<id>.json  dense patch-grid class probabilities
//!   maps/<id>/           probability + class maps (PNG)
//!   percentages/<id>.json  tissue composition
//!   scores/<id>.<method>.json  slide-level reports
//!   metrics/             metrics.json + confusion.csv
//!   explain/             CAM and activation-maximization renderings
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use gleason_core::fsconv::{
    build_cribriform, build_fsconv, predict_cribriform, predict_patch, train_cribriform,
    train_grader, TrainConfig,
};
use gleason_core::metrics::{classification_report, quadratic_kappa, roc_auc, ConfusionMatrix};
use gleason_core::nn::serialize;
use gleason_core::patchwork::{
    make_folds, resize_patch, tissue_mask, tile_slide, FoldAssignment, Patch, Slide, TileConfig,
};
use gleason_core::reconstruct::{
    argmax_map, grade_percentages, probability_map, write_classmap_png, write_probability_png,
    PatchPrediction,
};
use gleason_core::scorer::{
    mlp_score, threshold_score, train_scorer, ScoreReport, ScorerConfig, ScorerSample,
    ScoringMethod,
};
use gleason_core::types::GradePercentages;
use gleason_core::{explain, Error, Grade, Result};

use crate::config::PipelineConfig;
use crate::synth::{generate, percentage_vectors};

// ---------------------------------------------------------------------------
// artifact layout
// ---------------------------------------------------------------------------

pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Paths {
        Paths { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn patches_dir(&self) -> PathBuf {
        self.root.join("patches")
    }
    pub fn patches_index(&self) -> PathBuf {
        self.patches_dir().join("index.json")
    }
    pub fn patches_pixels(&self) -> PathBuf {
        self.patches_dir().join("pixels.bin")
    }
    pub fn folds(&self) -> PathBuf {
        self.patches_dir().join("folds.json")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn grader_model(&self) -> PathBuf {
        self.models_dir().join("grader.fscv")
    }
    pub fn cribriform_model(&self) -> PathBuf {
        self.models_dir().join("cribriform.fscv")
    }
    pub fn scorer_model(&self) -> PathBuf {
        self.models_dir().join("scorer.fscv")
    }
    pub fn history_dir(&self) -> PathBuf {
        self.root.join("history")
    }
    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn prediction(&self, slide_id: &str) -> PathBuf {
        self.predictions_dir().join(format!("{slide_id}.json"))
    }
    pub fn maps_dir(&self, slide_id: &str) -> PathBuf {
        self.root.join("maps").join(slide_id)
    }
    pub fn percentages_dir(&self) -> PathBuf {
        self.root.join("percentages")
    }
    pub fn percentages(&self, slide_id: &str) -> PathBuf {
        self.percentages_dir().join(format!("{slide_id}.json"))
    }
    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }
    pub fn score(&self, slide_id: &str, method: ScoringMethod) -> PathBuf {
        let m = match method {
            ScoringMethod::Threshold => "threshold",
            ScoringMethod::Mlp => "mlp",
        };
        self.scores_dir().join(format!("{slide_id}.{m}.json"))
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn metrics(&self) -> PathBuf {
        self.metrics_dir().join("metrics.json")
    }
    pub fn confusion(&self) -> PathBuf {
        self.metrics_dir().join("confusion.csv")
    }
    pub fn explain_dir(&self) -> PathBuf {
        self.root.join("explain")
    }
}

fn require(path: &Path, stage: &str, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage: stage.into(),
            missing: path.to_path_buf(),
            produced_by: produced_by.into(),
        })
    }
}

/// Per-stage seed: a pure mix of the master seed and the stage name.
fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut z = master ^ 0x9e37_79b9_7f4a_7c15;
    for b in stage.bytes() {
        z = (z ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 27)
}

// ---------------------------------------------------------------------------
// manifest + config echo
// ---------------------------------------------------------------------------

#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    pipeline_version: String,
    stages: BTreeMap<String, StageEntry>,
}

#[derive(Serialize, Deserialize)]
struct StageEntry {
    seed: u64,
    outputs: Vec<String>,
}

fn record_stage(paths: &Paths, cfg: &PipelineConfig, stage: &str, outputs: &[&Path]) -> Result<()> {
    let mut manifest: Manifest = match std::fs::read(paths.manifest()) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.pipeline_version = env!("CARGO_PKG_VERSION").to_string();
    let mut listed: Vec<String> = outputs
        .iter()
        .map(|p| {
            p.strip_prefix(paths.root())
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    listed.sort();
    manifest.stages.insert(
        stage.to_string(),
        StageEntry { seed: stage_seed(cfg.seed, stage), outputs: listed },
    );
    std::fs::write(
        paths.manifest(),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    // Echo the configuration beside the manifest and into each stage's
    // output directory, so any artifact can be traced to its settings.
    std::fs::write(paths.config(), cfg.to_json())?;
    let mut dirs: Vec<PathBuf> = outputs
        .iter()
        .map(|p| if p.is_dir() { p.to_path_buf() } else { p.parent().unwrap().to_path_buf() })
        .collect();
    dirs.sort();
    dirs.dedup();
    for dir in dirs {
        if dir != *paths.root() {
            std::fs::write(dir.join("config.json"), cfg.to_json())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// patch store
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PatchRecord {
    slide_id: String,
    patient_id: String,
    center: (usize, usize),
    side: usize,
    tissue_fraction: f64,
    label: u8,
    cribriform: bool,
}

#[derive(Serialize, Deserialize)]
struct PatchIndex {
    patches: Vec<PatchRecord>,
}

fn save_patches(paths: &Paths, patches: &[Patch]) -> Result<()> {
    std::fs::create_dir_all(paths.patches_dir())?;
    let mut index = PatchIndex { patches: Vec::with_capacity(patches.len()) };
    let mut pixels = Vec::new();
    for p in patches {
        let side = p.pixels.shape()[0];
        index.patches.push(PatchRecord {
            slide_id: p.slide_id.clone(),
            patient_id: p.patient_id.clone(),
            center: p.center,
            side,
            tissue_fraction: p.tissue_fraction,
            label: p.label.index() as u8,
            cribriform: p.cribriform,
        });
        pixels.extend_from_slice(p.pixels.as_slice().expect("patch pixels are contiguous"));
    }
    std::fs::write(paths.patches_pixels(), &pixels)?;
    std::fs::write(
        paths.patches_index(),
        serde_json::to_string_pretty(&index)? + "\n",
    )?;
    Ok(())
}

fn load_patches(paths: &Paths, stage: &str) -> Result<Vec<Patch>> {
    require(&paths.patches_index(), stage, "tile")?;
    require(&paths.patches_pixels(), stage, "tile")?;
    let index: PatchIndex = serde_json::from_slice(&std::fs::read(paths.patches_index())?)?;
    let pixels = std::fs::read(paths.patches_pixels())?;
    let mut out = Vec::with_capacity(index.patches.len());
    let mut offset = 0usize;
    for rec in index.patches {
        let len = rec.side * rec.side * 3;
        if offset + len > pixels.len() {
            return Err(Error::Invalid(
                "patch store is truncated; rerun the tile stage".into(),
            ));
        }
        let raw = pixels[offset..offset + len].to_vec();
        offset += len;
        let array = Array3::from_shape_vec((rec.side, rec.side, 3), raw)
            .expect("length checked above");
        let label = Grade::from_index(rec.label as usize).ok_or_else(|| {
            Error::Invalid(format!("patch store names grade index {}", rec.label))
        })?;
        out.push(Patch {
            pixels: array,
            center: rec.center,
            tissue_fraction: rec.tissue_fraction,
            label,
            cribriform: rec.cribriform,
            slide_id: rec.slide_id,
            patient_id: rec.patient_id,
        });
    }
    Ok(out)
}

fn load_folds(paths: &Paths, stage: &str) -> Result<FoldAssignment> {
    require(&paths.folds(), stage, "tile")?;
    Ok(serde_json::from_slice(&std::fs::read(paths.folds())?)?)
}

// ---------------------------------------------------------------------------
// slides
// ---------------------------------------------------------------------------

fn load_slides(dir: &Path, stage: &str) -> Result<Vec<Slide>> {
    require(dir, stage, "synth")?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::MissingArtifact {
            stage: stage.into(),
            missing: dir.join("<slide>"),
            produced_by: "synth".into(),
        });
    }
    entries.iter().map(|p| Slide::load_dir(p)).collect()
}

/// Every training patch must belong to a patient with a fold, and both the
/// training and the held-out side must be non-empty.
fn verify_patient_separation(
    patches: &[Patch],
    folds: &FoldAssignment,
    test_fold: usize,
) -> Result<()> {
    let mut train = false;
    let mut test = false;
    for p in patches {
        match folds.fold_of(&p.patient_id) {
            None => {
                return Err(Error::Invalid(format!(
                    "patient {} has no fold assignment",
                    p.patient_id
                )))
            }
            Some(f) if f == test_fold => test = true,
            Some(_) => train = true,
        }
    }
    if !train || !test {
        return Err(Error::Invalid(format!(
            "fold {test_fold} does not split patients into non-empty train and test sets"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

/// Generate the synthetic slide corpus into the slides directory.
pub fn run_synth(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let slides_dir = cfg.slides_dir();
    let mut spec = cfg.synth.clone();
    spec.seed ^= cfg.seed;
    let generated = generate(&spec)?;
    for s in &generated {
        s.slide.save_dir(&slides_dir.join(&s.slide.slide_id))?;
    }
    std::fs::create_dir_all(paths.root())?;
    record_stage(&paths, cfg, "synth", &[&slides_dir])
}

/// Tile every slide into labeled patches and assign patient-exclusive folds.
pub fn run_tile(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let slides = load_slides(&cfg.slides_dir(), "tile")?;
    let tile_cfg = TileConfig {
        patch_size: cfg.patch_size,
        overlap: cfg.overlap,
        min_tissue: cfg.min_tissue,
    };
    let mut patches = Vec::new();
    for slide in &slides {
        patches.extend(tile_slide(slide, &tile_cfg)?);
    }
    if patches.is_empty() {
        return Err(Error::Degenerate(
            "tiling produced no labeled patches".into(),
        ));
    }
    let folds = make_folds(&patches, cfg.n_folds, stage_seed(cfg.seed, "folds"))?;
    save_patches(&paths, &patches)?;
    std::fs::write(
        paths.folds(),
        serde_json::to_string_pretty(&folds)? + "\n",
    )?;
    record_stage(
        &paths,
        cfg,
        "tile",
        &[&paths.patches_index(), &paths.patches_pixels(), &paths.folds()],
    )
}

fn resized_for_net(patches: &[Patch], side: usize) -> Vec<Patch> {
    patches.iter().map(|p| resize_patch(p, side)).collect()
}

fn train_split<'a>(
    patches: &'a [Patch],
    folds: &FoldAssignment,
    test_fold: usize,
) -> Vec<&'a Patch> {
    patches
        .iter()
        .filter(|p| folds.fold_of(&p.patient_id) != Some(test_fold))
        .collect()
}

fn test_split<'a>(
    patches: &'a [Patch],
    folds: &FoldAssignment,
    test_fold: usize,
) -> Vec<&'a Patch> {
    patches
        .iter()
        .filter(|p| folds.fold_of(&p.patient_id) == Some(test_fold))
        .collect()
}

/// Train the patch grader on the non-test folds.
pub fn run_train_grader(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let patches = load_patches(&paths, "train-grader")?;
    let folds = load_folds(&paths, "train-grader")?;
    verify_patient_separation(&patches, &folds, cfg.test_fold)?;

    let resized = resized_for_net(&patches, cfg.input_side);
    let seed = stage_seed(cfg.seed ^ cfg.grader.seed, "train-grader");
    let mut net = build_fsconv(cfg.top_model, Grade::COUNT, cfg.input_side, seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.grader.clone() };
    let history = train_grader(&mut net, &resized, Some((&folds, &[cfg.test_fold])), &train_cfg)?;

    std::fs::create_dir_all(paths.models_dir())?;
    std::fs::create_dir_all(paths.history_dir())?;
    serialize::save(&net, &paths.grader_model())?;
    let history_path = paths.history_dir().join("grader.csv");
    std::fs::write(&history_path, history.to_csv())?;
    record_stage(&paths, cfg, "train-grader", &[&paths.grader_model(), &history_path])
}

/// Fine-tune the cribriform detector on the training folds' GG4 patches.
pub fn run_train_cribriform(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.grader_model(), "train-cribriform", "train-grader")?;
    let patches = load_patches(&paths, "train-cribriform")?;
    let folds = load_folds(&paths, "train-cribriform")?;
    verify_patient_separation(&patches, &folds, cfg.test_fold)?;

    let grader = serialize::load(&paths.grader_model())?;
    let gg4: Vec<Patch> = train_split(&patches, &folds, cfg.test_fold)
        .into_iter()
        .filter(|p| p.label == Grade::Gg4)
        .map(|p| resize_patch(p, cfg.input_side))
        .collect();
    let seed = stage_seed(cfg.seed ^ cfg.cribriform.seed, "train-cribriform");
    let mut net = build_cribriform(&grader, cfg.freeze)?;
    let train_cfg = TrainConfig { seed, ..cfg.cribriform.clone() };
    let history = train_cribriform(&mut net, &gg4, &train_cfg)?;

    serialize::save(&net, &paths.cribriform_model())?;
    let history_path = paths.history_dir().join("cribriform.csv");
    std::fs::create_dir_all(paths.history_dir())?;
    std::fs::write(&history_path, history.to_csv())?;
    record_stage(
        &paths,
        cfg,
        "train-cribriform",
        &[&paths.cribriform_model(), &history_path],
    )
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    slide_id: String,
    height: usize,
    width: usize,
    patch_size: usize,
    stride: usize,
    centers: Vec<(usize, usize)>,
    probabilities: Vec<[f64; 4]>,
    cribriform: Vec<f64>,
}

fn grid_origins(dim: usize, patch: usize, stride: usize) -> Vec<isize> {
    if dim < patch {
        return vec![(dim as isize - patch as isize) / 2];
    }
    let mut v = Vec::new();
    let mut r = 0;
    while r + patch <= dim {
        v.push(r as isize);
        r += stride;
    }
    v
}

fn window3(image: &Array3<u8>, r0: isize, c0: isize, p: usize) -> Array3<u8> {
    let (h, w, _) = image.dim();
    let mut out = Array3::<u8>::zeros((p, p, 3));
    for y in 0..p {
        let sy = r0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..p {
            let sx = c0 + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for c in 0..3 {
                out[[y, x, c]] = image[[sy as usize, sx as usize, c]];
            }
        }
    }
    out
}

/// Slides whose patient belongs to the held-out fold.
fn test_slides(slides: Vec<Slide>, folds: &FoldAssignment, test_fold: usize) -> Vec<Slide> {
    slides
        .into_iter()
        .filter(|s| folds.fold_of(&s.patient_id) == Some(test_fold))
        .collect()
}

/// Dense grid inference over every held-out slide: grade probabilities and
/// a cribriform score for every window of the tiling grid, tissue or not.
pub fn run_predict(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.grader_model(), "predict", "train-grader")?;
    require(&paths.cribriform_model(), "predict", "train-cribriform")?;
    let folds = load_folds(&paths, "predict")?;
    let slides = test_slides(load_slides(&cfg.slides_dir(), "predict")?, &folds, cfg.test_fold);
    if slides.is_empty() {
        return Err(Error::Degenerate(
            "no slides belong to the held-out fold".into(),
        ));
    }
    let grader = serialize::load(&paths.grader_model())?;
    let crib = serialize::load(&paths.cribriform_model())?;
    let stride = TileConfig {
        patch_size: cfg.patch_size,
        overlap: cfg.overlap,
        min_tissue: cfg.min_tissue,
    }
    .stride();

    std::fs::create_dir_all(paths.predictions_dir())?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for slide in &slides {
        let (h, w) = (slide.height(), slide.width());
        let mut file = PredictionFile {
            slide_id: slide.slide_id.clone(),
            height: h,
            width: w,
            patch_size: cfg.patch_size,
            stride,
            centers: Vec::new(),
            probabilities: Vec::new(),
            cribriform: Vec::new(),
        };
        for r0 in grid_origins(h, cfg.patch_size, stride) {
            for c0 in grid_origins(w, cfg.patch_size, stride) {
                let pixels = window3(&slide.image, r0, c0, cfg.patch_size);
                let patch = Patch {
                    pixels,
                    center: (
                        (r0 + cfg.patch_size as isize / 2).max(0) as usize,
                        (c0 + cfg.patch_size as isize / 2).max(0) as usize,
                    ),
                    tissue_fraction: 1.0,
                    label: Grade::Nc,
                    cribriform: false,
                    slide_id: slide.slide_id.clone(),
                    patient_id: slide.patient_id.clone(),
                };
                let small = resize_patch(&patch, cfg.input_side);
                file.centers.push(patch.center);
                file.probabilities.push(predict_patch(&grader, &small)?);
                file.cribriform.push(predict_cribriform(&crib, &small)?);
            }
        }
        let path = paths.prediction(&slide.slide_id);
        std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "predict", &refs)
}

fn load_prediction(paths: &Paths, slide_id: &str, stage: &str) -> Result<PredictionFile> {
    let path = paths.prediction(slide_id);
    require(&path, stage, "predict")?;
    Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
}

fn map_for(slide: &Slide, pred: &PredictionFile) -> Result<(gleason_core::reconstruct::ProbabilityMap, Array2<bool>)> {
    let tissue = tissue_mask(&slide.image)?;
    let mut predictions = Vec::with_capacity(pred.centers.len());
    for (i, &center) in pred.centers.iter().enumerate() {
        predictions.push(PatchPrediction::new(center, pred.probabilities[i])?);
    }
    let map = probability_map(&predictions, (pred.height, pred.width), &tissue)?;
    Ok((map, tissue))
}

/// Interpolate per-pixel probability maps and render them as PNGs.
pub fn run_reconstruct(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let folds = load_folds(&paths, "reconstruct")?;
    let slides = test_slides(
        load_slides(&cfg.slides_dir(), "reconstruct")?,
        &folds,
        cfg.test_fold,
    );
    let mut outputs: Vec<PathBuf> = Vec::new();
    for slide in &slides {
        let pred = load_prediction(&paths, &slide.slide_id, "reconstruct")?;
        let (map, tissue) = map_for(slide, &pred)?;
        let dir = paths.maps_dir(&slide.slide_id);
        std::fs::create_dir_all(&dir)?;
        for grade in Grade::ALL {
            write_probability_png(&map, grade, &dir.join(format!("{}.png", grade.label())))?;
        }
        let classes = argmax_map(&map);
        write_classmap_png(&classes, &tissue, &dir.join("classmap.png"))?;
        outputs.push(dir);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "reconstruct", &refs)
}

#[derive(Serialize, Deserialize)]
struct PercentagesFile {
    slide_id: String,
    percentages: GradePercentages,
}

/// Reduce each probability map to tissue composition percentages.
pub fn run_percentages(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let folds = load_folds(&paths, "percentages")?;
    let slides = test_slides(
        load_slides(&cfg.slides_dir(), "percentages")?,
        &folds,
        cfg.test_fold,
    );
    std::fs::create_dir_all(paths.percentages_dir())?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for slide in &slides {
        let pred = load_prediction(&paths, &slide.slide_id, "percentages")?;
        let (map, tissue) = map_for(slide, &pred)?;
        let classes = argmax_map(&map);
        let percentages = grade_percentages(&classes, &tissue)?;
        let path = paths.percentages(&slide.slide_id);
        let file = PercentagesFile { slide_id: slide.slide_id.clone(), percentages };
        std::fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "percentages", &refs)
}

/// Train the slide-level MLP scorer with the threshold rule as teacher.
pub fn run_train_scorer(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    let seed = stage_seed(cfg.seed ^ cfg.scorer.seed, "train-scorer");
    let vectors = percentage_vectors(cfg.scorer_vectors, seed);
    let samples: Vec<ScorerSample> = vectors
        .iter()
        .map(|&p| {
            let score = threshold_score(&p, cfg.threshold);
            ScorerSample { percentages: p, primary: score.primary, secondary: score.secondary }
        })
        .collect();
    let scorer_cfg = ScorerConfig { seed, ..cfg.scorer };
    let (net, losses) = train_scorer(&samples, &scorer_cfg)?;

    std::fs::create_dir_all(paths.models_dir())?;
    std::fs::create_dir_all(paths.history_dir())?;
    serialize::save(&net, &paths.scorer_model())?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    let history_path = paths.history_dir().join("scorer.csv");
    std::fs::write(&history_path, csv)?;
    record_stage(&paths, cfg, "train-scorer", &[&paths.scorer_model(), &history_path])
}

/// Score every held-out slide with both methods.
pub fn run_score(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.scorer_model(), "score", "train-scorer")?;
    let folds = load_folds(&paths, "score")?;
    let slides = test_slides(load_slides(&cfg.slides_dir(), "score")?, &folds, cfg.test_fold);
    let scorer = serialize::load(&paths.scorer_model())?;
    std::fs::create_dir_all(paths.scores_dir())?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for slide in &slides {
        let ppath = paths.percentages(&slide.slide_id);
        require(&ppath, "score", "percentages")?;
        let file: PercentagesFile = serde_json::from_slice(&std::fs::read(&ppath)?)?;
        let p = file.percentages;

        let t = ScoreReport::new(
            slide.slide_id.clone(),
            ScoringMethod::Threshold,
            threshold_score(&p, cfg.threshold),
            p,
        );
        let m = ScoreReport::new(
            slide.slide_id.clone(),
            ScoringMethod::Mlp,
            mlp_score(&scorer, &p)?,
            p,
        );
        for report in [t, m] {
            let path = paths.score(&slide.slide_id, report.method);
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            outputs.push(path);
        }
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "score", &refs)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PatchMetrics {
    accuracy: f64,
    macro_f1: f64,
    quadratic_kappa: Option<f64>,
    per_class: Vec<ClassRow>,
}

#[derive(Serialize, Deserialize)]
struct ClassRow {
    label: String,
    precision: f64,
    sensitivity: f64,
    specificity: f64,
    f1: f64,
    support: u64,
}

#[derive(Serialize, Deserialize)]
struct SlideRow {
    slide_id: String,
    truth: u8,
    predicted: u8,
}

#[derive(Serialize, Deserialize)]
struct MethodMetrics {
    agreement: f64,
    quadratic_kappa: Option<f64>,
    slides: Vec<SlideRow>,
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    patch: PatchMetrics,
    cribriform_auc: Option<f64>,
    threshold: MethodMetrics,
    mlp: MethodMetrics,
}

fn combined_rank(combined: u8) -> usize {
    match combined {
        0 => 0,
        6 => 1,
        7 => 2,
        8 => 3,
        9 => 4,
        _ => 5,
    }
}

fn method_metrics(
    slides: &[Slide],
    paths: &Paths,
    method: ScoringMethod,
) -> Result<MethodMetrics> {
    let mut rows = Vec::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    for slide in slides {
        let path = paths.score(&slide.slide_id, method);
        require(&path, "evaluate", "score")?;
        let report: ScoreReport = serde_json::from_slice(&std::fs::read(&path)?)?;
        let truth = slide.score.as_ref().ok_or_else(|| {
            Error::Invalid(format!("slide {} has no ground-truth score", slide.slide_id))
        })?;
        rows.push(SlideRow {
            slide_id: slide.slide_id.clone(),
            truth: truth.combined,
            predicted: report.combined,
        });
        refs.push(combined_rank(truth.combined));
        preds.push(combined_rank(report.combined));
    }
    let agree = rows.iter().filter(|r| r.truth == r.predicted).count();
    let kappa = ConfusionMatrix::from_labels(&refs, &preds, 6)
        .and_then(|cm| quadratic_kappa(&cm))
        .ok();
    Ok(MethodMetrics {
        agreement: agree as f64 / rows.len().max(1) as f64,
        quadratic_kappa: kappa,
        slides: rows,
    })
}

/// Patch-level report, cribriform AUC, and slide-level score agreement.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.grader_model(), "evaluate", "train-grader")?;
    let patches = load_patches(&paths, "evaluate")?;
    let folds = load_folds(&paths, "evaluate")?;
    let grader = serialize::load(&paths.grader_model())?;

    let held_out = test_split(&patches, &folds, cfg.test_fold);
    if held_out.is_empty() {
        return Err(Error::Degenerate("the held-out fold has no patches".into()));
    }
    let mut refs = Vec::with_capacity(held_out.len());
    let mut preds = Vec::with_capacity(held_out.len());
    for p in &held_out {
        let small = resize_patch(p, cfg.input_side);
        let probs = predict_patch(&grader, &small)?;
        let best = (0..Grade::COUNT)
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .unwrap();
        refs.push(p.label.index());
        preds.push(best);
    }
    let report = classification_report(&refs, &preds, Grade::COUNT)?;
    let cm = &report.confusion;
    let labels: Vec<String> = Grade::ALL.iter().map(|g| g.label().to_string()).collect();
    let supports = cm.row_sums();
    let patch_metrics = PatchMetrics {
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
        quadratic_kappa: quadratic_kappa(cm).ok(),
        per_class: report
            .per_class
            .iter()
            .zip(Grade::ALL)
            .map(|(c, grade)| ClassRow {
                label: grade.label().to_string(),
                precision: c.precision,
                sensitivity: c.sensitivity,
                specificity: c.specificity,
                f1: c.f1,
                support: supports[grade.index()],
            })
            .collect(),
    };

    // Cribriform AUC over held-out GG4 patches, when the detector exists
    // and both classes are present.
    let cribriform_auc = if paths.cribriform_model().exists() {
        let detector = serialize::load(&paths.cribriform_model())?;
        let gg4: Vec<&&Patch> = held_out.iter().filter(|p| p.label == Grade::Gg4).collect();
        let mut scores = Vec::with_capacity(gg4.len());
        let mut flags = Vec::with_capacity(gg4.len());
        for p in &gg4 {
            let small = resize_patch(p, cfg.input_side);
            scores.push(predict_cribriform(&detector, &small)?);
            flags.push(p.cribriform);
        }
        roc_auc(&scores, &flags).ok().map(|(_, auc)| auc)
    } else {
        None
    };

    let slides = test_slides(
        load_slides(&cfg.slides_dir(), "evaluate")?,
        &folds,
        cfg.test_fold,
    );
    let threshold = method_metrics(&slides, &paths, ScoringMethod::Threshold)?;
    let mlp = method_metrics(&slides, &paths, ScoringMethod::Mlp)?;

    let metrics = MetricsFile { patch: patch_metrics, cribriform_auc, threshold, mlp };
    std::fs::create_dir_all(paths.metrics_dir())?;
    std::fs::write(
        paths.metrics(),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    std::fs::write(paths.confusion(), cm.to_csv(&labels))?;
    record_stage(&paths, cfg, "evaluate", &[&paths.metrics(), &paths.confusion()])
}

// ---------------------------------------------------------------------------
// explanations
// ---------------------------------------------------------------------------

/// Class activation maps for the first held-out patch of each grade.
pub fn run_explain_cam(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.grader_model(), "explain-cam", "train-grader")?;
    let patches = load_patches(&paths, "explain-cam")?;
    let folds = load_folds(&paths, "explain-cam")?;
    let grader = serialize::load(&paths.grader_model())?;
    let held_out = test_split(&patches, &folds, cfg.test_fold);

    std::fs::create_dir_all(paths.explain_dir())?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for grade in Grade::ALL {
        let Some(patch) = held_out.iter().find(|p| p.label == grade) else {
            continue;
        };
        let small = resize_patch(patch, cfg.input_side);
        let raw = explain::cam(&grader, &small.pixels_f32(), grade.index())?;
        let heat = explain::cam_postprocess(&raw, (cfg.patch_size, cfg.patch_size));
        let png = paths.explain_dir().join(format!("cam_{}.png", grade.label()));
        let mask = paths
            .explain_dir()
            .join(format!("cam_{}_mask.png", grade.label()));
        explain::write_cam_png(&heat, &png)?;
        explain::write_cam_mask_png(&heat, &mask)?;
        outputs.push(png);
        outputs.push(mask);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "explain-cam", &refs)
}

/// Activation maximization for the deepest convolution's first filters.
pub fn run_explain_am(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.run_dir);
    require(&paths.grader_model(), "explain-am", "train-grader")?;
    let grader = serialize::load(&paths.grader_model())?;
    let layer = *grader
        .conv_layer_indices()
        .last()
        .ok_or_else(|| Error::Invalid("the grader has no convolutional layers".into()))?;
    let seed = stage_seed(cfg.seed, "explain-am");

    std::fs::create_dir_all(paths.explain_dir())?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for filter in 0..cfg.am_filters {
        let result =
            explain::activation_maximization(&grader, layer, filter, cfg.am_steps, cfg.am_step_size, seed)?;
        let png = paths.explain_dir().join(format!("am_conv3_f{filter}.png"));
        let csv = paths.explain_dir().join(format!("am_conv3_f{filter}.csv"));
        explain::write_am_png(&result.image, &png)?;
        std::fs::write(&csv, explain::am_trace_csv(&result.losses))?;
        outputs.push(png);
        outputs.push(csv);
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    record_stage(&paths, cfg, "explain-am", &refs)
}

// ---------------------------------------------------------------------------
// orchestration
// ---------------------------------------------------------------------------

/// Everything after slide generation, in dependency order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    run_tile(cfg)?;
    run_train_grader(cfg)?;
    run_train_cribriform(cfg)?;
    run_predict(cfg)?;
    run_reconstruct(cfg)?;
    run_percentages(cfg)?;
    run_train_scorer(cfg)?;
    run_score(cfg)?;
    run_evaluate(cfg)?;
    run_explain_cam(cfg)?;
    run_explain_am(cfg)?;
    Ok(())
}

/// Match a slide's color distribution to a reference slide, channelwise.
pub fn run_stain_norm(source: &Path, reference: &Path, out: &Path) -> Result<()> {
    let src = Slide::load_dir(source)?;
    let reference = Slide::load_dir(reference)?;
    let matched = gleason_core::patchwork::histogram_match(&src.image, &reference.image);
    let normalized = Slide::new(
        src.slide_id.clone(),
        src.patient_id.clone(),
        matched,
        src.annotation.clone(),
        src.cribriform.clone(),
        src.score.clone(),
    )?;
    normalized.save_dir(&out.join(&src.slide_id))?;
    Ok(())
}
