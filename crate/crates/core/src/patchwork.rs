//! Slide ingestion: tissue masking, tiling into labeled patches,
//! augmentation, resizing, stain normalization by histogram matching, and
//! patient-exclusive fold assignment.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{Grade, GleasonScore};

/// Annotation raster value for pixels the pathologist left unlabeled.
pub const UNANNOTATED: u8 = 255;

/// A slide at working resolution with its annotation rasters.
#[derive(Clone, Debug)]
pub struct Slide {
    pub slide_id: String,
    pub patient_id: String,
    /// RGB, shape (H, W, 3).
    pub image: Array3<u8>,
    /// Per-pixel labels: 0=NC, 1=GG3, 2=GG4, 3=GG5, 255=unannotated.
    pub annotation: Array2<u8>,
    /// Binary cribriform-pattern mask (0/1).
    pub cribriform: Array2<u8>,
    /// Slide-level ground truth, when known.
    pub score: Option<GleasonScore>,
}

impl Slide {
    pub fn new(
        slide_id: String,
        patient_id: String,
        image: Array3<u8>,
        annotation: Array2<u8>,
        cribriform: Array2<u8>,
        score: Option<GleasonScore>,
    ) -> Result<Slide> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Invalid(format!("slide image must be RGB, got {c} channels")));
        }
        if annotation.dim() != (h, w) || cribriform.dim() != (h, w) {
            return Err(Error::Invalid(format!(
                "raster sizes differ: image {h}x{w}, annotation {:?}, cribriform {:?}",
                annotation.dim(),
                cribriform.dim()
            )));
        }
        if let Some(bad) = annotation
            .iter()
            .find(|v| **v > 3 && **v != UNANNOTATED)
        {
            return Err(Error::Invalid(format!("annotation value {bad} out of range")));
        }
        if cribriform.iter().any(|v| *v > 1) {
            return Err(Error::Invalid("cribriform mask must be binary".into()));
        }
        Ok(Slide {
            slide_id,
            patient_id,
            image,
            annotation,
            cribriform,
            score,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// A slide counts as cancerous when any pixel carries a cancer grade.
    pub fn is_cancerous(&self) -> bool {
        self.annotation.iter().any(|v| (1..=3).contains(v))
    }
}

/// One training-ready window cut from a slide.
#[derive(Clone, Debug)]
pub struct Patch {
    /// RGB, shape (side, side, 3); zero-padded where the window left the slide.
    pub pixels: Array3<u8>,
    /// Window center in slide coordinates (row, col).
    pub center: (usize, usize),
    pub tissue_fraction: f64,
    pub label: Grade,
    pub cribriform: bool,
    pub slide_id: String,
    pub patient_id: String,
}

impl Patch {
    /// Pixels as a (side, side, 3) float tensor scaled to [0, 1].
    pub fn pixels_f32(&self) -> Tensor<f32> {
        self.pixels.mapv(|v| v as f32 / 255.0).into_dyn()
    }
}

// ---------------------------------------------------------------------------
// tissue masking
// ---------------------------------------------------------------------------

/// Per-pixel gray level: truncated integer mean of the three channels.
pub fn gray_histogram(image: &Array3<u8>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in image.rows() {
        let g = (px[0] as u16 + px[1] as u16 + px[2] as u16) / 3;
        hist[g as usize] += 1;
    }
    hist
}

/// Otsu's threshold: the gray level whose split maximizes between-class
/// variance. Among tied maximizers, the floor of their mean.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    let populated = hist.iter().filter(|c| **c > 0).count();
    if populated < 2 {
        return Err(Error::Degenerate("degenerate histogram".into()));
    }
    let weighted: u64 = hist.iter().enumerate().map(|(g, c)| g as u64 * c).sum();
    let mut best = f64::NEG_INFINITY;
    let mut ties: Vec<u64> = Vec::new();
    let mut w0 = 0u64;
    let mut s0 = 0u64;
    for t in 0..256u64 {
        w0 += hist[t as usize];
        s0 += t * hist[t as usize];
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = s0 as f64 / w0 as f64;
        let mu1 = (weighted - s0) as f64 / w1 as f64;
        let variance = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if variance > best {
            best = variance;
            ties.clear();
            ties.push(t);
        } else if variance == best {
            ties.push(t);
        }
    }
    let sum: u64 = ties.iter().sum();
    Ok((sum / ties.len() as u64) as u8)
}

/// True where tissue is present: pixels strictly darker than the Otsu
/// threshold of the slide's gray histogram (stain is darker than glass).
pub fn tissue_mask(image: &Array3<u8>) -> Result<Array2<bool>> {
    let threshold = otsu_threshold(&gray_histogram(image))?;
    let (h, w, _) = image.dim();
    let mut mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let g = (image[[y, x, 0]] as u16 + image[[y, x, 1]] as u16 + image[[y, x, 2]] as u16)
                / 3;
            mask[[y, x]] = (g as u8) < threshold;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// tiling and labeling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TileConfig {
    pub patch_size: usize,
    /// Fractional window overlap; stride = patch_size * (1 - overlap).
    pub overlap: f64,
    /// Windows with a smaller tissue fraction are dropped.
    pub min_tissue: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            patch_size: 512,
            overlap: 0.5,
            min_tissue: 0.2,
        }
    }
}

impl TileConfig {
    pub fn stride(&self) -> usize {
        ((self.patch_size as f64) * (1.0 - self.overlap)).round() as usize
    }
}

/// Labeling outcome for one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelOutcome {
    Label { grade: Grade, cribriform: bool },
    /// Unannotated window on a cancerous slide: not usable for training.
    Discard,
}

/// Majority-grade labeling of an annotation window. Cancer pixels win over
/// everything; ties go to the higher grade. Windows without annotated cancer
/// are NC on benign slides and discarded on cancerous ones. The cribriform
/// flag is set when the label is GG4 and at least 5% of the window's
/// annotated pixels fall in the cribriform mask.
pub fn assign_label(
    annotation: ArrayView2<u8>,
    cribriform: ArrayView2<u8>,
    slide_is_cancerous: bool,
) -> LabelOutcome {
    debug_assert_eq!(annotation.dim(), cribriform.dim());
    let mut grade_counts = [0u64; 3];
    let mut annotated = 0u64;
    let mut crib_annotated = 0u64;
    for (a, c) in annotation.iter().zip(cribriform.iter()) {
        if *a != UNANNOTATED {
            annotated += 1;
            if *c == 1 {
                crib_annotated += 1;
            }
            if (1..=3).contains(a) {
                grade_counts[(*a - 1) as usize] += 1;
            }
        }
    }
    if grade_counts.iter().all(|c| *c == 0) {
        return if slide_is_cancerous {
            LabelOutcome::Discard
        } else {
            LabelOutcome::Label {
                grade: Grade::Nc,
                cribriform: false,
            }
        };
    }
    // ascending scan with >= so equal counts resolve to the higher grade
    let mut grade = Grade::Gg3;
    let mut best = 0;
    for (i, &count) in grade_counts.iter().enumerate() {
        if count >= best {
            best = count;
            grade = Grade::from_index(i + 1).expect("cancer grade");
        }
    }
    let cribriform = grade == Grade::Gg4 && annotated > 0 && crib_annotated * 20 >= annotated;
    LabelOutcome::Label { grade, cribriform }
}

/// Copy the `size`-square window at (r0, c0) out of `image`, filling pixels
/// outside the slide with `fill`.
fn window3(image: &Array3<u8>, r0: isize, c0: isize, size: usize, fill: u8) -> Array3<u8> {
    let (h, w, ch) = image.dim();
    let mut out = Array3::from_elem((size, size, ch), fill);
    for y in 0..size {
        let sy = r0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..size {
            let sx = c0 + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for c in 0..ch {
                out[[y, x, c]] = image[[sy as usize, sx as usize, c]];
            }
        }
    }
    out
}

fn window2(raster: &Array2<u8>, r0: isize, c0: isize, size: usize, fill: u8) -> Array2<u8> {
    let (h, w) = raster.dim();
    let mut out = Array2::from_elem((size, size), fill);
    for y in 0..size {
        let sy = r0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..size {
            let sx = c0 + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            out[[y, x]] = raster[[sy as usize, sx as usize]];
        }
    }
    out
}

/// Cut a slide into overlapping labeled patches. Windows under the tissue
/// floor or without usable labels are dropped. A slide smaller than the
/// patch size yields a single centered, zero-padded window.
pub fn tile_slide(slide: &Slide, cfg: &TileConfig) -> Result<Vec<Patch>> {
    if cfg.patch_size == 0 {
        return Err(Error::Invalid("patch_size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Invalid(format!("overlap {} outside [0, 1)", cfg.overlap)));
    }
    let stride = cfg.stride();
    if stride == 0 {
        return Err(Error::Invalid("overlap too close to 1: zero stride".into()));
    }
    let mask = tissue_mask(&slide.image)?;
    let cancerous = slide.is_cancerous();
    let (h, w) = (slide.height(), slide.width());
    let p = cfg.patch_size;

    let origins: Vec<(isize, isize)> = if h < p || w < p {
        vec![(
            (h as isize - p as isize) / 2,
            (w as isize - p as isize) / 2,
        )]
    } else {
        let mut v = Vec::new();
        let mut r = 0;
        while r + p <= h {
            let mut c = 0;
            while c + p <= w {
                v.push((r as isize, c as isize));
                c += stride;
            }
            r += stride;
        }
        v
    };

    let mut patches = Vec::new();
    for (r0, c0) in origins {
        let mut tissue = 0u64;
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
                if mask[[sy as usize, sx as usize]] {
                    tissue += 1;
                }
            }
        }
        let tissue_fraction = tissue as f64 / (p * p) as f64;
        if tissue_fraction < cfg.min_tissue {
            continue;
        }
        let ann = window2(&slide.annotation, r0, c0, p, UNANNOTATED);
        let crib = window2(&slide.cribriform, r0, c0, p, 0);
        let (grade, cribriform) = match assign_label(ann.view(), crib.view(), cancerous) {
            LabelOutcome::Discard => continue,
            LabelOutcome::Label { grade, cribriform } => (grade, cribriform),
        };
        let center = (
            (r0 + p as isize / 2).max(0) as usize,
            (c0 + p as isize / 2).max(0) as usize,
        );
        patches.push(Patch {
            pixels: window3(&slide.image, r0, c0, p, 0),
            center,
            tissue_fraction,
            label: grade,
            cribriform,
            slide_id: slide.slide_id.clone(),
            patient_id: slide.patient_id.clone(),
        });
    }
    Ok(patches)
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Rotate an (H, W, C) raster by k*90 degrees counterclockwise.
pub fn rotate90(image: &Array3<u8>, k: usize) -> Array3<u8> {
    let mut out = image.clone();
    for _ in 0..(k % 4) {
        let (h, w, c) = out.dim();
        let mut next = Array3::zeros((w, h, c));
        for y in 0..w {
            for x in 0..h {
                for ch in 0..c {
                    next[[y, x, ch]] = out[[x, w - 1 - y, ch]];
                }
            }
        }
        out = next;
    }
    out
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Shift content by (dy, dx), mirroring at the borders (edge duplicated).
pub fn translate_reflect(image: &Array3<u8>, dy: isize, dx: isize) -> Array3<u8> {
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        let sy = reflect(y as isize - dy, h);
        for x in 0..w {
            let sx = reflect(x as isize - dx, w);
            for ch in 0..c {
                out[[y, x, ch]] = image[[sy, sx, ch]];
            }
        }
    }
    out
}

/// Random 90-degree rotation and translation up to 10% of the side (reflect
/// fill), plus a multiplicative brightness factor in [0.9, 1.1] when asked.
/// Draw order is fixed: rotation, dy, dx, then brightness.
pub fn augment(patch: &Patch, rng: &mut ChaCha8Rng, include_brightness: bool) -> Patch {
    let side = patch.pixels.dim().0;
    let k = rng.gen_range(0..4usize);
    let max_t = (side as f64 * 0.1).floor() as isize;
    let dy = rng.gen_range(-max_t..=max_t);
    let dx = rng.gen_range(-max_t..=max_t);
    let mut pixels = translate_reflect(&rotate90(&patch.pixels, k), dy, dx);
    if include_brightness {
        let factor = rng.gen_range(0.9..=1.1);
        pixels.mapv_inplace(|v| ((v as f64 * factor).round().clamp(0.0, 255.0)) as u8);
    }
    Patch {
        pixels,
        ..patch.clone()
    }
}

// ---------------------------------------------------------------------------
// resizing
// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centers: source coordinate of output
/// pixel d is (d + 0.5) * (src/dst) - 0.5, clamped at the edges.
pub fn resize_bilinear(image: &Array3<u8>, target_h: usize, target_w: usize) -> Array3<u8> {
    let (h, w, c) = image.dim();
    assert!(target_h > 0 && target_w > 0, "target size must be positive");
    let scale_y = h as f64 / target_h as f64;
    let scale_x = w as f64 / target_w as f64;
    let mut out = Array3::zeros((target_h, target_w, c));
    for y in 0..target_h {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..target_w {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = image[[y0, x0, ch]] as f64;
                let v01 = image[[y0, x1, ch]] as f64;
                let v10 = image[[y1, x0, ch]] as f64;
                let v11 = image[[y1, x1, ch]] as f64;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bottom = v10 * (1.0 - fx) + v11 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[[y, x, ch]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Resize a patch's pixels to a square side, keeping its metadata.
pub fn resize_patch(patch: &Patch, target: usize) -> Patch {
    Patch {
        pixels: resize_bilinear(&patch.pixels, target, target),
        ..patch.clone()
    }
}

// ---------------------------------------------------------------------------
// stain normalization
// ---------------------------------------------------------------------------

/// Channel-wise histogram matching: each source intensity maps to the
/// smallest reference intensity whose CDF reaches the source's CDF. The
/// comparison is done in exact integer arithmetic.
pub fn histogram_match(source: &Array3<u8>, reference: &Array3<u8>) -> Array3<u8> {
    let (h, w, c) = source.dim();
    assert_eq!(c, reference.dim().2, "channel counts must agree");
    let n_src = (h * w) as u64;
    let n_ref = (reference.dim().0 * reference.dim().1) as u64;
    let mut out = source.clone();
    for ch in 0..c {
        let mut hist_src = [0u64; 256];
        for px in source.index_axis(Axis(2), ch).iter() {
            hist_src[*px as usize] += 1;
        }
        let mut hist_ref = [0u64; 256];
        for px in reference.index_axis(Axis(2), ch).iter() {
            hist_ref[*px as usize] += 1;
        }
        let mut cum_src = [0u64; 256];
        let mut cum_ref = [0u64; 256];
        let (mut a, mut b) = (0u64, 0u64);
        for v in 0..256 {
            a += hist_src[v];
            b += hist_ref[v];
            cum_src[v] = a;
            cum_ref[v] = b;
        }
        // cdf_ref(u) >= cdf_src(v)  <=>  cum_ref[u] * n_src >= cum_src[v] * n_ref
        let mut lut = [0u8; 256];
        let mut u = 0usize;
        for v in 0..256 {
            while u < 255 && cum_ref[u] * n_src < cum_src[v] * n_ref {
                u += 1;
            }
            lut[v] = u as u8;
        }
        for px in out.index_axis_mut(Axis(2), ch).iter_mut() {
            *px = lut[*px as usize];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// fold assignment
// ---------------------------------------------------------------------------

/// Patient-exclusive fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    n_folds: usize,
    map: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.map.get(patient_id).copied()
    }

    pub fn patients(&self) -> impl Iterator<Item = (&str, usize)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Greedy balanced assignment: patients (largest first, seeded shuffle
/// breaking ties) go to the fold that minimizes the sum of squared
/// per-class patch counts.
pub fn make_folds(patches: &[Patch], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds == 0 {
        return Err(Error::Invalid("need at least one fold".into()));
    }
    let mut per_patient: BTreeMap<&str, [u64; 4]> = BTreeMap::new();
    for patch in patches {
        per_patient.entry(&patch.patient_id).or_default()[patch.label.index()] += 1;
    }
    if per_patient.len() < n_folds {
        return Err(Error::Invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            per_patient.len()
        )));
    }
    let mut order: Vec<(&str, [u64; 4])> = per_patient.into_iter().collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    // stable: equal totals keep their shuffled order
    order.sort_by_key(|(_, counts)| std::cmp::Reverse(counts.iter().sum::<u64>()));

    let mut fold_counts = vec![[0u64; 4]; n_folds];
    let mut filled = vec![false; n_folds];
    let mut map = BTreeMap::new();
    for (patient, counts) in order {
        let mut best_fold = 0;
        let mut best_cost = u64::MAX;
        for f in 0..n_folds {
            // an empty fold always takes priority so every fold is used
            let cost = if !filled[f] {
                0
            } else {
                (0..4)
                    .map(|c| {
                        let t = fold_counts[f][c] + counts[c];
                        t * t
                    })
                    .sum()
            };
            if cost < best_cost {
                best_cost = cost;
                best_fold = f;
            }
        }
        filled[best_fold] = true;
        for c in 0..4 {
            fold_counts[best_fold][c] += counts[c];
        }
        map.insert(patient.to_string(), best_fold);
    }
    Ok(FoldAssignment { n_folds, map })
}

use rand::SeedableRng;

// ---------------------------------------------------------------------------
// slide bundle I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SlideMeta {
    patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<GleasonScore>,
}

impl Slide {
    /// Write the bundle `<dir>/{image,annotation,cribriform}.png` + meta.json.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (h, w) = (self.height() as u32, self.width() as u32);
        let rgb = image::RgbImage::from_raw(
            w,
            h,
            self.image.as_slice().expect("standard layout").to_vec(),
        )
        .expect("sizes agree");
        rgb.save(dir.join("image.png"))?;
        let ann = image::GrayImage::from_raw(
            w,
            h,
            self.annotation.as_slice().expect("standard layout").to_vec(),
        )
        .expect("sizes agree");
        ann.save(dir.join("annotation.png"))?;
        let crib_px: Vec<u8> = self.cribriform.iter().map(|v| v * 255).collect();
        let crib = image::GrayImage::from_raw(w, h, crib_px).expect("sizes agree");
        crib.save(dir.join("cribriform.png"))?;
        let meta = SlideMeta {
            patient_id: self.patient_id.clone(),
            score: self.score,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Read a bundle written by `save_dir`; the slide id is the directory name.
    pub fn load_dir(dir: &Path) -> Result<Slide> {
        let slide_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad slide directory {}", dir.display())))?
            .to_string();
        let rgb = image::open(dir.join("image.png"))?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let image = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
            .expect("sizes agree");
        let ann = image::open(dir.join("annotation.png"))?.to_luma8();
        let annotation = Array2::from_shape_vec((h as usize, w as usize), ann.into_raw())
            .map_err(|_| Error::Invalid("annotation size differs from image".into()))?;
        let crib = image::open(dir.join("cribriform.png"))?.to_luma8();
        let cribriform = Array2::from_shape_vec((h as usize, w as usize), crib.into_raw())
            .map_err(|_| Error::Invalid("cribriform size differs from image".into()))?
            .mapv(|v| u8::from(v > 0));
        let meta: SlideMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        Slide::new(slide_id, meta.patient_id, image, annotation, cribriform, meta.score)
    }
}
