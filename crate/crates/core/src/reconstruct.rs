//! Slide-level reconstruction: patch probabilities are interpolated back
//! into per-pixel probability maps, collapsed to a class raster, and summed
//! into grade percentages over tissue.
//!
//! Patch centers must form a complete rectilinear grid (the tiling stride
//! guarantees this). Every pixel is the bilinear blend of the four
//! surrounding grid centers; pixels outside the outermost centers clamp to
//! the nearest edge. Probabilities are renormalized per pixel so the four
//! classes sum to one.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::types::{Grade, GradePercentages};

/// One tiled patch's predicted class distribution, keyed by its center pixel.
#[derive(Clone, Copy, Debug)]
pub struct PatchPrediction {
    pub center: (usize, usize),
    pub probabilities: [f64; 4],
}

impl PatchPrediction {
    /// Validates that the probabilities are non-negative and sum to 1
    /// within 1e-6.
    pub fn new(center: (usize, usize), probabilities: [f64; 4]) -> Result<Self> {
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid(
                "patch probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "patch probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(PatchPrediction {
            center,
            probabilities,
        })
    }
}

/// Per-class probability rasters plus the tissue mask they were built for.
#[derive(Clone, Debug)]
pub struct ProbabilityMap {
    /// (4, H, W), classes in `Grade::ALL` order.
    classes: Array3<f64>,
    tissue: Array2<bool>,
}

impl ProbabilityMap {
    pub fn class(&self, grade: Grade) -> ArrayView2<'_, f64> {
        self.classes.index_axis(Axis(0), grade.index())
    }

    pub fn classes(&self) -> &Array3<f64> {
        &self.classes
    }

    pub fn tissue(&self) -> &Array2<bool> {
        &self.tissue
    }

    pub fn height(&self) -> usize {
        self.classes.dim().1
    }

    pub fn width(&self) -> usize {
        self.classes.dim().2
    }
}

/// Locates the grid segment containing `q` and the fractional offset into
/// it. Coordinates outside the grid clamp to the nearest end.
fn segment(coords: &[usize], q: usize) -> (usize, usize, f64) {
    if q <= coords[0] {
        return (0, 0, 0.0);
    }
    let last = coords.len() - 1;
    if q >= coords[last] {
        return (last, last, 0.0);
    }
    let hi = coords.partition_point(|c| *c <= q);
    let lo = hi - 1;
    let f = (q - coords[lo]) as f64 / (coords[hi] - coords[lo]) as f64;
    (lo, hi, f)
}

/// Bilinearly interpolates patch predictions over the full slide raster.
///
/// The predictions must cover a complete grid: every combination of the
/// distinct center rows and center columns appears exactly once.
pub fn probability_map(
    predictions: &[PatchPrediction],
    dims: (usize, usize),
    tissue: &Array2<bool>,
) -> Result<ProbabilityMap> {
    let (height, width) = dims;
    if predictions.is_empty() {
        return Err(Error::Invalid("no patch predictions to interpolate".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Invalid("slide dimensions must be positive".into()));
    }
    if tissue.dim() != (height, width) {
        return Err(Error::Invalid(format!(
            "tissue mask is {:?}, slide is {:?}",
            tissue.dim(),
            dims
        )));
    }

    let mut grid: BTreeMap<(usize, usize), [f64; 4]> = BTreeMap::new();
    for p in predictions {
        if p.center.0 >= height || p.center.1 >= width {
            return Err(Error::Invalid(format!(
                "patch center {:?} lies outside the {dims:?} slide",
                p.center
            )));
        }
        if grid.insert(p.center, p.probabilities).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate patch center {:?}",
                p.center
            )));
        }
    }

    let mut rows: Vec<usize> = grid.keys().map(|(r, _)| *r).collect();
    rows.dedup();
    let mut cols: Vec<usize> = grid.keys().map(|(_, c)| *c).collect();
    cols.sort_unstable();
    cols.dedup();
    if grid.len() != rows.len() * cols.len() {
        return Err(Error::Invalid(format!(
            "patch centers do not form a complete {}x{} grid",
            rows.len(),
            cols.len()
        )));
    }
    let mut vectors = Array3::<f64>::zeros((rows.len(), cols.len(), 4));
    for (ri, r) in rows.iter().enumerate() {
        for (ci, c) in cols.iter().enumerate() {
            let probs = grid.get(&(*r, *c)).ok_or_else(|| {
                Error::Invalid(format!(
                    "patch centers do not form a complete grid: missing ({r}, {c})"
                ))
            })?;
            for k in 0..4 {
                vectors[[ri, ci, k]] = probs[k];
            }
        }
    }

    let mut classes = Array3::<f64>::zeros((4, height, width));
    for y in 0..height {
        let (r0, r1, fy) = segment(&rows, y);
        for x in 0..width {
            let (c0, c1, fx) = segment(&cols, x);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let mut blended = [0.0f64; 4];
            for (k, b) in blended.iter_mut().enumerate() {
                *b = w00 * vectors[[r0, c0, k]]
                    + w01 * vectors[[r0, c1, k]]
                    + w10 * vectors[[r1, c0, k]]
                    + w11 * vectors[[r1, c1, k]];
            }
            let sum: f64 = blended.iter().sum();
            if sum <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "interpolated probabilities vanish at pixel ({y}, {x})"
                )));
            }
            for (k, b) in blended.iter().enumerate() {
                classes[[k, y, x]] = b / sum;
            }
        }
    }

    Ok(ProbabilityMap {
        classes,
        tissue: tissue.clone(),
    })
}

/// Collapses a probability map into the per-pixel winning grade. Ties break
/// toward the higher grade.
pub fn argmax_map(map: &ProbabilityMap) -> Array2<Grade> {
    let (_, height, width) = map.classes.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let mut best = Grade::Nc;
        let mut best_p = f64::NEG_INFINITY;
        for grade in Grade::ALL {
            let p = map.classes[[grade.index(), y, x]];
            if p >= best_p {
                best_p = p;
                best = grade;
            }
        }
        best
    })
}

/// Fraction of tissue pixels assigned to each grade.
pub fn grade_percentages(
    classes: &Array2<Grade>,
    tissue: &Array2<bool>,
) -> Result<GradePercentages> {
    if classes.dim() != tissue.dim() {
        return Err(Error::Invalid(format!(
            "class raster is {:?}, tissue mask is {:?}",
            classes.dim(),
            tissue.dim()
        )));
    }
    let mut counts = [0u64; 4];
    let mut total = 0u64;
    for (grade, in_tissue) in classes.iter().zip(tissue.iter()) {
        if *in_tissue {
            counts[grade.index()] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Degenerate(
            "tissue mask is empty, grade percentages are undefined".into(),
        ));
    }
    let f = |i: usize| counts[i] as f64 / total as f64;
    GradePercentages::new(f(0), f(1), f(2), f(3))
}

/// Display color for a grade in the class map.
pub fn grade_color(grade: Grade) -> [u8; 3] {
    match grade {
        Grade::Nc => [211, 211, 211],
        Grade::Gg3 => [0, 153, 51],
        Grade::Gg4 => [30, 90, 220],
        Grade::Gg5 => [204, 0, 0],
    }
}

/// Display color for pixels outside the tissue mask.
pub const NON_TISSUE_COLOR: [u8; 3] = [255, 255, 255];

/// Writes one class's probability raster as an 8-bit grayscale PNG
/// (probability scaled by 255).
pub fn write_probability_png(map: &ProbabilityMap, grade: Grade, path: &Path) -> Result<()> {
    let raster = map.class(grade);
    let (height, width) = raster.dim();
    let mut img = GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let v = (raster[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes the class raster as a palette PNG: grades use `grade_color`,
/// non-tissue pixels render white.
pub fn write_classmap_png(
    classes: &Array2<Grade>,
    tissue: &Array2<bool>,
    path: &Path,
) -> Result<()> {
    if classes.dim() != tissue.dim() {
        return Err(Error::Invalid(format!(
            "class raster is {:?}, tissue mask is {:?}",
            classes.dim(),
            tissue.dim()
        )));
    }
    let (height, width) = classes.dim();
    let mut img = RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let rgb = if tissue[[y, x]] {
                grade_color(classes[[y, x]])
            } else {
                NON_TISSUE_COLOR
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img.save(path)?;
    Ok(())
}
