//! Synthetic slide and patch generation.
//!
//! Every texture is a pure function of `(seed, y, x)`, so a spec and a seed
//! pin each slide byte-for-byte. The five tissue textures are separable by
//! construction — each grade gets a distinct base gray plus a distinct
//! dominant spatial pattern:
//!
//! * non-cancerous: bright smooth mottle,
//! * GG3: mid-gray diagonal stripes,
//! * GG4: dark dotted lattice,
//! * GG4 cribriform: dark sieve walls around bright lumen holes,
//! * GG5: very dark high-frequency speckle.
//!
//! Slides paint one elliptical tissue blob on a near-white background. Score
//! classes with two grades split the ellipse by exact pixel area, primary
//! 60 / secondary 40, so the declared primary area is never smaller than the
//! secondary. Grade-4 regions are further split into a plain half and a
//! cribriform half so every GG4-bearing slide trains both detector classes.
//! Lumen holes inside cribriform regions render bright and are declared
//! non-tissue and unannotated; the surrounding sieve walls carry the GG4
//! label and the cribriform mask.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gleason_core::patchwork::{Patch, Slide, UNANNOTATED};
use gleason_core::types::{GleasonScore, GradePercentages};
use gleason_core::{Error, Grade, Result};

/// Base gray levels per texture; the gaps between them are what make the
/// classes separable at a glance (and by a small network).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureParams {
    pub background_gray: u8,
    pub nc_gray: u8,
    pub gg3_gray: u8,
    pub gg4_gray: u8,
    pub gg5_gray: u8,
    /// Lumen holes inside cribriform regions.
    pub hole_gray: u8,
}

impl Default for TextureParams {
    fn default() -> TextureParams {
        TextureParams {
            background_gray: 250,
            nc_gray: 205,
            gg3_gray: 160,
            gg4_gray: 120,
            gg5_gray: 72,
            hole_gray: 240,
        }
    }
}

/// What to generate: how many slides of each score class, their size, the
/// texture palette, and the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub slides_per_class: usize,
    pub slide_height: usize,
    pub slide_width: usize,
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        // Two slides per class so every grade (and the benign class) spans
        // at least two patients; a held-out fold then never starves a class.
        SynthSpec {
            slides_per_class: 2,
            slide_height: 640,
            slide_width: 640,
            texture: TextureParams::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slides_per_class == 0 {
            return Err(Error::Invalid("spec generates zero slides".into()));
        }
        if self.slide_height < 64 || self.slide_width < 64 {
            return Err(Error::Invalid(format!(
                "slides must be at least 64x64, got {}x{}",
                self.slide_height, self.slide_width
            )));
        }
        Ok(())
    }
}

/// The generated score classes, mirroring the class structure of a grading
/// dataset: benign plus the six clinically distinct grade pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreClass {
    Benign,
    G3Plus3,
    G3Plus4,
    G4Plus3,
    G4Plus4,
    G4Plus5,
    G5Plus5,
}

impl ScoreClass {
    pub const ALL: [ScoreClass; 7] = [
        ScoreClass::Benign,
        ScoreClass::G3Plus3,
        ScoreClass::G3Plus4,
        ScoreClass::G4Plus3,
        ScoreClass::G4Plus4,
        ScoreClass::G4Plus5,
        ScoreClass::G5Plus5,
    ];

    /// Path-safe identifier used in slide and patient ids.
    pub fn slug(self) -> &'static str {
        match self {
            ScoreClass::Benign => "nc",
            ScoreClass::G3Plus3 => "3_3",
            ScoreClass::G3Plus4 => "3_4",
            ScoreClass::G4Plus3 => "4_3",
            ScoreClass::G4Plus4 => "4_4",
            ScoreClass::G4Plus5 => "4_5",
            ScoreClass::G5Plus5 => "5_5",
        }
    }

    /// Primary and secondary painted grades; `None` for benign slides.
    pub fn grades(self) -> Option<(Grade, Grade)> {
        match self {
            ScoreClass::Benign => None,
            ScoreClass::G3Plus3 => Some((Grade::Gg3, Grade::Gg3)),
            ScoreClass::G3Plus4 => Some((Grade::Gg3, Grade::Gg4)),
            ScoreClass::G4Plus3 => Some((Grade::Gg4, Grade::Gg3)),
            ScoreClass::G4Plus4 => Some((Grade::Gg4, Grade::Gg4)),
            ScoreClass::G4Plus5 => Some((Grade::Gg4, Grade::Gg5)),
            ScoreClass::G5Plus5 => Some((Grade::Gg5, Grade::Gg5)),
        }
    }

    pub fn score(self) -> GleasonScore {
        match self.grades() {
            None => GleasonScore::benign(),
            Some((p, s)) => GleasonScore::combine(p, s),
        }
    }
}

// ---------------------------------------------------------------------------
// deterministic pixel hash
// ---------------------------------------------------------------------------

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Position hash: pure in (seed, y, x).
fn hash2(seed: u64, y: usize, x: usize) -> u64 {
    mix(mix(seed ^ (y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ (x as u64))
}

/// Uniform integer in [-amplitude, amplitude] from the position hash.
fn jitter(seed: u64, y: usize, x: usize, amplitude: i32) -> i32 {
    if amplitude == 0 {
        return 0;
    }
    (hash2(seed, y, x) % (2 * amplitude as u64 + 1)) as i32 - amplitude
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// Turn a gray level into a slightly warm RGB triple, preserving ordering.
fn tint(gray: u8) -> [u8; 3] {
    let g = gray as i32;
    [clamp_u8(g), clamp_u8(g * 7 / 8 + 8), clamp_u8(g * 13 / 16 + 12)]
}

// ---------------------------------------------------------------------------
// textures
// ---------------------------------------------------------------------------

/// True at cribriform lumen holes: a round hole on an 8-pixel lattice.
fn in_hole(y: usize, x: usize) -> bool {
    let dy = y % 8;
    let dx = x % 8;
    let ry = dy as i32 - 4;
    let rx = dx as i32 - 4;
    ry * ry + rx * rx <= 4
}

/// Tissue gray at a point of the infinite texture plane for one grade.
fn grade_gray(t: &TextureParams, grade: Grade, cribriform: bool, seed: u64, y: usize, x: usize) -> u8 {
    let base = match grade {
        Grade::Nc => t.nc_gray as i32,
        Grade::Gg3 => t.gg3_gray as i32,
        Grade::Gg4 => t.gg4_gray as i32,
        Grade::Gg5 => t.gg5_gray as i32,
    };
    match grade {
        // smooth low-frequency mottle
        Grade::Nc => {
            let wave = 10.0 * ((y as f64 / 9.0).sin() * (x as f64 / 11.0).sin());
            clamp_u8(base + wave.round() as i32 + jitter(seed, y, x, 3))
        }
        // diagonal stripes, period 12
        Grade::Gg3 => {
            let band = if (y + 2 * x) % 12 < 6 { 12 } else { -12 };
            clamp_u8(base + band + jitter(seed, y, x, 4))
        }
        Grade::Gg4 => {
            if cribriform {
                // sieve walls; the holes themselves are painted by the caller
                clamp_u8(base - 8 + jitter(seed, y, x, 5))
            } else {
                // dark nuclei dots on a 9-pixel lattice
                let dot = y % 9 < 3 && x % 9 < 3;
                let level = if dot { base - 20 } else { base + 8 };
                clamp_u8(level + jitter(seed, y, x, 4))
            }
        }
        // dense high-frequency speckle
        Grade::Gg5 => clamp_u8(base + jitter(seed, y, x, 24)),
    }
}

fn background_gray(t: &TextureParams, seed: u64, y: usize, x: usize) -> u8 {
    clamp_u8(t.background_gray as i32 + jitter(seed, y, x, 2))
}

// ---------------------------------------------------------------------------
// slide painting
// ---------------------------------------------------------------------------

/// A generated slide together with its generator-declared ground truth.
#[derive(Clone, Debug)]
pub struct SynthSlide {
    pub slide: Slide,
    pub class: ScoreClass,
    /// Pixels the generator painted as (dark) tissue.
    pub tissue_truth: Array2<bool>,
    /// Painted pixel counts per grade, indexed by `Grade::index`.
    pub grade_areas: [usize; 4],
}

fn ellipse_mask(h: usize, w: usize) -> Array2<bool> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let ry = 0.42 * h as f64;
    let rx = 0.42 * w as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

/// Column index splitting `mask` so the left part holds `frac` of its area
/// (left part is always the larger for frac >= 0.5).
fn column_split(mask: &Array2<bool>, frac: f64) -> usize {
    let (h, w) = mask.dim();
    let total: usize = mask.iter().filter(|&&m| m).count();
    let want = (total as f64 * frac).ceil() as usize;
    let mut seen = 0usize;
    for x in 0..w {
        for y in 0..h {
            if mask[[y, x]] {
                seen += 1;
            }
        }
        if seen >= want {
            return x + 1;
        }
    }
    w
}

/// Row index splitting the region where `select` is true into equal halves.
fn row_split(mask: &Array2<bool>, select: impl Fn(usize, usize) -> bool) -> usize {
    let (h, w) = mask.dim();
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] && select(y, x) {
                total += 1;
            }
        }
    }
    let want = total.div_ceil(2);
    let mut seen = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] && select(y, x) {
                seen += 1;
            }
        }
        if seen >= want {
            return y + 1;
        }
    }
    h
}

/// Paint one slide of the given class.
pub fn generate_slide(spec: &SynthSpec, class: ScoreClass, index: usize) -> Result<SynthSlide> {
    spec.validate()?;
    let (h, w) = (spec.slide_height, spec.slide_width);
    let t = &spec.texture;
    let class_idx = ScoreClass::ALL.iter().position(|c| *c == class).unwrap();
    let seed = mix(spec.seed ^ mix(class_idx as u64 * 1009 + index as u64));

    let ellipse = ellipse_mask(h, w);
    let mut image = Array3::<u8>::zeros((h, w, 3));
    let mut annotation = Array2::<u8>::from_elem((h, w), UNANNOTATED);
    let mut cribriform = Array2::<u8>::zeros((h, w));
    let mut tissue_truth = Array2::<bool>::from_elem((h, w), false);
    let mut grade_areas = [0usize; 4];

    // Region layout: primary left of x_split, secondary right; grade-4
    // regions split at a row into a plain top and a cribriform bottom.
    let grades = class.grades();
    let x_split = match grades {
        Some((p, s)) if p != s => column_split(&ellipse, 0.6),
        _ => w, // single texture fills the ellipse
    };
    let crib_rows: Option<(usize, usize)> = grades.map(|(p, s)| {
        let py = if p == Grade::Gg4 {
            row_split(&ellipse, |_, x| x < x_split)
        } else {
            h
        };
        let sy = if s == Grade::Gg4 && p != s {
            row_split(&ellipse, |_, x| x >= x_split)
        } else if p == Grade::Gg4 && p == s {
            py
        } else {
            h
        };
        (py, sy)
    });

    for y in 0..h {
        for x in 0..w {
            if !ellipse[[y, x]] {
                let px = tint(background_gray(t, seed, y, x));
                for c in 0..3 {
                    image[[y, x, c]] = px[c];
                }
                continue;
            }
            let (grade, crib) = match grades {
                None => (Grade::Nc, false),
                Some((p, s)) => {
                    let primary_side = x < x_split;
                    let g = if primary_side { p } else { s };
                    let (py, sy) = crib_rows.unwrap();
                    let crib = g == Grade::Gg4 && y >= if primary_side { py } else { sy };
                    (g, crib)
                }
            };

            if crib && in_hole(y, x) {
                // lumen: bright, unannotated, not tissue
                let px = tint(clamp_u8(t.hole_gray as i32 + jitter(seed, y, x, 3)));
                for c in 0..3 {
                    image[[y, x, c]] = px[c];
                }
                continue;
            }

            let px = tint(grade_gray(t, grade, crib, seed, y, x));
            for c in 0..3 {
                image[[y, x, c]] = px[c];
            }
            tissue_truth[[y, x]] = true;
            grade_areas[grade.index()] += 1;
            if grades.is_some() {
                annotation[[y, x]] = grade.index() as u8;
                if crib {
                    cribriform[[y, x]] = 1;
                }
            }
        }
    }

    let slug = class.slug();
    let slide = Slide::new(
        format!("slide-{slug}-{index:02}"),
        format!("patient-{slug}-{index:02}"),
        image,
        annotation,
        cribriform,
        Some(class.score()),
    )?;
    Ok(SynthSlide {
        slide,
        class,
        tissue_truth,
        grade_areas,
    })
}

/// Generate the whole corpus: `slides_per_class` slides for each of the
/// seven score classes, one patient per slide.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSlide>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(ScoreClass::ALL.len() * spec.slides_per_class);
    for class in ScoreClass::ALL {
        for k in 0..spec.slides_per_class {
            out.push(generate_slide(spec, class, k)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// standalone patch sets (training-scale fixtures)
// ---------------------------------------------------------------------------

/// Patches of pure grade texture, `per_class` for each of the four grades.
/// Each patch samples a different window of the texture plane.
pub fn patch_set(per_class: usize, side: usize, seed: u64) -> Vec<Patch> {
    let t = TextureParams::default();
    let mut out = Vec::with_capacity(per_class * 4);
    for grade in Grade::ALL {
        for i in 0..per_class {
            let h = mix(seed ^ mix(grade.index() as u64 * 7919 + i as u64));
            let (oy, ox) = ((h % 512) as usize, ((h >> 32) % 512) as usize);
            let mut pixels = Array3::<u8>::zeros((side, side, 3));
            for y in 0..side {
                for x in 0..side {
                    let px = tint(grade_gray(&t, grade, false, h, oy + y, ox + x));
                    for c in 0..3 {
                        pixels[[y, x, c]] = px[c];
                    }
                }
            }
            out.push(Patch {
                pixels,
                center: (side / 2, side / 2),
                tissue_fraction: 1.0,
                label: grade,
                cribriform: false,
                slide_id: format!("synth-{}-{i:04}", grade.label()),
                patient_id: format!("synth-patient-{:02}", i % 16),
            });
        }
    }
    out
}

/// GG4 patches for the cribriform task: `per_class` plain and `per_class`
/// cribriform (sieve walls with bright lumen holes).
pub fn cribriform_set(per_class: usize, side: usize, seed: u64) -> Vec<Patch> {
    let t = TextureParams::default();
    let mut out = Vec::with_capacity(per_class * 2);
    for (variant, crib) in [(0u64, false), (1, true)] {
        for i in 0..per_class {
            let h = mix(seed ^ mix(variant * 104_729 + i as u64));
            let (oy, ox) = ((h % 512) as usize, ((h >> 32) % 512) as usize);
            let mut pixels = Array3::<u8>::zeros((side, side, 3));
            for y in 0..side {
                for x in 0..side {
                    let (py, px_) = (oy + y, ox + x);
                    let gray = if crib && in_hole(py, px_) {
                        clamp_u8(t.hole_gray as i32 + jitter(h, py, px_, 3))
                    } else {
                        grade_gray(&t, Grade::Gg4, crib, h, py, px_)
                    };
                    let px = tint(gray);
                    for c in 0..3 {
                        pixels[[y, x, c]] = px[c];
                    }
                }
            }
            out.push(Patch {
                pixels,
                center: (side / 2, side / 2),
                tissue_fraction: 1.0,
                label: Grade::Gg4,
                cribriform: crib,
                slide_id: format!("synth-gg4{}-{i:04}", if crib { "c" } else { "p" }),
                patient_id: format!("synth-patient-{:02}", i % 16),
            });
        }
    }
    out
}

/// Random grade-percentage vectors for teaching the scorer: a deterministic
/// mix of Dirichlet-style draws and sparse near-pure compositions.
pub fn percentage_vectors(count: usize, seed: u64) -> Vec<GradePercentages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let sparse = i % 4 == 0;
        let mut parts = [0.0f64; 4];
        for p in parts.iter_mut() {
            // exponential draws normalize to a uniform simplex sample;
            // squaring (sparse rounds) pushes mass onto fewer classes
            let e = -(1.0 - rng.gen::<f64>()).ln();
            *p = if sparse { e * e } else { e };
        }
        let sum: f64 = parts.iter().sum();
        out.push(
            GradePercentages::new(
                parts[0] / sum,
                parts[1] / sum,
                parts[2] / sum,
                parts[3] / sum,
            )
            .expect("normalized simplex point"),
        );
    }
    out
}
