//! Grades, slide-level scores, and tissue composition — the labels the whole
//! pipeline passes around.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Patch-level class: non-cancerous tissue or one of the cancerous grades.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "GG3")]
    Gg3,
    #[serde(rename = "GG4")]
    Gg4,
    #[serde(rename = "GG5")]
    Gg5,
}

impl Grade {
    pub const ALL: [Grade; 4] = [Grade::Nc, Grade::Gg3, Grade::Gg4, Grade::Gg5];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Grade::Nc => 0,
            Grade::Gg3 => 1,
            Grade::Gg4 => 2,
            Grade::Gg5 => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Grade::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Grade::Nc => "NC",
            Grade::Gg3 => "GG3",
            Grade::Gg4 => "GG4",
            Grade::Gg5 => "GG5",
        }
    }

    /// Gleason grade number; 0 for non-cancerous.
    pub fn number(self) -> u8 {
        match self {
            Grade::Nc => 0,
            Grade::Gg3 => 3,
            Grade::Gg4 => 4,
            Grade::Gg5 => 5,
        }
    }

    pub fn is_cancerous(self) -> bool {
        self != Grade::Nc
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Slide-level Gleason score. `combined` is primary + secondary grade numbers,
/// or the sentinel 0 for a benign slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GleasonScore {
    pub primary: Grade,
    pub secondary: Grade,
    pub combined: u8,
}

impl GleasonScore {
    /// Combine primary and secondary grades into a slide score.
    ///
    /// A non-cancerous primary yields the benign score regardless of the
    /// secondary; a non-cancerous secondary under a cancerous primary is
    /// coerced to the primary (pure-pattern slide).
    pub fn combine(primary: Grade, secondary: Grade) -> GleasonScore {
        if primary == Grade::Nc {
            return GleasonScore {
                primary: Grade::Nc,
                secondary: Grade::Nc,
                combined: 0,
            };
        }
        let secondary = if secondary == Grade::Nc { primary } else { secondary };
        GleasonScore {
            primary,
            secondary,
            combined: primary.number() + secondary.number(),
        }
    }

    pub fn benign() -> GleasonScore {
        GleasonScore::combine(Grade::Nc, Grade::Nc)
    }
}

impl fmt::Display for GleasonScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.primary == Grade::Nc {
            f.write_str("NC")
        } else {
            write!(
                f,
                "{}+{}={}",
                self.primary.number(),
                self.secondary.number(),
                self.combined
            )
        }
    }
}

/// Fraction of tissue area assigned to each class. Fractions are taken over
/// tissue pixels only, so they sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradePercentages {
    #[serde(rename = "NC")]
    pub nc: f64,
    #[serde(rename = "GG3")]
    pub gg3: f64,
    #[serde(rename = "GG4")]
    pub gg4: f64,
    #[serde(rename = "GG5")]
    pub gg5: f64,
}

impl GradePercentages {
    pub fn new(nc: f64, gg3: f64, gg4: f64, gg5: f64) -> Result<GradePercentages> {
        let p = GradePercentages { nc, gg3, gg4, gg5 };
        let sum: f64 = p.as_array().iter().sum();
        if p.as_array().iter().any(|v| !v.is_finite() || *v < -1e-9) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "grade percentages must be non-negative and sum to 1, got {:?}",
                p.as_array()
            )));
        }
        Ok(p)
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.nc, self.gg3, self.gg4, self.gg5]
    }

    pub fn get(self, grade: Grade) -> f64 {
        self.as_array()[grade.index()]
    }
}
