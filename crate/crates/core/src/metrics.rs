//! Evaluation metrics: confusion matrices, accuracy, per-class F1,
//! quadratic-weighted Cohen's kappa, and ROC/AUC.

use serde::Serialize;

use crate::error::{Error, Result};

/// C×C label co-occurrence counts, rows = reference, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(references: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Invalid("no labels to tabulate".into()));
        }
        if references.len() != predictions.len() {
            return Err(Error::Invalid(format!(
                "{} references vs {} predictions",
                references.len(),
                predictions.len()
            )));
        }
        if classes == 0 {
            return Err(Error::Invalid("zero classes".into()));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&r, &p) in references.iter().zip(predictions) {
            if r >= classes || p >= classes {
                return Err(Error::Invalid(format!(
                    "label out of range: ({r}, {p}) with {classes} classes"
                )));
            }
            counts[r][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, reference: usize, prediction: usize) -> u64 {
        self.counts[reference][prediction]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let c = self.classes();
        (0..c).map(|j| self.counts.iter().map(|row| row[j]).sum()).collect()
    }

    /// CSV with a header row; `labels` names the classes in index order.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("reference\\prediction");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&labels[i]);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// Classes absent from both references and predictions are scored F1 = 0
    /// and noted here.
    pub warnings: Vec<String>,
}

/// Accuracy, per-class F1 (harmonic mean of precision and sensitivity),
/// macro-F1, confusion counts, and per-class sensitivity/specificity.
pub fn classification_report(
    references: &[usize],
    predictions: &[usize],
    classes: usize,
) -> Result<ClassificationReport> {
    let confusion = ConfusionMatrix::from_labels(references, predictions, classes)?;
    let n = confusion.total() as f64;
    let correct: u64 = (0..classes).map(|i| confusion.count(i, i)).sum();
    let rows = confusion.row_sums();
    let cols = confusion.col_sums();
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for i in 0..classes {
        let tp = confusion.count(i, i) as f64;
        let fp = cols[i] as f64 - tp;
        let fng = rows[i] as f64 - tp;
        let tn = n - tp - fp - fng;
        if rows[i] == 0 && cols[i] == 0 {
            warnings.push(format!(
                "class {i} absent from both references and predictions; F1 fixed at 0"
            ));
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let sensitivity = if tp + fng > 0.0 { tp / (tp + fng) } else { 0.0 };
        let specificity = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
        let f1 = if precision + sensitivity > 0.0 {
            2.0 * precision * sensitivity / (precision + sensitivity)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            sensitivity,
            specificity,
            f1,
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / n,
        macro_f1,
        per_class,
        confusion,
        warnings,
    })
}

/// Cohen's kappa with quadratic weights `w_ij = (i-j)^2 / (C-1)^2`:
/// `k = 1 - (sum w.O) / (sum w.E)` where `E` is the outer product of the
/// marginals divided by the total.
pub fn quadratic_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let c = cm.classes();
    if c < 2 {
        return Err(Error::Invalid("kappa needs at least 2 classes".into()));
    }
    let n = cm.total();
    if n == 0 {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let scale = ((c - 1) * (c - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / scale;
            observed += w * cm.count(i, j) as f64;
            expected += w * rows[i] as f64 * cols[j] as f64 / n as f64;
        }
    }
    if expected == 0.0 {
        // both marginals concentrate on one class: defined as perfect
        // agreement when the observed disagreement is also zero
        return if observed == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate(
                "zero expected disagreement with imperfect observations".into(),
            ))
        };
    }
    Ok(1.0 - observed / expected)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from a sweep over unique score thresholds (positive iff
/// score > threshold), from (0,0) to (1,1), both rates non-decreasing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        out
    }
}

/// ROC curve and trapezoidal AUC. The AUC equals the Mann-Whitney pair
/// statistic with ties counted 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyClass(
            if pos == 0 { "positive" } else { "negative" }.into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        // one curve point per unique score: ties move diagonally together
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[0].tpr + pair[1].tpr) / 2.0;
    }
    Ok((RocCurve { points }, auc))
}
