//! Confusion matrices and accuracy / recall reporting.
//!
//! Orientation follows the usual "predicted \ actual" table: rows are the
//! predicted class, columns the actual class, index 0 background and 1
//! exudate. The "reference" sensitivity and specificity treat background as the
//! positive class; the "standard" pair treats exudate as positive. Both are
//! always reported.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::dataset::BinaryMask;
use crate::error::{Error, Result};
use crate::{PATCH_CENTER, VALID_EXTENT, WORKING_SIZE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    /// `counts[predicted][actual]`.
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    /// From `(pred bg/actual bg, pred bg/actual ex, pred ex/actual bg, pred ex/actual ex)`.
    pub fn from_cells(bg_bg: u64, bg_ex: u64, ex_bg: u64, ex_ex: u64) -> Self {
        ConfusionMatrix {
            counts: [[bg_bg, bg_ex], [ex_bg, ex_ex]],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn actual_total(&self, class: usize) -> u64 {
        self.counts[0][class] + self.counts[1][class]
    }

    pub fn predicted_total(&self, class: usize) -> u64 {
        self.counts[class][0] + self.counts[class][1]
    }

    pub fn transpose(&self) -> Self {
        let c = self.counts;
        ConfusionMatrix {
            counts: [[c[0][0], c[1][0]], [c[0][1], c[1][1]]],
        }
    }

    /// Recall of `class`: diagonal cell over its actual-column total.
    pub fn recall(&self, class: usize) -> Option<f64> {
        match self.actual_total(class) {
            0 => None,
            n => Some(self.counts[class][class] as f64 / n as f64),
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: ConfusionMatrix) -> ConfusionMatrix {
        for p in 0..2 {
            for a in 0..2 {
                self.counts[p][a] += rhs.counts[p][a];
            }
        }
        self
    }
}

/// Pixel-wise counts of `pred` against `truth`; extents must match.
pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionMatrix> {
    if pred.extent() != truth.extent() {
        return Err(Error::ExtentMismatch(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.extent(),
            truth.extent()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &a) in pred.as_slice().iter().zip(truth.as_slice()) {
        cm.counts[p as usize][a as usize] += 1;
    }
    Ok(cm)
}

/// Crops a 256×256 ground truth to rows/cols `[16, 240)` so it lines up with
/// a valid-mode prediction. Other extents are returned unchanged when they
/// already match `extent`.
pub fn align_truth(truth: &BinaryMask, extent: (usize, usize)) -> Result<BinaryMask> {
    if truth.extent() == extent {
        return Ok(truth.clone());
    }
    if truth.extent() == (WORKING_SIZE, WORKING_SIZE) && extent == (VALID_EXTENT, VALID_EXTENT) {
        return truth.crop(PATCH_CENTER, PATCH_CENTER, VALID_EXTENT, VALID_EXTENT);
    }
    Err(Error::ExtentMismatch(format!(
        "ground truth {:?} cannot be aligned to prediction {extent:?}",
        truth.extent()
    )))
}

fn ratio<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub counts: ConfusionMatrix,
    pub total: u64,
    pub accuracy: f64,
    /// Background recall.
    #[serde(serialize_with = "ratio")]
    pub reference_sensitivity: Option<f64>,
    /// Exudate recall.
    #[serde(serialize_with = "ratio")]
    pub reference_specificity: Option<f64>,
    /// Exudate recall.
    #[serde(serialize_with = "ratio")]
    pub standard_sensitivity: Option<f64>,
    /// Background recall.
    #[serde(serialize_with = "ratio")]
    pub standard_specificity: Option<f64>,
}

pub fn report(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let bg = cm.recall(0);
    let ex = cm.recall(1);
    Ok(EvalReport {
        counts: *cm,
        total,
        accuracy: cm.correct() as f64 / total as f64,
        reference_sensitivity: bg,
        reference_specificity: ex,
        standard_sensitivity: ex,
        standard_specificity: bg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub images: usize,
    /// Metrics of the summed confusion matrix.
    pub pooled: EvalReport,
    /// Unweighted mean of per-image accuracies.
    pub macro_accuracy: f64,
}

pub fn aggregate(matrices: &[ConfusionMatrix]) -> Result<AggregateReport> {
    if matrices.is_empty() {
        return Err(Error::Empty("no confusion matrices to aggregate"));
    }
    let per_image = matrices.iter().map(report).collect::<Result<Vec<_>>>()?;
    let pooled = matrices.iter().copied().fold(ConfusionMatrix::default(), |a, b| a + b);
    Ok(AggregateReport {
        images: matrices.len(),
        pooled: report(&pooled)?,
        macro_accuracy: per_image.iter().map(|r| r.accuracy).sum::<f64>() / per_image.len() as f64,
    })
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.5}"))
}

/// Plain-text table in "predicted \ actual" layout followed by the metrics.
pub fn format_table(r: &EvalReport) -> String {
    let c = r.counts.counts;
    let mut s = String::new();
    let _ = writeln!(s, "{:<22}{:>12}{:>12}", "Predicted \\ Actual", "background", "exudate");
    let _ = writeln!(s, "{:<22}{:>12}{:>12}", "background", c[0][0], c[0][1]);
    let _ = writeln!(s, "{:<22}{:>12}{:>12}", "exudate", c[1][0], c[1][1]);
    let _ = writeln!(s, "{:<22}{:>12}", "total pixels", r.total);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<46}{:>10.5}", "accuracy", r.accuracy);
    let rows = [
        ("reference sensitivity (background recall)", r.reference_sensitivity),
        ("reference specificity (exudate recall)", r.reference_specificity),
        ("standard sensitivity (exudate recall)", r.standard_sensitivity),
        ("standard specificity (background recall)", r.standard_specificity),
    ];
    for (label, v) in rows {
        let _ = writeln!(s, "{label:<46}{:>10}", fmt_ratio(v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_mask(h: usize, w: usize, rng: &mut Rng) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect()).unwrap()
    }

    #[test]
    fn table_counts() {
        let cm = ConfusionMatrix::from_cells(95862, 1665, 1651, 1174);
        let r = report(&cm).unwrap();
        assert_eq!(r.total, 100352);
        assert!((r.accuracy - 0.96696).abs() < 1e-5);
        assert!((r.reference_specificity.unwrap() - 0.41353).abs() < 1e-5);
        assert!((r.reference_sensitivity.unwrap() - 0.98307).abs() < 1e-5);
        assert_eq!(r.reference_sensitivity, r.standard_specificity);
        assert_eq!(r.reference_specificity, r.standard_sensitivity);
        let table = format_table(&r);
        assert!(table.contains("0.96696") && table.contains("0.98307") && table.contains("0.41353"));
    }

    #[test]
    fn trivial_cases() {
        let bg = BinaryMask::zeros(224, 224);
        let mut ex = BinaryMask::zeros(224, 224);
        for r in 0..224 {
            for c in 0..224 {
                ex.set(r, c, true);
            }
        }
        assert_eq!(confusion(&bg, &bg).unwrap().counts, [[50176, 0], [0, 0]]);
        assert_eq!(confusion(&ex, &bg).unwrap().counts, [[0, 0], [50176, 0]]);
        let diag = report(&ConfusionMatrix::from_cells(5, 0, 0, 7)).unwrap();
        assert_eq!((diag.accuracy, diag.reference_sensitivity, diag.reference_specificity), (1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn matches_counting_oracle() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let (p, t) = (random_mask(8, 8, &mut rng), random_mask(8, 8, &mut rng));
            let cm = confusion(&p, &t).unwrap();
            let mut want = [[0u64; 2]; 2];
            for r in 0..8 {
                for c in 0..8 {
                    want[p.get(r, c) as usize][t.get(r, c) as usize] += 1;
                }
            }
            assert_eq!(cm.counts, want);
            assert_eq!(confusion(&t, &p).unwrap(), cm.transpose());
            let d = confusion(&p, &p).unwrap();
            assert_eq!(d.counts[0][1] + d.counts[1][0], 0);
            let rep = report(&cm).unwrap();
            assert_eq!((rep.accuracy * rep.total as f64).round() as u64, cm.correct());
        }
    }

    #[test]
    fn undefined_recall_serializes_as_string() {
        let r = report(&ConfusionMatrix::from_cells(10, 0, 2, 0)).unwrap();
        assert_eq!(r.reference_specificity, None);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["reference_specificity"], "undefined");
        assert_eq!(json["standard_sensitivity"], "undefined");
        assert!(format_table(&r).contains("undefined"));
    }

    #[test]
    fn errors() {
        assert!(report(&ConfusionMatrix::default()).is_err());
        assert!(aggregate(&[]).is_err());
        assert!(confusion(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 5)).is_err());
        assert!(align_truth(&BinaryMask::zeros(100, 100), (224, 224)).is_err());
    }

    #[test]
    fn align_crops_valid_region() {
        let mut t = BinaryMask::zeros(256, 256);
        t.set(16, 16, true);
        t.set(15, 15, true);
        let a = align_truth(&t, (224, 224)).unwrap();
        assert_eq!(a.count_ones(), 1);
        assert_eq!(a.get(0, 0), 1);
    }

    #[test]
    fn aggregate_pooled_and_macro() {
        let a = ConfusionMatrix::from_cells(8, 1, 1, 0);
        let b = ConfusionMatrix::from_cells(2, 0, 0, 0);
        let single = aggregate(&[a]).unwrap();
        assert_eq!(single.pooled, report(&a).unwrap());
        assert_eq!(aggregate(&[a, a]).unwrap().pooled.accuracy, report(&a).unwrap().accuracy);
        let agg = aggregate(&[a, b]).unwrap();
        assert_eq!(agg.pooled.accuracy, 10.0 / 12.0);
        assert_eq!(agg.macro_accuracy, (0.8 + 1.0) / 2.0);
    }
}
