//! Detection metrics over a binary confusion matrix.
//!
//! Undefined ratios (empty denominators) are `None` and print as `n/a`;
//! they are never coerced to 0 or NaN.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::perception::FrameTally;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }
}

impl std::ops::AddAssign<FrameTally> for ConfusionMatrix {
    fn add_assign(&mut self, t: FrameTally) {
        self.tp += t.tp;
        self.fp += t.fp;
        self.fn_ += t.fn_;
        self.tn += t.tn;
    }
}

impl From<FrameTally> for ConfusionMatrix {
    fn from(t: FrameTally) -> Self {
        Self::new(t.tp, t.fp, t.fn_, t.tn)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision(m: &ConfusionMatrix) -> Option<f64> {
    ratio(m.tp, m.tp + m.fp)
}

pub fn recall(m: &ConfusionMatrix) -> Option<f64> {
    ratio(m.tp, m.tp + m.fn_)
}

pub fn fdr(m: &ConfusionMatrix) -> Option<f64> {
    fdr_from_precision(precision(m))
}

pub fn fdr_from_precision(precision: Option<f64>) -> Option<f64> {
    precision.map(|p| 1.0 - p)
}

/// Harmonic mean of precision and recall; `None` when both are zero.
pub fn f1(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

/// Matthews correlation coefficient; `None` if any marginal is zero.
pub fn mcc(m: &ConfusionMatrix) -> Option<f64> {
    let (tp, fp, fn_, tn) = (m.tp as f64, m.fp as f64, m.fn_ as f64, m.tn as f64);
    let marginals = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if marginals.contains(&0.0) {
        return None;
    }
    let denom = marginals.iter().product::<f64>().sqrt();
    Some((tp * tn - fp * fn_) / denom)
}

/// Component-wise sum of per-frame tallies.
pub fn aggregate<'a>(tallies: impl IntoIterator<Item = &'a FrameTally>) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for t in tallies {
        m += *t;
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fdr: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
}

impl PerformanceSummary {
    pub fn from_matrix(m: &ConfusionMatrix) -> Self {
        Self::from_rates(precision(m), recall(m), mcc(m))
    }

    /// Summary from known precision and recall, without the counts behind them.
    pub fn from_rates(precision: Option<f64>, recall: Option<f64>, mcc: Option<f64>) -> Self {
        let f1 = precision.zip(recall).and_then(|(p, r)| f1(p, r));
        Self {
            precision,
            recall,
            fdr: fdr_from_precision(precision),
            f1,
            mcc,
        }
    }
}

/// Percent with one decimal, rounding half away from zero.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        // Snap away representation noise (0.0125 is stored as 0.01249999...)
        // before rounding so ties really round up.
        Some(x) => {
            let scaled = (x * 1000.0 * 1e9).round() / 1e9;
            format!("{:.1}%", scaled.round() / 10.0)
        }
        None => "n/a".to_owned(),
    }
}

/// Headline precision and recall a report can be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub precision: f64,
    pub recall: f64,
}

/// Summary figures published for the field prototype. The counts behind
/// them were never released, and they disagree with the released matrix.
pub const FIELD_REFERENCE: ReferenceSummary = ReferenceSummary {
    precision: 0.988,
    recall: 0.936,
};

/// Released confusion matrix of the field prototype (38 / 2 / 1 / 5).
pub const FIELD_MATRIX: ConfusionMatrix = ConfusionMatrix::new(38, 2, 1, 5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub matrix: ConfusionMatrix,
    pub summary: PerformanceSummary,
    /// Mismatches against the reference at report precision.
    pub discrepancies: Vec<String>,
}

impl MetricsReport {
    pub fn new(matrix: ConfusionMatrix, reference: Option<&ReferenceSummary>) -> Self {
        let summary = PerformanceSummary::from_matrix(&matrix);
        let mut discrepancies = Vec::new();
        if let Some(r) = reference {
            for (name, got, want) in [
                ("precision", summary.precision, r.precision),
                ("recall", summary.recall, r.recall),
            ] {
                let (got_s, want_s) = (format_percent(got), format_percent(Some(want)));
                if got.is_some() && got_s != want_s {
                    discrepancies.push(format!("{name} {got_s} differs from reference {want_s}"));
                }
            }
        }
        Self {
            matrix,
            summary,
            discrepancies,
        }
    }

    /// Machine-readable summary with keys precision, recall, fdr, f1, mcc.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "matrix": self.matrix,
            "precision": self.summary.precision,
            "recall": self.summary.recall,
            "fdr": self.summary.fdr,
            "f1": self.summary.f1,
            "mcc": self.summary.mcc,
            "discrepancies": self.discrepancies,
        })
    }
}

/// Two-column summary table.
pub fn summary_table(s: &PerformanceSummary) -> String {
    let rows = [
        ("Overall Precision", s.precision),
        ("Overall Recall", s.recall),
        ("Overall FDR", s.fdr),
        ("F1 Score", s.f1),
        ("MCC", s.mcc),
    ];
    let mut out = format!("{:<18} | {}\n{}\n", "Type", "Result", "-".repeat(28));
    for (label, v) in rows {
        let cell = match (label, v) {
            // MCC lives in [-1, 1]; print it as a coefficient.
            ("MCC", Some(x)) => format!("{x:.4}"),
            _ => format_percent(v),
        };
        out.push_str(&format!("{label:<18} | {cell}\n"));
    }
    out
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.matrix;
        writeln!(f, "Confusion matrix")?;
        writeln!(f, "  TP {:>6}   FP {:>6}", m.tp, m.fp)?;
        writeln!(f, "  FN {:>6}   TN {:>6}", m.fn_, m.tn)?;
        writeln!(f)?;
        write!(f, "{}", summary_table(&self.summary))?;
        for d in &self.discrepancies {
            write!(f, "\nnote: {d}")?;
        }
        Ok(())
    }
}
