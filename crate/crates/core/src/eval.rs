//! Thresholding, confusion counts, rates, ROC and recall-precision curves,
//! and the single-ability decision stump.
//!
//! The positive class is FAILED throughout: a true positive is a student
//! predicted to fail who actually failed.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::response_data::csv_writer;

/// Cutoffs match the neighbor-vote grid up to this slack, so that a vote
/// of exactly 1 - 0.9 counts as reaching cutoff 0.1.
pub const CUTOFF_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn observed_failed(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn observed_successful(&self) -> usize {
        self.fp + self.tn
    }

    pub fn predicted_failed(&self) -> usize {
        self.tp + self.fp
    }

    pub fn accuracy(&self) -> Result<f64> {
        Ok(1.0 - misclassification_rate(self)?)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Predicted FAILED flags: `p_fail >= cutoff`.
pub fn classify(p_fail: &[f64], cutoff: f64) -> Vec<bool> {
    p_fail.iter().map(|&p| p >= cutoff - CUTOFF_EPSILON).collect()
}

/// Counts with FAILED as positive. `observed_passed[i]` is the exam outcome.
pub fn confusion(predicted_failed: &[bool], observed_passed: &[bool]) -> Result<ConfusionMatrix> {
    if predicted_failed.len() != observed_passed.len() {
        return Err(Error::Integrity(format!(
            "{} predictions for {} observed outcomes",
            predicted_failed.len(),
            observed_passed.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&pred, &passed) in predicted_failed.iter().zip(observed_passed) {
        match (pred, !passed) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn misclassification_rate(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.fp + cm.fn_, cm.total()).ok_or_else(|| Error::Domain("empty confusion matrix".into()))
}

/// `tp / (tp + fp)`; `None` when nobody is predicted to fail.
pub fn hitting_ratio(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

pub fn rates(cm: &ConfusionMatrix) -> Rates {
    let tpr = ratio(cm.tp, cm.tp + cm.fn_);
    Rates {
        tpr,
        fpr: ratio(cm.fp, cm.fp + cm.tn),
        recall: tpr,
        precision: hitting_ratio(cm),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Cutoff on `p_fail`; `f64::INFINITY` marks the all-negative endpoint.
    pub threshold: f64,
    /// FPR for ROC, recall for PR.
    pub x: Option<f64>,
    /// TPR for ROC, precision for PR.
    pub y: Option<f64>,
    pub counts: ConfusionMatrix,
}

/// `0, 0.1, ..., 1.0`.
pub fn cutoff_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Curve thresholds in descending order: the endpoint, then 1.0 down to 0.
fn curve_thresholds() -> Vec<f64> {
    let mut t = vec![f64::INFINITY];
    t.extend(cutoff_grid().into_iter().rev());
    t
}

fn curve_counts(p_fail: &[f64], observed_passed: &[bool]) -> Result<Vec<(f64, ConfusionMatrix)>> {
    if p_fail.len() != observed_passed.len() {
        return Err(Error::Integrity(format!(
            "{} predictions for {} observed outcomes",
            p_fail.len(),
            observed_passed.len()
        )));
    }
    let failed = observed_passed.iter().filter(|&&p| !p).count();
    if failed == 0 || failed == observed_passed.len() {
        return Err(Error::Domain(
            "curves need at least one failed and one successful student".into(),
        ));
    }
    curve_thresholds()
        .into_par_iter()
        .map(|t| Ok((t, confusion(&classify(p_fail, t), observed_passed)?)))
        .collect()
}

pub fn roc_curve(p_fail: &[f64], observed_passed: &[bool]) -> Result<Vec<CurvePoint>> {
    Ok(curve_counts(p_fail, observed_passed)?
        .into_iter()
        .map(|(threshold, counts)| {
            let r = rates(&counts);
            CurvePoint {
                threshold,
                x: r.fpr,
                y: r.tpr,
                counts,
            }
        })
        .collect())
}

pub fn pr_curve(p_fail: &[f64], observed_passed: &[bool]) -> Result<Vec<CurvePoint>> {
    Ok(curve_counts(p_fail, observed_passed)?
        .into_iter()
        .map(|(threshold, counts)| {
            let r = rates(&counts);
            CurvePoint {
                threshold,
                x: r.recall,
                y: r.precision,
                counts,
            }
        })
        .collect())
}

/// Trapezoidal area under a curve, skipping points with an absent coordinate.
pub fn auc(points: &[CurvePoint]) -> f64 {
    let xy: Vec<(f64, f64)> = points.iter().filter_map(|p| Some((p.x?, p.y?))).collect();
    xy.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Depth-1 decision tree on ability: predict FAIL when `theta < threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StumpModel {
    pub threshold: f64,
    /// Training misclassifications at the chosen threshold.
    pub errors: usize,
}

impl StumpModel {
    pub fn predict(&self, theta: &[f64]) -> Vec<bool> {
        theta.iter().map(|&t| t < self.threshold).collect()
    }
}

/// Cutoff between two adjacent distinct values. When no float lies
/// strictly between them the upper value gives the same split.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if lo < mid && mid < hi {
        mid
    } else {
        hi
    }
}

/// Exhaustive search over -inf, the midpoints of adjacent sorted distinct
/// abilities, and +inf. Ties go to the smaller cutoff.
pub fn fit_stump(theta: &[f64], observed_passed: &[bool]) -> Result<StumpModel> {
    if theta.len() != observed_passed.len() {
        return Err(Error::Integrity(format!(
            "{} abilities for {} observed outcomes",
            theta.len(),
            observed_passed.len()
        )));
    }
    if theta.iter().any(|t| t.is_nan()) {
        return Err(Error::Domain("abilities contain NaN".into()));
    }
    let failed = observed_passed.iter().filter(|&&p| !p).count();
    if failed == 0 || failed == theta.len() {
        return Err(Error::Domain("stump needs both failed and successful students".into()));
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&i, &j| theta[i].total_cmp(&theta[j]));

    // Cutoff -inf predicts nobody failing: every failed student is an error.
    let mut errors = failed;
    let mut best = StumpModel {
        threshold: f64::NEG_INFINITY,
        errors,
    };
    let mut pos = 0;
    while pos < order.len() {
        let value = theta[order[pos]];
        // Move the whole tie group below the cutoff.
        while pos < order.len() && theta[order[pos]] == value {
            if observed_passed[order[pos]] {
                errors += 1;
            } else {
                errors -= 1;
            }
            pos += 1;
        }
        let threshold = match order.get(pos) {
            Some(&next) => midpoint(value, theta[next]),
            None => f64::INFINITY,
        };
        if errors < best.errors {
            best = StumpModel { threshold, errors };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountBar {
    pub cutoff: f64,
    pub predicted_failed: usize,
    pub observed_failed: usize,
    pub observed_successful: usize,
}

/// Students predicted to fail at each cutoff, split by observed outcome.
pub fn predicted_count_bars(p_fail: &[f64], observed_passed: &[bool], cutoffs: &[f64]) -> Result<Vec<CountBar>> {
    cutoffs
        .iter()
        .map(|&cutoff| {
            let cm = confusion(&classify(p_fail, cutoff), observed_passed)?;
            Ok(CountBar {
                cutoff,
                predicted_failed: cm.predicted_failed(),
                observed_failed: cm.tp,
                observed_successful: cm.fp,
            })
        })
        .collect()
}

/// Half-up rounding to two decimals for report display.
pub fn display_rate(x: f64) -> String {
    let scaled = (x * 100.0 + 0.5 + CUTOFF_EPSILON).floor();
    format!("{:.2}", scaled / 100.0)
}

pub fn format_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else {
        t.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| v.to_string())
}

/// Two-by-two table with observed classes as rows and predicted classes
/// as columns, plus margins.
pub fn write_confusion(cm: &ConfusionMatrix, writer: impl Write) -> Result<()> {
    let mut wtr = csv_writer(writer);
    wtr.write_record(["observed", "predicted_failed", "predicted_successful", "total"])?;
    wtr.write_record([
        "failed".to_string(),
        cm.tp.to_string(),
        cm.fn_.to_string(),
        cm.observed_failed().to_string(),
    ])?;
    wtr.write_record([
        "successful".to_string(),
        cm.fp.to_string(),
        cm.tn.to_string(),
        cm.observed_successful().to_string(),
    ])?;
    wtr.write_record([
        "total".to_string(),
        cm.predicted_failed().to_string(),
        (cm.fn_ + cm.tn).to_string(),
        cm.total().to_string(),
    ])?;
    wtr.flush().map_err(|e| Error::io("<confusion writer>", e))
}

/// `threshold,<x_name>,<y_name>,tp,fp,tn,fn`.
pub fn write_curve(points: &[CurvePoint], x_name: &str, y_name: &str, writer: impl Write) -> Result<()> {
    let mut wtr = csv_writer(writer);
    wtr.write_record(["threshold", x_name, y_name, "tp", "fp", "tn", "fn"])?;
    for p in points {
        wtr.write_record([
            format_threshold(p.threshold),
            opt(p.x),
            opt(p.y),
            p.counts.tp.to_string(),
            p.counts.fp.to_string(),
            p.counts.tn.to_string(),
            p.counts.fn_.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<curve writer>", e))
}

pub fn write_bars(bars: &[CountBar], writer: impl Write) -> Result<()> {
    let mut wtr = csv_writer(writer);
    wtr.write_record(["cutoff", "predicted_failed", "observed_failed", "observed_successful"])?;
    for b in bars {
        wtr.write_record([
            b.cutoff.to_string(),
            b.predicted_failed.to_string(),
            b.observed_failed.to_string(),
            b.observed_successful.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<bars writer>", e))
}

/// Standalone 600x600 SVG with the curve as a polyline on the unit square.
pub fn curve_svg(points: &[CurvePoint], title: &str, x_label: &str, y_label: &str) -> String {
    const SIZE: f64 = 600.0;
    const MARGIN: f64 = 60.0;
    let span = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + x * span;
    let py = |y: f64| SIZE - MARGIN - y * span;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="600" height="600" viewBox="0 0 600 600">"#
    );
    let _ = writeln!(svg, r#"<rect width="600" height="600" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="300" y="35" text-anchor="middle" font-family="sans-serif" font-size="18">{title}</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="300" y="585" text-anchor="middle" font-family="sans-serif" font-size="14">{x_label}</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="300" text-anchor="middle" font-family="sans-serif" font-size="14" transform="rotate(-90 20 300)">{y_label}</text>"#
    );
    let coords: Vec<String> = points
        .iter()
        .filter_map(|p| Some(format!("{:.2},{:.2}", px(p.x?), py(p.y?))))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        coords.join(" ")
    );
    for c in &coords {
        let (x, y) = c.split_once(',').unwrap_or(("0", "0"));
        let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="steelblue"/>"#);
    }
    svg.push_str("</svg>\n");
    svg
}
