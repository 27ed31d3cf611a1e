//! ROC analysis and operating-point selection.
//!
//! Decision rule everywhere: a record is called pathological when
//! `score >= threshold`. Candidate thresholds are the distinct observed
//! scores; when several maximise an objective the smallest one wins, which
//! favours sensitivity.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.positives() + self.negatives()
    }

    /// True-positive rate. Zero when there are no positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.positives())
    }

    /// True-negative rate. Zero when there are no negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.negatives())
    }

    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.negatives())
    }

    pub fn false_negative_rate(&self) -> f64 {
        ratio(self.fn_, self.positives())
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn check_inputs(labels: &[bool], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("no scores to evaluate".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    Ok(())
}

fn check_both_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Input(
            "ROC analysis needs both pathological and non-pathological records".into(),
        ));
    }
    Ok((positives, negatives))
}

/// Counts at `threshold`, `true` labels being pathological.
pub fn confusion(labels: &[bool], scores: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(labels, scores)?;
    let mut m = ConfusionMatrix::default();
    for (&label, &score) in labels.iter().zip(scores) {
        match (label, score >= threshold) {
            (true, true) => m.tp += 1,
            (true, false) => m.fn_ += 1,
            (false, true) => m.fp += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+∞` for the all-negative starting point.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
    auc: f64,
}

impl RocCurve {
    /// Builds a curve from explicit points, checking the curve invariants:
    /// starts at (0,0), ends at (1,1), both coordinates non-decreasing.
    pub fn from_points(points: Vec<RocPoint>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::Input(format!("invalid ROC curve: {msg}")));
        let (Some(first), Some(last)) = (points.first(), points.last()) else {
            return bad("no points");
        };
        if (first.fpr, first.tpr) != (0.0, 0.0) {
            return bad("must start at (0, 0)");
        }
        if (last.fpr, last.tpr) != (1.0, 1.0) {
            return bad("must end at (1, 1)");
        }
        if points.windows(2).any(|w| w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr) {
            return bad("coordinates must be non-decreasing");
        }
        let auc = trapezoid(&points);
        Ok(RocCurve { points, auc })
    }

    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    pub fn auc(&self) -> f64 {
        self.auc
    }

    /// Best true-positive rate reachable at false-positive rate `fpr`, by
    /// linear interpolation between neighbouring points.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let fpr = fpr.clamp(0.0, 1.0);
        let mut best: f64 = 0.0;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.fpr <= fpr && fpr <= b.fpr {
                let v = if b.fpr == a.fpr {
                    a.tpr.max(b.tpr)
                } else {
                    a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
                };
                best = best.max(v);
            }
        }
        best
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Cumulative counts at each distinct score, visited from the highest
/// threshold down. Each entry is `(threshold, tp, fp)` for `score >= threshold`.
fn descending_sweep(labels: &[bool], scores: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

/// One point per distinct score plus the `(0, 0)` start; AUC by the
/// trapezoidal rule, which gives tied scores half credit.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<RocCurve> {
    check_inputs(labels, scores)?;
    let (p, n) = check_both_classes(labels)?;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for (threshold, tp, fp) in descending_sweep(labels, scores) {
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    RocCurve::from_points(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `sensitivity + specificity - 1`.
    Youden,
    /// `w_tpr · sensitivity + w_spec · specificity`.
    ClinicalWeighted,
    /// `w_tpr · TPR + w_spec · (1 - FNR)` exactly as printed. Since
    /// `FNR = 1 - TPR` this only rewards sensitivity and always picks the
    /// lowest threshold. Kept for auditing.
    LiteralPaper,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Youden => "youden",
            Objective::ClinicalWeighted => "clinical_weighted",
            Objective::LiteralPaper => "literal_paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalWeights {
    pub w_tpr: f64,
    pub w_spec: f64,
}

impl Default for ClinicalWeights {
    /// False negatives weighted twice as heavily as false positives.
    fn default() -> Self {
        ClinicalWeights {
            w_tpr: 0.66,
            w_spec: 0.33,
        }
    }
}

impl ClinicalWeights {
    pub fn new(w_tpr: f64, w_spec: f64) -> Result<Self> {
        let w = ClinicalWeights { w_tpr, w_spec };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_tpr.is_finite()
            && self.w_spec.is_finite()
            && self.w_tpr >= 0.0
            && self.w_spec >= 0.0
            && self.w_tpr + self.w_spec > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "clinical weights must be non-negative and not both zero, got ({}, {})",
                self.w_tpr, self.w_spec
            )))
        }
    }

    /// Scaled to sum to one; the argmax does not depend on the scale.
    fn normalized(&self) -> (f64, f64) {
        let s = self.w_tpr + self.w_spec;
        (self.w_tpr / s, self.w_spec / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub objective_value: f64,
    pub objective: Objective,
}

/// Objective differences below this are treated as ties.
const TIE_EPS: f64 = 1e-12;

/// Ascending scan over the distinct scores; `score` returns the objective
/// for `(tp, tn)` at a threshold, and strictly better values replace the
/// incumbent so the smallest maximiser survives.
fn best_threshold(
    labels: &[bool],
    scores: &[f64],
    objective: Objective,
    score: impl Fn(usize, usize) -> f64,
) -> Result<ThresholdDecision> {
    check_inputs(labels, scores)?;
    let (p, n) = check_both_classes(labels)?;
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for (threshold, tp, fp) in descending_sweep(labels, scores).into_iter().rev() {
        let tn = n - fp;
        let value = score(tp, tn);
        if best.is_none_or(|(_, _, _, v)| value > v + TIE_EPS) {
            best = Some((threshold, tp, tn, value));
        }
    }
    let (threshold, tp, tn, value) = best.expect("at least one candidate threshold");
    Ok(ThresholdDecision {
        threshold,
        sensitivity: tp as f64 / p as f64,
        specificity: tn as f64 / n as f64,
        objective_value: value,
        objective,
    })
}

/// Maximises Youden's J = sensitivity + specificity − 1.
pub fn youden_threshold(labels: &[bool], scores: &[f64]) -> Result<ThresholdDecision> {
    check_inputs(labels, scores)?;
    let (p, n) = check_both_classes(labels)?;
    // Exact in integers: J ∝ tp·n + tn·p.
    let mut best: Option<(f64, usize, usize, u128)> = None;
    for (threshold, tp, fp) in descending_sweep(labels, scores).into_iter().rev() {
        let tn = n - fp;
        let key = tp as u128 * n as u128 + tn as u128 * p as u128;
        if best.is_none_or(|(_, _, _, k)| key > k) {
            best = Some((threshold, tp, tn, key));
        }
    }
    let (threshold, tp, tn, _) = best.expect("at least one candidate threshold");
    let sensitivity = tp as f64 / p as f64;
    let specificity = tn as f64 / n as f64;
    Ok(ThresholdDecision {
        threshold,
        sensitivity,
        specificity,
        objective_value: sensitivity + specificity - 1.0,
        objective: Objective::Youden,
    })
}

/// Maximises `w_tpr · sensitivity + w_spec · specificity`.
pub fn clinical_threshold(labels: &[bool], scores: &[f64], weights: ClinicalWeights) -> Result<ThresholdDecision> {
    weights.validate()?;
    let (wt, ws) = weights.normalized();
    let p = labels.iter().filter(|l| **l).count() as f64;
    let n = labels.len() as f64 - p;
    best_threshold(labels, scores, Objective::ClinicalWeighted, |tp, tn| {
        wt * (tp as f64 / p) + ws * (tn as f64 / n)
    })
}

/// The printed formula `w_tpr · TPR + w_spec · (1 − FNR)`, taken literally.
pub fn literal_paper_threshold(labels: &[bool], scores: &[f64], weights: ClinicalWeights) -> Result<ThresholdDecision> {
    weights.validate()?;
    let (wt, ws) = weights.normalized();
    let p = labels.iter().filter(|l| **l).count() as f64;
    best_threshold(labels, scores, Objective::LiteralPaper, |tp, _| {
        let tpr = tp as f64 / p;
        let fnr = 1.0 - tpr;
        wt * tpr + ws * (1.0 - fnr)
    })
}

/// A reference reader operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub sensitivity: f64,
    pub specificity: f64,
    pub label: String,
}

impl Benchmark {
    pub fn new(sensitivity: f64, specificity: f64, label: impl Into<String>) -> Self {
        Benchmark {
            sensitivity,
            specificity,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub label: String,
    pub benchmark_sensitivity: f64,
    pub benchmark_specificity: f64,
    /// Curve sensitivity at the benchmark's specificity.
    pub curve_sensitivity: f64,
    /// The curve point at matching specificity is at least as good in both coordinates.
    pub dominated: bool,
}

pub fn compare_operating_points(curve: &RocCurve, benchmarks: &[Benchmark]) -> Vec<Dominance> {
    benchmarks
        .iter()
        .map(|b| {
            let tpr = curve.tpr_at(1.0 - b.specificity);
            Dominance {
                label: b.label.clone(),
                benchmark_sensitivity: b.sensitivity,
                benchmark_specificity: b.specificity,
                curve_sensitivity: tpr,
                dominated: tpr >= b.sensitivity,
            }
        })
        .collect()
}

/// One scored record as exchanged in `id,label,score` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    /// `true` for pathological.
    pub label: bool,
    pub score: f64,
}

pub fn write_scores_csv(records: &[ScoredRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["id", "label", "score"])?;
    for r in records {
        w.write_record([r.id.as_str(), if r.label { "1" } else { "0" }, &r.score.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoredRecord>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("{}: missing column `{name}`", path.display())))
    };
    let (id_col, label_col, score_col) = (col("id")?, col("label")?, col("score")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let label = match rec.get(label_col).unwrap_or("") {
            "1" | "true" | "pathological" => true,
            "0" | "false" | "non_pathological" => false,
            other => return Err(Error::Input(format!("record `{id}`: bad label `{other}`"))),
        };
        let score: f64 = rec
            .get(score_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Input(format!("record `{id}`: score is not a number")))?;
        out.push(ScoredRecord { id, label, score });
    }
    Ok(out)
}

/// Plot-ready summary of a scored set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub youden: ThresholdDecision,
    pub clinical: ThresholdDecision,
}

/// Curve plus both operating points. With `literal_objective` the clinical
/// decision uses the formula as printed instead of the weighted Youden reading.
pub fn analyze(labels: &[bool], scores: &[f64], weights: ClinicalWeights, literal_objective: bool) -> Result<(RocCurve, RocSummary)> {
    let curve = roc_curve(labels, scores)?;
    let youden = youden_threshold(labels, scores)?;
    let clinical = if literal_objective {
        literal_paper_threshold(labels, scores, weights)?
    } else {
        clinical_threshold(labels, scores, weights)?
    };
    let positives = labels.iter().filter(|l| **l).count();
    let summary = RocSummary {
        auc: curve.auc(),
        positives,
        negatives: labels.len() - positives,
        youden,
        clinical,
    };
    Ok((curve, summary))
}
