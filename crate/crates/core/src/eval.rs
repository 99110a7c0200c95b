//! Classifier evaluation: ROC and precision-recall curves, trapezoidal
//! AUC, the Youden operating point, and confusion matrices.
//!
//! Convention: a score is classified positive when `score >= threshold`.
//! Curves carry one point per distinct score (descending); the ROC curve
//! additionally starts from a `(0, 0)` sentinel at threshold +inf.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no observations")]
    Empty,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("at least one positive label required")]
    NoPositives,
    #[error("scores must be finite")]
    NonFiniteScore,
}

/// One threshold's operating point. For ROC curves `x` is the false
/// positive rate and `y` the true positive rate; for PR curves `x` is
/// recall and `y` precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(with = "infinite_threshold")]
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// JSON has no infinity; the ROC sentinel threshold round-trips as null.
mod infinite_threshold {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Some(*v).serialize(s)
        } else {
            None::<f64>.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Confusion counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Evaluation summary for one model on one labeled score set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
    pub auc_roc: f64,
    pub auc_pr: f64,
    #[serde(with = "infinite_threshold")]
    pub operating_threshold: f64,
    pub confusion: ConfusionCounts,
    pub prevalence: f64,
}

fn validate(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let pos = labels.iter().filter(|&&y| y).count();
    Ok((pos, labels.len() - pos))
}

fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// ROC staircase with one step per distinct score; tied scores collapse
/// into a single step. Starts at `(0, 0)` under the +inf sentinel and ends
/// at `(1, 1)` at the lowest score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>, EvalError> {
    let (pos, neg) = validate(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let order = descending_order(scores);
    let mut points = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold,
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Precision-recall points per distinct score (descending), truncated at
/// the first point reaching full recall: thresholds below that only add
/// false positives.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>, EvalError> {
    let (pos, _neg) = validate(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let order = descending_order(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold,
            x: tp as f64 / pos as f64,
            y: tp as f64 / (tp + fp) as f64,
        });
        if tp == pos {
            break;
        }
    }
    Ok(points)
}

/// Trapezoidal area under points sorted by `x`.
pub fn auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|pair| (pair[1].x - pair[0].x) * (pair[0].y + pair[1].y) * 0.5)
        .sum()
}

/// Operating point maximizing a weighted Youden index `tpr - fpr_cost * fpr`;
/// ties resolve toward the lower false positive rate.
pub fn optimal_operating_point_weighted(
    roc: &[CurvePoint],
    fpr_cost: f64,
) -> Option<(f64, CurvePoint)> {
    let mut best: Option<(f64, CurvePoint)> = None;
    for point in roc {
        let j = point.y - fpr_cost * point.x;
        let better = match &best {
            None => true,
            Some((best_j, best_point)) => {
                j > *best_j || (j == *best_j && point.x < best_point.x)
            }
        };
        if better {
            best = Some((j, *point));
        }
    }
    best.map(|(_, point)| (point.threshold, point))
}

/// Operating point maximizing Youden's J = TPR - FPR.
pub fn optimal_operating_point(roc: &[CurvePoint]) -> Option<(f64, CurvePoint)> {
    optimal_operating_point_weighted(roc, 1.0)
}

/// Confusion counts with positives predicted at `score >= threshold`.
pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> ConfusionCounts {
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&score, &label) in scores.iter().zip(labels) {
        let predicted = score >= threshold;
        match (predicted, label) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    counts
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Cost multiplier on the false positive rate in the operating-point
    /// objective. 1.0 is the cost-neutral Youden choice.
    pub fpr_cost: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { fpr_cost: 1.0 }
    }
}

/// Full evaluation: both curves, both AUCs, the chosen operating point, and
/// the confusion matrix at that threshold.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let (pos, _neg) = validate(scores, labels)?;
    let roc = roc_curve(scores, labels)?;
    let pr = pr_curve(scores, labels)?;
    let auc_roc = auc(&roc);
    let auc_pr = auc(&pr);
    let (operating_threshold, _point) =
        optimal_operating_point_weighted(&roc, options.fpr_cost).ok_or(EvalError::Empty)?;
    let confusion = confusion_at(scores, labels, operating_threshold);
    Ok(EvalReport {
        roc,
        pr,
        auc_roc,
        auc_pr,
        operating_threshold,
        confusion,
        prevalence: pos as f64 / labels.len() as f64,
    })
}
