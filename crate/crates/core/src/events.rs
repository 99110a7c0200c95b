//! Dataset construction: turning the feature frame into per-action
//! regression datasets, standardization, and stratified splitting.
//!
//! The regression target is the discrete-time hazard of a state change:
//! a row at minute `t` belongs to the opening dataset when the window is
//! closed at `t`, and its label is 1 exactly when the window is open at
//! `t + 1`. The closing dataset is symmetric.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DaySegment, FeatureFrame, FeatureRow};

/// Numeric predictor identifiers. Declaration order fixes the design-matrix
/// column order everywhere downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    TIndoor,
    LogCo2,
    Rh,
    TOutsideAvg,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::TIndoor, Term::LogCo2, Term::Rh, Term::TOutsideAvg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Term::TIndoor => "t_indoor",
            Term::LogCo2 => "log_co2",
            Term::Rh => "rh",
            Term::TOutsideAvg => "t_outside_avg",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Term::ALL.into_iter().find(|t| t.as_str() == raw)
    }

    fn extract(&self, row: &FeatureRow) -> Option<f64> {
        match self {
            Term::TIndoor => row.t_indoor,
            Term::LogCo2 => row.log_co2,
            Term::Rh => row.rh,
            Term::TOutsideAvg => row.t_outside_avg,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which transition a dataset models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Opening,
    Closing,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::Opening => "opening",
            ActionKind::Closing => "closing",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionDirection {
    Opened,
    Closed,
}

/// A window state change observed between two adjacent present minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub timestamp: DateTime<Utc>,
    pub direction: TransitionDirection,
}

/// Scans the frame for state changes. Changes hidden behind missing minutes
/// are not counted: both endpoints must be adjacent grid minutes with an
/// observed state.
pub fn extract_transitions(frame: &FeatureFrame) -> Vec<Transition> {
    let rows = frame.rows();
    let mut out = Vec::new();
    for i in 1..rows.len() {
        if let (Some(prev), Some(cur)) = (rows[i - 1].window_open, rows[i].window_open) {
            if prev != cur {
                out.push(Transition {
                    timestamp: frame.timestamp(i),
                    direction: if cur {
                        TransitionDirection::Opened
                    } else {
                        TransitionDirection::Closed
                    },
                });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("dataset columns do not line up: {0}")]
    Mismatch(String),
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
}

/// Per-feature standardization parameters (training-set mean and sample
/// standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub mean: f64,
    pub sd: f64,
}

/// Scaling applied to every dataset derived from one training set.
/// Serializes as a flat `{feature: {mean, sd}}` map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalingParams {
    pub features: BTreeMap<Term, FeatureScale>,
}

/// Design data for one action model: numeric feature columns, the day
/// segment, binary labels, and optional scaling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    action: ActionKind,
    features: BTreeMap<Term, Vec<f64>>,
    segments: Vec<DaySegment>,
    labels: Vec<bool>,
    scaling: Option<ScalingParams>,
}

impl Dataset {
    pub fn new(
        action: ActionKind,
        features: BTreeMap<Term, Vec<f64>>,
        segments: Vec<DaySegment>,
        labels: Vec<bool>,
    ) -> Result<Self, DatasetError> {
        let n = labels.len();
        if segments.len() != n {
            return Err(DatasetError::Mismatch(format!(
                "{} segments for {} labels",
                segments.len(),
                n
            )));
        }
        for (term, col) in &features {
            if col.len() != n {
                return Err(DatasetError::Mismatch(format!(
                    "column {term} has {} rows, labels have {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Mismatch(format!(
                    "column {term} contains non-finite values"
                )));
            }
        }
        Ok(Self {
            action,
            features,
            segments,
            labels,
            scaling: None,
        })
    }

    pub fn action(&self) -> ActionKind {
        self.action
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn segments(&self) -> &[DaySegment] {
        &self.segments
    }

    pub fn feature(&self, term: Term) -> Option<&[f64]> {
        self.features.get(&term).map(|v| v.as_slice())
    }

    /// Terms present as columns, in canonical order.
    pub fn terms(&self) -> Vec<Term> {
        self.features.keys().copied().collect()
    }

    pub fn scaling(&self) -> Option<&ScalingParams> {
        self.scaling.as_ref()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn n_negative(&self) -> usize {
        self.len() - self.n_positive()
    }

    pub fn prevalence(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n_positive() as f64 / self.len() as f64
        }
    }

    /// Copies the selected rows (indices in ascending order) into a new
    /// dataset that inherits action and scaling.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self
            .features
            .iter()
            .map(|(&term, col)| (term, indices.iter().map(|&i| col[i]).collect()))
            .collect();
        Dataset {
            action: self.action,
            features,
            segments: indices.iter().map(|&i| self.segments[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            scaling: self.scaling.clone(),
        }
    }

    pub(crate) fn set_scaling(&mut self, scaling: Option<ScalingParams>) {
        self.scaling = scaling;
    }
}

/// Builds the per-action dataset from a feature frame.
///
/// For the opening model a row is any minute with the window observed
/// closed, complete features, and an observed state at the next grid
/// minute; the label is 1 when that next state is open. Closing is
/// symmetric. Errors when no rows survive or only one class remains.
pub fn build_dataset(frame: &FeatureFrame, action: ActionKind) -> Result<Dataset, DatasetError> {
    let rows = frame.rows();
    if rows.len() < 2 {
        return Err(DatasetError::Degenerate(
            "frame has fewer than two minutes".into(),
        ));
    }
    let at_risk_state = match action {
        ActionKind::Opening => false,
        ActionKind::Closing => true,
    };

    let mut features: BTreeMap<Term, Vec<f64>> =
        Term::ALL.iter().map(|&t| (t, Vec::new())).collect();
    let mut segments = Vec::new();
    let mut labels = Vec::new();

    for i in 0..rows.len() - 1 {
        let row = &rows[i];
        let (Some(state), Some(next_state)) = (row.window_open, rows[i + 1].window_open) else {
            continue;
        };
        if state != at_risk_state || !row.features_complete() {
            continue;
        }
        for (&term, col) in features.iter_mut() {
            col.push(term.extract(row).expect("checked features_complete"));
        }
        segments.push(row.segment);
        labels.push(next_state != at_risk_state);
    }

    if labels.is_empty() {
        return Err(DatasetError::Degenerate(format!(
            "no usable {action} rows (window never in the at-risk state with complete features)"
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(DatasetError::Degenerate(format!(
            "{action} dataset has single-class labels ({positives} positives of {})",
            labels.len()
        )));
    }
    Dataset::new(action, features, segments, labels)
}

/// Result of standardizing a training set and applying the same parameters
/// to held-out sets. Zero-variance columns are dropped everywhere and
/// reported in `dropped`.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub train: Dataset,
    pub others: Vec<Dataset>,
    pub params: ScalingParams,
    pub dropped: Vec<Term>,
}

/// Z-scores the numeric features with training-set mean and sample standard
/// deviation (n − 1 denominator).
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<Standardized, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::Degenerate("empty training set".into()));
    }
    let mut params = ScalingParams::default();
    let mut dropped = Vec::new();
    for term in train.terms() {
        let col = train.feature(term).unwrap();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = if col.len() < 2 {
            0.0
        } else {
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        if sd > 0.0 && sd.is_finite() {
            params.features.insert(term, FeatureScale { mean, sd });
        } else {
            dropped.push(term);
        }
    }

    let train_out = apply_scaling(train, &params)?;
    let others_out = others
        .iter()
        .map(|ds| apply_scaling(ds, &params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Standardized {
        train: train_out,
        others: others_out,
        params,
        dropped,
    })
}

/// Applies scaling parameters to a dataset: retained features are z-scored,
/// features absent from the parameters are dropped.
pub fn apply_scaling(ds: &Dataset, params: &ScalingParams) -> Result<Dataset, DatasetError> {
    let mut features = BTreeMap::new();
    for (&term, scale) in &params.features {
        let col = ds.feature(term).ok_or_else(|| {
            DatasetError::Mismatch(format!("dataset lacks column {term} required by scaling"))
        })?;
        let scaled = col.iter().map(|v| (v - scale.mean) / scale.sd).collect();
        features.insert(term, scaled);
    }
    let mut out = Dataset::new(
        ds.action,
        features,
        ds.segments.clone(),
        ds.labels.clone(),
    )?;
    out.set_scaling(Some(params.clone()));
    Ok(out)
}

/// Train / validation / fold configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            folds: 10,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if self.folds < 2 {
            return Err(DatasetError::InvalidSplit(format!(
                "folds {} must be at least 2",
                self.folds
            )));
        }
        Ok(())
    }
}

const MIX_GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(MIX_GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pseudorandom ordering key derived from a row's content and the seed, so
/// that split assignments commute with row permutations.
fn row_key(ds: &Dataset, i: usize, seed: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x5151_5151_5151_5151);
    for (_, col) in ds.features.iter() {
        h = splitmix64(h ^ col[i].to_bits());
    }
    h = splitmix64(h ^ ds.segments[i] as u64);
    h = splitmix64(h ^ ds.labels[i] as u64);
    h
}

fn ordered_class_indices(ds: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    // Keys are precomputed: the comparison-time closure of sort_by_key
    // would otherwise rehash every row O(log n) times.
    let keys: Vec<u64> = (0..ds.len()).map(|i| row_key(ds, i, seed)).collect();
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &label) in ds.labels.iter().enumerate() {
        if label {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    pos.sort_by_key(|&i| keys[i]);
    neg.sort_by_key(|&i| keys[i]);
    (pos, neg)
}

/// Stratified train/validation split. Each class is divided with rounded
/// counts, so prevalence is preserved to within one row per class. The
/// assignment is deterministic in the seed and independent of row order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DatasetError> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(DatasetError::Degenerate("empty dataset".into()));
    }
    let (pos, neg) = ordered_class_indices(ds, spec.seed);
    let take = |class: &[usize]| ((class.len() as f64) * spec.train_fraction).round() as usize;
    let n_pos_train = take(&pos).min(pos.len());
    let n_neg_train = take(&neg).min(neg.len());

    let mut train_idx: Vec<usize> = pos[..n_pos_train]
        .iter()
        .chain(&neg[..n_neg_train])
        .copied()
        .collect();
    let mut val_idx: Vec<usize> = pos[n_pos_train..]
        .iter()
        .chain(&neg[n_neg_train..])
        .copied()
        .collect();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&val_idx)))
}

/// Stratified k-fold partition. Fold `i` pairs its own rows as the test
/// part with the remaining rows as the training part.
pub fn kfold(ds: &Dataset, spec: &SplitSpec) -> Result<Vec<(Dataset, Dataset)>, DatasetError> {
    spec.validate()?;
    let n_pos = ds.n_positive();
    let n_neg = ds.n_negative();
    if spec.folds > n_pos || spec.folds > n_neg {
        return Err(DatasetError::InvalidSplit(format!(
            "{} folds exceed the smaller class ({} positive / {} negative rows)",
            spec.folds, n_pos, n_neg
        )));
    }
    let (pos, neg) = ordered_class_indices(ds, spec.seed);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); spec.folds];
    for (rank, &idx) in pos.iter().enumerate() {
        fold_members[rank % spec.folds].push(idx);
    }
    for (rank, &idx) in neg.iter().enumerate() {
        fold_members[rank % spec.folds].push(idx);
    }

    let mut out = Vec::with_capacity(spec.folds);
    for f in 0..spec.folds {
        let mut test_idx = fold_members[f].clone();
        test_idx.sort_unstable();
        let mut train_idx: Vec<usize> = fold_members
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, members)| members.iter().copied())
            .collect();
        train_idx.sort_unstable();
        out.push((ds.subset(&train_idx), ds.subset(&test_idx)));
    }
    Ok(out)
}

/// Writes a dataset as CSV: one column per feature term, then `segment`
/// and `label`.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, writer: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    let terms = ds.terms();
    let mut header: Vec<String> = terms.iter().map(|t| t.as_str().to_string()).collect();
    header.push("segment".into());
    header.push("label".into());
    w.write_record(&header).map_err(csv_io_err)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = terms
            .iter()
            .map(|&t| format_f64(ds.feature(t).unwrap()[i]))
            .collect();
        record.push(ds.segments[i].as_str().to_string());
        record.push(if ds.labels[i] { "1".into() } else { "0".into() });
        w.write_record(&record).map_err(csv_io_err)?;
    }
    w.flush()
        .map_err(|e| DatasetError::Io {
            path: "<writer>".into(),
            message: e.to_string(),
        })?;
    Ok(())
}

pub fn write_dataset_csv_file(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_dataset_csv(ds, file)
}

/// Round-trip exact float formatting.
fn format_f64(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{:?}` on f64 uses the shortest representation that round-trips.
    format!("{v:?}")
}

fn csv_io_err(e: csv::Error) -> DatasetError {
    DatasetError::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    }
}

/// Reads a dataset written by [`write_dataset_csv`].
pub fn read_dataset_csv<R: Read>(reader: R, action: ActionKind) -> Result<Dataset, DatasetError> {
    let path = "<reader>".to_string();
    let mut r = csv::Reader::from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| DatasetError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?
        .clone();

    let mut term_cols: Vec<(usize, Term)> = Vec::new();
    let mut segment_col = None;
    let mut label_col = None;
    for (idx, name) in headers.iter().enumerate() {
        if let Some(term) = Term::parse(name) {
            term_cols.push((idx, term));
        } else if name == "segment" {
            segment_col = Some(idx);
        } else if name == "label" {
            label_col = Some(idx);
        }
    }
    let segment_col = segment_col.ok_or_else(|| DatasetError::Parse {
        path: path.clone(),
        line: 1,
        message: "missing `segment` column".into(),
    })?;
    let label_col = label_col.ok_or_else(|| DatasetError::Parse {
        path: path.clone(),
        line: 1,
        message: "missing `label` column".into(),
    })?;

    let mut features: BTreeMap<Term, Vec<f64>> =
        term_cols.iter().map(|&(_, t)| (t, Vec::new())).collect();
    let mut segments = Vec::new();
    let mut labels = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| DatasetError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| DatasetError::Parse {
            path: path.clone(),
            line,
            message,
        };
        for &(idx, term) in &term_cols {
            let raw = record.get(idx).unwrap_or("");
            let value: f64 = raw
                .parse()
                .map_err(|_| parse_err(format!("bad value `{raw}` for {term}")))?;
            features.get_mut(&term).unwrap().push(value);
        }
        let seg_raw = record.get(segment_col).unwrap_or("");
        segments.push(
            DaySegment::parse(seg_raw)
                .ok_or_else(|| parse_err(format!("bad segment `{seg_raw}`")))?,
        );
        let label_raw = record.get(label_col).unwrap_or("");
        labels.push(match label_raw {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("bad label `{other}`"))),
        });
    }
    Dataset::new(action, features, segments, labels)
}

pub fn read_dataset_csv_file(path: &Path, action: ActionKind) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_dataset_csv(file, action)
}
