//! Command implementations: ingest, fit, eval, report, synth, recover,
//! and probability-surface export.
//!
//! All outputs are deterministic functions of the configuration and input
//! files: maps are ordered, floats are written in round-trip form, and no
//! wall-clock timestamps or absolute paths appear in any artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};

use fenestra::eval::{evaluate, CurvePoint, EvalOptions, EvalReport};
use fenestra::events::{
    apply_scaling, build_dataset, extract_transitions, read_dataset_csv_file, split,
    standardize, write_dataset_csv_file, ActionKind, Dataset, DatasetError, Term,
    TransitionDirection,
};
use fenestra::features::{derive_features, segment_of, DaySegment, FeatureFrame};
use fenestra::glm::{class_weights, FitControl, FitError, FittedModel};
use fenestra::ingest::{fill_gaps, load_series, resample_align, TimeSeries};
use fenestra::selection::{
    cv_select, finalize, stepwise, Candidate, CandidateSet, SelectError, SelectionTrace,
};
use fenestra::synth::{generate, recovery_test, GeneratorSpec, RecoveryConfig};

use crate::artifact::ModelArtifact;
use crate::config::{ActionChoice, PipelineConfig, SelectionMode};
use crate::CliError;

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Other(format!("serialization failed: {e}")))?;
    body.push('\n');
    std::fs::write(path, body)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn format_float(v: f64) -> String {
    let mut s = format!("{v:?}");
    if s.ends_with(".0") {
        s.truncate(s.len() - 2);
    }
    s
}

fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<(), CliError> {
    let mut body = String::from("threshold,x,y\n");
    for p in points {
        let _ = writeln!(
            body,
            "{},{},{}",
            format_float(p.threshold),
            format_float(p.x),
            format_float(p.y)
        );
    }
    std::fs::write(path, body)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn floor_minute(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts - chrono::Duration::seconds(ts.second() as i64)
        - chrono::Duration::nanoseconds(ts.nanosecond() as i64)
}

/// Loads sensor files and produces the derived feature frame.
pub fn load_frame(config: &PipelineConfig) -> Result<FeatureFrame, CliError> {
    if config.inputs.is_empty() {
        return Err(CliError::Config(
            "this command needs sensor [inputs] in the config".into(),
        ));
    }
    let schema = config.schema();
    let mut series: Vec<TimeSeries> = Vec::new();
    for (&kind, path) in &config.inputs {
        let loaded = load_series(path, kind, &schema)
            .map_err(|e| CliError::Other(format!("loading {kind}: {e}")))?;
        if loaded.is_empty() {
            return Err(CliError::Config(format!(
                "{} contains no samples",
                path.display()
            )));
        }
        series.push(loaded);
    }

    let (start, end) = match &config.range {
        Some(range) => (floor_minute(range.start), floor_minute(range.end)),
        None => {
            let first = series
                .iter()
                .map(|s| s.samples()[0].0)
                .min()
                .expect("non-empty series");
            let last = series
                .iter()
                .map(|s| s.samples()[s.len() - 1].0)
                .max()
                .expect("non-empty series");
            (floor_minute(first), floor_minute(last) + chrono::Duration::minutes(1))
        }
    };

    let frame = resample_align(&series, start, end)
        .map_err(|e| CliError::Other(format!("resampling: {e}")))?;
    let frame = fill_gaps(&frame, config.max_gap_minutes);
    derive_features(&frame, config.tz_offset_minutes)
        .map_err(|e| CliError::Other(format!("deriving features: {e}")))
}

/// Writes the feature frame as CSV, one row per grid minute.
pub fn write_features_csv(frame: &FeatureFrame, path: &Path) -> Result<(), CliError> {
    let mut body = String::from(
        "timestamp,t_indoor,log_co2,rh,t_outside_avg,segment,window_open\n",
    );
    let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
    for (i, row) in frame.rows().iter().enumerate() {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{}",
            frame
                .timestamp(i)
                .to_rfc3339_opts(SecondsFormat::Secs, true),
            opt(row.t_indoor),
            opt(row.log_co2),
            opt(row.rh),
            opt(row.t_outside_avg),
            row.segment,
            row.window_open.map(|b| if b { "1" } else { "0" }).unwrap_or(""),
        );
    }
    std::fs::write(path, body)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_ingest(config: &PipelineConfig) -> Result<(), CliError> {
    let frame = load_frame(config)?;
    ensure_out_dir(&config.out_dir)?;
    let path = config.out_dir.join("features.csv");
    write_features_csv(&frame, &path)?;
    println!(
        "ingested {} minutes from {} to {} -> {}",
        frame.len(),
        frame.timestamp(0).to_rfc3339_opts(SecondsFormat::Secs, true),
        frame
            .timestamp(frame.len().saturating_sub(1))
            .to_rfc3339_opts(SecondsFormat::Secs, true),
        path.display()
    );
    Ok(())
}

fn actions_for(choice: ActionChoice) -> Vec<ActionKind> {
    match choice {
        ActionChoice::Open => vec![ActionKind::Opening],
        ActionChoice::Close => vec![ActionKind::Closing],
        ActionChoice::Both => vec![ActionKind::Opening, ActionKind::Closing],
    }
}

fn map_dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::Degenerate(msg) => CliError::Degenerate(msg),
        other => CliError::Other(other.to_string()),
    }
}

fn map_select_err(e: SelectError) -> CliError {
    match e {
        SelectError::Dataset(d) => map_dataset_err(d),
        SelectError::Fit(FitError::InvalidInput(msg)) => CliError::Degenerate(msg),
        other => CliError::Other(other.to_string()),
    }
}

/// Full modeling run for one action: split, standardize, select, fit, and
/// evaluate on the held-out part. Returns the final model's convergence
/// flag so the caller can set the exit code after writing artifacts.
fn fit_one_action(
    config: &PipelineConfig,
    ds: Dataset,
    out_dir: &Path,
) -> Result<bool, CliError> {
    let action = ds.action();
    let (train_raw, val_raw) = split(&ds, &config.split).map_err(map_dataset_err)?;
    let standardized =
        standardize(&train_raw, &[&val_raw]).map_err(map_dataset_err)?;
    let train = standardized.train;
    let val = standardized.others.into_iter().next().expect("one held-out set");
    for term in &standardized.dropped {
        eprintln!("warning: {action}: dropped zero-variance feature {term}");
    }

    let cands = CandidateSet::from_dataset(&train);
    let ctrl = FitControl::default();
    let (spec, trace) = match config.selection {
        SelectionMode::Cv => {
            cv_select(&train, &cands, &config.split, config.weighting, &ctrl)
                .map_err(map_select_err)?
        }
        SelectionMode::Single => {
            let w = class_weights(&train, config.weighting)
                .map_err(|e| CliError::Degenerate(e.to_string()))?;
            let outcome = stepwise(&train, &cands, &w, &ctrl).map_err(map_select_err)?;
            let mut votes: BTreeMap<Candidate, usize> = BTreeMap::new();
            for term in outcome.spec.numeric_terms.iter().copied() {
                votes.insert(Candidate::from_term(term), 1);
            }
            if outcome.spec.segment_term {
                votes.insert(Candidate::Segment, 1);
            }
            let trace = SelectionTrace {
                folds: vec![outcome.trace],
                votes,
                final_spec: outcome.spec.clone(),
            };
            (outcome.spec, trace)
        }
    };

    let w = class_weights(&train, config.weighting)
        .map_err(|e| CliError::Degenerate(e.to_string()))?;
    let (model, separated) = match finalize(&train, &spec, &w, &ctrl) {
        Ok(model) => (model, false),
        Err(SelectError::Fit(FitError::Separation { model, .. })) => (*model, true),
        Err(other) => return Err(map_select_err(other)),
    };
    if separated {
        eprintln!(
            "warning: {action}: quasi-separation detected; keeping the capped model"
        );
    }

    let scores = model
        .predict_dataset(&val)
        .map_err(|e| CliError::Other(format!("{action}: scoring held-out rows: {e}")))?;
    let report: EvalReport = evaluate(&scores, val.labels(), &EvalOptions::default())
        .map_err(|e| CliError::Degenerate(format!("{action}: held-out evaluation: {e}")))?;

    let tag = action.as_str();
    write_json(
        &out_dir.join(format!("model_{tag}.json")),
        &ModelArtifact::from_model(&model, Some(config.split.seed)),
    )?;
    write_json(&out_dir.join(format!("trace_{tag}.json")), &trace)?;
    write_json(&out_dir.join(format!("eval_{tag}.json")), &report)?;
    write_curve_csv(&out_dir.join(format!("roc_{tag}.csv")), &report.roc)?;
    write_curve_csv(&out_dir.join(format!("pr_{tag}.csv")), &report.pr)?;
    let full_standardized =
        apply_scaling(&ds, &standardized.params).map_err(map_dataset_err)?;
    write_dataset_csv_file(
        &full_standardized,
        &out_dir.join(format!("dataset_{tag}.csv")),
    )
    .map_err(map_dataset_err)?;
    write_json(
        &out_dir.join(format!("scaling_{tag}.json")),
        &standardized.params,
    )?;

    println!(
        "{action}: selected {} | AIC {:.2} | holdout AUC-ROC {:.4}, AUC-PR {:.4}",
        spec, model.aic, report.auc_roc, report.auc_pr
    );
    Ok(!model.converged || separated)
}

pub fn cmd_fit(config: &PipelineConfig) -> Result<(), CliError> {
    ensure_out_dir(&config.out_dir)?;
    let actions = actions_for(config.action);
    let mut unconverged = false;

    if let Some(dataset) = &config.dataset {
        if actions.len() != 1 {
            return Err(CliError::Config(
                "dataset mode models one action per file; pass --action open or close".into(),
            ));
        }
        let ds = read_dataset_csv_file(&dataset.path, actions[0]).map_err(map_dataset_err)?;
        unconverged |= fit_one_action(config, ds, &config.out_dir)?;
    } else {
        let frame = load_frame(config)?;
        for action in actions {
            let ds = build_dataset(&frame, action).map_err(map_dataset_err)?;
            unconverged |= fit_one_action(config, ds, &config.out_dir)?;
        }
    }

    if unconverged {
        return Err(CliError::NotConverged(
            "final fit did not converge; artifacts were still written".into(),
        ));
    }
    Ok(())
}

pub fn cmd_eval(model_path: &Path, dataset_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let artifact = ModelArtifact::load(model_path)?;
    let model = artifact.into_model()?;
    let ds = read_dataset_csv_file(dataset_path, model.action).map_err(map_dataset_err)?;
    let scores = model
        .predict_dataset(&ds)
        .map_err(|e| CliError::Config(format!("dataset is missing model terms: {e}")))?;
    let report = evaluate(&scores, ds.labels(), &EvalOptions::default())
        .map_err(|e| CliError::Degenerate(e.to_string()))?;
    ensure_out_dir(out_dir)?;
    write_json(&out_dir.join("eval.json"), &report)?;
    write_curve_csv(&out_dir.join("roc.csv"), &report.roc)?;
    write_curve_csv(&out_dir.join("pr.csv"), &report.pr)?;
    println!(
        "AUC-ROC {:.4}, AUC-PR {:.4}, threshold {:.4} (tp {} fp {} tn {} fn {})",
        report.auc_roc,
        report.auc_pr,
        report.operating_threshold,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.tn,
        report.confusion.fn_
    );
    Ok(())
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct DirectionCounts {
    opened: usize,
    closed: usize,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct MonthSummary {
    open_minutes: usize,
    episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Episode {
    start: String,
    minutes: usize,
}

/// Event summary: per-segment transition counts, per-month open-minute
/// totals, and the individual open episodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventReport {
    events: BTreeMap<DaySegment, DirectionCounts>,
    monthly: BTreeMap<String, MonthSummary>,
    episodes: Vec<Episode>,
}

pub fn build_event_report(frame: &FeatureFrame) -> EventReport {
    let mut events: BTreeMap<DaySegment, DirectionCounts> = DaySegment::ALL
        .into_iter()
        .map(|s| (s, DirectionCounts::default()))
        .collect();
    for transition in extract_transitions(frame) {
        let local = transition.timestamp
            + chrono::Duration::minutes(frame.tz_offset_minutes() as i64);
        let counts = events
            .entry(segment_of(local.naive_utc().time()))
            .or_default();
        match transition.direction {
            TransitionDirection::Opened => counts.opened += 1,
            TransitionDirection::Closed => counts.closed += 1,
        }
    }

    let mut monthly: BTreeMap<String, MonthSummary> = BTreeMap::new();
    let mut episodes = Vec::new();
    let mut run_start: Option<usize> = None;
    let rows = frame.rows();
    for i in 0..=rows.len() {
        let open_now = i < rows.len() && rows[i].window_open == Some(true);
        if open_now {
            let month = frame.local_date(i).format("%Y-%m").to_string();
            monthly.entry(month).or_default().open_minutes += 1;
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(start) = run_start.take() {
            let month = frame.local_date(start).format("%Y-%m").to_string();
            monthly.entry(month).or_default().episodes += 1;
            episodes.push(Episode {
                start: frame
                    .timestamp(start)
                    .to_rfc3339_opts(SecondsFormat::Secs, true),
                minutes: i - start,
            });
        }
    }
    EventReport {
        events,
        monthly,
        episodes,
    }
}

pub fn cmd_report(config: &PipelineConfig) -> Result<(), CliError> {
    let frame = load_frame(config)?;
    let report = build_event_report(&frame);
    ensure_out_dir(&config.out_dir)?;
    write_json(&config.out_dir.join("report.json"), &report)?;
    let opened: usize = report.events.values().map(|c| c.opened).sum();
    let closed: usize = report.events.values().map(|c| c.closed).sum();
    println!(
        "{} opened / {} closed events, {} episodes",
        opened,
        closed,
        report.episodes.len()
    );
    Ok(())
}

pub fn cmd_synth(
    generator_path: &Path,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(generator_path).map_err(|e| {
        CliError::Config(format!("cannot read {}: {e}", generator_path.display()))
    })?;
    let mut gspec: GeneratorSpec = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("bad generator spec: {e}")))?;
    if let Some(seed) = seed_override {
        gspec.seed = seed;
    }
    let ds = generate(&gspec).map_err(|e| CliError::Config(e.to_string()))?;
    ensure_out_dir(out_dir)?;
    write_dataset_csv_file(&ds, &out_dir.join("dataset.csv")).map_err(map_dataset_err)?;
    write_json(&out_dir.join("generator.json"), &gspec)?;
    println!(
        "generated {} rows ({} positive, prevalence {:.4})",
        ds.len(),
        ds.n_positive(),
        ds.prevalence()
    );
    Ok(())
}

pub fn cmd_recover(
    generator_path: &Path,
    folds: Option<usize>,
    weighting: Option<fenestra::glm::Weighting>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(generator_path).map_err(|e| {
        CliError::Config(format!("cannot read {}: {e}", generator_path.display()))
    })?;
    let mut gspec: GeneratorSpec = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("bad generator spec: {e}")))?;
    if let Some(seed) = seed_override {
        gspec.seed = seed;
    }
    let mut cfg = RecoveryConfig::default();
    if let Some(folds) = folds {
        cfg.folds = folds;
    }
    if let Some(weighting) = weighting {
        cfg.weighting = weighting;
    }
    let (report, trace) = recovery_test(&gspec, &cfg).map_err(|e| match e {
        fenestra::synth::SynthError::Degenerate(msg) => CliError::Degenerate(msg),
        fenestra::synth::SynthError::Dataset(d) => map_dataset_err(d),
        other => CliError::Other(other.to_string()),
    })?;
    ensure_out_dir(out_dir)?;
    write_json(&out_dir.join("recovery.json"), &report)?;
    write_json(&out_dir.join("trace.json"), &trace)?;
    println!(
        "spec recovered: {} | max |error| {:.4} | converged: {}",
        report.spec_recovered, report.max_abs_error, report.converged
    );
    Ok(())
}

/// One surface axis: term swept from `lo` to `hi` inclusive in `step`
/// increments.
#[derive(Debug, Clone, Copy)]
pub struct Axis {
    pub term: Term,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Axis {
    pub fn parse(raw: &str) -> Result<Self, CliError> {
        let parts: Vec<&str> = raw.split(':').collect();
        if parts.len() != 4 {
            return Err(CliError::Config(format!(
                "bad axis `{raw}`; expected term:lo:hi:step"
            )));
        }
        let term = Term::parse(parts[0])
            .ok_or_else(|| CliError::Config(format!("unknown term `{}`", parts[0])))?;
        let parse = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|_| CliError::Config(format!("bad number `{s}` in axis `{raw}`")))
        };
        let (lo, hi, step) = (parse(parts[1])?, parse(parts[2])?, parse(parts[3])?);
        if !(step > 0.0) || hi < lo {
            return Err(CliError::Config(format!(
                "axis `{raw}` needs lo <= hi and step > 0"
            )));
        }
        Ok(Self { term, lo, hi, step })
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let v = self.lo + self.step * k as f64;
            if v > self.hi + self.step * 1e-9 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    }
}

pub fn parse_fixed(raw: &[String]) -> Result<BTreeMap<Term, f64>, CliError> {
    let mut out = BTreeMap::new();
    for item in raw {
        for part in item.split(',') {
            let Some((key, value)) = part.split_once('=') else {
                return Err(CliError::Config(format!(
                    "bad fixed value `{part}`; expected term=value"
                )));
            };
            let term = Term::parse(key.trim())
                .ok_or_else(|| CliError::Config(format!("unknown term `{key}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad number in `{part}`")))?;
            out.insert(term, value);
        }
    }
    Ok(out)
}

/// Probability grid over two model terms with the rest pinned. Values are
/// on the standardized scale the model was fit on.
pub fn surface_grid(
    model: &FittedModel,
    x: &Axis,
    y: &Axis,
    fixed: &BTreeMap<Term, f64>,
    segment: Option<DaySegment>,
) -> Result<String, CliError> {
    let mut body = format!("{},{},probability\n", x.term, y.term);
    let mut values: BTreeMap<Term, f64> = fixed.clone();
    for term in &model.spec.numeric_terms {
        values.entry(*term).or_insert(0.0);
    }
    for xv in x.values() {
        for yv in y.values() {
            values.insert(x.term, xv);
            values.insert(y.term, yv);
            let p = model
                .predict_probability(&values, segment)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let _ = writeln!(
                body,
                "{},{},{}",
                format_float(xv),
                format_float(yv),
                format_float(p)
            );
        }
    }
    Ok(body)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_surface(
    model_path: &Path,
    x: &Axis,
    y: &Axis,
    fixed: &BTreeMap<Term, f64>,
    segment_choice: &str,
    out_dir: &Path,
) -> Result<(), CliError> {
    let model = ModelArtifact::load(model_path)?.into_model()?;
    for axis in [x, y] {
        if !model.spec.numeric_terms.contains(&axis.term) {
            return Err(CliError::Config(format!(
                "model does not contain axis term `{}`",
                axis.term
            )));
        }
    }
    ensure_out_dir(out_dir)?;
    if model.spec.segment_term {
        let segments: Vec<DaySegment> = match segment_choice {
            "all" => DaySegment::ALL.to_vec(),
            other => vec![DaySegment::parse(&other.to_uppercase()).ok_or_else(|| {
                CliError::Config(format!(
                    "bad segment `{other}` (expected ds1, ds2, ds3, or all)"
                ))
            })?],
        };
        for segment in segments {
            let body = surface_grid(&model, x, y, fixed, Some(segment))?;
            let name = format!("surface_{}.csv", segment.as_str().to_lowercase());
            std::fs::write(out_dir.join(&name), body)
                .map_err(|e| CliError::Other(format!("cannot write {name}: {e}")))?;
        }
    } else {
        let body = surface_grid(&model, x, y, fixed, None)?;
        std::fs::write(out_dir.join("surface.csv"), body)
            .map_err(|e| CliError::Other(format!("cannot write surface.csv: {e}")))?;
    }
    println!("surface written to {}", out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fenestra::features::FeatureRow;
    use fenestra::glm::CoefKey;

    fn frame_of(states: &[Option<bool>], start: &str) -> FeatureFrame {
        let rows = states
            .iter()
            .map(|&window_open| FeatureRow {
                t_indoor: Some(21.0),
                log_co2: Some(6.1),
                rh: Some(38.0),
                t_outside_avg: Some(1.5),
                segment: DaySegment::Ds1,
                window_open,
            })
            .collect();
        FeatureFrame::new(
            DateTime::parse_from_rfc3339(start).unwrap().with_timezone(&Utc),
            0,
            rows,
        )
    }

    #[test]
    fn single_november_episode_is_counted() {
        // Closed for 10 minutes, open for 30, closed again.
        let mut states = vec![Some(false); 10];
        states.extend(vec![Some(true); 30]);
        states.extend(vec![Some(false); 10]);
        let frame = frame_of(&states, "2020-11-05T10:00:00Z");
        let report = build_event_report(&frame);
        assert_eq!(report.monthly["2020-11"].open_minutes, 30);
        assert_eq!(report.monthly["2020-11"].episodes, 1);
        assert_eq!(report.episodes.len(), 1);
        assert_eq!(report.episodes[0].minutes, 30);
        assert_eq!(report.events[&DaySegment::Ds1].opened, 1);
        assert_eq!(report.events[&DaySegment::Ds1].closed, 1);
    }

    #[test]
    fn all_closed_frame_reports_zero() {
        let frame = frame_of(&[Some(false); 60], "2020-11-05T10:00:00Z");
        let report = build_event_report(&frame);
        assert!(report.episodes.is_empty());
        assert!(report.monthly.is_empty());
        assert!(report
            .events
            .values()
            .all(|c| c.opened == 0 && c.closed == 0));
    }

    #[test]
    fn multi_episode_totals_match_transition_pairing() {
        let mut states = Vec::new();
        for (open_len, closed_len) in [(5usize, 7usize), (12, 3), (9, 20)] {
            states.extend(vec![Some(false); closed_len]);
            states.extend(vec![Some(true); open_len]);
        }
        states.push(Some(false));
        let frame = frame_of(&states, "2020-12-01T08:00:00Z");
        let report = build_event_report(&frame);

        // Independent check via the transitions module: pair each opening
        // with the next closing and sum the gaps.
        let transitions = extract_transitions(&frame);
        let mut expected = 0_i64;
        let mut open_at: Option<DateTime<Utc>> = None;
        for t in &transitions {
            match t.direction {
                TransitionDirection::Opened => open_at = Some(t.timestamp),
                TransitionDirection::Closed => {
                    if let Some(started) = open_at.take() {
                        expected += (t.timestamp - started).num_minutes();
                    }
                }
            }
        }
        let total: usize = report.monthly.values().map(|m| m.open_minutes).sum();
        assert_eq!(total as i64, expected);
        assert_eq!(report.episodes.len(), 3);
        let episode_sum: usize = report.episodes.iter().map(|e| e.minutes).sum();
        assert_eq!(episode_sum as i64, expected);
    }

    #[test]
    fn axis_parsing_and_grid_values() {
        let axis = Axis::parse("log_co2:-1:1:0.5").unwrap();
        assert_eq!(axis.values(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(Axis::parse("nope:0:1:0.5").is_err());
        assert!(Axis::parse("rh:1:0:0.5").is_err());
        assert!(Axis::parse("rh:0:1:0").is_err());
    }

    #[test]
    fn surface_maximum_sits_at_the_positive_corner() {
        // Opening model with positive outside-temperature and CO2 slopes:
        // the maximum must land at the grid corner where both are largest.
        let coefficients: BTreeMap<CoefKey, f64> = [
            (CoefKey::AlphaDs1, -1.729),
            (CoefKey::AlphaDs2, -0.242),
            (CoefKey::AlphaDs3, -3.720),
            (CoefKey::TIndoor, -0.627),
            (CoefKey::LogCo2, 1.095),
            (CoefKey::Rh, 0.299),
            (CoefKey::TOutsideAvg, 0.980),
        ]
        .into_iter()
        .collect();
        let model =
            FittedModel::from_coefficients(ActionKind::Opening, coefficients, None).unwrap();
        let x = Axis::parse("t_outside_avg:-2:2:1").unwrap();
        let y = Axis::parse("log_co2:-2:2:1").unwrap();
        let body = surface_grid(&model, &x, &y, &BTreeMap::new(), Some(DaySegment::Ds3)).unwrap();
        let mut best: Option<(f64, f64, f64)> = None;
        for line in body.lines().skip(1) {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            if best.map(|(_, _, p)| cells[2] > p).unwrap_or(true) {
                best = Some((cells[0], cells[1], cells[2]));
            }
        }
        let (bx, by, _) = best.unwrap();
        assert_eq!((bx, by), (2.0, 2.0));
        assert_eq!(body.lines().count(), 1 + 25);
    }

    #[test]
    fn zero_slope_model_gives_constant_surface() {
        let coefficients: BTreeMap<CoefKey, f64> = [
            (CoefKey::Alpha, -1.0),
            (CoefKey::LogCo2, 0.0),
            (CoefKey::TOutsideAvg, 0.0),
        ]
        .into_iter()
        .collect();
        let model =
            FittedModel::from_coefficients(ActionKind::Opening, coefficients, None).unwrap();
        let x = Axis::parse("t_outside_avg:0:2:1").unwrap();
        let y = Axis::parse("log_co2:0:2:1").unwrap();
        let body = surface_grid(&model, &x, &y, &BTreeMap::new(), None).unwrap();
        let probs: Vec<f64> = body
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq0(&probs);
        assert_eq!(probs.len(), 9);
    }

    fn assert_eq0(probs: &[f64]) {
        for p in probs {
            assert_eq!(*p, probs[0]);
        }
    }
}
