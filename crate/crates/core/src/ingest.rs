//! Sensor file loading and alignment onto a shared one-minute grid.
//!
//! Each sensor arrives as its own CSV export with a `timestamp` column
//! (ISO 8601) and a `value` column. Sampling rates differ between sensors,
//! so everything is resampled onto a common minute grid by sample-and-hold:
//! a grid cell holds the last value observed at or before that instant.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical channel a series belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    WindowState,
    TIndoor,
    Co2,
    Rh,
    TOutside,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::WindowState,
        SensorKind::TIndoor,
        SensorKind::Co2,
        SensorKind::Rh,
        SensorKind::TOutside,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SensorKind::WindowState => "window_state",
            SensorKind::TIndoor => "t_indoor",
            SensorKind::Co2 => "co2",
            SensorKind::Rh => "rh",
            SensorKind::TOutside => "t_outside",
        }
    }

    /// Validates a raw value against the channel's admissible range.
    fn check_range(&self, value: f64) -> Result<(), String> {
        match self {
            SensorKind::WindowState if value != 0.0 && value != 1.0 => {
                Err(format!("window state must be 0 or 1, got {value}"))
            }
            SensorKind::Co2 if value <= 0.0 => Err(format!("CO2 must be positive, got {value}")),
            SensorKind::Rh if !(0.0..=100.0).contains(&value) => {
                Err(format!("RH must lie in [0, 100], got {value}"))
            }
            _ if !value.is_finite() => Err(format!("value must be finite, got {value}")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: missing column `{column}`")]
    Schema { path: String, column: String },
    #[error("{sensor} at {timestamp}: {message}")]
    Range {
        sensor: String,
        timestamp: DateTime<Utc>,
        message: String,
    },
    #[error("no input series")]
    EmptyInput,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// One sensor's raw timestamped samples.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub sensor_id: String,
    pub kind: SensorKind,
    samples: Vec<(DateTime<Utc>, f64)>,
}

impl TimeSeries {
    /// Builds a series, enforcing strictly increasing timestamps and the
    /// per-kind value ranges.
    pub fn new(
        sensor_id: impl Into<String>,
        kind: SensorKind,
        samples: Vec<(DateTime<Utc>, f64)>,
    ) -> Result<Self, IngestError> {
        let sensor_id = sensor_id.into();
        for pair in samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(IngestError::InvalidGrid(format!(
                    "{sensor_id}: timestamps not strictly increasing at {}",
                    pair[1].0
                )));
            }
        }
        for &(ts, value) in &samples {
            kind.check_range(value).map_err(|message| IngestError::Range {
                sensor: sensor_id.clone(),
                timestamp: ts,
                message,
            })?;
        }
        Ok(Self {
            sensor_id,
            kind,
            samples,
        })
    }

    pub fn samples(&self) -> &[(DateTime<Utc>, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Column-name remapping for sensor CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub timestamp: String,
    pub value: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            value: "value".into(),
        }
    }
}

/// Loads one sensor CSV into a sorted, deduplicated series.
///
/// Duplicate timestamps keep the value appearing last in the file. Rows
/// with an empty value field are treated as missed polls and skipped.
pub fn load_series(
    path: &Path,
    kind: SensorKind,
    schema: &ColumnSchema,
) -> Result<TimeSeries, IngestError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|err| match err.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io {
                path: path_str.clone(),
                source: match err.into_kind() {
                    csv::ErrorKind::Io(io) => io,
                    _ => unreachable!(),
                },
            },
            _ => IngestError::Csv {
                path: path_str.clone(),
                source: err,
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();
    let col_index = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = col_index(&schema.timestamp).ok_or_else(|| IngestError::Schema {
        path: path_str.clone(),
        column: schema.timestamp.clone(),
    })?;
    let value_col = col_index(&schema.value).ok_or_else(|| IngestError::Schema {
        path: path_str.clone(),
        column: schema.value.clone(),
    })?;

    let mut rows: Vec<(DateTime<Utc>, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: path_str.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let ts_raw = record.get(ts_col).unwrap_or("");
        let value_raw = record.get(value_col).unwrap_or("").trim();
        if value_raw.is_empty() {
            continue;
        }
        let ts = parse_timestamp(ts_raw).ok_or_else(|| IngestError::Parse {
            path: path_str.clone(),
            line,
            message: format!("unparseable timestamp `{ts_raw}`"),
        })?;
        let value: f64 = value_raw.parse().map_err(|_| IngestError::Parse {
            path: path_str.clone(),
            line,
            message: format!("unparseable value `{value_raw}`"),
        })?;
        kind.check_range(value).map_err(|message| IngestError::Range {
            sensor: format!("{kind}"),
            timestamp: ts,
            message,
        })?;
        rows.push((ts, value));
    }

    let samples = dedup_last_wins(rows);
    let sensor_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path_str.clone());
    TimeSeries::new(sensor_id, kind, samples)
}

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(naive.and_utc());
        }
    }
    None
}

/// Stable-sorts by timestamp and keeps the last entry of each duplicate run,
/// so later file rows win over earlier ones.
fn dedup_last_wins(mut rows: Vec<(DateTime<Utc>, f64)>) -> Vec<(DateTime<Utc>, f64)> {
    rows.sort_by_key(|(ts, _)| *ts);
    let mut out: Vec<(DateTime<Utc>, f64)> = Vec::with_capacity(rows.len());
    for (ts, value) in rows {
        match out.last_mut() {
            Some(last) if last.0 == ts => last.1 = value,
            _ => out.push((ts, value)),
        }
    }
    out
}

/// Synchronized one-minute grid across sensors. A cell is `None` until the
/// owning series has produced its first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    start: DateTime<Utc>,
    len: usize,
    columns: BTreeMap<SensorKind, Vec<Option<f64>>>,
}

impl RawFrame {
    pub fn from_columns(
        start: DateTime<Utc>,
        columns: BTreeMap<SensorKind, Vec<Option<f64>>>,
    ) -> Result<Self, IngestError> {
        if start.second() != 0 || start.nanosecond() != 0 {
            return Err(IngestError::InvalidGrid(format!(
                "grid start {start} is not minute-aligned"
            )));
        }
        let mut len = None;
        for col in columns.values() {
            match len {
                None => len = Some(col.len()),
                Some(n) if n != col.len() => {
                    return Err(IngestError::InvalidGrid(
                        "columns differ in length".to_string(),
                    ))
                }
                _ => {}
            }
        }
        let len = len.ok_or(IngestError::EmptyInput)?;
        Ok(Self {
            start,
            len,
            columns,
        })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Grid instant of row `i`.
    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(i as i64)
    }

    pub fn column(&self, kind: SensorKind) -> Option<&[Option<f64>]> {
        self.columns.get(&kind).map(|v| v.as_slice())
    }

    pub fn kinds(&self) -> impl Iterator<Item = SensorKind> + '_ {
        self.columns.keys().copied()
    }

    /// Converts the frame back to per-sensor minute series, skipping
    /// missing cells.
    pub fn to_series(&self) -> Vec<TimeSeries> {
        self.columns
            .iter()
            .map(|(&kind, col)| {
                let samples = col
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.map(|value| (self.timestamp(i), value)))
                    .collect();
                TimeSeries::new(format!("{kind}"), kind, samples)
                    .expect("frame cells satisfy range invariants")
            })
            .collect()
    }
}

/// Resamples sensor series onto the minute grid `[start, end)` by
/// sample-and-hold. Cell `i` holds the last sample at or before the grid
/// instant; minutes before a series' first sample stay missing. Several
/// series of the same kind are merged, later input winning on timestamp
/// ties.
pub fn resample_align(
    series: &[TimeSeries],
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<RawFrame, IngestError> {
    if series.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    for ts in [start, end] {
        if ts.second() != 0 || ts.nanosecond() != 0 {
            return Err(IngestError::InvalidGrid(format!(
                "{ts} is not minute-aligned"
            )));
        }
    }
    if start >= end {
        return Err(IngestError::InvalidGrid(format!(
            "start {start} must precede end {end}"
        )));
    }
    let len = (end - start).num_minutes() as usize;

    let mut merged: BTreeMap<SensorKind, Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
    for s in series {
        merged
            .entry(s.kind)
            .or_default()
            .extend_from_slice(s.samples());
    }

    let mut columns = BTreeMap::new();
    for (kind, rows) in merged {
        let samples = dedup_last_wins(rows);
        let mut col = vec![None; len];
        let mut idx = 0;
        let mut held: Option<f64> = None;
        for (i, cell) in col.iter_mut().enumerate() {
            let instant = start + Duration::minutes(i as i64);
            while idx < samples.len() && samples[idx].0 <= instant {
                held = Some(samples[idx].1);
                idx += 1;
            }
            *cell = held;
        }
        columns.insert(kind, col);
    }
    RawFrame::from_columns(start, columns)
}

/// Forward-fills missing runs of length at most `max_gap_minutes`. Longer
/// runs are left missing, and so are leading runs with no preceding value.
/// The window-state column follows the same bound: state changes hidden by
/// a long outage stay unobserved.
pub fn fill_gaps(frame: &RawFrame, max_gap_minutes: usize) -> RawFrame {
    let mut columns = BTreeMap::new();
    for (&kind, col) in &frame.columns {
        let mut filled = col.clone();
        let mut i = 0;
        while i < filled.len() {
            if filled[i].is_some() {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < filled.len() && filled[i].is_none() {
                i += 1;
            }
            let run_len = i - run_start;
            if run_len <= max_gap_minutes && run_start > 0 {
                let value = filled[run_start - 1];
                for cell in &mut filled[run_start..i] {
                    *cell = value;
                }
            }
        }
        columns.insert(kind, filled);
    }
    RawFrame {
        start: frame.start,
        len: frame.len,
        columns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn utc(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_series_reads_sorted_rows() {
        let f = write_csv(
            "timestamp,value\n2020-11-01T00:00:00Z,21.0\n2020-11-01T00:01:00Z,21.2\n",
        );
        let series = load_series(f.path(), SensorKind::TIndoor, &ColumnSchema::default()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series.samples()[0].1, 21.0);
        assert_eq!(series.samples()[1].1, 21.2);
    }

    #[test]
    fn duplicate_timestamp_keeps_last_value() {
        let f = write_csv(
            "timestamp,value\n2020-11-01T00:00:00Z,400\n2020-11-01T00:00:00Z,410\n",
        );
        let series = load_series(f.path(), SensorKind::Co2, &ColumnSchema::default()).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series.samples()[0].1, 410.0);
    }

    #[test]
    fn rh_out_of_range_is_reported_with_timestamp() {
        let f = write_csv("timestamp,value\n2020-11-01T00:00:00Z,150\n");
        let err = load_series(f.path(), SensorKind::Rh, &ColumnSchema::default()).unwrap_err();
        match err {
            IngestError::Range { timestamp, .. } => {
                assert_eq!(timestamp, utc("2020-11-01T00:00:00Z"));
            }
            other => panic!("expected RangeError, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let f = write_csv("time,value\n2020-11-01T00:00:00Z,21\n");
        let err = load_series(f.path(), SensorKind::TIndoor, &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, IngestError::Schema { column, .. } if column == "timestamp"));
    }

    #[test]
    fn bad_row_reports_line_number() {
        let f = write_csv("timestamp,value\n2020-11-01T00:00:00Z,21\nnot-a-time,22\n");
        let err = load_series(f.path(), SensorKind::TIndoor, &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn schema_remap_reads_renamed_columns() {
        let f = write_csv("ts,reading\n2020-11-01T00:00:00Z,450\n");
        let schema = ColumnSchema {
            timestamp: "ts".into(),
            value: "reading".into(),
        };
        let series = load_series(f.path(), SensorKind::Co2, &schema).unwrap();
        assert_eq!(series.len(), 1);
    }

    #[test]
    fn empty_value_rows_are_skipped() {
        let f = write_csv(
            "timestamp,value\n2020-11-01T00:00:00Z,450\n2020-11-01T00:01:00Z,\n2020-11-01T00:02:00Z,460\n",
        );
        let series = load_series(f.path(), SensorKind::Co2, &ColumnSchema::default()).unwrap();
        assert_eq!(series.len(), 2);
    }

    #[test]
    fn resample_holds_last_value() {
        let series = TimeSeries::new(
            "co2",
            SensorKind::Co2,
            vec![
                (utc("2020-11-01T00:00:00Z"), 400.0),
                (utc("2020-11-01T00:05:00Z"), 500.0),
            ],
        )
        .unwrap();
        let frame = resample_align(
            &[series],
            utc("2020-11-01T00:00:00Z"),
            utc("2020-11-01T00:06:00Z"),
        )
        .unwrap();
        let col = frame.column(SensorKind::Co2).unwrap();
        assert_eq!(col[0], Some(400.0));
        for cell in &col[1..5] {
            assert_eq!(*cell, Some(400.0));
        }
        assert_eq!(col[5], Some(500.0));
    }

    #[test]
    fn minutes_before_first_sample_are_missing() {
        let series = TimeSeries::new(
            "t",
            SensorKind::TIndoor,
            vec![(utc("2020-11-01T00:03:00Z"), 20.0)],
        )
        .unwrap();
        let frame = resample_align(
            &[series],
            utc("2020-11-01T00:00:00Z"),
            utc("2020-11-01T00:06:00Z"),
        )
        .unwrap();
        let col = frame.column(SensorKind::TIndoor).unwrap();
        assert_eq!(&col[..3], &[None, None, None]);
        assert_eq!(col[3], Some(20.0));
    }

    /// Brute-force reference: for every grid minute scan the whole sample
    /// list for the latest sample at or before it.
    fn reference_resample(
        samples: &[(DateTime<Utc>, f64)],
        start: DateTime<Utc>,
        len: usize,
    ) -> Vec<Option<f64>> {
        (0..len)
            .map(|i| {
                let instant = start + Duration::minutes(i as i64);
                samples
                    .iter()
                    .filter(|(ts, _)| *ts <= instant)
                    .last()
                    .map(|(_, v)| *v)
            })
            .collect()
    }

    #[test]
    fn offset_sampling_rates_match_reference_resampler() {
        let start = utc("2020-11-01T00:00:00Z");
        let end = utc("2020-11-01T00:10:00Z");
        // 30-second sensor and a 90-second sensor, both offset from the grid.
        let fast: Vec<_> = (0..18)
            .map(|i| (start + Duration::seconds(15 + 30 * i), 20.0 + i as f64))
            .collect();
        let slow: Vec<_> = (0..6)
            .map(|i| (start + Duration::seconds(40 + 90 * i), 400.0 + i as f64))
            .collect();
        let series = vec![
            TimeSeries::new("fast", SensorKind::TIndoor, fast.clone()).unwrap(),
            TimeSeries::new("slow", SensorKind::Co2, slow.clone()).unwrap(),
        ];
        let frame = resample_align(&series, start, end).unwrap();
        assert_eq!(frame.len(), 10);
        assert_eq!(
            frame.column(SensorKind::TIndoor).unwrap(),
            reference_resample(&fast, start, 10).as_slice()
        );
        assert_eq!(
            frame.column(SensorKind::Co2).unwrap(),
            reference_resample(&slow, start, 10).as_slice()
        );
    }

    #[test]
    fn resample_is_idempotent_on_its_own_output() {
        let start = utc("2020-11-01T00:00:00Z");
        let end = utc("2020-11-01T00:20:00Z");
        let series = vec![
            TimeSeries::new(
                "a",
                SensorKind::Rh,
                vec![
                    (start + Duration::minutes(4), 40.0),
                    (start + Duration::minutes(9), 45.0),
                ],
            )
            .unwrap(),
            TimeSeries::new(
                "b",
                SensorKind::WindowState,
                vec![(start, 0.0), (start + Duration::minutes(12), 1.0)],
            )
            .unwrap(),
        ];
        let frame = resample_align(&series, start, end).unwrap();
        let again = resample_align(&frame.to_series(), start, end).unwrap();
        assert_eq!(frame, again);
    }

    fn frame_with_gap(values: &[Option<f64>]) -> RawFrame {
        let mut columns = BTreeMap::new();
        columns.insert(SensorKind::Rh, values.to_vec());
        RawFrame::from_columns(utc("2020-11-01T00:00:00Z"), columns).unwrap()
    }

    #[test]
    fn short_gap_is_filled() {
        let frame = frame_with_gap(&[Some(1.0), None, None, None, Some(2.0)]);
        let filled = fill_gaps(&frame, 5);
        let col = filled.column(SensorKind::Rh).unwrap();
        assert_eq!(col, &[Some(1.0), Some(1.0), Some(1.0), Some(1.0), Some(2.0)]);
    }

    #[test]
    fn long_gap_stays_missing() {
        let mut cells = vec![Some(1.0)];
        cells.extend(std::iter::repeat_n(None, 10));
        cells.push(Some(2.0));
        let frame = frame_with_gap(&cells);
        let filled = fill_gaps(&frame, 5);
        let col = filled.column(SensorKind::Rh).unwrap();
        assert_eq!(col[0], Some(1.0));
        for cell in &col[1..11] {
            assert_eq!(*cell, None);
        }
        assert_eq!(col[11], Some(2.0));
    }

    #[test]
    fn zero_max_gap_is_identity() {
        let frame = frame_with_gap(&[Some(1.0), None, Some(2.0), None, None]);
        let filled = fill_gaps(&frame, 0);
        assert_eq!(frame, filled);
    }

    #[test]
    fn fill_never_changes_present_cells_and_leading_run_stays() {
        let frame = frame_with_gap(&[None, None, Some(3.0), None, Some(4.0), None]);
        let filled = fill_gaps(&frame, 2);
        let col = filled.column(SensorKind::Rh).unwrap();
        assert_eq!(col[0], None);
        assert_eq!(col[1], None);
        assert_eq!(col[2], Some(3.0));
        assert_eq!(col[3], Some(3.0));
        assert_eq!(col[4], Some(4.0));
        assert_eq!(col[5], Some(4.0));
    }
}
