//! Predictor derivation: log-CO₂, daily-average outside temperature, and
//! the day-segment categorical, assembled into a per-minute feature frame.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{RawFrame, SensorKind};

/// Minimum fraction of a date's grid minutes that must carry an outside
/// temperature reading before the daily average is considered usable.
const DAILY_AVG_MIN_COVERAGE: f64 = 0.25;

/// Time-of-day bucket. Assignment is by local clock time:
/// DS1 = [06:00, 13:00), DS2 = [13:00, 22:00), DS3 = [22:00, 06:00).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DaySegment {
    #[serde(rename = "DS1")]
    Ds1,
    #[serde(rename = "DS2")]
    Ds2,
    #[serde(rename = "DS3")]
    Ds3,
}

impl DaySegment {
    pub const ALL: [DaySegment; 3] = [DaySegment::Ds1, DaySegment::Ds2, DaySegment::Ds3];

    pub fn as_str(&self) -> &'static str {
        match self {
            DaySegment::Ds1 => "DS1",
            DaySegment::Ds2 => "DS2",
            DaySegment::Ds3 => "DS3",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "DS1" => Some(DaySegment::Ds1),
            "DS2" => Some(DaySegment::Ds2),
            "DS3" => Some(DaySegment::Ds3),
            _ => None,
        }
    }
}

impl fmt::Display for DaySegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a local clock time to its day segment.
pub fn segment_of(local_time: NaiveTime) -> DaySegment {
    let minute = local_time.hour() * 60 + local_time.minute();
    match minute {
        m if (360..780).contains(&m) => DaySegment::Ds1,
        m if (780..1320).contains(&m) => DaySegment::Ds2,
        _ => DaySegment::Ds3,
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("CO2 value {value} at {timestamp} is not positive; cannot take log")]
    NonPositiveCo2 {
        timestamp: DateTime<Utc>,
        value: f64,
    },
}

/// One grid minute of derived predictors plus the observed window state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    pub t_indoor: Option<f64>,
    pub log_co2: Option<f64>,
    pub rh: Option<f64>,
    pub t_outside_avg: Option<f64>,
    pub segment: DaySegment,
    pub window_open: Option<bool>,
}

impl FeatureRow {
    /// True when every numeric predictor is present.
    pub fn features_complete(&self) -> bool {
        self.t_indoor.is_some()
            && self.log_co2.is_some()
            && self.rh.is_some()
            && self.t_outside_avg.is_some()
    }
}

/// Minute-aligned frame of derived predictors.
#[derive(Debug, Clone)]
pub struct FeatureFrame {
    start: DateTime<Utc>,
    tz_offset_minutes: i32,
    rows: Vec<FeatureRow>,
}

impl FeatureFrame {
    pub fn new(start: DateTime<Utc>, tz_offset_minutes: i32, rows: Vec<FeatureRow>) -> Self {
        Self {
            start,
            tz_offset_minutes,
            rows,
        }
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn tz_offset_minutes(&self) -> i32 {
        self.tz_offset_minutes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    /// UTC instant of row `i`.
    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(i as i64)
    }

    /// Local timestamp of row `i` under the frame's timezone offset.
    pub fn local_timestamp(&self, i: usize) -> chrono::NaiveDateTime {
        (self.timestamp(i) + Duration::minutes(self.tz_offset_minutes as i64)).naive_utc()
    }

    /// Local calendar date of row `i`.
    pub fn local_date(&self, i: usize) -> NaiveDate {
        self.local_timestamp(i).date()
    }
}

/// Derives the model predictors from a raw frame.
///
/// CO₂ is log-transformed; the outside temperature is replaced by its
/// local-calendar-date mean (missing when fewer than 25% of the date's grid
/// minutes carry a reading); the day segment comes from the local clock.
pub fn derive_features(
    frame: &RawFrame,
    tz_offset_minutes: i32,
) -> Result<FeatureFrame, FeatureError> {
    let n = frame.len();
    let empty: Vec<Option<f64>> = vec![None; n];
    let col = |kind: SensorKind| -> &[Option<f64>] {
        frame.column(kind).unwrap_or(empty.as_slice())
    };
    let t_indoor = col(SensorKind::TIndoor);
    let co2 = col(SensorKind::Co2);
    let rh = col(SensorKind::Rh);
    let t_outside = col(SensorKind::TOutside);
    let window = col(SensorKind::WindowState);

    let local_date = |i: usize| -> NaiveDate {
        (frame.timestamp(i) + Duration::minutes(tz_offset_minutes as i64))
            .naive_utc()
            .date()
    };

    // Per-local-date outside-temperature averages.
    let mut date_stats: BTreeMap<NaiveDate, (f64, usize, usize)> = BTreeMap::new();
    for i in 0..n {
        let entry = date_stats.entry(local_date(i)).or_insert((0.0, 0, 0));
        entry.2 += 1;
        if let Some(v) = t_outside[i] {
            entry.0 += v;
            entry.1 += 1;
        }
    }
    let daily_avg: BTreeMap<NaiveDate, Option<f64>> = date_stats
        .into_iter()
        .map(|(date, (sum, present, total))| {
            let avg = if present > 0 && (present as f64) >= DAILY_AVG_MIN_COVERAGE * total as f64 {
                Some(sum / present as f64)
            } else {
                None
            };
            (date, avg)
        })
        .collect();

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let log_co2 = match co2[i] {
            Some(v) if v > 0.0 => Some(v.ln()),
            Some(v) => {
                return Err(FeatureError::NonPositiveCo2 {
                    timestamp: frame.timestamp(i),
                    value: v,
                })
            }
            None => None,
        };
        let local = (frame.timestamp(i) + Duration::minutes(tz_offset_minutes as i64)).naive_utc();
        rows.push(FeatureRow {
            t_indoor: t_indoor[i],
            log_co2,
            rh: rh[i],
            t_outside_avg: daily_avg[&local_date(i)],
            segment: segment_of(local.time()),
            window_open: window[i].map(|v| v != 0.0),
        });
    }
    Ok(FeatureFrame::new(frame.start(), tz_offset_minutes, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveTime;

    fn utc(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn time(h: u32, m: u32) -> NaiveTime {
        NaiveTime::from_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn segment_boundaries_follow_half_open_intervals() {
        assert_eq!(segment_of(time(6, 0)), DaySegment::Ds1);
        assert_eq!(segment_of(time(12, 59)), DaySegment::Ds1);
        assert_eq!(segment_of(time(13, 0)), DaySegment::Ds2);
        assert_eq!(segment_of(time(21, 59)), DaySegment::Ds2);
        assert_eq!(segment_of(time(22, 0)), DaySegment::Ds3);
        assert_eq!(segment_of(time(5, 59)), DaySegment::Ds3);
        assert_eq!(segment_of(time(0, 0)), DaySegment::Ds3);
    }

    #[test]
    fn segments_partition_the_day_into_420_540_480_minutes() {
        let mut counts = [0usize; 3];
        for minute in 0..1440u32 {
            let t = NaiveTime::from_hms_opt(minute / 60, minute % 60, 0).unwrap();
            match segment_of(t) {
                DaySegment::Ds1 => counts[0] += 1,
                DaySegment::Ds2 => counts[1] += 1,
                DaySegment::Ds3 => counts[2] += 1,
            }
        }
        assert_eq!(counts, [420, 540, 480]);
    }

    fn frame_from(
        start: &str,
        cols: Vec<(SensorKind, Vec<Option<f64>>)>,
    ) -> RawFrame {
        RawFrame::from_columns(utc(start), cols.into_iter().collect()).unwrap()
    }

    #[test]
    fn log_co2_is_natural_log() {
        let frame = frame_from(
            "2020-11-01T00:00:00Z",
            vec![(SensorKind::Co2, vec![Some(400.0)])],
        );
        let features = derive_features(&frame, 0).unwrap();
        let got = features.rows()[0].log_co2.unwrap();
        assert!((got - 5.991464547107982).abs() < 1e-12);
        assert!((got - 5.9915).abs() < 1e-4);
    }

    #[test]
    fn non_positive_co2_is_rejected() {
        // Bypass ingest range checks by building the column directly.
        let frame = frame_from(
            "2020-11-01T00:00:00Z",
            vec![(SensorKind::Co2, vec![Some(-1.0)])],
        );
        let err = derive_features(&frame, 0).unwrap_err();
        assert!(matches!(err, FeatureError::NonPositiveCo2 { .. }));
    }

    #[test]
    fn daily_average_is_the_mean_of_available_minutes() {
        // 720 minutes at 0 degrees, 720 at 2 degrees on one date.
        let mut outside = vec![Some(0.0); 720];
        outside.extend(vec![Some(2.0); 720]);
        let frame = frame_from(
            "2020-11-01T00:00:00Z",
            vec![(SensorKind::TOutside, outside)],
        );
        let features = derive_features(&frame, 0).unwrap();
        assert_eq!(features.len(), 1440);
        for row in features.rows() {
            assert_eq!(row.t_outside_avg, Some(1.0));
        }
    }

    #[test]
    fn sparse_outside_coverage_marks_average_missing() {
        // 1440-minute date with readings in only 300 minutes (< 25%).
        let mut outside = vec![None; 1440];
        for cell in outside.iter_mut().take(300) {
            *cell = Some(5.0);
        }
        let frame = frame_from(
            "2020-11-01T00:00:00Z",
            vec![(SensorKind::TOutside, outside)],
        );
        let features = derive_features(&frame, 0).unwrap();
        assert!(features.rows().iter().all(|r| r.t_outside_avg.is_none()));
    }

    #[test]
    fn daily_average_respects_local_dates() {
        // Two hours of UTC data straddling local midnight at +60 minutes.
        let outside: Vec<Option<f64>> = (0..120)
            .map(|i| Some(if i < 60 { 10.0 } else { 20.0 }))
            .collect();
        let frame = frame_from(
            "2020-11-01T22:00:00Z",
            vec![(SensorKind::TOutside, outside)],
        );
        let features = derive_features(&frame, 60).unwrap();
        // Local date flips at UTC 23:00 when the offset is +1h.
        assert_eq!(features.rows()[0].t_outside_avg, Some(10.0));
        assert_eq!(features.rows()[119].t_outside_avg, Some(20.0));
        assert_eq!(features.local_date(0).to_string(), "2020-11-01");
        assert_eq!(features.local_date(60).to_string(), "2020-11-02");
    }

    #[test]
    fn segment_uses_local_clock() {
        let frame = frame_from(
            "2020-11-01T12:30:00Z",
            vec![(SensorKind::Rh, vec![Some(40.0)])],
        );
        // 12:30 UTC at +30 minutes is 13:00 local, the DS2 boundary.
        let features = derive_features(&frame, 30).unwrap();
        assert_eq!(features.rows()[0].segment, DaySegment::Ds2);
        let features_utc = derive_features(&frame, 0).unwrap();
        assert_eq!(features_utc.rows()[0].segment, DaySegment::Ds1);
    }

    #[test]
    fn feature_derivation_commutes_with_dropping_a_date() {
        // Two local dates of data; dropping the second date afterward equals
        // deriving on the first date alone.
        let outside: Vec<Option<f64>> = (0..2880).map(|i| Some(i as f64 * 0.01)).collect();
        let co2: Vec<Option<f64>> = (0..2880).map(|i| Some(500.0 + i as f64)).collect();
        let full = frame_from(
            "2020-11-01T00:00:00Z",
            vec![
                (SensorKind::TOutside, outside.clone()),
                (SensorKind::Co2, co2.clone()),
            ],
        );
        let first_day = frame_from(
            "2020-11-01T00:00:00Z",
            vec![
                (SensorKind::TOutside, outside[..1440].to_vec()),
                (SensorKind::Co2, co2[..1440].to_vec()),
            ],
        );
        let from_full = derive_features(&full, 0).unwrap();
        let from_restricted = derive_features(&first_day, 0).unwrap();
        assert_eq!(&from_full.rows()[..1440], from_restricted.rows());
    }
}
