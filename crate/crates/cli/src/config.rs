//! Pipeline configuration: a TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use fenestra::events::SplitSpec;
use fenestra::glm::Weighting;
use fenestra::ingest::{ColumnSchema, SensorKind};

use crate::CliError;

/// Which action models a run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionChoice {
    Open,
    Close,
    Both,
}

impl ActionChoice {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "open" => Some(ActionChoice::Open),
            "close" => Some(ActionChoice::Close),
            "both" => Some(ActionChoice::Both),
            _ => None,
        }
    }
}

/// How explanatory variables are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Per-fold stepwise with a strict-majority vote.
    #[default]
    Cv,
    /// One stepwise run on the pooled training data.
    Single,
}

impl SelectionMode {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "cv" => Some(SelectionMode::Cv),
            "single" => Some(SelectionMode::Single),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInput {
    pub path: PathBuf,
}

fn default_tz_offset() -> i32 {
    0
}

fn default_max_gap() -> usize {
    5
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_action() -> ActionChoice {
    ActionChoice::Both
}

/// On-disk configuration. Sensor inputs and a prebuilt dataset are
/// mutually exclusive run modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_tz_offset")]
    pub tz_offset_minutes: i32,
    #[serde(default = "default_max_gap")]
    pub max_gap_minutes: usize,
    #[serde(default = "default_action")]
    pub action: ActionChoice,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub inputs: BTreeMap<SensorKind, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ColumnSchema>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<RangeConfig>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: PipelineConfig = toml::from_str(&raw)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.split
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.inputs.is_empty() && self.dataset.is_none() {
            return Err(CliError::Config(
                "config needs either [inputs] sensor paths or a [dataset] path".into(),
            ));
        }
        if !self.inputs.is_empty() && self.dataset.is_some() {
            return Err(CliError::Config(
                "[inputs] and [dataset] are mutually exclusive".into(),
            ));
        }
        if let Some(range) = &self.range {
            if range.start >= range.end {
                return Err(CliError::Config(format!(
                    "range start {} must precede end {}",
                    range.start, range.end
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> ColumnSchema {
        self.schema.clone().unwrap_or_default()
    }
}

/// Parses `--schema timestamp=ts,value=v` style overrides.
pub fn parse_schema_override(raw: &str) -> Result<ColumnSchema, CliError> {
    let mut schema = ColumnSchema::default();
    for part in raw.split(',') {
        let Some((key, value)) = part.split_once('=') else {
            return Err(CliError::Config(format!(
                "bad schema component `{part}`; expected key=value"
            )));
        };
        match key.trim() {
            "timestamp" => schema.timestamp = value.trim().to_string(),
            "value" => schema.value = value.trim().to_string(),
            other => {
                return Err(CliError::Config(format!(
                    "unknown schema key `{other}` (expected timestamp or value)"
                )))
            }
        }
    }
    Ok(schema)
}
