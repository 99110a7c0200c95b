//! Occupant window-behavior modeling.
//!
//! The pipeline mirrors a winter field study of window use in single-tenant
//! studio apartments: sensor exports are aligned onto a one-minute grid,
//! predictors are derived (log-CO₂, daily-average outside temperature, day
//! segment), per-action datasets are built from the observed window state,
//! and a class-weighted logistic regression is selected by cross-validated
//! stepwise AIC and evaluated with ROC / precision-recall curves.
//!
//! Because real deployments rarely share their raw data, the [`synth`]
//! module provides a seeded generator whose coefficients act as ground
//! truth, making every stage of the pipeline verifiable end to end.

pub mod eval;
pub mod events;
pub mod features;
pub mod glm;
pub mod ingest;
mod linalg;
pub mod selection;
pub mod synth;

pub use eval::{evaluate, EvalOptions, EvalReport};
pub use events::{
    build_dataset, extract_transitions, kfold, split, standardize, ActionKind, Dataset,
    ScalingParams, SplitSpec, Term,
};
pub use features::{derive_features, segment_of, DaySegment, FeatureFrame};
pub use glm::{
    balanced_weights, fit, wald_ci, ClassWeights, CoefKey, FitControl, FittedModel, ModelSpec,
    Weighting,
};
pub use ingest::{fill_gaps, load_series, resample_align, RawFrame, SensorKind, TimeSeries};
pub use selection::{cv_select, finalize, stepwise, CandidateSet, SelectionTrace};
pub use synth::{generate, recovery_test, GeneratorSpec, RecoveryConfig, RecoveryReport};
