//! Serialized model artifact. Round-tripping through JSON preserves every
//! coefficient bit, so reloaded models predict identically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fenestra::events::{ActionKind, ScalingParams};
use fenestra::glm::{CoefKey, FittedModel};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub action: ActionKind,
    /// Coefficient order for the covariance matrix.
    pub terms: Vec<CoefKey>,
    pub coefficients: BTreeMap<CoefKey, f64>,
    /// Row-major over `terms`.
    #[serde(with = "nan_vec")]
    pub covariance: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub log_likelihood: f64,
    #[serde(with = "nan_as_null")]
    pub aic: f64,
    pub scaling: Option<ScalingParams>,
    pub converged: bool,
    pub iterations: usize,
    pub seed_provenance: Option<u64>,
}

/// JSON has no NaN; statistics that are unavailable (hand-built models,
/// separation-capped covariances) round-trip as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Some(*v).serialize(s)
        } else {
            None::<f64>.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod nan_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mapped: Vec<Option<f64>> = v
            .iter()
            .map(|x| if x.is_finite() { Some(*x) } else { None })
            .collect();
        mapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NAN))
            .collect())
    }
}

impl ModelArtifact {
    pub fn from_model(model: &FittedModel, seed: Option<u64>) -> Self {
        Self {
            action: model.action,
            terms: model.spec.coef_keys(),
            coefficients: model.coefficients.clone(),
            covariance: model.covariance.clone(),
            log_likelihood: model.log_likelihood,
            aic: model.aic,
            scaling: model.scaling.clone(),
            converged: model.converged,
            iterations: model.iterations,
            seed_provenance: seed,
        }
    }

    pub fn into_model(self) -> Result<FittedModel, CliError> {
        let mut model =
            FittedModel::from_coefficients(self.action, self.coefficients, self.scaling)
                .map_err(|e| CliError::Config(format!("bad model artifact: {e}")))?;
        if self.terms != model.spec.coef_keys() {
            return Err(CliError::Config(format!(
                "model artifact term order {:?} does not match the spec layout {:?}",
                self.terms,
                model.spec.coef_keys()
            )));
        }
        if self.covariance.len() != self.terms.len() * self.terms.len() {
            return Err(CliError::Config(
                "model artifact covariance has the wrong shape".into(),
            ));
        }
        model.covariance = self.covariance;
        model.log_likelihood = self.log_likelihood;
        model.aic = self.aic;
        model.converged = self.converged;
        model.iterations = self.iterations;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| CliError::Config(format!("bad model JSON {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fenestra::events::Term;
    use fenestra::features::DaySegment;

    fn reference_model() -> FittedModel {
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
        FittedModel::from_coefficients(ActionKind::Opening, coefficients, None).unwrap()
    }

    #[test]
    fn artifact_roundtrip_preserves_predictions_bitwise() {
        let model = reference_model();
        let artifact = ModelArtifact::from_model(&model, Some(7));
        let json = serde_json::to_string_pretty(&artifact).unwrap();
        let back: ModelArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seed_provenance, Some(7));
        let rebuilt = back.into_model().unwrap();
        let values: BTreeMap<Term, f64> = Term::ALL
            .iter()
            .map(|&t| (t, 0.731_038_12_f64))
            .collect();
        for segment in DaySegment::ALL {
            let a = model.predict_probability(&values, Some(segment)).unwrap();
            let b = rebuilt.predict_probability(&values, Some(segment)).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_covariance_is_rejected() {
        let model = reference_model();
        let mut artifact = ModelArtifact::from_model(&model, None);
        artifact.covariance.pop();
        assert!(artifact.into_model().is_err());
    }
}
