//! Run configuration and the JSON model document.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Dataset;
use crate::error::{HteError, Result};
use crate::estimators::{fit_method, Adjustment, Fit, FittedModel, HyperParams, Method, MethodKind};
use crate::rng::stream;

pub const FORMAT_VERSION: u64 = 1;

/// What to fit and how; unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodKind,
    #[serde(default)]
    pub adjustment: Adjustment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: HyperParams,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| HteError::MalformedDocument(format!("config: {e}")))?;
        if cfg.params.n_strata < 1 {
            return Err(HteError::InvalidParameter("n_strata must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn method(&self) -> Method {
        Method::new(self.method, self.adjustment)
    }

    /// Fits on `d` with every random draw taken from `seed`.
    pub fn fit(&self, d: &Dataset) -> Result<(ModelDocument, Fit)> {
        self.fit_with_rng(d, &mut stream(self.seed))
    }

    pub fn fit_with_rng<R: Rng + ?Sized>(&self, d: &Dataset, rng: &mut R) -> Result<(ModelDocument, Fit)> {
        let fit = fit_method(self.method(), &self.params, d, rng)?;
        let doc = ModelDocument {
            format_version: FORMAT_VERSION,
            method: self.method().tag().to_string(),
            params: self.params.clone(),
            seed: self.seed,
            n_features: d.p(),
            feature_names: d.feature_names().map(<[String]>::to_vec),
            model: fit.model.clone(),
        };
        Ok((doc, fit))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u64,
    pub method: String,
    pub params: HyperParams,
    pub seed: u64,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
    pub model: FittedModel,
}

impl ModelDocument {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| HteError::MalformedDocument(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<ModelDocument> {
        let v: Value = serde_json::from_str(s).map_err(|e| HteError::MalformedDocument(e.to_string()))?;
        let found = v
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| HteError::MalformedDocument("missing format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(HteError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let doc: ModelDocument = serde_json::from_value(v).map_err(|e| HteError::MalformedDocument(e.to_string()))?;
        let m = Method::parse(&doc.method).map_err(|_| HteError::MalformedDocument(format!("unknown method {:?}", doc.method)))?;
        if m.kind != doc.model.kind() {
            return Err(HteError::MalformedDocument(format!(
                "method {} does not match the stored model",
                doc.method
            )));
        }
        Ok(doc)
    }
}

pub fn save_model(doc: &ModelDocument, path: &Path) -> Result<()> {
    fs::write(path, doc.to_json()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelDocument> {
    ModelDocument::from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EffectModel, Matrix};
    use rand::Rng;

    fn data() -> Dataset {
        let mut rng = stream(4);
        let n = 120;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let x = Matrix::new(n, 3, x).unwrap();
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n).map(|i| x.get(i, 0) * f64::from(t[i]) + x.get(i, 1) + rng.random::<f64>()).collect();
        Dataset::new(x, t, y).unwrap()
    }

    fn small(method: &str) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"method": "{method}", "adjustment": "stratified", "seed": 3,
                "params": {{"n_strata": 2, "bagged_models": 3,
                    "forest": {{"n_trees": 5}}, "propensity": {{"n_trees": 10}},
                    "boost": {{"n_trees": 10}}, "mars": {{"max_terms": 3, "min_stratum_arm": 3, "min_support": 5}}}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn round_trip_predictions_are_bit_identical() {
        let d = data();
        let mut rng = stream(9);
        let probe: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect()).collect();
        for m in ["null", "to_forest", "db_forest", "pto", "causal_boost", "causal_mars", "bagged_causal_mars"] {
            let (doc, _) = small(m).fit(&d).unwrap();
            let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
            for x in &probe {
                assert_eq!(
                    doc.model.predict_effect(x).to_bits(),
                    back.model.predict_effect(x).to_bits(),
                    "{m}"
                );
            }
        }
    }

    #[test]
    fn truncated_and_foreign_documents() {
        let (doc, _) = small("null").fit(&data()).unwrap();
        let s = doc.to_json().unwrap();
        assert_eq!(ModelDocument::from_json(&s[..s.len() / 2]).unwrap_err().kind(), "malformed-document");
        let foreign = s.replace("\"format_version\":1", "\"format_version\":7");
        assert_eq!(ModelDocument::from_json(&foreign).unwrap_err().kind(), "version-mismatch");
    }

    #[test]
    fn config_typos_rejected() {
        assert_eq!(
            RunConfig::from_json(r#"{"method": "pto", "sed": 1}"#).unwrap_err().kind(),
            "malformed-document"
        );
        assert!(RunConfig::from_json(r#"{"method": "pto", "params": {"n_strata": 0}}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"method": "pto"}"#).unwrap().method().tag(), "pto0");
    }
}
