//! Versioned JSON checkpoints for both models.

use serde::{Deserialize, Serialize};

use crate::anomaly::{VaeModel, VaeModelConfig};
use crate::rate::{RateModel, RateModelConfig};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds a {got} model, expected {expected}")]
    Kind { expected: ModelKind, got: ModelKind },
    #[error("manifest hash {got} does not match checkpoint {expected}")]
    HashMismatch { expected: String, got: String },
    #[error("malformed checkpoint: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rate,
    Anomaly,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Rate => "rate",
            ModelKind::Anomaly => "anomaly",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: serde_json::Value,
    /// Rate: fused feature count. Anomaly: excavation channel count.
    pub input_dim: usize,
    pub manifest_hash: String,
    /// Geology column count of the anomaly model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_dim: Option<usize>,
    /// Calibrated anomaly threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub params: Vec<ParamRecord>,
}

fn records(params: &ParamSet) -> Vec<ParamRecord> {
    params
        .iter()
        .map(|p| ParamRecord {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.data().to_vec(),
        })
        .collect()
}

fn to_json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialise")
}

impl Checkpoint {
    pub fn from_rate(model: &RateModel, manifest_hash: &str) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model_kind: ModelKind::Rate,
            config: to_json_value(&model.config),
            input_dim: model.input_dim,
            manifest_hash: manifest_hash.to_string(),
            geo_dim: None,
            threshold: None,
            params: records(&model.params),
        }
    }

    pub fn from_anomaly(model: &VaeModel, threshold: f64, manifest_hash: &str) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model_kind: ModelKind::Anomaly,
            config: to_json_value(&model.config),
            input_dim: model.d_exc,
            manifest_hash: manifest_hash.to_string(),
            geo_dim: Some(model.d_geo),
            threshold: Some(threshold),
            params: records(&model.params),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(c.format_version));
        }
        Ok(c)
    }

    pub fn verify_manifest(&self, manifest_hash: &str) -> Result<()> {
        if self.manifest_hash != manifest_hash {
            return Err(CheckpointError::HashMismatch {
                expected: self.manifest_hash.clone(),
                got: manifest_hash.to_string(),
            });
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind,
                got: self.model_kind,
            });
        }
        Ok(())
    }

    fn param_set(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for r in &self.params {
            if p.find(&r.name).is_some() {
                return Err(CheckpointError::Invalid(format!("duplicate parameter {}", r.name)));
            }
            let t = Tensor::from_vec(r.shape.clone(), r.data.clone())
                .map_err(|e| CheckpointError::Invalid(format!("{}: {e}", r.name)))?;
            p.insert(r.name.clone(), t);
        }
        Ok(p)
    }

    fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| CheckpointError::Invalid(e.to_string()))
    }

    pub fn to_rate_model(&self) -> Result<RateModel> {
        self.expect_kind(ModelKind::Rate)?;
        let config: RateModelConfig = self.config()?;
        RateModel::from_params(config, self.input_dim, self.param_set()?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))
    }

    /// The model and its calibrated threshold.
    pub fn to_anomaly_model(&self) -> Result<(VaeModel, f64)> {
        self.expect_kind(ModelKind::Anomaly)?;
        let config: VaeModelConfig = self.config()?;
        let geo = self
            .geo_dim
            .ok_or_else(|| CheckpointError::Invalid("anomaly checkpoint without geo_dim".into()))?;
        let threshold = self
            .threshold
            .ok_or_else(|| CheckpointError::Invalid("anomaly checkpoint without threshold".into()))?;
        let model = VaeModel::from_params(config, self.input_dim, geo, self.param_set()?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        Ok((model, threshold))
    }
}
