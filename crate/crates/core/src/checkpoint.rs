//! Self-describing JSON checkpoints: format version, model and tracker
//! configuration, and every named parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::tracker::TrackerConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Inference defaults used when no flags override them.
    pub tracker: TrackerConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, tracker: &TrackerConfig) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            tracker: tracker.clone(),
            tensors: model
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut params = ParamStore::new();
        for t in &self.tensors {
            if params.find(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("parameter {} stored twice", t.name)));
            }
            let tensor = Tensor::new(t.shape.clone(), t.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", t.name)))?;
            if !tensor.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {} has non-finite values", t.name)));
            }
            params.register(&t.name, tensor);
        }
        let model = Model::from_params(self.model.clone(), params)?;
        let expected = Model::init(self.model.clone(), 0)?.params.len();
        if model.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model uses {expected}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_model(path: &Path, model: &Model, tracker: &TrackerConfig) -> Result<()> {
    Checkpoint::from_model(model, tracker).save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, TrackerConfig)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_model()?, ck.tracker))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csc_attention::FusionVariant;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ModelConfig::default();
        cfg.fusion.variant = FusionVariant::SemanticContextual;
        let model = Model::init(cfg, 8).unwrap();
        let tracker = TrackerConfig {
            beta: 0.4,
            ..TrackerConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model, &tracker).unwrap();
        let (back, t) = load_model(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        assert_eq!(t, tracker);
    }

    #[test]
    fn damaged_checkpoints_rejected() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let good = Checkpoint::from_model(&model, &TrackerConfig::default());

        let mut c = good.clone();
        c.format_version = 99;
        assert!(matches!(c.to_model(), Err(Error::Checkpoint(_))));

        let mut c = good.clone();
        c.tensors.pop();
        assert!(matches!(c.to_model(), Err(Error::Checkpoint(_))));

        let mut c = good.clone();
        c.tensors[0].data.pop();
        assert!(matches!(c.to_model(), Err(Error::Checkpoint(_))));

        let mut c = good.clone();
        c.tensors.push(NamedTensor {
            name: "extra".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        assert!(matches!(c.to_model(), Err(Error::Checkpoint(_))));

        let mut c = good;
        c.model.dim = 32;
        assert!(c.to_model().is_err());

        assert!(matches!(load_model(Path::new("/nonexistent/m.json")), Err(Error::Io { .. })));
    }
}
