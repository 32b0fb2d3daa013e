//! JSON description of a model zoo.
//!
//! ```json
//! { "world": { ... },
//!   "models": [ { "model_id": "toy-enc-0", "role": "encoder", "backend": "toy",
//!                 "settings": { "embed_dim": 64, "seed": 7 } } ] }
//! ```
//!
//! Only the `toy` backend is built in. Any other backend kind is rejected
//! at load time with the model id, so a manifest naming real models fails
//! loudly instead of falling back to toys.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::preprocess::PreprocessSpec;
use super::toy::{
    toy_encoder_id, toy_generator_id, LinearEncoder, ToyGenerator, ToyGeneratorConfig, ToyVictim, ToyVictimConfig,
    ToyWorld, ToyWorldConfig, ToyZooConfig, TOY_VICTIM_ID,
};
use super::{EncoderHandle, GeneratorHandle, ModelZoo, VictimHandle, ZooError};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Victim,
    Generator,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub role: Role,
    pub backend: String,
    #[serde(default)]
    pub settings: serde_json::Value,
    /// Encoders only. Defaults to the toy world's encoder preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess_spec: Option<PreprocessSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    #[serde(default)]
    pub world: ToyWorldConfig,
    pub models: Vec<ModelEntry>,
}

/// Settings of a toy encoder entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderSettings {
    pub embed_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading zoo manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("zoo manifest is not valid: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("model `{model_id}`: backend `{backend}` is not available in this build")]
    UnsupportedBackend { model_id: String, backend: String },
    #[error("model `{model_id}`: {message}")]
    Settings { model_id: String, message: String },
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

fn settings<T: serde::de::DeserializeOwned + Default>(entry: &ModelEntry) -> Result<T, ManifestError> {
    if entry.settings.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(entry.settings.clone()).map_err(|e| ManifestError::Settings {
        model_id: entry.model_id.clone(),
        message: e.to_string(),
    })
}

impl ZooManifest {
    /// The manifest equivalent of [`ToyZooConfig::build`].
    pub fn from_toy(cfg: &ToyZooConfig) -> Self {
        let world = ToyWorld::new(cfg.world.clone());
        let mut models = vec![ModelEntry {
            model_id: TOY_VICTIM_ID.into(),
            role: Role::Victim,
            backend: "toy".into(),
            settings: serde_json::to_value(&cfg.victim).expect("serializable"),
            preprocess_spec: None,
        }];
        for g in 0..cfg.n_generators {
            let gen = ToyGeneratorConfig {
                style_seed: cfg.generator.style_seed + g as u64,
                ..cfg.generator.clone()
            };
            models.push(ModelEntry {
                model_id: toy_generator_id(g),
                role: Role::Generator,
                backend: "toy".into(),
                settings: serde_json::to_value(&gen).expect("serializable"),
                preprocess_spec: None,
            });
        }
        for e in 0..cfg.n_encoders {
            let s = ToyEncoderSettings {
                embed_dim: cfg.embed_dim,
                seed: derive_seed(cfg.encoder_seed, "encoder", e as u64),
            };
            models.push(ModelEntry {
                model_id: toy_encoder_id(e),
                role: Role::Encoder,
                backend: "toy".into(),
                settings: serde_json::to_value(&s).expect("serializable"),
                preprocess_spec: Some(world.encoder_preprocess()),
            });
        }
        Self {
            world: cfg.world.clone(),
            models,
        }
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Id and toy settings of the first victim entry.
    pub fn toy_victim(&self) -> Result<Option<(String, ToyVictimConfig)>, ManifestError> {
        self.models
            .iter()
            .find(|m| m.role == Role::Victim && m.backend == "toy")
            .map(|m| Ok((m.model_id.clone(), settings(m)?)))
            .transpose()
    }

    pub fn build(&self) -> Result<(ModelZoo, Arc<ToyWorld>), ManifestError> {
        let world = Arc::new(ToyWorld::new(self.world.clone()));
        let mut zoo = ModelZoo::new();
        for entry in &self.models {
            if entry.backend != "toy" {
                return Err(ManifestError::UnsupportedBackend {
                    model_id: entry.model_id.clone(),
                    backend: entry.backend.clone(),
                });
            }
            match entry.role {
                Role::Victim => {
                    let cfg: ToyVictimConfig = settings(entry)?;
                    let v = ToyVictim::new(entry.model_id.clone(), world.clone(), cfg);
                    zoo.victims.register(VictimHandle::new(Arc::new(v)))?;
                }
                Role::Generator => {
                    let cfg: ToyGeneratorConfig = settings(entry)?;
                    let g = ToyGenerator::new(entry.model_id.clone(), world.clone(), cfg);
                    zoo.generators.register(GeneratorHandle::new(Arc::new(g)))?;
                }
                Role::Encoder => {
                    let s: ToyEncoderSettings =
                        serde_json::from_value(entry.settings.clone()).map_err(|e| ManifestError::Settings {
                            model_id: entry.model_id.clone(),
                            message: e.to_string(),
                        })?;
                    let pre = entry.preprocess_spec.clone().unwrap_or_else(|| world.encoder_preprocess());
                    let enc = LinearEncoder::random(entry.model_id.clone(), s.embed_dim, pre, s.seed);
                    zoo.encoders.register(EncoderHandle::new(Arc::new(enc)))?;
                }
            }
        }
        Ok((zoo, world))
    }
}

/// Reads and builds a zoo manifest.
pub fn load_zoo(path: &Path) -> Result<(ModelZoo, Arc<ToyWorld>), ManifestError> {
    ZooManifest::read(path)?.build()
}
