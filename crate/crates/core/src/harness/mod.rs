//! Experiment plumbing: datasets, evaluation runs, metrics, and the files a
//! run leaves behind.

pub mod adaptive_run;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod report;

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub use adaptive_run::{run_adaptive_experiment, train_toy_adapter};
pub use config::{AdapterRunConfig, AdaptiveRunConfig, RunConfig};
pub use dataset::{ingest, synth_toy_dataset, Dataset, DatasetManifest, ManifestSchemaError, SynthConfig};
pub use experiment::{clean_ratio_sweep, evaluate, sweep, EvalConfig, Evaluation, RatioRow, SweepCell, SweepGrid};
pub use metrics::{MetricsReport, VerdictRecord};
pub use report::write_report;

use crate::adaptive::AdapterError;
use crate::attacks::AttackError;
use crate::calibrate::CalibrateError;
use crate::stochastic::DetectError;
use crate::zoo::manifest::{ManifestError, ZooManifest};
use crate::zoo::toy::{ToyVictim, ToyWorld, ToyZooConfig};
use crate::zoo::{EncoderHandle, ModelZoo, VictimHandle};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error("{failed} of {total} images failed; first: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("clean ratio {ratio} needs {needed} adversarial images, {available} available")]
    InsufficientSamples { ratio: f64, needed: usize, available: usize },
    #[error(transparent)]
    Manifest(#[from] ManifestSchemaError),
    #[error(transparent)]
    Zoo(#[from] ManifestError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A built toy zoo together with what the harness needs beyond the
/// registries.
#[derive(Clone)]
pub struct Environment {
    pub manifest: ZooManifest,
    pub zoo: ModelZoo,
    pub world: Arc<ToyWorld>,
}

impl Environment {
    pub fn from_toy(cfg: &ToyZooConfig) -> Result<Self, HarnessError> {
        Self::from_manifest(ZooManifest::from_toy(cfg))
    }

    pub fn from_manifest(manifest: ZooManifest) -> Result<Self, HarnessError> {
        let (zoo, world) = manifest.build()?;
        if zoo.victims.is_empty() {
            return Err(HarnessError::InvalidConfig("zoo has no victim".into()));
        }
        Ok(Self { manifest, zoo, world })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_manifest(ZooManifest::read(path)?)
    }

    pub fn victim(&self) -> &VictimHandle {
        &self.zoo.victims.list()[0]
    }

    /// The victim's own feature extractor as an encoder, the attacker's
    /// stand-in for the victim when aligning embeddings.
    pub fn task_surrogate(&self) -> Result<EncoderHandle, HarnessError> {
        let (id, cfg) = self
            .manifest
            .toy_victim()?
            .ok_or_else(|| HarnessError::InvalidConfig("zoo has no toy victim".into()))?;
        let victim = ToyVictim::new(id, self.world.clone(), cfg);
        Ok(EncoderHandle::new(Arc::new(victim.vision_encoder())))
    }
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment").field("zoo", &self.zoo).finish()
    }
}
