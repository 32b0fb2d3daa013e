//! Backend contracts for the three model roles and the registries that hold
//! them.
//!
//! * a victim captions (or classifies) an image,
//! * a generator renders an image from text,
//! * an encoder maps an image to an embedding.
//!
//! Handles wrap a backend with its id, validate what comes back, and honor
//! the backend's declared concurrency limit. Optional capabilities needed by
//! the attacks (gradients, feature taps) are exposed through accessor
//! methods that return `None` when a backend cannot provide them.

mod gate;
pub mod manifest;
pub mod preprocess;
pub mod toy;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Caption, ImageTensor};
use crate::similarity::Embedding;

pub use gate::Gate;
pub use preprocess::PreprocessSpec;

/// Failure inside a backend, tagged with the model that raised it.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend `{model_id}` failed: {message}")]
    Failure { model_id: String, message: String },
    #[error("generator `{model_id}` cannot render caption `{text}`")]
    UnrenderableCaption { model_id: String, text: String },
    #[error("backend `{0}` does not expose gradients")]
    NonDifferentiable(String),
    #[error("backend `{0}` does not expose the required feature tap")]
    MissingFeatureTap(String),
}

impl BackendError {
    pub fn failure(model_id: &str, message: impl Into<String>) -> Self {
        BackendError::Failure {
            model_id: model_id.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ZooError {
    #[error("model id `{0}` is already registered")]
    DuplicateModelId(String),
    #[error("unknown model id `{0}`")]
    UnknownModelId(String),
    #[error("the {0} registry is empty")]
    EmptyZoo(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Capability {
    Caption,
    Classify,
    Vqa,
}

/// A model that turns an image (and optional prompt) into text.
pub trait Captioner: Send + Sync {
    fn model_id(&self) -> &str;
    fn capability(&self) -> Capability;
    fn caption(&self, image: &ImageTensor, prompt: &str) -> Result<Caption, BackendError>;
    /// `None` means unlimited.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
    fn differentiable(&self) -> Option<&dyn DifferentiableVictim> {
        None
    }
}

/// White-box access to a classifier-style victim.
pub trait DifferentiableVictim: Send + Sync {
    fn class_names(&self) -> &[String];
    fn logits(&self, image: &ImageTensor) -> Vec<f64>;
    /// Vector-Jacobian product of the logits, returned in image layout.
    fn logits_vjp(&self, image: &ImageTensor, grad_logits: &[f64]) -> Vec<f64>;
    /// Shape of the continuous pre-text feature.
    fn feature_shape(&self) -> (usize, usize);
    fn features(&self, image: &ImageTensor) -> Vec<f64>;
    fn features_vjp(&self, image: &ImageTensor, grad_features: &[f64]) -> Vec<f64>;

    fn predict(&self, image: &ImageTensor) -> usize {
        argmax(&self.logits(image))
    }
}

/// A text-conditioned image generator.
pub trait Generator: Send + Sync {
    fn model_id(&self) -> &str;
    fn output_size(&self) -> (usize, usize);
    fn timesteps(&self) -> usize;
    fn generate(&self, caption: &Caption, seed: u64) -> Result<ImageTensor, BackendError>;
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
    fn conditioned(&self) -> Option<&dyn ConditionedGenerator> {
        None
    }
}

/// Access to a generator's text-conditioning space and a differentiable
/// rendering path from it.
pub trait ConditionedGenerator: Send + Sync {
    fn conditioning_shape(&self) -> (usize, usize);
    /// Conditioning embedding of a caption, computed deterministically.
    fn condition(&self, caption: &Caption) -> Vec<f64>;
    fn render(&self, conditioning: &[f64], seed: u64) -> ImageTensor;
    fn render_vjp(&self, conditioning: &[f64], grad_image: &[f64]) -> Vec<f64>;
}

/// An image encoder with a flat, perturbable parameter vector.
pub trait Encoder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn preprocess_spec(&self) -> &PreprocessSpec;
    fn parameters(&self) -> &[f64];
    /// A new encoder of the same architecture with replaced parameters.
    fn with_parameters(&self, parameters: Vec<f64>) -> Result<Arc<dyn Encoder>, BackendError>;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>, BackendError>;
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
    fn differentiable(&self) -> Option<&dyn DifferentiableEncoder> {
        None
    }
}

pub trait DifferentiableEncoder: Send + Sync {
    /// Vector-Jacobian product of the embedding, returned in image layout.
    fn embed_vjp(&self, image: &ImageTensor, grad_embedding: &[f64]) -> Vec<f64>;
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn gate_for(limit: Option<usize>) -> Arc<Gate> {
    Arc::new(Gate::new(limit))
}

/// Registered victim model.
#[derive(Clone)]
pub struct VictimHandle {
    backend: Arc<dyn Captioner>,
    gate: Arc<Gate>,
}

impl VictimHandle {
    pub fn new(backend: Arc<dyn Captioner>) -> Self {
        let gate = gate_for(backend.max_concurrency());
        Self { backend, gate }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn capability(&self) -> Capability {
        self.backend.capability()
    }

    /// Captions `image`. The result is guaranteed non-empty.
    pub fn caption(&self, image: &ImageTensor, prompt: &str) -> Result<Caption, BackendError> {
        let _permit = self.gate.acquire();
        let caption = self.backend.caption(image, prompt)?;
        if caption.text.trim().is_empty() {
            return Err(BackendError::failure(self.model_id(), "backend returned an empty caption"));
        }
        Ok(caption)
    }

    pub fn differentiable(&self) -> Result<&dyn DifferentiableVictim, BackendError> {
        self.backend
            .differentiable()
            .ok_or_else(|| BackendError::NonDifferentiable(self.model_id().to_string()))
    }

    pub fn backend(&self) -> &Arc<dyn Captioner> {
        &self.backend
    }
}

impl std::fmt::Debug for VictimHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VictimHandle")
            .field("model_id", &self.model_id())
            .field("capability", &self.capability())
            .finish()
    }
}

/// Registered text-to-image generator.
#[derive(Clone)]
pub struct GeneratorHandle {
    backend: Arc<dyn Generator>,
    gate: Arc<Gate>,
}

impl GeneratorHandle {
    pub fn new(backend: Arc<dyn Generator>) -> Self {
        let gate = gate_for(backend.max_concurrency());
        Self { backend, gate }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.backend.output_size()
    }

    pub fn timesteps(&self) -> usize {
        self.backend.timesteps()
    }

    pub fn generate(&self, caption: &Caption, seed: u64) -> Result<ImageTensor, BackendError> {
        let _permit = self.gate.acquire();
        let image = self.backend.generate(caption, seed)?;
        let (h, w) = self.output_size();
        if (image.height(), image.width()) != (h, w) {
            return Err(BackendError::failure(
                self.model_id(),
                format!("generated {}x{}, declared {h}x{w}", image.height(), image.width()),
            ));
        }
        Ok(image)
    }

    pub fn conditioned(&self) -> Result<&dyn ConditionedGenerator, BackendError> {
        self.backend
            .conditioned()
            .ok_or_else(|| BackendError::MissingFeatureTap(self.model_id().to_string()))
    }
}

impl std::fmt::Debug for GeneratorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorHandle")
            .field("model_id", &self.model_id())
            .field("output_size", &self.output_size())
            .field("timesteps", &self.timesteps())
            .finish()
    }
}

/// Registered image encoder.
#[derive(Clone)]
pub struct EncoderHandle {
    backend: Arc<dyn Encoder>,
    gate: Arc<Gate>,
}

impl EncoderHandle {
    pub fn new(backend: Arc<dyn Encoder>) -> Self {
        let gate = gate_for(backend.max_concurrency());
        Self { backend, gate }
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn embed_dim(&self) -> usize {
        self.backend.embed_dim()
    }

    pub fn parameters(&self) -> &[f64] {
        self.backend.parameters()
    }

    pub fn preprocess_spec(&self) -> &PreprocessSpec {
        self.backend.preprocess_spec()
    }

    pub fn backend(&self) -> &Arc<dyn Encoder> {
        &self.backend
    }

    /// Embeds `image`, checking the declared dimension and finiteness.
    pub fn embed(&self, image: &ImageTensor) -> Result<Embedding, BackendError> {
        let _permit = self.gate.acquire();
        let values = self.backend.embed(image)?;
        if values.len() != self.embed_dim() {
            return Err(BackendError::failure(
                self.model_id(),
                format!("embedding has length {}, declared {}", values.len(), self.embed_dim()),
            ));
        }
        Embedding::new(values, self.model_id()).map_err(|e| BackendError::failure(self.model_id(), e.to_string()))
    }

    pub fn differentiable(&self) -> Result<&dyn DifferentiableEncoder, BackendError> {
        self.backend
            .differentiable()
            .ok_or_else(|| BackendError::NonDifferentiable(self.model_id().to_string()))
    }

    /// SHA-256 of the parameter bit patterns.
    pub fn parameter_digest(&self) -> String {
        parameter_digest(self.parameters())
    }
}

impl std::fmt::Debug for EncoderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderHandle")
            .field("model_id", &self.model_id())
            .field("embed_dim", &self.embed_dim())
            .field("parameters", &self.parameters().len())
            .finish()
    }
}

pub fn parameter_digest(parameters: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in parameters {
        hasher.update(p.to_bits().to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Anything stored in a [`Registry`].
pub trait Identified {
    fn id(&self) -> &str;
}

impl Identified for VictimHandle {
    fn id(&self) -> &str {
        self.model_id()
    }
}

impl Identified for GeneratorHandle {
    fn id(&self) -> &str {
        self.model_id()
    }
}

impl Identified for EncoderHandle {
    fn id(&self) -> &str {
        self.model_id()
    }
}

/// Insertion-ordered collection with unique ids.
#[derive(Debug, Clone)]
pub struct Registry<H> {
    items: Vec<H>,
    index: HashMap<String, usize>,
}

impl<H> Default for Registry<H> {
    fn default() -> Self {
        Self {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<H: Identified + Clone> Registry<H> {
    pub fn register(&mut self, handle: H) -> Result<(), ZooError> {
        let id = handle.id().to_string();
        if self.index.contains_key(&id) {
            return Err(ZooError::DuplicateModelId(id));
        }
        self.index.insert(id, self.items.len());
        self.items.push(handle);
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Result<&H, ZooError> {
        self.index
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| ZooError::UnknownModelId(id.to_string()))
    }

    /// Registration position of `id`.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn list(&self) -> &[H] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// The defender's populations of victims, generators, and encoders.
#[derive(Debug, Clone, Default)]
pub struct ModelZoo {
    pub victims: Registry<VictimHandle>,
    pub generators: Registry<GeneratorHandle>,
    pub encoders: Registry<EncoderHandle>,
}

impl ModelZoo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generator_ids(&self) -> Vec<String> {
        self.generators.list().iter().map(|g| g.model_id().to_string()).collect()
    }

    pub fn encoder_ids(&self) -> Vec<String> {
        self.encoders.list().iter().map(|e| e.model_id().to_string()).collect()
    }

    /// A zoo restricted to the named encoders (in the given order), sharing
    /// the same victims and generators.
    pub fn with_encoder_subset(&self, ids: &[String]) -> Result<ModelZoo, ZooError> {
        let mut encoders = Registry::default();
        for id in ids {
            encoders.register(self.encoders.lookup(id)?.clone())?;
        }
        Ok(ModelZoo {
            victims: self.victims.clone(),
            generators: self.generators.clone(),
            encoders,
        })
    }

    /// A zoo restricted to one generator.
    pub fn with_generator_subset(&self, ids: &[String]) -> Result<ModelZoo, ZooError> {
        let mut generators = Registry::default();
        for id in ids {
            generators.register(self.generators.lookup(id)?.clone())?;
        }
        Ok(ModelZoo {
            victims: self.victims.clone(),
            generators,
            encoders: self.encoders.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::toy::{LinearEncoder, ToyWorld, ToyWorldConfig};
    use super::*;

    fn encoder(id: &str, seed: u64) -> EncoderHandle {
        let world = ToyWorld::new(ToyWorldConfig::default());
        EncoderHandle::new(Arc::new(LinearEncoder::random(id, 8, world.encoder_preprocess(), seed)))
    }

    #[test]
    fn registry_round_trip_and_order() {
        let mut zoo = ModelZoo::new();
        for (id, s) in [("A", 1), ("B", 2), ("C", 3)] {
            zoo.encoders.register(encoder(id, s)).unwrap();
        }
        assert_eq!(zoo.encoder_ids(), ["A", "B", "C"]);
        let b = zoo.encoders.lookup("B").unwrap();
        assert_eq!(b.model_id(), "B");
        assert!(Arc::ptr_eq(b.backend(), zoo.encoders.list()[1].backend()));
    }

    #[test]
    fn registry_rejects_duplicates_and_unknowns() {
        let mut zoo = ModelZoo::new();
        zoo.encoders.register(encoder("rn50-toy", 1)).unwrap();
        assert_eq!(
            zoo.encoders.register(encoder("rn50-toy", 2)),
            Err(ZooError::DuplicateModelId("rn50-toy".into()))
        );
        assert!(matches!(zoo.encoders.lookup("vit"), Err(ZooError::UnknownModelId(_))));
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
    }
}
