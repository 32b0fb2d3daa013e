//! Deterministic desk-scale backends.
//!
//! A [`ToyWorld`] fixes a set of classes, each with a smooth random
//! prototype pattern around mid-gray. On top of it:
//!
//! * [`ToyVictim`] is a nearest-centroid linear classifier over pooled pixels
//!   that captions with `"a photo of a <class>"`;
//! * [`ToyGenerator`] renders the prototype of the class named in a caption
//!   (in its own style) plus seeded noise, falling back to gray;
//! * [`LinearEncoder`] is a fixed random projection of the preprocessed image.
//!
//! Every piece is differentiable so the attacks have exact gradients.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    BackendError, Capability, Captioner, ConditionedGenerator, DifferentiableEncoder, DifferentiableVictim, Encoder,
    EncoderHandle, Generator, GeneratorHandle, ModelZoo, PreprocessSpec, VictimHandle,
};
use crate::image::{Caption, ImageTensor};
use crate::seed::{derive_seed, derive_seed_str, rng};
use crate::similarity::dot;

pub const DEFAULT_CLASSES: [&str; 10] = [
    "cat", "dog", "car", "ship", "bird", "horse", "truck", "plane", "frog", "deer",
];

const NEUTRAL_GRAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// Side of the coarse random grid each pattern is interpolated from.
    pub grid: usize,
    /// Pattern amplitude around mid-gray.
    pub contrast: f64,
    /// Within-class pattern variation, relative to `contrast`.
    pub class_variation: f64,
    /// Per-pixel white noise standard deviation of sampled images.
    pub pixel_noise: f64,
    pub token_dim: usize,
    pub max_tokens: usize,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            height: 32,
            width: 32,
            grid: 8,
            contrast: 0.03,
            class_variation: 0.25,
            pixel_noise: 0.003,
            token_dim: 32,
            max_tokens: 8,
        }
    }
}

/// Shared ground truth for the toy backends.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    fields: Vec<Vec<f64>>,
}

impl ToyWorld {
    pub fn new(config: ToyWorldConfig) -> Self {
        let fields = (0..config.classes.len())
            .map(|k| gaussian_vec(derive_seed(config.seed, "class-field", k as u64), config.grid * config.grid * 3))
            .collect();
        Self { config, fields }
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.config.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.config.classes.iter().position(|c| c == name)
    }

    /// Caption text the toy victim emits for class `k`.
    pub fn caption_text(&self, k: usize) -> String {
        format!("a photo of a {}", self.config.classes[k])
    }

    /// First class whose name appears as a whole word in `text`.
    pub fn class_of_text(&self, text: &str) -> Option<usize> {
        tokenize(text).iter().find_map(|t| self.class_index(t))
    }

    fn render_field(&self, field: &[f64], height: usize, width: usize) -> Vec<f64> {
        let g = self.config.grid;
        super::preprocess::resize_raw(field, g, g, 3, height, width)
    }

    fn pattern_image(&self, field: &[f64], height: usize, width: usize, noise: Option<(f64, u64)>) -> ImageTensor {
        let rendered = self.render_field(field, height, width);
        let mut data: Vec<f64> = rendered.iter().map(|v| NEUTRAL_GRAY + self.config.contrast * v).collect();
        if let Some((std, seed)) = noise {
            let mut r = rng(seed);
            for v in &mut data {
                let n: f64 = StandardNormal.sample(&mut r);
                *v += std * n;
            }
        }
        ImageTensor::from_clamped(height, width, 3, data).expect("valid shape")
    }

    /// Noise-free prototype of class `k` at the given resolution.
    pub fn prototype(&self, k: usize, height: usize, width: usize) -> ImageTensor {
        self.pattern_image(&self.fields[k], height, width, None)
    }

    /// A dataset image of class `k`: prototype plus within-class variation
    /// and pixel noise, keyed by `seed`.
    pub fn sample(&self, k: usize, seed: u64) -> ImageTensor {
        let n = self.fields[k].len();
        let variation = gaussian_vec(derive_seed(seed, "variation", k as u64), n);
        let field: Vec<f64> = self.fields[k]
            .iter()
            .zip(&variation)
            .map(|(f, v)| f + self.config.class_variation * v)
            .collect();
        self.pattern_image(
            &field,
            self.config.height,
            self.config.width,
            Some((self.config.pixel_noise, derive_seed(seed, "pixel-noise", k as u64))),
        )
    }

    /// Class `k` as drawn by a generator with the given style.
    fn styled_prototype(&self, k: usize, style_seed: u64, style: f64, height: usize, width: usize) -> ImageTensor {
        let n = self.fields[k].len();
        let offset = gaussian_vec(derive_seed(style_seed, "style", k as u64), n);
        let field: Vec<f64> = self.fields[k].iter().zip(&offset).map(|(f, o)| f + style * o).collect();
        self.pattern_image(&field, height, width, None)
    }

    /// Unit-norm embedding of one token.
    pub fn token_embedding(&self, token: &str) -> Vec<f64> {
        let mut v = gaussian_vec(derive_seed_str(self.config.seed, "token", token), self.config.token_dim);
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// `max_tokens × token_dim` conditioning matrix, zero padded.
    pub fn conditioning(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.config.max_tokens * self.config.token_dim];
        for (t, token) in tokenize(text).iter().take(self.config.max_tokens).enumerate() {
            let e = self.token_embedding(token);
            out[t * self.config.token_dim..(t + 1) * self.config.token_dim].copy_from_slice(&e);
        }
        out
    }

    /// Toy encoder preprocessing: resize to the world resolution and
    /// subtract mid-gray.
    pub fn encoder_preprocess(&self) -> PreprocessSpec {
        PreprocessSpec {
            height: self.config.height,
            width: self.config.width,
            mean: vec![NEUTRAL_GRAY; 3],
            std: vec![1.0; 3],
        }
    }
}

fn gaussian_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Lowercase alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyVictimConfig {
    pub seed: u64,
    /// Width of the continuous feature, laid out as `feature_rows × feature_cols`.
    pub feature_rows: usize,
    pub feature_cols: usize,
    /// Typical logit margin between neighboring classes.
    pub logit_scale: f64,
    pub capability: Capability,
}

impl Default for ToyVictimConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            feature_rows: 8,
            feature_cols: 8,
            logit_scale: 10.0,
            capability: Capability::Caption,
        }
    }
}

/// Nearest-centroid classifier over average-pooled, centered pixels.
///
/// `features = H · pool(x - 0.5)` and
/// `logits_k = beta (c_k · features - ½‖c_k‖²)` where `c_k` is the
/// feature of the class-`k` prototype.
#[derive(Debug, Clone)]
pub struct ToyVictim {
    model_id: String,
    world: Arc<ToyWorld>,
    config: ToyVictimConfig,
    hidden: Vec<f64>,
    centroids: Vec<Vec<f64>>,
    beta: f64,
}

impl ToyVictim {
    pub fn new(model_id: impl Into<String>, world: Arc<ToyWorld>, config: ToyVictimConfig) -> Self {
        let pooled_len = world.config.grid * world.config.grid * 3;
        let feat = config.feature_rows * config.feature_cols;
        let scale = 1.0 / (feat as f64).sqrt();
        let hidden: Vec<f64> = gaussian_vec(derive_seed(config.seed, "victim-hidden", 0), feat * pooled_len)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let mut victim = Self {
            model_id: model_id.into(),
            world,
            config,
            hidden,
            centroids: Vec::new(),
            beta: 1.0,
        };
        let (h, w) = (victim.world.config.height, victim.world.config.width);
        victim.centroids = (0..victim.world.num_classes())
            .map(|k| victim.hidden_features(&victim.world.prototype(k, h, w)))
            .collect();
        let mut half_sq: Vec<f64> = Vec::new();
        for i in 0..victim.centroids.len() {
            for j in i + 1..victim.centroids.len() {
                let d: f64 = victim.centroids[i]
                    .iter()
                    .zip(&victim.centroids[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                half_sq.push(0.5 * d);
            }
        }
        half_sq.sort_by(f64::total_cmp);
        if let Some(&median) = half_sq.get(half_sq.len() / 2) {
            victim.beta = victim.config.logit_scale / median.max(1e-12);
        }
        victim
    }

    pub fn world(&self) -> &Arc<ToyWorld> {
        &self.world
    }

    fn pool_spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            height: self.world.config.height,
            width: self.world.config.width,
            mean: vec![NEUTRAL_GRAY; 3],
            std: vec![1.0; 3],
        }
    }

    fn pool_factor(&self) -> (usize, usize) {
        let g = self.world.config.grid;
        (self.world.config.height / g, self.world.config.width / g)
    }

    fn pooled(&self, image: &ImageTensor) -> Vec<f64> {
        let x = self.pool_spec().apply(image);
        let g = self.world.config.grid;
        let (fy, fx) = self.pool_factor();
        let w = self.world.config.width;
        let mut out = vec![0.0; g * g * 3];
        let norm = 1.0 / (fy * fx) as f64;
        for y in 0..g * fy {
            for xx in 0..g * fx {
                for c in 0..3 {
                    out[((y / fy) * g + xx / fx) * 3 + c] += x[(y * w + xx) * 3 + c] * norm;
                }
            }
        }
        out
    }

    fn pooled_adjoint(&self, image: &ImageTensor, grad: &[f64]) -> Vec<f64> {
        let g = self.world.config.grid;
        let (fy, fx) = self.pool_factor();
        let (h, w) = (self.world.config.height, self.world.config.width);
        let norm = 1.0 / (fy * fx) as f64;
        let mut up = vec![0.0; h * w * 3];
        for y in 0..g * fy {
            for xx in 0..g * fx {
                for c in 0..3 {
                    up[(y * w + xx) * 3 + c] = grad[((y / fy) * g + xx / fx) * 3 + c] * norm;
                }
            }
        }
        self.pool_spec().adjoint(image.shape(), &up)
    }

    fn hidden_features(&self, image: &ImageTensor) -> Vec<f64> {
        let p = self.pooled(image);
        self.hidden.chunks_exact(p.len()).map(|row| dot(row, &p)).collect()
    }

    fn hidden_adjoint(&self, image: &ImageTensor, grad: &[f64]) -> Vec<f64> {
        let pooled_len = self.world.config.grid * self.world.config.grid * 3;
        let mut gp = vec![0.0; pooled_len];
        for (row, g) in self.hidden.chunks_exact(pooled_len).zip(grad) {
            for (acc, r) in gp.iter_mut().zip(row) {
                *acc += g * r;
            }
        }
        self.pooled_adjoint(image, &gp)
    }

    /// The victim's feature extractor viewed as an image encoder, usable as
    /// an attack surrogate.
    pub fn vision_encoder(&self) -> VisionTower {
        VisionTower {
            model_id: format!("{}/vision", self.model_id),
            victim: self.clone(),
            preprocess: self.pool_spec(),
        }
    }
}

impl Captioner for ToyVictim {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn capability(&self) -> Capability {
        self.config.capability
    }

    /// The prompt is ignored.
    fn caption(&self, image: &ImageTensor, _prompt: &str) -> Result<Caption, BackendError> {
        let k = self.predict(image);
        let text = match self.config.capability {
            Capability::Classify => self.world.config.classes[k].clone(),
            Capability::Caption | Capability::Vqa => self.world.caption_text(k),
        };
        Caption::new(text, &self.model_id).map_err(|e| BackendError::failure(&self.model_id, e.to_string()))
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableVictim> {
        Some(self)
    }
}

impl DifferentiableVictim for ToyVictim {
    fn class_names(&self) -> &[String] {
        self.world.class_names()
    }

    fn logits(&self, image: &ImageTensor) -> Vec<f64> {
        let z = self.hidden_features(image);
        self.centroids
            .iter()
            .map(|c| self.beta * (dot(c, &z) - 0.5 * dot(c, c)))
            .collect()
    }

    fn logits_vjp(&self, image: &ImageTensor, grad_logits: &[f64]) -> Vec<f64> {
        let mut gz = vec![0.0; self.config.feature_rows * self.config.feature_cols];
        for (c, g) in self.centroids.iter().zip(grad_logits) {
            for (acc, ci) in gz.iter_mut().zip(c) {
                *acc += self.beta * g * ci;
            }
        }
        self.hidden_adjoint(image, &gz)
    }

    fn feature_shape(&self) -> (usize, usize) {
        (self.config.feature_rows, self.config.feature_cols)
    }

    fn features(&self, image: &ImageTensor) -> Vec<f64> {
        self.hidden_features(image)
    }

    fn features_vjp(&self, image: &ImageTensor, grad_features: &[f64]) -> Vec<f64> {
        self.hidden_adjoint(image, grad_features)
    }
}

/// The toy victim's continuous features exposed as an [`Encoder`].
#[derive(Debug, Clone)]
pub struct VisionTower {
    model_id: String,
    victim: ToyVictim,
    preprocess: PreprocessSpec,
}

impl Encoder for VisionTower {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.victim.config.feature_rows * self.victim.config.feature_cols
    }

    fn preprocess_spec(&self) -> &PreprocessSpec {
        // Average pooling to the coarse grid follows this stage.
        &self.preprocess
    }

    fn parameters(&self) -> &[f64] {
        &self.victim.hidden
    }

    fn with_parameters(&self, parameters: Vec<f64>) -> Result<Arc<dyn Encoder>, BackendError> {
        if parameters.len() != self.victim.hidden.len() {
            return Err(BackendError::failure(&self.model_id, "parameter length mismatch"));
        }
        let mut victim = self.victim.clone();
        victim.hidden = parameters;
        Ok(Arc::new(VisionTower {
            model_id: self.model_id.clone(),
            victim,
            preprocess: self.preprocess.clone(),
        }))
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>, BackendError> {
        Ok(self.victim.hidden_features(image))
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableEncoder> {
        Some(self)
    }
}

impl DifferentiableEncoder for VisionTower {
    fn embed_vjp(&self, image: &ImageTensor, grad_embedding: &[f64]) -> Vec<f64> {
        self.victim.hidden_adjoint(image, grad_embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGeneratorConfig {
    pub style_seed: u64,
    /// Generator-specific deviation from the class pattern, relative to
    /// the world contrast.
    pub style: f64,
    /// Standard deviation of the seeded output noise.
    pub noise: f64,
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    /// Sharpness of keyword matching on the differentiable path.
    pub token_sharpness: f64,
    pub class_sharpness: f64,
    /// Score of the gray fallback on the differentiable path.
    pub neutral_score: f64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        Self {
            style_seed: 0,
            style: 0.25,
            noise: 0.003,
            height: 32,
            width: 32,
            timesteps: 50,
            token_sharpness: 20.0,
            class_sharpness: 30.0,
            neutral_score: 0.7,
        }
    }
}

/// Keyword-matching prototype renderer.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    model_id: String,
    world: Arc<ToyWorld>,
    config: ToyGeneratorConfig,
    prototypes: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
}

impl ToyGenerator {
    pub fn new(model_id: impl Into<String>, world: Arc<ToyWorld>, config: ToyGeneratorConfig) -> Self {
        let prototypes = (0..world.num_classes())
            .map(|k| {
                world
                    .styled_prototype(k, config.style_seed, config.style, config.height, config.width)
                    .into_data()
            })
            .collect();
        let keys = world.class_names().iter().map(|c| world.token_embedding(c)).collect();
        Self {
            model_id: model_id.into(),
            world,
            config,
            prototypes,
            keys,
        }
    }

    /// The noise-free image this generator draws for class `k`.
    pub fn class_prototype(&self, k: usize) -> ImageTensor {
        ImageTensor::new(self.config.height, self.config.width, 3, self.prototypes[k].clone()).expect("valid prototype")
    }

    /// Neutral fallback for captions that name no known class.
    pub fn fallback_prototype(&self) -> ImageTensor {
        ImageTensor::filled(self.config.height, self.config.width, 3, NEUTRAL_GRAY).expect("valid shape")
    }

    fn add_noise(&self, mut data: Vec<f64>, seed: u64) -> ImageTensor {
        let mut r = rng(derive_seed(seed, "generator-noise", 0));
        for v in &mut data {
            let n: f64 = StandardNormal.sample(&mut r);
            *v += self.config.noise * n;
        }
        ImageTensor::from_clamped(self.config.height, self.config.width, 3, data).expect("valid shape")
    }

    /// Soft keyword scores and mixing weights for a conditioning matrix.
    /// Returns `(token_attention[k][t], weights[0..=K])`, the last weight
    /// belonging to the gray fallback.
    fn soft_weights(&self, conditioning: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = self.world.config.token_dim;
        let bt = self.config.token_sharpness;
        let mut attention = Vec::with_capacity(self.keys.len());
        let mut scores = Vec::with_capacity(self.keys.len() + 1);
        for key in &self.keys {
            let dots: Vec<f64> = conditioning.chunks_exact(d).map(|tok| dot(tok, key)).collect();
            let (lse, soft) = log_softmax_parts(&dots, bt);
            scores.push(lse / bt);
            attention.push(soft);
        }
        scores.push(self.config.neutral_score);
        let (_, weights) = log_softmax_parts(&scores, self.config.class_sharpness);
        (attention, weights)
    }
}

/// `(ln Σ exp(beta x), softmax(beta x))`, computed stably.
fn log_softmax_parts(x: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let m = x.iter().map(|v| beta * v).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (beta * v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (m + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

impl Generator for ToyGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn output_size(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    fn generate(&self, caption: &Caption, seed: u64) -> Result<ImageTensor, BackendError> {
        let base = match self.world.class_of_text(&caption.text) {
            Some(k) => self.prototypes[k].clone(),
            None => self.fallback_prototype().into_data(),
        };
        Ok(self.add_noise(base, seed))
    }

    fn conditioned(&self) -> Option<&dyn ConditionedGenerator> {
        Some(self)
    }
}

impl ConditionedGenerator for ToyGenerator {
    fn conditioning_shape(&self) -> (usize, usize) {
        (self.world.config.max_tokens, self.world.config.token_dim)
    }

    fn condition(&self, caption: &Caption) -> Vec<f64> {
        self.world.conditioning(&caption.text)
    }

    /// Mixture of class prototypes weighted by soft keyword matching.
    fn render(&self, conditioning: &[f64], seed: u64) -> ImageTensor {
        let (_, weights) = self.soft_weights(conditioning);
        let n = self.config.height * self.config.width * 3;
        let mut data = vec![NEUTRAL_GRAY * weights[self.keys.len()]; n];
        for (proto, w) in self.prototypes.iter().zip(&weights) {
            for (acc, p) in data.iter_mut().zip(proto) {
                *acc += w * p;
            }
        }
        self.add_noise(data, seed)
    }

    /// Gradient of `render` with respect to the conditioning. Clamping and
    /// noise are treated as identity.
    fn render_vjp(&self, conditioning: &[f64], grad_image: &[f64]) -> Vec<f64> {
        let (attention, weights) = self.soft_weights(conditioning);
        let k = self.keys.len();
        let mut gw: Vec<f64> = self.prototypes.iter().map(|p| dot(p, grad_image)).collect();
        gw.push(NEUTRAL_GRAY * grad_image.iter().sum::<f64>());
        let mean: f64 = weights.iter().zip(&gw).map(|(w, g)| w * g).sum();
        let bc = self.config.class_sharpness;
        let gs: Vec<f64> = (0..k).map(|i| bc * weights[i] * (gw[i] - mean)).collect();
        let d = self.world.config.token_dim;
        let mut out = vec![0.0; conditioning.len()];
        for (i, key) in self.keys.iter().enumerate() {
            for (t, a) in attention[i].iter().enumerate() {
                let coeff = gs[i] * a;
                for (o, kv) in out[t * d..(t + 1) * d].iter_mut().zip(key) {
                    *o += coeff * kv;
                }
            }
        }
        out
    }
}

/// `embedding = W · preprocess(image)` with a dense projection `W`.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    model_id: String,
    embed_dim: usize,
    preprocess: PreprocessSpec,
    weights: Vec<f64>,
}

impl LinearEncoder {
    pub fn from_weights(
        model_id: impl Into<String>,
        embed_dim: usize,
        preprocess: PreprocessSpec,
        weights: Vec<f64>,
    ) -> Result<Self, BackendError> {
        let model_id = model_id.into();
        if weights.len() != embed_dim * preprocess.output_len() {
            return Err(BackendError::failure(
                &model_id,
                format!(
                    "projection has {} entries, expected {}x{}",
                    weights.len(),
                    embed_dim,
                    preprocess.output_len()
                ),
            ));
        }
        Ok(Self {
            model_id,
            embed_dim,
            preprocess,
            weights,
        })
    }

    /// Standard-normal projection entries.
    pub fn random(model_id: impl Into<String>, embed_dim: usize, preprocess: PreprocessSpec, seed: u64) -> Self {
        let n = embed_dim * preprocess.output_len();
        let weights = gaussian_vec(derive_seed(seed, "linear-encoder", 0), n);
        Self::from_weights(model_id, embed_dim, preprocess, weights).expect("sizes agree")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Encoder for LinearEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    fn parameters(&self) -> &[f64] {
        &self.weights
    }

    fn with_parameters(&self, parameters: Vec<f64>) -> Result<Arc<dyn Encoder>, BackendError> {
        Ok(Arc::new(Self::from_weights(
            self.model_id.clone(),
            self.embed_dim,
            self.preprocess.clone(),
            parameters,
        )?))
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>, BackendError> {
        let x = self.preprocess.apply(image);
        Ok(self.weights.chunks_exact(x.len()).map(|row| dot(row, &x)).collect())
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableEncoder> {
        Some(self)
    }
}

impl DifferentiableEncoder for LinearEncoder {
    fn embed_vjp(&self, image: &ImageTensor, grad_embedding: &[f64]) -> Vec<f64> {
        let n = self.preprocess.output_len();
        let mut gx = vec![0.0; n];
        for (row, g) in self.weights.chunks_exact(n).zip(grad_embedding) {
            for (acc, w) in gx.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        self.preprocess.adjoint(image.shape(), &gx)
    }
}

/// Recipe for a complete toy zoo: one victim, `n_generators` generators
/// with distinct styles, and `n_encoders` random linear encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyZooConfig {
    pub world: ToyWorldConfig,
    pub victim: ToyVictimConfig,
    pub generator: ToyGeneratorConfig,
    pub n_generators: usize,
    pub n_encoders: usize,
    pub embed_dim: usize,
    pub encoder_seed: u64,
}

impl Default for ToyZooConfig {
    fn default() -> Self {
        Self {
            world: ToyWorldConfig::default(),
            victim: ToyVictimConfig::default(),
            generator: ToyGeneratorConfig::default(),
            n_generators: 1,
            n_encoders: 10,
            embed_dim: 64,
            encoder_seed: 1000,
        }
    }
}

pub const TOY_VICTIM_ID: &str = "toy-victim";

pub fn toy_generator_id(i: usize) -> String {
    format!("toy-gen-{i}")
}

pub fn toy_encoder_id(i: usize) -> String {
    format!("toy-enc-{i}")
}

impl ToyZooConfig {
    pub fn encoder(&self, world: &ToyWorld, id: impl Into<String>, index: u64) -> LinearEncoder {
        LinearEncoder::random(id, self.embed_dim, world.encoder_preprocess(), derive_seed(self.encoder_seed, "encoder", index))
    }

    pub fn build(&self) -> (ModelZoo, Arc<ToyWorld>) {
        let world = Arc::new(ToyWorld::new(self.world.clone()));
        let mut zoo = ModelZoo::new();
        let victim = ToyVictim::new(TOY_VICTIM_ID, world.clone(), self.victim.clone());
        zoo.victims.register(VictimHandle::new(Arc::new(victim))).expect("fresh registry");
        for g in 0..self.n_generators {
            let cfg = ToyGeneratorConfig {
                style_seed: self.generator.style_seed + g as u64,
                ..self.generator.clone()
            };
            let gen = ToyGenerator::new(toy_generator_id(g), world.clone(), cfg);
            zoo.generators.register(GeneratorHandle::new(Arc::new(gen))).expect("unique ids");
        }
        for e in 0..self.n_encoders {
            let enc = self.encoder(&world, toy_encoder_id(e), e as u64);
            zoo.encoders.register(EncoderHandle::new(Arc::new(enc))).expect("unique ids");
        }
        (zoo, world)
    }
}

/// Uniform random image, handy for tests and probes.
pub fn random_image(height: usize, width: usize, channels: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    let data = (0..height * width * channels).map(|_| r.random::<f64>()).collect();
    ImageTensor::new(height, width, channels, data).expect("values in [0, 1)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{cosine_similarity, Embedding};

    fn world() -> Arc<ToyWorld> {
        Arc::new(ToyWorld::new(ToyWorldConfig::default()))
    }

    fn caption(text: &str) -> Caption {
        Caption::new(text, "test").unwrap()
    }

    #[test]
    fn victim_captions_prototypes_with_template() {
        let w = world();
        let victim = VictimHandle::new(Arc::new(ToyVictim::new("toy-victim", w.clone(), Default::default())));
        let k = w.class_index("cat").unwrap();
        let proto = w.prototype(k, 32, 32);
        assert_eq!(victim.caption(&proto, "").unwrap().text, "a photo of a cat");
        for k in 0..w.num_classes() {
            let img = w.sample(k, 1000 + k as u64);
            let text = victim.caption(&img, "").unwrap().text;
            assert_eq!(text, w.caption_text(k));
            assert_eq!(text, victim.caption(&img, "What is shown?").unwrap().text);
        }
    }

    #[test]
    fn victim_on_zero_image_matches_nearest_centroid_oracle() {
        let w = world();
        let victim = ToyVictim::new("toy-victim", w.clone(), Default::default());
        let zeros = ImageTensor::filled(32, 32, 3, 0.0).unwrap();
        // Oracle: nearest class prototype in the victim's feature space,
        // computed from explicit distances.
        let z = victim.features(&zeros);
        let best = (0..w.num_classes())
            .min_by(|&a, &b| {
                let da: f64 = victim.centroids[a].iter().zip(&z).map(|(c, v)| (c - v).powi(2)).sum();
                let db: f64 = victim.centroids[b].iter().zip(&z).map(|(c, v)| (c - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(victim.caption(&zeros, "").unwrap().text, w.caption_text(best));
    }

    #[test]
    fn generator_renders_prototype_plus_noise() {
        let w = world();
        let gen = ToyGenerator::new("toy-gen", w.clone(), Default::default());
        let handle = GeneratorHandle::new(Arc::new(gen.clone()));
        let out = handle.generate(&caption("a photo of a cat"), 0).unwrap();
        let k = w.class_index("cat").unwrap();
        let proto = gen.class_prototype(k);
        let mut r = rng(derive_seed(0, "generator-noise", 0));
        for (i, (o, p)) in out.data().iter().zip(proto.data()).enumerate() {
            let n: f64 = StandardNormal.sample(&mut r);
            let expected = (p + 0.003 * n).clamp(0.0, 1.0);
            assert_eq!(*o, expected, "pixel {i}");
        }
        let again = handle.generate(&caption("a photo of a cat"), 0).unwrap();
        assert_eq!(out, again);
        let other_seed = handle.generate(&caption("a photo of a cat"), 1).unwrap();
        assert_ne!(out, other_seed);
    }

    #[test]
    fn generator_falls_back_to_gray() {
        let w = world();
        let gen = ToyGenerator::new("toy-gen", w, ToyGeneratorConfig { noise: 0.0, ..Default::default() });
        let out = gen.generate(&caption("zzz unknown words"), 0).unwrap();
        assert_eq!(out, gen.fallback_prototype());
    }

    #[test]
    fn soft_render_agrees_with_keyword_match() {
        let w = world();
        let gen = ToyGenerator::new("toy-gen", w.clone(), ToyGeneratorConfig { noise: 0.0, ..Default::default() });
        for k in 0..w.num_classes() {
            let cap = caption(&w.caption_text(k));
            let soft = gen.render(&gen.condition(&cap), 0);
            let hard = gen.generate(&cap, 0).unwrap();
            assert!(soft.linf_distance(&hard) < 1e-3, "class {k}");
        }
        let unknown = caption("zzz unknown words");
        let soft = gen.render(&gen.condition(&unknown), 0);
        assert!(soft.linf_distance(&gen.fallback_prototype()) < 1e-3);
    }

    #[test]
    fn render_vjp_matches_finite_differences() {
        let w = world();
        let gen = ToyGenerator::new("toy-gen", w.clone(), ToyGeneratorConfig { noise: 0.0, ..Default::default() });
        // A conditioning halfway between two classes keeps the softmax
        // unsaturated.
        let a = gen.condition(&caption("a photo of a cat"));
        let b = gen.condition(&caption("a photo of a dog"));
        let cond: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
        let mut r = rng(5);
        let g: Vec<f64> = (0..32 * 32 * 3).map(|_| r.random::<f64>() - 0.5).collect();
        let f = |c: &[f64]| dot(gen.render(c, 0).data(), &g);
        let analytic = gen.render_vjp(&cond, &g);
        let h = 1e-4;
        // Rounding in the 3072-term sum limits the finite-difference floor.
        let gmax = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in [4 * 32, 4 * 32 + 3, 4 * 32 + 17, 0, 70] {
            let mut p = cond.clone();
            let mut m = cond.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-2 * gmax);
            assert!((fd - analytic[i]).abs() / scale < 1e-3, "coord {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn encoder_embeds_constant_image_as_projection() {
        let w = world();
        let pre = w.encoder_preprocess();
        let enc = LinearEncoder::random("toy-enc", 16, pre.clone(), 3);
        let img = ImageTensor::filled(32, 32, 3, 0.7).unwrap();
        let z = enc.embed(&img).unwrap();
        // Oracle: explicit matrix-vector product with the centered constant.
        let n = pre.output_len();
        for (i, zi) in z.iter().enumerate() {
            let expected: f64 = enc.weights()[i * n..(i + 1) * n].iter().map(|wv| wv * (0.7 - 0.5)).sum();
            assert!((zi - expected).abs() < 1e-12);
        }
        assert_eq!(z, enc.embed(&img).unwrap());
    }

    #[test]
    fn encoder_is_resolution_canonical() {
        let w = world();
        let enc = EncoderHandle::new(Arc::new(LinearEncoder::random("toy-enc", 16, w.encoder_preprocess(), 3)));
        let small = w.sample(0, 1);
        let mut big = vec![0.0; 64 * 64 * 3];
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    big[(y * 64 + x) * 3 + c] = small.at(y / 2, x / 2, c);
                }
            }
        }
        let big = ImageTensor::new(64, 64, 3, big).unwrap();
        let a = enc.embed(&small).unwrap();
        let b = enc.embed(&big).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_gap_exists() {
        let w = world();
        let victim = ToyVictim::new("v", w.clone(), Default::default());
        let gen = ToyGenerator::new("g", w.clone(), Default::default());
        let enc = EncoderHandle::new(Arc::new(LinearEncoder::random("e", 64, w.encoder_preprocess(), 9)));
        let k = 0;
        let proto = w.prototype(k, 32, 32);
        let cap = victim.caption(&proto, "").unwrap();
        let regen = gen.generate(&cap, 0).unwrap();
        let z_in = enc.embed(&proto).unwrap();
        let clean = cosine_similarity(&z_in, &enc.embed(&regen).unwrap()).unwrap();
        assert!(clean > 0.9, "clean round trip {clean}");
        let wrong = gen.generate(&caption(&w.caption_text(1)), 0).unwrap();
        let mismatched = cosine_similarity(&z_in, &enc.embed(&wrong).unwrap()).unwrap();
        assert!(mismatched < clean);
        let _: Embedding = z_in;
    }

    #[test]
    fn victim_gradients_match_finite_differences() {
        let w = world();
        let victim = ToyVictim::new("v", w.clone(), Default::default());
        let img = w.sample(2, 4);
        let mut r = rng(8);
        let g: Vec<f64> = (0..w.num_classes()).map(|_| r.random::<f64>() - 0.5).collect();
        let analytic = victim.logits_vjp(&img, &g);
        let h = 1e-4;
        for i in [0, 100, 777, 2000, 3071] {
            let mut p = img.data().to_vec();
            let mut m = img.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let f = |d: Vec<f64>| dot(&victim.logits(&ImageTensor::new(32, 32, 3, d).unwrap()), &g);
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", analytic[i]);
        }
    }
}
