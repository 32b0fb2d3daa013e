//! Detection entry points, fixed and randomized.
//!
//! The fixed detector runs caption → generate → embed → compare with a
//! predetermined generator and encoder list. The randomized detector draws
//! the generator and an encoder subset from the zoo for every call and adds
//! fresh Gaussian noise to each drawn encoder's parameters. The noisy copy is
//! used for both the input and the regenerated image and then discarded.
//!
//! All randomness is derived from one master seed through independent
//! sub-streams (`generator`, `encoders`, `otu/<position>`, `generate`).

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;
use crate::seed::{derive_seed, derive_seed_str, rng};
use crate::similarity::{cosine_similarity, Embedding, Provenance, SimilarityBreakdown, SimilarityError, Verdict};
use crate::zoo::{BackendError, Encoder, EncoderHandle, GeneratorHandle, ModelZoo, VictimHandle};

/// Pipeline stage that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Caption,
    Generate,
    Embed,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Caption => "CAPTION",
            Stage::Generate => "GENERATE",
            Stage::Embed => "EMBED",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("{stage} stage failed: {source}")]
    Backend { stage: Stage, source: BackendError },
    #[error("EMBED stage failed: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("the {0} population is empty")]
    EmptyZoo(&'static str),
    #[error("requested {requested} encoders but the zoo holds {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

fn at(stage: Stage) -> impl FnOnce(BackendError) -> DetectError {
    move |source| DetectError::Backend { stage, source }
}

/// Gaussian weight-noise specification for one encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtuSpec {
    /// Absolute standard deviation added to every parameter.
    pub scale: f64,
    pub seed: u64,
}

/// Configuration of the randomized detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticConfig {
    pub n_encoders: usize,
    pub otu_scale: f64,
    pub master_seed: u64,
    pub threshold: f64,
}

impl StochasticConfig {
    pub fn validate(&self, zoo: &ModelZoo) -> Result<(), DetectError> {
        if self.n_encoders == 0 {
            return Err(DetectError::InvalidConfig("n_encoders must be at least 1".into()));
        }
        if self.n_encoders > zoo.encoders.len() {
            return Err(DetectError::SubsetTooLarge {
                requested: self.n_encoders,
                available: zoo.encoders.len(),
            });
        }
        if !(self.otu_scale >= 0.0 && self.otu_scale.is_finite()) {
            return Err(DetectError::InvalidConfig(format!("otu_scale must be >= 0, got {}", self.otu_scale)));
        }
        if !self.threshold.is_finite() {
            return Err(DetectError::InvalidConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Seed the generator receives for a detection keyed by `master_seed`.
/// The fixed detector uses the same derivation so both paths render
/// identical images for the same master seed.
pub fn generation_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, "generate", 0)
}

/// Uniform draw of one generator.
pub fn select_generator(zoo: &ModelZoo, seed: u64) -> Result<GeneratorHandle, DetectError> {
    let m = zoo.generators.len();
    if m == 0 {
        return Err(DetectError::EmptyZoo("generator"));
    }
    let i = rng(seed).random_range(0..m);
    Ok(zoo.generators.list()[i].clone())
}

/// Uniform sample of `n` distinct encoders, in draw order.
pub fn select_encoders(zoo: &ModelZoo, n: usize, seed: u64) -> Result<Vec<EncoderHandle>, DetectError> {
    let available = zoo.encoders.len();
    if available == 0 {
        return Err(DetectError::EmptyZoo("encoder"));
    }
    if n > available {
        return Err(DetectError::SubsetTooLarge { requested: n, available });
    }
    let picks = index::sample(&mut rng(seed), available, n);
    Ok(picks.iter().map(|i| zoo.encoders.list()[i].clone()).collect())
}

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

/// A single-use noisy copy of an encoder.
///
/// Not `Clone`: each instance carries a process-unique token and counts its
/// embedding calls so audits can check it served exactly one detection.
pub struct PerturbedEncoder {
    base_id: String,
    encoder: Arc<dyn Encoder>,
    otu: OtuSpec,
    instance: u64,
    calls: AtomicUsize,
}

impl PerturbedEncoder {
    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn otu(&self) -> OtuSpec {
        self.otu
    }

    pub fn instance(&self) -> u64 {
        self.instance
    }

    pub fn parameters(&self) -> &[f64] {
        self.encoder.parameters()
    }

    pub fn embed_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed(&self, image: &ImageTensor) -> Result<Embedding, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let values = self.encoder.embed(image)?;
        if values.len() != self.encoder.embed_dim() {
            return Err(BackendError::failure(&self.base_id, "embedding length mismatch"));
        }
        Embedding::new(values, &self.base_id).map_err(|e| BackendError::failure(&self.base_id, e.to_string()))
    }

    /// The underlying noisy encoder, for gradient-based consumers.
    pub fn encoder(&self) -> &Arc<dyn Encoder> {
        &self.encoder
    }
}

impl std::fmt::Debug for PerturbedEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbedEncoder")
            .field("base_id", &self.base_id)
            .field("otu", &self.otu)
            .field("instance", &self.instance)
            .finish()
    }
}

/// Adds `N(0, scale²)` noise to every parameter of a copy of `enc`. The
/// base encoder is never touched; with `scale == 0` the copy is exact.
pub fn otu_perturb(enc: &EncoderHandle, spec: OtuSpec) -> Result<PerturbedEncoder, BackendError> {
    let mut params = enc.parameters().to_vec();
    if spec.scale > 0.0 {
        let normal = Normal::new(0.0, spec.scale).map_err(|e| BackendError::failure(enc.model_id(), e.to_string()))?;
        let mut r = rng(spec.seed);
        for p in &mut params {
            *p += normal.sample(&mut r);
        }
    }
    let encoder = enc.backend().with_parameters(params)?;
    Ok(PerturbedEncoder {
        base_id: enc.model_id().to_string(),
        encoder,
        otu: spec,
        instance: NEXT_INSTANCE.fetch_add(1, Ordering::SeqCst),
        calls: AtomicUsize::new(0),
    })
}

/// Fixed-pipeline detection.
pub fn detect_vanilla(
    image: &ImageTensor,
    victim: &VictimHandle,
    generator: &GeneratorHandle,
    encoders: &[EncoderHandle],
    threshold: f64,
    seed: u64,
) -> Result<Verdict, DetectError> {
    if encoders.is_empty() {
        return Err(DetectError::Similarity(SimilarityError::EmptyEnsemble));
    }
    let caption = victim.caption(image, "").map_err(at(Stage::Caption))?;
    let regenerated = generator.generate(&caption, seed).map_err(at(Stage::Generate))?;
    let mut per_encoder = Vec::with_capacity(encoders.len());
    for enc in encoders {
        let z_in = enc.embed(image).map_err(at(Stage::Embed))?;
        let z_gen = enc.embed(&regenerated).map_err(at(Stage::Embed))?;
        per_encoder.push((enc.model_id().to_string(), cosine_similarity(&z_in, &z_gen)?));
    }
    Ok(Verdict::from_breakdown(SimilarityBreakdown::from_scores(per_encoder)?, threshold))
}

/// What one perturbed encoder did during a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderAudit {
    pub base_id: String,
    pub instance: u64,
    pub embed_calls: usize,
    pub otu_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticDetection {
    pub verdict: Verdict,
    pub audit: Vec<EncoderAudit>,
}

/// Randomized detection: random generator, random encoder subset, and
/// one-time-use weight noise, all keyed by `cfg.master_seed`.
///
/// Per-encoder scores are reported in zoo registration order so that the
/// degenerate configuration (one generator, all encoders, zero noise)
/// reproduces [`detect_vanilla`] exactly.
pub fn detect_stochastic(
    image: &ImageTensor,
    victim: &VictimHandle,
    zoo: &ModelZoo,
    cfg: &StochasticConfig,
) -> Result<StochasticDetection, DetectError> {
    cfg.validate(zoo)?;
    let master = cfg.master_seed;
    let generator = select_generator(zoo, derive_seed(master, "generator", 0))?;
    let mut subset = select_encoders(zoo, cfg.n_encoders, derive_seed(master, "encoders", 0))?;
    subset.sort_by_key(|e| zoo.encoders.position(e.model_id()));

    let perturbed = subset
        .iter()
        .map(|enc| {
            let position = zoo.encoders.position(enc.model_id()).unwrap_or_default() as u64;
            let spec = OtuSpec {
                scale: cfg.otu_scale,
                seed: derive_seed(master, "otu", position),
            };
            otu_perturb(enc, spec).map_err(at(Stage::Embed))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let caption = victim.caption(image, "").map_err(at(Stage::Caption))?;
    let gen_seed = generation_seed(master);
    let regenerated = generator.generate(&caption, gen_seed).map_err(at(Stage::Generate))?;

    let mut per_encoder = Vec::with_capacity(perturbed.len());
    for enc in &perturbed {
        let z_in = enc.embed(image).map_err(at(Stage::Embed))?;
        let z_gen = enc.embed(&regenerated).map_err(at(Stage::Embed))?;
        per_encoder.push((enc.base_id().to_string(), cosine_similarity(&z_in, &z_gen)?));
    }

    let mut verdict = Verdict::from_breakdown(SimilarityBreakdown::from_scores(per_encoder)?, cfg.threshold);
    verdict.provenance = Some(Provenance {
        generator_id: generator.model_id().to_string(),
        encoder_ids: perturbed.iter().map(|p| p.base_id().to_string()).collect(),
        otu_scale: cfg.otu_scale,
        master_seed: master,
        generation_seed: gen_seed,
        otu_seeds: perturbed.iter().map(|p| p.otu().seed).collect(),
    });
    let audit = perturbed
        .iter()
        .map(|p| EncoderAudit {
            base_id: p.base_id().to_string(),
            instance: p.instance(),
            embed_calls: p.embed_calls(),
            otu_seed: p.otu().seed,
        })
        .collect();
    // Perturbed copies are dropped here.
    Ok(StochasticDetection { verdict, audit })
}

/// Which detector a [`Detector`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorMode {
    /// Fixed generator (first registered unless named) and fixed encoder
    /// list (all registered unless named).
    Vanilla {
        #[serde(default)]
        generator_id: Option<String>,
        #[serde(default)]
        encoder_ids: Option<Vec<String>>,
    },
    Stochastic { n_encoders: usize, otu_scale: f64 },
}

impl DetectorMode {
    pub fn label(&self) -> String {
        match self {
            DetectorMode::Vanilla { .. } => "vanilla".into(),
            DetectorMode::Stochastic { n_encoders, otu_scale } => format!("stochastic(n={n_encoders},otu={otu_scale:e})"),
        }
    }
}

/// A detector bound to a victim and a zoo.
///
/// Each image gets its own master seed, derived from the detector's seed
/// and the image id, so scores do not depend on dataset order.
#[derive(Debug, Clone)]
pub struct Detector {
    pub victim: VictimHandle,
    pub zoo: ModelZoo,
    pub mode: DetectorMode,
    pub master_seed: u64,
}

impl Detector {
    pub fn new(victim: VictimHandle, zoo: ModelZoo, mode: DetectorMode, master_seed: u64) -> Result<Self, DetectError> {
        let detector = Self { victim, zoo, mode, master_seed };
        detector.fixed_models()?;
        if let DetectorMode::Stochastic { n_encoders, otu_scale } = detector.mode {
            StochasticConfig { n_encoders, otu_scale, master_seed, threshold: 0.0 }.validate(&detector.zoo)?;
        }
        Ok(detector)
    }

    pub fn image_seed(&self, image_id: &str) -> u64 {
        derive_seed_str(self.master_seed, "image", image_id)
    }

    fn fixed_models(&self) -> Result<(GeneratorHandle, Vec<EncoderHandle>), DetectError> {
        let invalid = |e: crate::zoo::ZooError| DetectError::InvalidConfig(e.to_string());
        let (generator_id, encoder_ids) = match &self.mode {
            DetectorMode::Vanilla { generator_id, encoder_ids } => (generator_id.clone(), encoder_ids.clone()),
            DetectorMode::Stochastic { .. } => (None, None),
        };
        let generator = match generator_id {
            Some(id) => self.zoo.generators.lookup(&id).map_err(invalid)?.clone(),
            None => self.zoo.generators.list().first().cloned().ok_or(DetectError::EmptyZoo("generator"))?,
        };
        let encoders = match encoder_ids {
            Some(ids) => ids
                .iter()
                .map(|id| self.zoo.encoders.lookup(id).cloned().map_err(invalid))
                .collect::<Result<Vec<_>, _>>()?,
            None => self.zoo.encoders.list().to_vec(),
        };
        if encoders.is_empty() {
            return Err(DetectError::EmptyZoo("encoder"));
        }
        Ok((generator, encoders))
    }

    /// Runs detection on one image at `threshold`.
    pub fn detect(&self, image: &ImageTensor, image_id: &str, threshold: f64) -> Result<Verdict, DetectError> {
        let seed = self.image_seed(image_id);
        match &self.mode {
            DetectorMode::Vanilla { .. } => {
                let (generator, encoders) = self.fixed_models()?;
                let mut verdict = detect_vanilla(image, &self.victim, &generator, &encoders, threshold, generation_seed(seed))?;
                verdict.provenance = Some(Provenance {
                    generator_id: generator.model_id().to_string(),
                    encoder_ids: encoders.iter().map(|e| e.model_id().to_string()).collect(),
                    otu_scale: 0.0,
                    master_seed: seed,
                    generation_seed: generation_seed(seed),
                    otu_seeds: Vec::new(),
                });
                Ok(verdict)
            }
            DetectorMode::Stochastic { n_encoders, otu_scale } => {
                let cfg = StochasticConfig {
                    n_encoders: *n_encoders,
                    otu_scale: *otu_scale,
                    master_seed: seed,
                    threshold,
                };
                Ok(detect_stochastic(image, &self.victim, &self.zoo, &cfg)?.verdict)
            }
        }
    }

    /// Ensemble similarity only.
    pub fn score(&self, image: &ImageTensor, image_id: &str) -> Result<f64, DetectError> {
        Ok(self.detect(image, image_id, 0.0)?.score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::toy::{LinearEncoder, ToyGenerator, ToyGeneratorConfig, ToyVictim, ToyWorld, ToyWorldConfig};

    fn zoo(m: usize, n: usize) -> (ModelZoo, Arc<ToyWorld>) {
        let world = Arc::new(ToyWorld::new(ToyWorldConfig::default()));
        let mut zoo = ModelZoo::new();
        zoo.victims
            .register(VictimHandle::new(Arc::new(ToyVictim::new("v", world.clone(), Default::default()))))
            .unwrap();
        for g in 0..m {
            let cfg = ToyGeneratorConfig { style_seed: g as u64, ..Default::default() };
            zoo.generators
                .register(GeneratorHandle::new(Arc::new(ToyGenerator::new(format!("g{g}"), world.clone(), cfg))))
                .unwrap();
        }
        for e in 0..n {
            let enc = LinearEncoder::random(format!("e{e}"), 16, world.encoder_preprocess(), 100 + e as u64);
            zoo.encoders.register(EncoderHandle::new(Arc::new(enc))).unwrap();
        }
        (zoo, world)
    }

    #[test]
    fn singleton_and_deterministic_generator_draws() {
        let (z, _) = zoo(1, 2);
        assert_eq!(select_generator(&z, 42).unwrap().model_id(), "g0");
        let (z, _) = zoo(4, 2);
        assert_eq!(
            select_generator(&z, 7).unwrap().model_id(),
            select_generator(&z, 7).unwrap().model_id()
        );
        assert!(matches!(select_generator(&ModelZoo::new(), 0), Err(DetectError::EmptyZoo(_))));
    }

    #[test]
    fn encoder_subsets() {
        let (z, _) = zoo(1, 10);
        let all = select_encoders(&z, 10, 3).unwrap();
        let mut ids: Vec<_> = all.iter().map(|e| e.model_id().to_string()).collect();
        ids.sort();
        let mut expected = z.encoder_ids();
        expected.sort();
        assert_eq!(ids, expected);
        let a: Vec<_> = select_encoders(&z, 4, 9).unwrap().iter().map(|e| e.model_id().to_string()).collect();
        let b: Vec<_> = select_encoders(&z, 4, 9).unwrap().iter().map(|e| e.model_id().to_string()).collect();
        assert_eq!(a, b);
        assert_eq!(
            select_encoders(&z, 11, 0).unwrap_err(),
            DetectError::SubsetTooLarge { requested: 11, available: 10 }
        );
    }

    #[test]
    fn zero_scale_copy_is_exact() {
        let (z, world) = zoo(1, 1);
        let enc = &z.encoders.list()[0];
        let p = otu_perturb(enc, OtuSpec { scale: 0.0, seed: 1 }).unwrap();
        assert_eq!(p.parameters(), enc.parameters());
        let img = world.sample(3, 5);
        assert_eq!(p.embed(&img).unwrap(), enc.embed(&img).unwrap());
    }

    #[test]
    fn vanilla_single_encoder_is_its_score() {
        let (z, world) = zoo(1, 3);
        let img = world.sample(0, 1);
        let victim = &z.victims.list()[0];
        let gen = &z.generators.list()[0];
        let one = detect_vanilla(&img, victim, gen, &z.encoders.list()[..1], 0.5, 3).unwrap();
        assert_eq!(one.breakdown.per_encoder.len(), 1);
        assert_eq!(one.score, one.breakdown.per_encoder[0].1);
        assert!(detect_vanilla(&img, victim, gen, &[], 0.5, 3).is_err());
    }

    #[test]
    fn audit_shows_paired_single_use() {
        let (z, world) = zoo(2, 5);
        let img = world.sample(1, 1);
        let cfg = StochasticConfig { n_encoders: 3, otu_scale: 1e-3, master_seed: 4, threshold: 0.5 };
        let d = detect_stochastic(&img, &z.victims.list()[0], &z, &cfg).unwrap();
        assert_eq!(d.audit.len(), 3);
        assert!(d.audit.iter().all(|a| a.embed_calls == 2));
        let prov = d.verdict.provenance.as_ref().unwrap();
        assert_eq!(prov.encoder_ids.len(), 3);
        assert_eq!(prov.master_seed, 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (z, world) = zoo(1, 2);
        let img = world.sample(1, 1);
        let v = &z.victims.list()[0];
        let bad_n = StochasticConfig { n_encoders: 0, otu_scale: 0.0, master_seed: 0, threshold: 0.5 };
        assert!(matches!(detect_stochastic(&img, v, &z, &bad_n), Err(DetectError::InvalidConfig(_))));
        let too_many = StochasticConfig { n_encoders: 3, ..bad_n.clone() };
        assert!(matches!(detect_stochastic(&img, v, &z, &too_many), Err(DetectError::SubsetTooLarge { .. })));
        let neg = StochasticConfig { n_encoders: 1, otu_scale: -1.0, ..bad_n };
        assert!(matches!(detect_stochastic(&img, v, &z, &neg), Err(DetectError::InvalidConfig(_))));
    }
}
