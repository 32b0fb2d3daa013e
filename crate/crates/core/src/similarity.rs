//! Embedding-space similarity and the threshold decision rule.
//!
//! A detection compares the embedding of the input image with the embedding
//! of the image regenerated from the victim's caption. Per-encoder cosine
//! scores are averaged into an ensemble score; inputs scoring strictly below
//! the threshold are flagged adversarial.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("embedding from encoder `{0}` has zero norm")]
    ZeroNormEmbedding(String),
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embeddings come from different encoders: `{left}` vs `{right}`")]
    EncoderMismatch { left: String, right: String },
    #[error("embedding from encoder `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("ensemble has no scores")]
    EmptyEnsemble,
}

/// A feature vector produced by one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub encoder_id: String,
}

impl Embedding {
    pub fn new(values: Vec<f64>, encoder_id: impl Into<String>) -> Result<Self, SimilarityError> {
        let encoder_id = encoder_id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite(encoder_id));
        }
        Ok(Self { values, encoder_id })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, SimilarityError> {
    if a.encoder_id != b.encoder_id {
        return Err(SimilarityError::EncoderMismatch {
            left: a.encoder_id.clone(),
            right: b.encoder_id.clone(),
        });
    }
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Err(SimilarityError::ZeroNormEmbedding(a.encoder_id.clone()));
    }
    Ok(clamp_unit(dot(&a.values, &b.values) / (na * nb)))
}

/// Cosine of two raw vectors together with its gradients with respect to
/// each argument. Used by the gradient-based attacks.
///
/// The value is not clamped so that it stays consistent with the gradient.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS || a.len() != b.len() {
        return None;
    }
    let c = dot(a, b) / (na * nb);
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    Some((c, grad_a, grad_b))
}

/// Arithmetic mean of the per-encoder scores.
pub fn ensemble_similarity(scores: &[f64]) -> Result<f64, SimilarityError> {
    if scores.is_empty() {
        return Err(SimilarityError::EmptyEnsemble);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Binary detection outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Adversarial,
    Clean,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Adversarial => "ADVERSARIAL",
            Label::Clean => "CLEAN",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ADVERSARIAL" => Ok(Label::Adversarial),
            "CLEAN" => Ok(Label::Clean),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Per-encoder scores and their mean for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub per_encoder: Vec<(String, f64)>,
    pub ensemble: f64,
}

impl SimilarityBreakdown {
    pub fn from_scores(per_encoder: Vec<(String, f64)>) -> Result<Self, SimilarityError> {
        let scores: Vec<f64> = per_encoder.iter().map(|(_, s)| *s).collect();
        let ensemble = ensemble_similarity(&scores)?;
        Ok(Self {
            per_encoder,
            ensemble,
        })
    }
}

/// Random draws behind a stochastic detection, recorded for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_id: String,
    pub encoder_ids: Vec<String>,
    pub otu_scale: f64,
    pub master_seed: u64,
    pub generation_seed: u64,
    pub otu_seeds: Vec<u64>,
}

/// A decision together with the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub score: f64,
    pub threshold: f64,
    pub breakdown: SimilarityBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Verdict {
    pub fn from_breakdown(breakdown: SimilarityBreakdown, threshold: f64) -> Self {
        let score = breakdown.ensemble;
        Self {
            label: classify(score, threshold),
            score,
            threshold,
            breakdown,
            provenance: None,
        }
    }
}

/// ADVERSARIAL iff `score < threshold`; equality is CLEAN.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score < threshold {
        Label::Adversarial
    } else {
        Label::Clean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec(), "e").unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let c = cosine_similarity(&emb(&[1.0, 2.0, 3.0]), &emb(&[4.0, 5.0, 6.0])).unwrap();
        assert!((c - 0.974_631_846).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(SimilarityError::ZeroNormEmbedding("e".into()))
        );
        assert!(matches!(
            cosine_similarity(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(SimilarityError::DimensionMismatch { left: 1, right: 2 })
        ));
        let other = Embedding::new(vec![1.0, 0.0], "f").unwrap();
        assert!(matches!(
            cosine_similarity(&emb(&[1.0, 0.0]), &other),
            Err(SimilarityError::EncoderMismatch { .. })
        ));
        assert!(Embedding::new(vec![f64::NAN], "e").is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert!((ensemble_similarity(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(ensemble_similarity(&[0.7]).unwrap(), 0.7);
        let m = ensemble_similarity(&[0.721, 0.624, 0.740]).unwrap();
        assert!((m - 0.695).abs() < 1e-12);
        assert_eq!(ensemble_similarity(&[]), Err(SimilarityError::EmptyEnsemble));
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify(0.50, 0.60), Label::Adversarial);
        assert_eq!(classify(0.70, 0.60), Label::Clean);
        assert_eq!(classify(0.60, 0.60), Label::Clean);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.8, 2.0];
        let b = [1.1, 0.4, -0.5, 0.9];
        let (_, ga, gb) = cosine_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_with_grad(&ap, &b).unwrap().0 - cosine_with_grad(&am, &b).unwrap().0) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine_with_grad(&a, &bp).unwrap().0 - cosine_with_grad(&a, &bm).unwrap().0) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn label_parsing() {
        assert_eq!("clean".parse::<Label>().unwrap(), Label::Clean);
        assert_eq!("ADVERSARIAL".parse::<Label>().unwrap(), Label::Adversarial);
        assert!("other".parse::<Label>().is_err());
        assert_eq!(serde_json::to_string(&Label::Adversarial).unwrap(), "\"ADVERSARIAL\"");
    }
}
