//! Detection of adversarial inputs to captioning models by regeneration
//! consistency.
//!
//! The victim's caption of an input image is rendered back into an image by
//! a text-to-image generator; input and regenerated image are embedded by
//! one or more image encoders and compared by cosine similarity. Low
//! similarity flags the input as adversarial.
//!
//! Modules:
//! * [`similarity`], [`image`]: domain types and detection math,
//! * [`zoo`]: backend contracts, registries, and deterministic toy backends,
//! * [`stochastic`]: random model selection, one-time-use weight noise, and
//!   the detection entry points,
//! * [`calibrate`]: ROC threshold selection,
//! * [`attacks`]: classical and embedding-space attacks,
//! * [`adaptive`]: the adapter-based white-box attack against the detector,
//! * [`harness`]: datasets, evaluation, sweeps, and reports.

pub mod image;
pub mod seed;
pub mod adaptive;
pub mod attacks;
pub mod calibrate;
pub mod harness;
pub mod similarity;
pub mod stochastic;
pub mod zoo;

pub use image::{Caption, ImageTensor};
pub use similarity::{classify, cosine_similarity, ensemble_similarity, Embedding, Label, SimilarityBreakdown, Verdict};
