//! Adversarial example generation against differentiable backends.
//!
//! [`classic`] holds the classification attacks (FGSM, BIM, PGD, DeepFool,
//! C&W) and [`embedding`] the attacks that move an image in an encoder's
//! embedding space. Every attack returns an [`AdvExample`] whose
//! perturbation satisfies the budget and the `[0, 1]` box.

pub mod classic;
pub mod embedding;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;
use crate::zoo::BackendError;

pub use classic::{bim, classification_loss, classification_loss_grad, cw, deepfool, fgsm, pgd};
pub use embedding::{
    embedding_transfer_attack, transfer_loss, transfer_loss_grad, untargeted_embedding_attack, untargeted_objective,
    untargeted_objective_grad,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub norm: Norm,
}

impl AttackBudget {
    pub fn linf(epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            epsilon,
            steps,
            step_size,
            norm: Norm::Linf,
        }
    }

    pub fn l2(epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            epsilon,
            steps,
            step_size,
            norm: Norm::L2,
        }
    }

    /// ε = 8/255, 100 steps of 1/255 in ℓ∞.
    pub fn eight_bit_default() -> Self {
        Self::linf(8.0 / 255.0, 100, 1.0 / 255.0)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::InvalidBudget(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::InvalidBudget(format!("step_size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }

    pub fn norm_of(&self, delta: &[f64]) -> f64 {
        match self.norm {
            Norm::Linf => delta.iter().fold(0.0, |m, d| m.max(d.abs())),
            Norm::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("backend `{0}` does not expose gradients")]
    NonDifferentiableBackend(String),
    #[error("no decision boundary found within the step cap")]
    NoBoundaryFound { last: Box<AdvExample> },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("perturbation norm {norm} exceeds epsilon {epsilon}")]
    BudgetViolated { norm: f64, epsilon: f64 },
    #[error("attack needs at least one surrogate encoder")]
    NoSurrogate,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl AttackError {
    pub(crate) fn from_backend(e: BackendError) -> Self {
        match e {
            BackendError::NonDifferentiable(id) => AttackError::NonDifferentiableBackend(id),
            other => AttackError::Backend(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvExample {
    pub original_id: String,
    pub x_adv: ImageTensor,
    pub attack_name: String,
    pub budget: AttackBudget,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    /// Attack objective after each iteration.
    pub loss_trace: Vec<f64>,
}

impl AdvExample {
    /// Builds the record and checks the budget and the box. Tolerance
    /// covers rounding in `x ± ε`.
    pub(crate) fn checked(
        original_id: &str,
        x: &ImageTensor,
        x_adv: ImageTensor,
        attack_name: &str,
        budget: AttackBudget,
        success: bool,
        loss_trace: Vec<f64>,
    ) -> Result<Self, AttackError> {
        let delta: Vec<f64> = x_adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let norm = budget.norm_of(&delta);
        if norm > budget.epsilon + 1e-9 || x_adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AttackError::BudgetViolated {
                norm,
                epsilon: budget.epsilon,
            });
        }
        Ok(Self {
            original_id: original_id.to_string(),
            linf: x_adv.linf_distance(x),
            l2: x_adv.l2_distance(x),
            x_adv,
            attack_name: attack_name.to_string(),
            budget,
            success,
            loss_trace,
        })
    }

    pub fn record(&self) -> AdvRecord {
        AdvRecord {
            original_id: self.original_id.clone(),
            attack_name: self.attack_name.clone(),
            budget: self.budget,
            success: self.success,
            linf: self.linf,
            l2: self.l2,
            final_loss: self.loss_trace.last().copied(),
        }
    }
}

/// Serializable summary of an [`AdvExample`] without the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvRecord {
    pub original_id: String,
    pub attack_name: String,
    pub budget: AttackBudget,
    pub success: bool,
    pub linf: f64,
    pub l2: f64,
    pub final_loss: Option<f64>,
}

/// Elementwise sign with `sign(0) == 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ascent direction for one step: the sign in ℓ∞, the unit gradient in ℓ2.
pub(crate) fn step_direction(grad: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => grad.iter().map(|&g| sign(g)).collect(),
        Norm::L2 => {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; grad.len()]
            } else {
                grad.iter().map(|g| g / n).collect()
            }
        }
    }
}

/// Projects `x` onto the ε-ball around `x0` and then onto `[0, 1]`.
pub fn project(x0: &[f64], x: &[f64], epsilon: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => x
            .iter()
            .zip(x0)
            .map(|(&v, &o)| v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0))
            .collect(),
        Norm::L2 => {
            let n = x.iter().zip(x0).map(|(v, o)| (v - o) * (v - o)).sum::<f64>().sqrt();
            let scale = if n > epsilon { epsilon / n } else { 1.0 };
            x.iter()
                .zip(x0)
                .map(|(&v, &o)| (o + (v - o) * scale).clamp(0.0, 1.0))
                .collect()
        }
    }
}

pub(crate) fn tensor_like(x: &ImageTensor, data: Vec<f64>) -> ImageTensor {
    x.with_data_clamped(data).expect("shape preserved")
}
