//! Attacks in encoder embedding space: pull an image toward a reference
//! image's embedding, or push its embeddings away from where they started.

use super::classic::{random_in_ball, short_id};
use super::{project, step_direction, tensor_like, AdvExample, AttackBudget, AttackError};
use crate::image::ImageTensor;
use crate::similarity::cosine_with_grad;
use crate::zoo::EncoderHandle;

fn embed_raw(enc: &EncoderHandle, x: &ImageTensor) -> Result<Vec<f64>, AttackError> {
    Ok(enc.embed(x).map_err(AttackError::from_backend)?.values)
}

fn vjp(enc: &EncoderHandle, x: &ImageTensor, g: &[f64]) -> Result<Vec<f64>, AttackError> {
    Ok(enc.differentiable().map_err(AttackError::from_backend)?.embed_vjp(x, g))
}

fn check_surrogates(surrogates: &[EncoderHandle]) -> Result<(), AttackError> {
    if surrogates.is_empty() {
        return Err(AttackError::NoSurrogate);
    }
    for s in surrogates {
        s.differentiable().map_err(AttackError::from_backend)?;
    }
    Ok(())
}

/// Mean over surrogates of `1 - cos(E(x), E(x_ref))`.
pub fn transfer_loss(surrogates: &[EncoderHandle], x: &ImageTensor, x_ref: &ImageTensor) -> Result<f64, AttackError> {
    let mut total = 0.0;
    for s in surrogates {
        let a = embed_raw(s, x)?;
        let b = embed_raw(s, x_ref)?;
        total += 1.0 - cosine_with_grad(&a, &b).map_or(0.0, |c| c.0);
    }
    Ok(total / surrogates.len() as f64)
}

pub fn transfer_loss_grad(
    surrogates: &[EncoderHandle],
    x: &ImageTensor,
    x_ref: &ImageTensor,
) -> Result<Vec<f64>, AttackError> {
    let mut grad = vec![0.0; x.len()];
    let w = 1.0 / surrogates.len() as f64;
    for s in surrogates {
        let a = embed_raw(s, x)?;
        let b = embed_raw(s, x_ref)?;
        if let Some((_, ga, _)) = cosine_with_grad(&a, &b) {
            let neg: Vec<f64> = ga.iter().map(|v| -w * v).collect();
            for (acc, v) in grad.iter_mut().zip(vjp(s, x, &neg)?) {
                *acc += v;
            }
        }
    }
    Ok(grad)
}

/// PGD descent on [`transfer_loss`], starting at `x`. Succeeds when the
/// final loss is below the starting loss.
pub fn embedding_transfer_attack(
    surrogates: &[EncoderHandle],
    x: &ImageTensor,
    x_ref: &ImageTensor,
    budget: AttackBudget,
) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    check_surrogates(surrogates)?;
    let start = transfer_loss(surrogates, x, x_ref)?;
    let mut cur = x.clone();
    let mut loss = start;
    let mut trace = Vec::with_capacity(budget.steps);
    for _ in 0..budget.steps {
        // At exact alignment the gradient is rounding noise; its sign
        // would still move every pixel.
        if loss <= 1e-12 {
            break;
        }
        let g = transfer_loss_grad(surrogates, &cur, x_ref)?;
        let dir = step_direction(&g, budget.norm);
        let moved: Vec<f64> = cur.data().iter().zip(&dir).map(|(v, d)| v - budget.step_size * d).collect();
        cur = tensor_like(x, project(x.data(), &moved, budget.epsilon, budget.norm));
        loss = transfer_loss(surrogates, &cur, x_ref)?;
        trace.push(loss);
    }
    AdvExample::checked(&short_id(x), x, cur, "EmbeddingTransfer", budget, loss < start, trace)
}

/// `Σ_i ‖E_i(x_adv) - E_i(x)‖²`.
pub fn untargeted_objective(surrogates: &[EncoderHandle], x: &ImageTensor, x_adv: &ImageTensor) -> Result<f64, AttackError> {
    let mut total = 0.0;
    for s in surrogates {
        let a = embed_raw(s, x_adv)?;
        let b = embed_raw(s, x)?;
        total += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total)
}

/// Gradient of [`untargeted_objective`] with respect to `x_adv`.
pub fn untargeted_objective_grad(
    surrogates: &[EncoderHandle],
    x: &ImageTensor,
    x_adv: &ImageTensor,
) -> Result<Vec<f64>, AttackError> {
    let mut grad = vec![0.0; x.len()];
    for s in surrogates {
        let a = embed_raw(s, x_adv)?;
        let b = embed_raw(s, x)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 2.0 * (p - q)).collect();
        for (acc, v) in grad.iter_mut().zip(vjp(s, x_adv, &diff)?) {
            *acc += v;
        }
    }
    Ok(grad)
}

const LINE_SEARCH_HALVINGS: usize = 8;

/// PGD ascent on [`untargeted_objective`]. The objective has zero gradient
/// at `x`, so the search starts from a random point in the ε-ball keyed by
/// `seed`. A step that would lower the objective is retried at half the
/// size, and skipped if every retry fails, so the trace never decreases.
pub fn untargeted_embedding_attack(
    surrogates: &[EncoderHandle],
    x: &ImageTensor,
    budget: AttackBudget,
    seed: u64,
) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    check_surrogates(surrogates)?;
    let noise = random_in_ball(x.len(), budget.epsilon, budget.norm, seed);
    let start: Vec<f64> = x.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
    let mut cur = tensor_like(x, project(x.data(), &start, budget.epsilon, budget.norm));
    let mut value = untargeted_objective(surrogates, x, &cur)?;
    let mut trace = vec![value];
    for _ in 0..budget.steps {
        let dir = step_direction(&untargeted_objective_grad(surrogates, x, &cur)?, budget.norm);
        let mut alpha = budget.step_size;
        let mut accepted = false;
        for _ in 0..=LINE_SEARCH_HALVINGS {
            let moved: Vec<f64> = cur.data().iter().zip(&dir).map(|(v, d)| v + alpha * d).collect();
            let cand = tensor_like(x, project(x.data(), &moved, budget.epsilon, budget.norm));
            let v = untargeted_objective(surrogates, x, &cand)?;
            if v >= value {
                cur = cand;
                value = v;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        trace.push(value);
        if !accepted {
            break;
        }
    }
    AdvExample::checked(&short_id(x), x, cur, "EmbeddingUntargeted", budget, value > 0.0, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::zoo::toy::{LinearEncoder, ToyWorld, ToyWorldConfig};
    use rand::Rng;
    use std::sync::Arc;

    fn setup() -> (Vec<EncoderHandle>, ToyWorld) {
        let world = ToyWorld::new(ToyWorldConfig::default());
        let encs = (0..2)
            .map(|i| EncoderHandle::new(Arc::new(LinearEncoder::random(format!("e{i}"), 16, world.encoder_preprocess(), 40 + i))))
            .collect();
        (encs, world)
    }

    fn check_fd(f: impl Fn(&ImageTensor) -> f64, g: &[f64], x: &ImageTensor) {
        let mut r = rng(8);
        for _ in 0..10 {
            let i = r.random_range(0..x.len());
            let h = 1e-5;
            let mut p = x.data().to_vec();
            let mut m = x.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&tensor_like(x, p)) - f(&tensor_like(x, m))) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / scale < 1e-4, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (encs, w) = setup();
        let x = w.sample(0, 1);
        let x_ref = w.sample(4, 2);
        let g = transfer_loss_grad(&encs, &x, &x_ref).unwrap();
        check_fd(|img| transfer_loss(&encs, img, &x_ref).unwrap(), &g, &x);
        let xa = w.sample(0, 3);
        let g = untargeted_objective_grad(&encs, &x, &xa).unwrap();
        check_fd(|img| untargeted_objective(&encs, &x, img).unwrap(), &g, &xa);
    }

    #[test]
    fn aligned_reference_is_a_fixed_point() {
        let (encs, w) = setup();
        let x = w.sample(1, 1);
        let adv = embedding_transfer_attack(&encs[..1], &x, &x, AttackBudget::eight_bit_default()).unwrap();
        assert!(adv.linf < 1e-12);
    }

    #[test]
    fn transfer_attack_increases_alignment() {
        let (encs, w) = setup();
        let x = w.sample(1, 1);
        let x_ref = w.sample(6, 1);
        let before = transfer_loss(&encs[..1], &x, &x_ref).unwrap();
        let adv = embedding_transfer_attack(&encs[..1], &x, &x_ref, AttackBudget::linf(8.0 / 255.0, 30, 1.0 / 255.0)).unwrap();
        assert!(adv.success);
        assert!(transfer_loss(&encs[..1], &adv.x_adv, &x_ref).unwrap() < before);
    }

    #[test]
    fn untargeted_zero_budget_and_monotone_trace() {
        let (encs, w) = setup();
        let x = w.sample(2, 1);
        let adv = untargeted_embedding_attack(&encs, &x, AttackBudget::linf(0.0, 5, 0.01), 1).unwrap();
        assert_eq!(adv.x_adv, x);
        assert_eq!(untargeted_objective(&encs, &x, &adv.x_adv).unwrap(), 0.0);
        let adv = untargeted_embedding_attack(&encs, &x, AttackBudget::linf(8.0 / 255.0, 20, 1.0 / 255.0), 1).unwrap();
        assert!(adv.loss_trace.windows(2).all(|p| p[1] >= p[0]));
        assert!(adv.success);
        let single = untargeted_objective(&encs[..1], &x, &adv.x_adv).unwrap();
        let e = &encs[0];
        let direct: f64 = e
            .embed(&adv.x_adv)
            .unwrap()
            .values
            .iter()
            .zip(&e.embed(&x).unwrap().values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_eq!(single, direct);
    }
}
