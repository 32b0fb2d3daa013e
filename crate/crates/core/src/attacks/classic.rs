//! Classification attacks on a differentiable victim.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{project, step_direction, tensor_like, AdvExample, AttackBudget, AttackError, Norm};
use crate::image::ImageTensor;
use crate::seed::rng;
use crate::zoo::{argmax, DifferentiableVictim, VictimHandle};

/// DeepFool iteration cap.
pub const DEEPFOOL_MAX_STEPS: usize = 50;
/// DeepFool overshoot factor applied to the accumulated step.
pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;

fn differentiable(victim: &VictimHandle) -> Result<&dyn DifferentiableVictim, AttackError> {
    victim.differentiable().map_err(AttackError::from_backend)
}

pub(crate) fn short_id(x: &ImageTensor) -> String {
    x.digest()[..16].to_string()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of the victim's logits against class `y`.
pub fn classification_loss(victim: &dyn DifferentiableVictim, x: &ImageTensor, y: usize) -> f64 {
    let z = victim.logits(x);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
}

pub fn classification_loss_grad(victim: &dyn DifferentiableVictim, x: &ImageTensor, y: usize) -> Vec<f64> {
    let mut g = softmax(&victim.logits(x));
    g[y] -= 1.0;
    victim.logits_vjp(x, &g)
}

/// Single step of size ε along the loss gradient's sign (ℓ∞) or direction (ℓ2).
pub fn fgsm(victim: &VictimHandle, x: &ImageTensor, y: usize, budget: AttackBudget) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    let dv = differentiable(victim)?;
    let dir = step_direction(&classification_loss_grad(dv, x, y), budget.norm);
    let moved: Vec<f64> = x.data().iter().zip(&dir).map(|(v, d)| v + budget.epsilon * d).collect();
    let adv = tensor_like(x, project(x.data(), &moved, budget.epsilon, budget.norm));
    let success = dv.predict(&adv) != y;
    let trace = vec![classification_loss(dv, &adv, y)];
    AdvExample::checked(&short_id(x), x, adv, "FGSM", budget, success, trace)
}

fn iterate(
    dv: &dyn DifferentiableVictim,
    x: &ImageTensor,
    start: Vec<f64>,
    y: usize,
    budget: AttackBudget,
    name: &str,
) -> Result<AdvExample, AttackError> {
    let mut cur = tensor_like(x, start);
    let mut trace = Vec::with_capacity(budget.steps);
    for _ in 0..budget.steps {
        let dir = step_direction(&classification_loss_grad(dv, &cur, y), budget.norm);
        let moved: Vec<f64> = cur.data().iter().zip(&dir).map(|(v, d)| v + budget.step_size * d).collect();
        cur = tensor_like(x, project(x.data(), &moved, budget.epsilon, budget.norm));
        trace.push(classification_loss(dv, &cur, y));
    }
    let success = dv.predict(&cur) != y;
    AdvExample::checked(&short_id(x), x, cur, name, budget, success, trace)
}

/// Iterated FGSM with step `budget.step_size`, projected after every step.
pub fn bim(victim: &VictimHandle, x: &ImageTensor, y: usize, budget: AttackBudget) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    let dv = differentiable(victim)?;
    iterate(dv, x, x.data().to_vec(), y, budget, "BIM")
}

/// BIM from an optional uniformly random start in the ε-ball, keyed by
/// `random_start`.
pub fn pgd(
    victim: &VictimHandle,
    x: &ImageTensor,
    y: usize,
    budget: AttackBudget,
    random_start: Option<u64>,
) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    let dv = differentiable(victim)?;
    let start = match random_start {
        None => x.data().to_vec(),
        Some(seed) => {
            let noise = random_in_ball(x.len(), budget.epsilon, budget.norm, seed);
            let moved: Vec<f64> = x.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
            project(x.data(), &moved, budget.epsilon, budget.norm)
        }
    };
    iterate(dv, x, start, y, budget, "PGD")
}

pub(crate) fn random_in_ball(n: usize, epsilon: f64, norm: Norm, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    match norm {
        Norm::Linf => (0..n).map(|_| r.random_range(-1.0..=1.0) * epsilon).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            let len = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let radius = epsilon * r.random::<f64>().powf(1.0 / n as f64);
            g.into_iter().map(|v| v * radius / len).collect()
        }
    }
}

/// Minimal ℓ2 boundary crossing by repeated linearization. Stops at the
/// first label change away from `y`; a result larger than the budget is
/// projected back and may then fail.
pub fn deepfool(victim: &VictimHandle, x: &ImageTensor, y: usize, budget: AttackBudget) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    let dv = differentiable(victim)?;
    let id = short_id(x);
    if dv.predict(x) != y {
        return AdvExample::checked(&id, x, x.clone(), "DeepFool", budget, true, Vec::new());
    }
    let n_classes = dv.logits(x).len();
    let mut total = vec![0.0; x.len()];
    let mut cur = x.clone();
    let mut trace = Vec::new();
    let mut flipped = false;
    for _ in 0..DEEPFOOL_MAX_STEPS {
        let z = dv.logits(&cur);
        if argmax(&z) != y {
            flipped = true;
            break;
        }
        let grads: Vec<Vec<f64>> = (0..n_classes).map(|k| dv.logits_vjp(&cur, &one_hot(n_classes, k))).collect();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for k in (0..n_classes).filter(|&k| k != y) {
            let w: Vec<f64> = grads[k].iter().zip(&grads[y]).map(|(a, b)| a - b).collect();
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wn == 0.0 {
                continue;
            }
            let f = z[k] - z[y];
            let dist = f.abs() / wn;
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, f, w));
            }
        }
        let Some((_, f, w)) = best else { break };
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let coeff = (f.abs() + 1e-4) / wn2;
        for (t, wi) in total.iter_mut().zip(&w) {
            *t += coeff * wi;
        }
        let moved: Vec<f64> = x
            .data()
            .iter()
            .zip(&total)
            .map(|(v, t)| (v + (1.0 + DEEPFOOL_OVERSHOOT) * t).clamp(0.0, 1.0))
            .collect();
        cur = tensor_like(x, moved);
        trace.push(cur.l2_distance(x));
    }
    flipped = flipped || dv.predict(&cur) != y;
    let within = tensor_like(x, project(x.data(), cur.data(), budget.epsilon, budget.norm));
    let success = flipped && dv.predict(&within) != y;
    let example = AdvExample::checked(&id, x, within, "DeepFool", budget, success, trace)?;
    if !flipped {
        return Err(AttackError::NoBoundaryFound { last: Box::new(example) });
    }
    Ok(example)
}

/// `‖x' - x‖²₂ + c · max(Z_y - max_{i≠y} Z_i, 0)` at `x' = (tanh w + 1) / 2`,
/// and its gradient with respect to `w`.
pub fn cw_objective(dv: &dyn DifferentiableVictim, x: &ImageTensor, w: &[f64], y: usize, c: f64) -> (f64, Vec<f64>) {
    let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let xa = tensor_like(x, t.iter().map(|v| 0.5 * (v + 1.0)).collect());
    let delta: Vec<f64> = xa.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let z = dv.logits(&xa);
    let (j, zj) = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .fold((usize::MAX, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let margin = z[y] - zj;
    let mut grad_x: Vec<f64> = delta.iter().map(|d| 2.0 * d).collect();
    if margin > 0.0 && c != 0.0 {
        let mut gz = vec![0.0; z.len()];
        gz[y] = c;
        gz[j] = -c;
        for (g, m) in grad_x.iter_mut().zip(dv.logits_vjp(&xa, &gz)) {
            *g += m;
        }
    }
    let loss = delta.iter().map(|d| d * d).sum::<f64>() + c * margin.max(0.0);
    let grad_w = grad_x.iter().zip(&t).map(|(g, tv)| g * 0.5 * (1.0 - tv * tv)).collect();
    (loss, grad_w)
}

/// Carlini–Wagner ℓ2 attack with margin loss (κ = 0) in tanh space,
/// optimized by Adam for `budget.steps` steps with learning rate
/// `budget.step_size`. Returns the smallest misclassifying iterate within
/// the budget, otherwise the projected last iterate with `success = false`.
pub fn cw(victim: &VictimHandle, x: &ImageTensor, y: usize, budget: AttackBudget, c: f64) -> Result<AdvExample, AttackError> {
    budget.validate()?;
    if !(c >= 0.0 && c.is_finite()) {
        return Err(AttackError::InvalidBudget(format!("c must be >= 0, got {c}")));
    }
    let dv = differentiable(victim)?;
    let eps_box = 1e-6;
    let mut w: Vec<f64> = x.data().iter().map(|v| (2.0 * v.clamp(eps_box, 1.0 - eps_box) - 1.0).atanh()).collect();
    let (b1, b2, adam_eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut best: Option<(f64, ImageTensor)> = None;
    let mut trace = Vec::with_capacity(budget.steps);
    let to_image = |w: &[f64]| tensor_like(x, w.iter().map(|v| 0.5 * (v.tanh() + 1.0)).collect());
    for step in 1..=budget.steps {
        let (loss, g) = cw_objective(dv, x, &w, y, c);
        trace.push(loss);
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(step as i32));
            let vh = v[i] / (1.0 - b2.powi(step as i32));
            w[i] -= budget.step_size * mh / (vh.sqrt() + adam_eps);
        }
        let xa = to_image(&w);
        if dv.predict(&xa) != y {
            let delta: Vec<f64> = xa.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
            let l2 = xa.l2_distance(x);
            if budget.norm_of(&delta) <= budget.epsilon && best.as_ref().is_none_or(|b| l2 < b.0) {
                best = Some((l2, xa));
            }
        }
    }
    let (adv, success) = match best {
        Some((_, xa)) => (xa, true),
        None => {
            let last = to_image(&w);
            let within = tensor_like(x, project(x.data(), last.data(), budget.epsilon, budget.norm));
            let ok = dv.predict(&within) != y;
            (within, ok)
        }
    };
    AdvExample::checked(&short_id(x), x, adv, "CW", budget, success, trace)
}
