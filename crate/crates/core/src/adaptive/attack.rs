//! PGD against the task objective plus the detector's similarity, with
//! straight-through gradients for the caption and expectation over the
//! detector's randomness.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adapter::AdapterModel;
use crate::attacks::classic::short_id;
use crate::attacks::{embedding_transfer_attack, project, transfer_loss, transfer_loss_grad, AdvExample, AttackBudget, AttackError};
use crate::image::ImageTensor;
use crate::seed::derive_seed;
use crate::similarity::cosine_with_grad;
use crate::stochastic::{otu_perturb, OtuSpec};
use crate::zoo::{EncoderHandle, GeneratorHandle, VictimHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub budget: AttackBudget,
    /// Weight of the detection term.
    pub lambda: f64,
    /// Draws of (generator, generation noise, weight noise) per step.
    pub eot_samples: usize,
    /// Weight-noise scale the attacker simulates on its known encoders.
    pub otu_scale_assumed: f64,
    pub seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            budget: AttackBudget::eight_bit_default(),
            lambda: 1.0,
            eot_samples: 4,
            otu_scale_assumed: 0.0,
            seed: 0,
        }
    }
}

/// The models available to the attacker.
#[derive(Debug, Clone)]
pub struct Attacker {
    pub victim: VictimHandle,
    pub generators: Vec<GeneratorHandle>,
    /// Encoders the attacker believes the detector may use.
    pub encoders: Vec<EncoderHandle>,
    /// Encoders standing in for the victim in the task loss.
    pub task_surrogates: Vec<EncoderHandle>,
    pub adapter: Arc<AdapterModel>,
}

impl Attacker {
    fn check(&self, cfg: &AdaptiveConfig) -> Result<(), AttackError> {
        cfg.budget.validate()?;
        if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
            return Err(AttackError::InvalidBudget(format!("lambda must be >= 0, got {}", cfg.lambda)));
        }
        if self.task_surrogates.is_empty() {
            return Err(AttackError::NoSurrogate);
        }
        if cfg.lambda > 0.0 {
            if self.encoders.is_empty() || self.generators.is_empty() || cfg.eot_samples == 0 {
                return Err(AttackError::NoSurrogate);
            }
            self.victim.differentiable().map_err(AttackError::from_backend)?;
            for g in &self.generators {
                g.conditioned().map_err(AttackError::from_backend)?;
            }
            for e in &self.encoders {
                e.differentiable().map_err(AttackError::from_backend)?;
            }
        }
        Ok(())
    }
}

/// Monte-Carlo estimate of the detection loss
/// `1 - mean_j cos(E_j(x_adv), E_j(G(caption(x_adv))))` and its gradient,
/// averaged over `eot_samples` draws keyed by `(cfg.seed, step)`.
///
/// The forward pass uses the victim's real caption and the generator's
/// real output. The backward pass treats the generated image as the soft
/// rendering of the adapter's conditioning, so gradient reaches `x_adv`
/// both directly and through the victim's features.
pub fn detection_loss_estimate(
    attacker: &Attacker,
    cfg: &AdaptiveConfig,
    x_adv: &ImageTensor,
    step: u64,
) -> Result<(f64, Vec<f64>), AttackError> {
    let be = AttackError::from_backend;
    let dv = attacker.victim.differentiable().map_err(be)?;
    let caption = attacker.victim.caption(x_adv, "").map_err(be)?;
    let features = dv.features(x_adv);
    let conditioning = attacker.adapter.forward(&features);
    let k = cfg.eot_samples as u64;
    let w = 1.0 / (cfg.eot_samples * attacker.encoders.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; x_adv.len()];
    let mut grad_cond = vec![0.0; conditioning.len()];
    for e in 0..k {
        let s = derive_seed(cfg.seed, "eot", step * k + e);
        let generator = &attacker.generators[(derive_seed(s, "generator", 0) % attacker.generators.len() as u64) as usize];
        let x_gen = generator.generate(&caption, derive_seed(s, "eta", 0)).map_err(be)?;
        let mut grad_gen = vec![0.0; x_gen.len()];
        for (j, enc) in attacker.encoders.iter().enumerate() {
            let spec = OtuSpec {
                scale: cfg.otu_scale_assumed,
                seed: derive_seed(s, "gamma", j as u64),
            };
            let noisy = otu_perturb(enc, spec).map_err(be)?;
            let noisy = noisy.encoder();
            let de = noisy.differentiable().ok_or_else(|| AttackError::NonDifferentiableBackend(enc.model_id().to_string()))?;
            let a = noisy.embed(x_adv).map_err(be)?;
            let b = noisy.embed(&x_gen).map_err(be)?;
            let Some((c, ga, gb)) = cosine_with_grad(&a, &b) else {
                loss += w;
                continue;
            };
            loss += w * (1.0 - c);
            let ga: Vec<f64> = ga.iter().map(|v| -w * v).collect();
            let gb: Vec<f64> = gb.iter().map(|v| -w * v).collect();
            for (acc, v) in grad.iter_mut().zip(de.embed_vjp(x_adv, &ga)) {
                *acc += v;
            }
            for (acc, v) in grad_gen.iter_mut().zip(de.embed_vjp(&x_gen, &gb)) {
                *acc += v;
            }
        }
        let cg = generator.conditioned().map_err(be)?;
        for (acc, v) in grad_cond.iter_mut().zip(cg.render_vjp(&conditioning, &grad_gen)) {
            *acc += v;
        }
    }
    let grad_features = attacker.adapter.input_vjp(&features, &grad_cond);
    for (acc, v) in grad.iter_mut().zip(dv.features_vjp(x_adv, &grad_features)) {
        *acc += v;
    }
    Ok((loss, grad))
}

/// Pushes `x` toward `x_ref` in the task surrogates' embedding space while
/// keeping the detector's similarity high. With `lambda == 0` this is
/// exactly [`embedding_transfer_attack`]. Succeeds when the victim
/// captions the result like `x_ref`.
pub fn adaptive_attack(
    attacker: &Attacker,
    cfg: &AdaptiveConfig,
    x: &ImageTensor,
    x_ref: &ImageTensor,
) -> Result<AdvExample, AttackError> {
    attacker.check(cfg)?;
    let target = attacker.victim.caption(x_ref, "").map_err(AttackError::from_backend)?;
    let hit = |img: &ImageTensor| -> Result<bool, AttackError> {
        Ok(attacker.victim.caption(img, "").map_err(AttackError::from_backend)?.text == target.text)
    };
    let budget = cfg.budget;
    if cfg.lambda == 0.0 {
        let mut adv = embedding_transfer_attack(&attacker.task_surrogates, x, x_ref, budget)?;
        adv.attack_name = "Adaptive".into();
        adv.success = hit(&adv.x_adv)?;
        return Ok(adv);
    }
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(budget.steps);
    for t in 0..budget.steps {
        let (l_det, g_det) = detection_loss_estimate(attacker, cfg, &cur, t as u64)?;
        let l_task = transfer_loss(&attacker.task_surrogates, &cur, x_ref)?;
        trace.push(l_task + cfg.lambda * l_det);
        let g_task = transfer_loss_grad(&attacker.task_surrogates, &cur, x_ref)?;
        let g: Vec<f64> = g_task.iter().zip(&g_det).map(|(a, b)| a + cfg.lambda * b).collect();
        let dir = crate::attacks::step_direction(&g, budget.norm);
        let moved: Vec<f64> = cur.data().iter().zip(&dir).map(|(v, d)| v - budget.step_size * d).collect();
        cur = x.with_data_clamped(project(x.data(), &moved, budget.epsilon, budget.norm)).expect("shape preserved");
        let delta: Vec<f64> = cur.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let norm = budget.norm_of(&delta);
        if norm > budget.epsilon + 1e-9 {
            return Err(AttackError::BudgetViolated {
                norm,
                epsilon: budget.epsilon,
            });
        }
    }
    let success = hit(&cur)?;
    AdvExample::checked(&short_id(x), x, cur, "Adaptive", budget, success, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::{adapter_spec_for, build_feature_pairs, toy_adapter_images, train_adapter, TrainConfig};
    use crate::zoo::toy::{ToyVictim, ToyZooConfig};
    use std::sync::OnceLock;

    struct Fixture {
        world: Arc<crate::zoo::toy::ToyWorld>,
        attacker: Attacker,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let (zoo, world) = ToyZooConfig::default().build();
            let victim = zoo.victims.list()[0].clone();
            let generator = zoo.generators.list()[0].clone();
            let images = toy_adapter_images(&world, 256, 3);
            let pairs = build_feature_pairs(&images, &victim, &generator).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                ..Default::default()
            };
            let adapter = train_adapter(&pairs, adapter_spec_for(&victim, &generator).unwrap(), &cfg).unwrap();
            let toy = ToyVictim::new("tower", world.clone(), Default::default());
            let tower = EncoderHandle::new(Arc::new(toy.vision_encoder()));
            let attacker = Attacker {
                victim,
                generators: zoo.generators.list().to_vec(),
                encoders: zoo.encoders.list()[..3].to_vec(),
                task_surrogates: vec![tower],
                adapter: Arc::new(adapter),
            };
            Fixture { world, attacker }
        })
    }

    #[test]
    fn lambda_zero_matches_transfer_attack() {
        let f = fixture();
        let x = f.world.sample(0, 1);
        let x_ref = f.world.sample(3, 2);
        let cfg = AdaptiveConfig {
            lambda: 0.0,
            budget: AttackBudget::linf(8.0 / 255.0, 10, 1.0 / 255.0),
            ..Default::default()
        };
        let adv = adaptive_attack(&f.attacker, &cfg, &x, &x_ref).unwrap();
        let plain = embedding_transfer_attack(&f.attacker.task_surrogates, &x, &x_ref, cfg.budget).unwrap();
        assert_eq!(adv.x_adv.data(), plain.x_adv.data());
    }

    #[test]
    fn zero_steps_returns_input_and_budget_holds() {
        let f = fixture();
        let x = f.world.sample(1, 1);
        let x_ref = f.world.sample(5, 2);
        let cfg = AdaptiveConfig {
            budget: AttackBudget::linf(8.0 / 255.0, 0, 1.0 / 255.0),
            ..Default::default()
        };
        assert_eq!(adaptive_attack(&f.attacker, &cfg, &x, &x_ref).unwrap().x_adv, x);
        let cfg = AdaptiveConfig {
            budget: AttackBudget::linf(4.0 / 255.0, 8, 2.0 / 255.0),
            eot_samples: 1,
            otu_scale_assumed: 1e-3,
            ..Default::default()
        };
        let adv = adaptive_attack(&f.attacker, &cfg, &x, &x_ref).unwrap();
        assert!(adv.linf <= 4.0 / 255.0 + 1e-9);
        assert_eq!(adv.loss_trace.len(), 8);
    }

    #[test]
    fn eot_spread_shrinks_like_inverse_root() {
        let f = fixture();
        let x = f.world.sample(2, 4);
        let trials = 40u64;
        let spread = |k: usize| {
            let cfg = AdaptiveConfig {
                eot_samples: k,
                seed: 11,
                ..Default::default()
            };
            let v: Vec<f64> =
                (0..trials).map(|t| detection_loss_estimate(&f.attacker, &cfg, &x, t).unwrap().0).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let (s1, s4, s16) = (spread(1), spread(4), spread(16));
        assert!(s1 > 0.0);
        // Ratios of sample deviations from 40 draws scatter by roughly ±25%.
        assert!((1.4..3.0).contains(&(s1 / s4)), "{s1} {s4}");
        assert!((2.6..6.0).contains(&(s1 / s16)), "{s1} {s16}");
    }
}
