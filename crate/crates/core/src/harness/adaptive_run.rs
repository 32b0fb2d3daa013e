//! The adaptive-attack experiment: train the adapter, attack image-target
//! pairs per seed, and measure every defense cell on the results.

use std::sync::Arc;

use rayon::prelude::*;

use super::config::{AdapterRunConfig, AdaptiveRunConfig};
use super::{Environment, HarnessError};
use crate::adaptive::{
    adaptive_attack, adapter_spec_for, attacker_encoders, build_feature_pairs, evaluate_adaptive_robustness,
    toy_adapter_images, train_adapter, AdapterModel, AdaptiveConfig, AdaptiveTable, Attacker, SeedBatch,
};
use crate::attacks::embedding_transfer_attack;
use crate::calibrate::LabeledImage;
use crate::seed::derive_seed;
use crate::similarity::Label;

/// Trains an adapter from the victim's features to the first generator's
/// conditioning on toy images.
pub fn train_toy_adapter(env: &Environment, cfg: &AdapterRunConfig) -> Result<AdapterModel, HarnessError> {
    let victim = env.victim();
    let generator = env
        .zoo
        .generators
        .list()
        .first()
        .ok_or_else(|| HarnessError::InvalidConfig("zoo has no generator".into()))?;
    let images = toy_adapter_images(&env.world, cfg.n_images, cfg.image_seed);
    let pairs = build_feature_pairs(&images, victim, generator).map_err(crate::attacks::AttackError::from)?;
    let spec = adapter_spec_for(victim, generator).map_err(crate::attacks::AttackError::from)?;
    Ok(train_adapter(&pairs, spec, &cfg.train)?)
}

/// Source and target classes differ for every pair, cycling through all
/// offsets.
fn pair_classes(i: usize, k: usize) -> (usize, usize) {
    let source = i % k;
    let offset = 1 + (i / k) % (k - 1);
    (source, (source + offset) % k)
}

/// Attacks `cfg.n_pairs` pairs per seed and scores every grid cell. Each
/// seed draws fresh images, keys the attacker's randomness, and is the
/// defender's master seed.
pub fn run_adaptive_experiment(
    env: &Environment,
    adapter: Arc<AdapterModel>,
    cfg: &AdaptiveRunConfig,
) -> Result<AdaptiveTable, HarnessError> {
    let k = env.world.num_classes();
    if k < 2 {
        return Err(HarnessError::InvalidConfig("adaptive attacks need at least two classes".into()));
    }
    let surrogate = env.task_surrogate()?;
    let mut batches = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let attacker = Attacker {
            victim: env.victim().clone(),
            generators: env.zoo.generators.list().to_vec(),
            encoders: attacker_encoders(&env.zoo, &cfg.knowledge, seed).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?,
            task_surrogates: vec![surrogate.clone()],
            adapter: adapter.clone(),
        };
        let attack_cfg = AdaptiveConfig {
            seed,
            ..cfg.attack.clone()
        };
        let attacked = (0..cfg.n_pairs)
            .into_par_iter()
            .map(|i| {
                let (s, t) = pair_classes(i, k);
                let x = env.world.sample(s, derive_seed(seed, "adaptive-source", i as u64));
                let x_ref = env.world.sample(t, derive_seed(seed, "adaptive-target", i as u64));
                let adv = adaptive_attack(&attacker, &attack_cfg, &x, &x_ref)?;
                if !adv.success {
                    log::info!("adaptive pair {i} at seed {seed} missed its target caption");
                }
                Ok(LabeledImage::tensor(format!("adaptive-{seed}-{i:03}"), Label::Adversarial, adv.x_adv).with_attack("Adaptive"))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let calibration = (0..cfg.n_calibration)
            .into_par_iter()
            .map(|i| {
                let (s, t) = pair_classes(i, k);
                let x = env.world.sample(s, derive_seed(seed, "calibration-clean", i as u64));
                let src = env.world.sample(s, derive_seed(seed, "calibration-source", i as u64));
                let x_ref = env.world.sample(t, derive_seed(seed, "calibration-target", i as u64));
                let adv = embedding_transfer_attack(std::slice::from_ref(&surrogate), &src, &x_ref, cfg.attack.budget)?;
                Ok([
                    LabeledImage::tensor(format!("cal-clean-{seed}-{i:03}"), Label::Clean, x),
                    LabeledImage::tensor(format!("cal-adv-{seed}-{i:03}"), Label::Adversarial, adv.x_adv)
                        .with_attack("EmbeddingTransfer"),
                ])
            })
            .collect::<Result<Vec<_>, HarnessError>>()?
            .into_iter()
            .flatten()
            .collect();
        batches.push(SeedBatch {
            seed,
            attacked,
            calibration,
        });
    }
    evaluate_adaptive_robustness(env.victim(), &env.zoo, &batches, &cfg.grid).map_err(|e| match e {
        crate::adaptive::eval::EvalError::Detect(d) => HarnessError::Detect(d),
        crate::adaptive::eval::EvalError::Calibrate(c) => HarnessError::Calibrate(c),
        other => HarnessError::InvalidConfig(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_classes_always_differ() {
        for k in 2..6 {
            for i in 0..40 {
                let (s, t) = pair_classes(i, k);
                assert_ne!(s, t);
                assert!(s < k && t < k);
            }
        }
    }
}
