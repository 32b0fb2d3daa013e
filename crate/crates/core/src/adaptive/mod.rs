//! The white-box adaptive attack on the detector.
//!
//! The attacker cannot differentiate through the victim's discrete caption,
//! so an [`adapter`] learns to map the victim's continuous features to the
//! generator's conditioning space. The [`attack`] then runs PGD where the
//! forward pass uses the real caption and the backward pass flows through
//! the adapter and the generator's soft rendering path, averaging the
//! detection loss over sampled generator noise, model draws, and weight
//! noise. [`eval`] measures how often randomized detectors still catch the
//! result.

pub mod adapter;
pub mod attack;
pub mod eval;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{train_adapter, AdapterError, AdapterModel, AdapterSpec, FeaturePair, TrainConfig};
pub use attack::{adaptive_attack, detection_loss_estimate, AdaptiveConfig, Attacker};
pub use eval::{evaluate_adaptive_robustness, AdaptiveCell, AdaptiveTable, DefenseCell, SeedBatch};

use crate::image::ImageTensor;
use crate::seed::{derive_seed, rng};
use crate::zoo::toy::{LinearEncoder, ToyWorld};
use crate::zoo::{BackendError, EncoderHandle, GeneratorHandle, ModelZoo, VictimHandle, ZooError};

/// One pair per image: the victim's continuous feature and the generator's
/// conditioning for the caption the victim produces. Conditioning is
/// computed deterministically from the caption, with no sampling.
pub fn build_feature_pairs(
    images: &[ImageTensor],
    victim: &VictimHandle,
    generator: &GeneratorHandle,
) -> Result<Vec<FeaturePair>, BackendError> {
    let dv = victim.differentiable()?;
    let cg = generator.conditioned()?;
    let (rows, cols) = dv.feature_shape();
    let mut pairs = Vec::with_capacity(images.len());
    for image in images {
        let z_vlm = dv.features(image);
        if z_vlm.len() != rows * cols {
            return Err(BackendError::failure(victim.model_id(), "feature length differs from the declared shape"));
        }
        let caption = victim.caption(image, "")?;
        pairs.push(FeaturePair {
            z_vlm,
            z_t2i: cg.condition(&caption),
        });
    }
    Ok(pairs)
}

/// Adapter shape matching a victim and generator.
pub fn adapter_spec_for(victim: &VictimHandle, generator: &GeneratorHandle) -> Result<AdapterSpec, BackendError> {
    Ok(AdapterSpec::new(
        victim.differentiable()?.feature_shape(),
        generator.conditioned()?.conditioning_shape(),
    ))
}

/// Images for adapter training: class samples and blends of two samples
/// from different classes, so features between clusters are covered.
pub fn toy_adapter_images(world: &ToyWorld, count: usize, seed: u64) -> Vec<ImageTensor> {
    let mut r = rng(derive_seed(seed, "adapter-images", 0));
    let k = world.num_classes();
    (0..count)
        .map(|i| {
            let a = world.sample(r.random_range(0..k), derive_seed(seed, "adapter-a", i as u64));
            if i % 2 == 0 {
                return a;
            }
            let b = world.sample(r.random_range(0..k), derive_seed(seed, "adapter-b", i as u64));
            let t: f64 = r.random();
            let data = a.data().iter().zip(b.data()).map(|(p, q)| t * p + (1.0 - t) * q).collect();
            a.with_data_clamped(data).expect("same shape")
        })
        .collect()
}

/// How much of the defender's encoder population the attacker knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    All,
    /// All but `k` randomly chosen encoders, each replaced by a fresh
    /// substitute encoder of the same shape.
    AllBut(usize),
    /// Exactly these encoders and no substitutes.
    Known(Vec<String>),
}

/// Resolves the attacker's encoder set against the defender's zoo.
pub fn attacker_encoders(zoo: &ModelZoo, knowledge: &Knowledge, seed: u64) -> Result<Vec<EncoderHandle>, ZooError> {
    let all = zoo.encoders.list();
    match knowledge {
        Knowledge::All => Ok(all.to_vec()),
        Knowledge::Known(ids) => ids.iter().map(|id| zoo.encoders.lookup(id).cloned()).collect(),
        Knowledge::AllBut(k) => {
            let template = all.first().ok_or(ZooError::EmptyZoo("encoder"))?;
            let k = (*k).min(all.len());
            let hidden = rand::seq::index::sample(&mut rng(derive_seed(seed, "unknown-encoders", 0)), all.len(), k);
            let hidden: Vec<usize> = hidden.into_vec();
            let mut out: Vec<EncoderHandle> =
                all.iter().enumerate().filter(|(i, _)| !hidden.contains(i)).map(|(_, e)| e.clone()).collect();
            for i in 0..k {
                let enc = LinearEncoder::random(
                    format!("substitute-{i}"),
                    template.embed_dim(),
                    template.preprocess_spec().clone(),
                    derive_seed(seed, "substitute-encoder", i as u64),
                );
                out.push(EncoderHandle::new(std::sync::Arc::new(enc)));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::toy::ToyZooConfig;

    #[test]
    fn pairs_have_uniform_shapes_and_are_deterministic() {
        let (zoo, world) = ToyZooConfig::default().build();
        let victim = &zoo.victims.list()[0];
        let generator = &zoo.generators.list()[0];
        let images = toy_adapter_images(&world, 100, 1);
        let pairs = build_feature_pairs(&images, victim, generator).unwrap();
        assert_eq!(pairs.len(), 100);
        assert!(pairs.iter().all(|p| p.z_vlm.len() == 64 && p.z_t2i.len() == 256));
        let again = build_feature_pairs(&images[..1], victim, generator).unwrap();
        assert_eq!(again[0], pairs[0]);
        let spec = adapter_spec_for(victim, generator).unwrap();
        assert_eq!((spec.in_rows, spec.in_cols, spec.out_rows, spec.out_cols), (8, 8, 8, 32));
    }

    #[test]
    fn knowledge_presets() {
        let (zoo, _) = ToyZooConfig::default().build();
        assert_eq!(attacker_encoders(&zoo, &Knowledge::All, 0).unwrap().len(), 10);
        let but_two = attacker_encoders(&zoo, &Knowledge::AllBut(2), 0).unwrap();
        assert_eq!(but_two.len(), 10);
        let known = but_two.iter().filter(|e| zoo.encoders.lookup(e.model_id()).is_ok()).count();
        assert_eq!(known, 8);
        let ids = vec!["toy-enc-1".to_string(), "toy-enc-4".to_string()];
        let picked = attacker_encoders(&zoo, &Knowledge::Known(ids.clone()), 0).unwrap();
        assert_eq!(picked.iter().map(|e| e.model_id().to_string()).collect::<Vec<_>>(), ids);
    }
}
