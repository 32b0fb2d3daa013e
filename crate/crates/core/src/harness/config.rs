//! The JSON config every CLI subcommand reads. Every field has a default,
//! so `{}` is a valid config; unknown fields are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::dataset::SynthConfig;
use super::experiment::{EvalConfig, SweepGrid};
use super::HarnessError;
use crate::adaptive::{AdaptiveConfig, DefenseCell, Knowledge, TrainConfig};
use crate::zoo::toy::{toy_encoder_id, ToyZooConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Toy zoo used when no zoo manifest is given.
    pub zoo: ToyZooConfig,
    /// Dataset manifest. Without one, a synthetic toy set is generated.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub evaluation: EvalConfig,
    pub sweep: SweepGrid,
    pub clean_ratios: Vec<f64>,
    pub adapter: AdapterRunConfig,
    pub adaptive: AdaptiveRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            zoo: ToyZooConfig::default(),
            dataset: None,
            synth: SynthConfig::default(),
            evaluation: EvalConfig::default(),
            sweep: SweepGrid::default(),
            clean_ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            adapter: AdapterRunConfig::default(),
            adaptive: AdaptiveRunConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.evaluation.validate()?;
        if let Some(r) = self.clean_ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(HarnessError::InvalidConfig(format!("clean ratio must be in (0, 1), got {r}")));
        }
        if self.adaptive.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("adaptive.seeds must not be empty".into()));
        }
        if self.adapter.n_images < 2 {
            return Err(HarnessError::InvalidConfig("adapter.n_images must be at least 2".into()));
        }
        Ok(())
    }

    /// Replaces every seed list and seed field with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.evaluation.seeds = vec![seed];
        self.adaptive.seeds = vec![seed];
        self.synth.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterRunConfig {
    pub n_images: usize,
    pub image_seed: u64,
    pub train: TrainConfig,
}

impl Default for AdapterRunConfig {
    fn default() -> Self {
        Self {
            n_images: 1024,
            image_seed: 7,
            train: TrainConfig {
                epochs: 40,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveRunConfig {
    /// `seed` inside is replaced by each entry of `seeds`.
    pub attack: AdaptiveConfig,
    pub knowledge: Knowledge,
    pub seeds: Vec<u64>,
    /// Image-target pairs attacked per seed.
    pub n_pairs: usize,
    /// Clean images in each seed's calibration set; as many
    /// non-adaptive transfer-attacked images join them.
    pub n_calibration: usize,
    pub grid: Vec<DefenseCell>,
}

impl Default for AdaptiveRunConfig {
    fn default() -> Self {
        let known: Vec<String> = (0..3).map(toy_encoder_id).collect();
        let mut grid: Vec<DefenseCell> = [1, 3, 5, 10]
            .into_iter()
            .flat_map(|n| {
                [0.0, 5e-4].map(|otu_scale| DefenseCell::Stochastic {
                    n_encoders: n,
                    otu_scale,
                })
            })
            .collect();
        grid.push(DefenseCell::Fixed {
            encoder_ids: known.clone(),
        });
        Self {
            attack: AdaptiveConfig::default(),
            knowledge: Knowledge::Known(known),
            seeds: vec![0, 1, 2],
            n_pairs: 10,
            n_calibration: 20,
            grid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_config() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let round = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&round).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(RunConfig::from_json(r#"{"evalution": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"clean_ratios": [1.0]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"evaluation": {"seeds": []}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"evaluation": {"calibration_fraction": 0}}"#).is_err());
    }
}
