//! Detection accuracy of randomized detectors on adaptively attacked
//! images, over a grid of detector configurations and several seeds.

use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_threshold, score_dataset, CalibrateError, LabeledImage};
use crate::similarity::Label;
use crate::stochastic::{DetectError, Detector, DetectorMode};
use crate::zoo::{ModelZoo, VictimHandle};

/// One detector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseCell {
    Stochastic { n_encoders: usize, otu_scale: f64 },
    /// A fixed encoder set with no weight noise.
    Fixed { encoder_ids: Vec<String> },
}

impl DefenseCell {
    pub fn mode(&self) -> DetectorMode {
        match self {
            DefenseCell::Stochastic { n_encoders, otu_scale } => DetectorMode::Stochastic {
                n_encoders: *n_encoders,
                otu_scale: *otu_scale,
            },
            DefenseCell::Fixed { encoder_ids } => DetectorMode::Vanilla {
                generator_id: None,
                encoder_ids: Some(encoder_ids.clone()),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            DefenseCell::Stochastic { n_encoders, otu_scale } => format!("n={n_encoders},scale={otu_scale}"),
            DefenseCell::Fixed { encoder_ids } => format!("fixed[{}]", encoder_ids.join("+")),
        }
    }
}

/// Images produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedBatch {
    pub seed: u64,
    /// Adaptively attacked images, all labeled adversarial.
    pub attacked: Vec<LabeledImage>,
    /// Clean and non-adaptive adversarial images for choosing the threshold.
    pub calibration: Vec<LabeledImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveCell {
    pub cell: DefenseCell,
    pub label: String,
    /// Fraction of attacked images flagged, averaged over seeds.
    pub accuracy_mean: f64,
    /// Sample standard deviation over seeds; zero with one seed.
    pub accuracy_std: f64,
    pub per_seed_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// False positive rate on the calibration set's clean images.
    pub clean_fpr_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AdaptiveCell>,
}

impl AdaptiveTable {
    pub fn cell(&self, cell: &DefenseCell) -> Option<&AdaptiveCell> {
        self.cells.iter().find(|c| &c.cell == cell)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error("{count} images failed to score, first: {first}")]
    ScoreFailures { count: usize, first: String },
    #[error("no seed batches given")]
    NoBatches,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// For every cell and seed: calibrates the threshold on the batch's
/// calibration set, then reports the fraction of attacked images flagged.
/// The detector's master seed is the batch seed.
pub fn evaluate_adaptive_robustness(
    victim: &VictimHandle,
    zoo: &ModelZoo,
    batches: &[SeedBatch],
    grid: &[DefenseCell],
) -> Result<AdaptiveTable, EvalError> {
    if batches.is_empty() {
        return Err(EvalError::NoBatches);
    }
    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid {
        let mut accs = Vec::new();
        let mut thresholds = Vec::new();
        let mut fprs = Vec::new();
        for batch in batches {
            let detector = Detector::new(victim.clone(), zoo.clone(), cell.mode(), batch.seed)?;
            let cal = score_dataset(&detector, &batch.calibration);
            let att = score_dataset(&detector, &batch.attacked);
            if let Some(f) = cal.failures.first().or(att.failures.first()) {
                return Err(EvalError::ScoreFailures {
                    count: cal.failures.len() + att.failures.len(),
                    first: f.message.clone(),
                });
            }
            let result = calibrate_threshold(&cal.samples)?;
            let flagged = att.samples.iter().filter(|s| s.score < result.threshold).count();
            accs.push(flagged as f64 / att.samples.len().max(1) as f64);
            fprs.push(result.fpr_at_threshold);
            thresholds.push(result.threshold);
        }
        let (accuracy_mean, accuracy_std) = mean_std(&accs);
        cells.push(AdaptiveCell {
            label: cell.label(),
            cell: cell.clone(),
            accuracy_mean,
            accuracy_std,
            per_seed_accuracy: accs,
            thresholds,
            clean_fpr_mean: mean_std(&fprs).0,
        });
    }
    Ok(AdaptiveTable {
        seeds: batches.iter().map(|b| b.seed).collect(),
        cells,
    })
}

/// Labels every attacked image adversarial, whatever it was tagged with.
pub fn as_attacked(images: Vec<LabeledImage>) -> Vec<LabeledImage> {
    images
        .into_iter()
        .map(|mut i| {
            i.label = Label::Adversarial;
            i
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_is_sample_deviation() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 0.2).abs() < 1e-12);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn cell_labels_are_distinct() {
        let a = DefenseCell::Stochastic {
            n_encoders: 10,
            otu_scale: 5e-4,
        };
        let b = DefenseCell::Fixed {
            encoder_ids: vec!["a".into(), "b".into()],
        };
        assert_eq!(a.label(), "n=10,scale=0.0005");
        assert_eq!(b.label(), "fixed[a+b]");
        assert!(matches!(b.mode(), DetectorMode::Vanilla { .. }));
    }
}
