//! Evaluation runs over seeds, detector grids, and clean ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{MeanStd, MetricsReport, VerdictRecord};
use super::HarnessError;
use crate::calibrate::{calibrate_threshold, roc_auc, CalibrationResult, LabeledImage, ScoreFailure, ScoreSample};
use crate::seed::{derive_seed, rng};
use crate::similarity::{classify, Label, Verdict};
use crate::stochastic::{Detector, DetectorMode};
use crate::zoo::{ModelZoo, VictimHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub detector: DetectorMode,
    /// One full run per seed; each seed is the detector's master seed and
    /// keys the calibration split.
    pub seeds: Vec<u64>,
    /// Share of each class held out for threshold calibration.
    pub calibration_fraction: f64,
    /// Fixed threshold. When set, no calibration split is made.
    pub threshold: Option<f64>,
    /// Runs with a smaller share of successfully scored images fail.
    pub min_success_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detector: DetectorMode::Stochastic {
                n_encoders: 10,
                otu_scale: 5e-4,
            },
            seeds: vec![0, 1, 2],
            calibration_fraction: 0.3,
            threshold: None,
            min_success_fraction: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.threshold.is_none() && !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad(format!("calibration_fraction must be in (0, 1), got {}", self.calibration_fraction));
        }
        if !(0.0..=1.0).contains(&self.min_success_fraction) {
            return bad(format!("min_success_fraction must be in [0, 1], got {}", self.min_success_fraction));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return bad("threshold must be finite".into());
            }
        }
        Ok(())
    }

    pub fn cell_label(&self) -> String {
        self.detector.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub calibration: Option<CalibrationResult>,
    pub report: MetricsReport,
    #[serde(skip)]
    pub records: Vec<VerdictRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: MeanStd,
    pub tpr: MeanStd,
    pub fpr: MeanStd,
    pub auc: Option<MeanStd>,
    pub clean_mean_similarity: Option<MeanStd>,
    pub adversarial_mean_similarity: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cell: String,
    pub config: EvalConfig,
    pub runs: Vec<SeedRun>,
    pub summary: EvalSummary,
}

impl Evaluation {
    pub fn records(&self) -> impl Iterator<Item = &VerdictRecord> {
        self.runs.iter().flat_map(|r| r.records.iter())
    }
}

/// Indices of `images` held out for calibration: a seeded share of each
/// class, returned sorted.
pub fn calibration_split(images: &[LabeledImage], fraction: f64, seed: u64) -> Vec<usize> {
    let mut r = rng(derive_seed(seed, "split", 0));
    let mut picked = Vec::new();
    for label in [Label::Clean, Label::Adversarial] {
        let idx: Vec<usize> = (0..images.len()).filter(|&i| images[i].label == label).collect();
        let take = (fraction * idx.len() as f64).round() as usize;
        picked.extend(rand::seq::index::sample(&mut r, idx.len(), take).into_iter().map(|j| idx[j]));
    }
    picked.sort_unstable();
    picked
}

/// Verdicts at threshold 0 for every image, in input order.
fn detect_all(detector: &Detector, images: &[LabeledImage]) -> Vec<Result<Verdict, ScoreFailure>> {
    images
        .par_iter()
        .map(|item| {
            let fail = |message: String| ScoreFailure {
                image_id: item.image_id.clone(),
                message,
            };
            let image = item.load().map_err(fail)?;
            detector.detect(&image, &item.image_id, 0.0).map_err(|e| fail(e.to_string()))
        })
        .collect()
}

/// Everything one seed produces before thresholding.
struct Scored {
    verdicts: Vec<Result<Verdict, ScoreFailure>>,
    /// Calibration membership by image index.
    in_calibration: Vec<bool>,
}

fn score_seed(
    victim: &VictimHandle,
    zoo: &ModelZoo,
    cfg: &EvalConfig,
    images: &[LabeledImage],
    seed: u64,
) -> Result<Scored, HarnessError> {
    let detector = Detector::new(victim.clone(), zoo.clone(), cfg.detector.clone(), seed)?;
    let verdicts = detect_all(&detector, images);
    let failed = verdicts.iter().filter(|v| v.is_err()).count();
    if !images.is_empty() && ((images.len() - failed) as f64) < cfg.min_success_fraction * images.len() as f64 {
        let first = verdicts.iter().find_map(|v| v.as_ref().err()).map(|f| format!("{}: {}", f.image_id, f.message));
        return Err(HarnessError::TooManyFailures {
            failed,
            total: images.len(),
            first: first.unwrap_or_default(),
        });
    }
    let mut in_calibration = vec![false; images.len()];
    if cfg.threshold.is_none() {
        for i in calibration_split(images, cfg.calibration_fraction, seed) {
            in_calibration[i] = true;
        }
    }
    Ok(Scored { verdicts, in_calibration })
}

fn threshold_from(
    scored: &Scored,
    images: &[LabeledImage],
    fixed: Option<f64>,
    score_of: impl Fn(&Verdict) -> Option<f64>,
) -> Result<(f64, Option<CalibrationResult>), HarnessError> {
    if let Some(t) = fixed {
        return Ok((t, None));
    }
    let samples: Vec<ScoreSample> = images
        .iter()
        .zip(&scored.verdicts)
        .zip(&scored.in_calibration)
        .filter(|(_, &c)| c)
        .filter_map(|((img, v), _)| {
            let s = score_of(v.as_ref().ok()?)?;
            Some(ScoreSample::new(img.image_id.clone(), s, img.label))
        })
        .collect();
    let result = calibrate_threshold(&samples)?;
    Ok((result.threshold, Some(result)))
}

/// Runs the detector over `images` once per seed. Without a fixed
/// threshold, a stratified share of the images calibrates τ and the rest
/// are evaluated.
pub fn evaluate(
    victim: &VictimHandle,
    zoo: &ModelZoo,
    cfg: &EvalConfig,
    images: &[LabeledImage],
) -> Result<Evaluation, HarnessError> {
    cfg.validate()?;
    let cell = cfg.cell_label();
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let scored = score_seed(victim, zoo, cfg, images, seed)?;
        let (threshold, calibration) = threshold_from(&scored, images, cfg.threshold, |v| Some(v.score))?;
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for ((img, v), &cal) in images.iter().zip(&scored.verdicts).zip(&scored.in_calibration) {
            if cal {
                continue;
            }
            match v {
                Ok(v) => {
                    let mut v = v.clone();
                    v.threshold = threshold;
                    v.label = classify(v.score, threshold);
                    records.push(VerdictRecord::new(&cell, seed, &img.image_id, img.label, img.attack_name.clone(), &v));
                }
                Err(f) => failures.push(f.clone()),
            }
        }
        let report = MetricsReport::from_records(&cell, seed, threshold, &records, failures);
        runs.push(SeedRun {
            seed,
            calibration,
            report,
            records,
        });
    }
    let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<MeanStd> {
        let v: Option<Vec<f64>> = runs.iter().map(|r| f(&r.report)).collect();
        MeanStd::of(&v?)
    };
    let summary = EvalSummary {
        accuracy: pick(&|r| Some(r.accuracy)).expect("at least one seed"),
        tpr: pick(&|r| Some(r.tpr)).expect("at least one seed"),
        fpr: pick(&|r| Some(r.fpr)).expect("at least one seed"),
        auc: pick(&|r| r.auc),
        clean_mean_similarity: pick(&|r| r.clean.map(|s| s.mean)),
        adversarial_mean_similarity: pick(&|r| r.adversarial.map(|s| s.mean)),
    };
    Ok(Evaluation {
        cell,
        config: cfg.clone(),
        runs,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub n_encoders: Vec<usize>,
    pub otu_scales: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            n_encoders: vec![1, 3, 5, 7, 10],
            otu_scales: vec![5e-6, 5e-4, 1e-3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_encoders: usize,
    pub otu_scale: f64,
    pub evaluation: Option<Evaluation>,
    pub error: Option<String>,
}

/// One stochastic evaluation per grid cell, ordered by ensemble size and
/// then noise scale. A failing cell records its error and the sweep moves
/// on.
pub fn sweep(
    victim: &VictimHandle,
    zoo: &ModelZoo,
    base: &EvalConfig,
    grid: &SweepGrid,
    images: &[LabeledImage],
) -> Result<Vec<SweepCell>, HarnessError> {
    if grid.n_encoders.is_empty() || grid.otu_scales.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep grid must not be empty".into()));
    }
    let mut cells = Vec::new();
    for &n in &grid.n_encoders {
        for &scale in &grid.otu_scales {
            let cfg = EvalConfig {
                detector: DetectorMode::Stochastic {
                    n_encoders: n,
                    otu_scale: scale,
                },
                ..base.clone()
            };
            let (evaluation, error) = match evaluate(victim, zoo, &cfg, images) {
                Ok(e) => (Some(e), None),
                Err(e) => {
                    log::warn!("sweep cell n={n} scale={scale} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(SweepCell {
                n_encoders: n,
                otu_scale: scale,
                evaluation,
                error,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub seed: u64,
    pub ratio: f64,
    /// An encoder id, or `ensemble` for the mean similarity.
    pub encoder: String,
    pub n_clean: usize,
    pub n_adversarial: usize,
    pub threshold: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
}

/// Adversarial images needed next to `clean` clean ones for `ratio`.
pub fn adversarial_count(clean: usize, ratio: f64) -> usize {
    (clean as f64 * (1.0 - ratio) / ratio).round() as usize
}

/// For each seed and ratio, keeps every clean evaluation image and a seeded
/// subsample of adversarial ones, then reports AUC and accuracy for the
/// ensemble score and for each encoder's own similarity. Thresholds come
/// from the same calibration split as [`evaluate`], so at the dataset's own
/// ratio the ensemble row reproduces its metrics.
pub fn clean_ratio_sweep(
    victim: &VictimHandle,
    zoo: &ModelZoo,
    cfg: &EvalConfig,
    images: &[LabeledImage],
    ratios: &[f64],
) -> Result<Vec<RatioRow>, HarnessError> {
    cfg.validate()?;
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(HarnessError::InvalidConfig(format!("clean ratio must be in (0, 1), got {r}")));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let scored = score_seed(victim, zoo, cfg, images, seed)?;
        let eval_idx: Vec<usize> = (0..images.len())
            .filter(|&i| !scored.in_calibration[i] && scored.verdicts[i].is_ok())
            .collect();
        let clean: Vec<usize> = eval_idx.iter().copied().filter(|&i| images[i].label == Label::Clean).collect();
        let adv: Vec<usize> = eval_idx.iter().copied().filter(|&i| images[i].label == Label::Adversarial).collect();
        let mut encoders: Vec<String> = Vec::new();
        for v in scored.verdicts.iter().flatten() {
            for (id, _) in &v.breakdown.per_encoder {
                if !encoders.contains(id) {
                    encoders.push(id.clone());
                }
            }
        }
        encoders.sort_by_key(|id| zoo.encoders.position(id));
        for &ratio in ratios {
            let need = adversarial_count(clean.len(), ratio);
            if need == 0 || need > adv.len() {
                return Err(HarnessError::InsufficientSamples {
                    ratio,
                    needed: need,
                    available: adv.len(),
                });
            }
            let mut r = rng(derive_seed(seed, "clean-ratio", ratio.to_bits()));
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut r, adv.len(), need).into_iter().map(|j| adv[j]).collect();
            chosen.sort_unstable();
            let subset: Vec<usize> = clean.iter().chain(&chosen).copied().collect();
            let mut keys: Vec<Option<String>> = vec![None];
            keys.extend(encoders.iter().cloned().map(Some));
            for key in keys {
                let score_of = |v: &Verdict| match &key {
                    None => Some(v.score),
                    Some(id) => v.breakdown.per_encoder.iter().find(|(e, _)| e == id).map(|(_, s)| *s),
                };
                let threshold = match threshold_from(&scored, images, cfg.threshold, score_of) {
                    Ok((t, _)) => t,
                    Err(e) => {
                        log::warn!("no threshold for {key:?} at seed {seed}: {e}");
                        continue;
                    }
                };
                let samples: Vec<ScoreSample> = subset
                    .iter()
                    .filter_map(|&i| {
                        let s = score_of(scored.verdicts[i].as_ref().ok()?)?;
                        Some(ScoreSample::new(images[i].image_id.clone(), s, images[i].label))
                    })
                    .collect();
                let correct = samples.iter().filter(|s| classify(s.score, threshold) == s.label).count();
                rows.push(RatioRow {
                    seed,
                    ratio,
                    encoder: key.clone().unwrap_or_else(|| "ensemble".into()),
                    n_clean: samples.iter().filter(|s| s.label == Label::Clean).count(),
                    n_adversarial: samples.iter().filter(|s| s.label == Label::Adversarial).count(),
                    threshold,
                    auc: roc_auc(&samples),
                    accuracy: if samples.is_empty() { 0.0 } else { correct as f64 / samples.len() as f64 },
                });
            }
        }
    }
    Ok(rows)
}
