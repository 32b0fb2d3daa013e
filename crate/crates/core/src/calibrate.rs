//! Threshold selection by Youden's J on the ROC curve, and dataset scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;
use crate::similarity::Label;
use crate::stochastic::Detector;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrateError {
    #[error("calibration needs at least one {0} sample")]
    MissingClass(Label),
    #[error("sample {0} has a non-finite score")]
    NonFiniteScore(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub image_id: String,
    pub score: f64,
    pub label: Label,
}

impl ScoreSample {
    pub fn new(image_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            image_id: image_id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub tpr_at_threshold: f64,
    pub fpr_at_threshold: f64,
    pub youden: f64,
    /// Every candidate threshold in increasing order.
    pub curve: Vec<RocPoint>,
}

/// Picks the threshold maximizing `TPR - FPR`, where a sample counts as
/// flagged when its score is strictly below the threshold.
///
/// Candidates are the midpoints between adjacent distinct scores plus one
/// sentinel below the minimum and one above the maximum. Ties go to the
/// smallest candidate.
pub fn calibrate_threshold(samples: &[ScoreSample]) -> Result<CalibrationResult, CalibrateError> {
    if let Some(bad) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(CalibrateError::NonFiniteScore(bad.image_id.clone()));
    }
    let n_adv = samples.iter().filter(|s| s.label == Label::Adversarial).count() as i64;
    let n_clean = samples.len() as i64 - n_adv;
    if n_adv == 0 {
        return Err(CalibrateError::MissingClass(Label::Adversarial));
    }
    if n_clean == 0 {
        return Err(CalibrateError::MissingClass(Label::Clean));
    }

    let mut sorted: Vec<(f64, Label)> = samples.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Group equal scores; (score, adversarial count, clean count).
    let mut groups: Vec<(f64, i64, i64)> = Vec::new();
    for (score, label) in sorted {
        if groups.last().is_none_or(|g| g.0 != score) {
            groups.push((score, 0, 0));
        }
        let g = groups.last_mut().expect("just pushed");
        match label {
            Label::Adversarial => g.1 += 1,
            Label::Clean => g.2 += 1,
        }
    }

    let mut candidates = Vec::with_capacity(groups.len() + 1);
    candidates.push(groups[0].0 - 1.0);
    for pair in groups.windows(2) {
        candidates.push(0.5 * (pair[0].0 + pair[1].0));
    }
    candidates.push(groups[groups.len() - 1].0 + 1.0);

    let mut curve = Vec::with_capacity(candidates.len());
    // Youden scaled by n_adv * n_clean stays an exact integer.
    let mut best: Option<(usize, i64)> = None;
    let (mut adv_below, mut clean_below) = (0i64, 0i64);
    for (i, &threshold) in candidates.iter().enumerate() {
        if i > 0 {
            adv_below += groups[i - 1].1;
            clean_below += groups[i - 1].2;
        }
        curve.push(RocPoint {
            threshold,
            tpr: adv_below as f64 / n_adv as f64,
            fpr: clean_below as f64 / n_clean as f64,
        });
        let j = adv_below * n_clean - clean_below * n_adv;
        if best.is_none_or(|(_, b)| j > b) {
            best = Some((i, j));
        }
    }
    let (i, _) = best.expect("at least two candidates");
    let point = curve[i];
    Ok(CalibrationResult {
        threshold: point.threshold,
        tpr_at_threshold: point.tpr,
        fpr_at_threshold: point.fpr,
        youden: point.tpr - point.fpr,
        curve,
    })
}

/// Probability that a random adversarial sample scores below a random
/// clean one, counting ties as one half. `None` when a class is missing.
pub fn roc_auc(samples: &[ScoreSample]) -> Option<f64> {
    let mut adv: Vec<f64> = samples.iter().filter(|s| s.label == Label::Adversarial).map(|s| s.score).collect();
    let clean: Vec<f64> = samples.iter().filter(|s| s.label == Label::Clean).map(|s| s.score).collect();
    if adv.is_empty() || clean.is_empty() {
        return None;
    }
    adv.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for c in &clean {
        let below = adv.partition_point(|a| a < c);
        let not_above = adv.partition_point(|a| a <= c);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Some(wins / (adv.len() * clean.len()) as f64)
}

/// Where an image comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Tensor(ImageTensor),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub label: Label,
    /// Name of the attack that produced the image, if any.
    pub attack_name: Option<String>,
    pub source: ImageSource,
}

impl LabeledImage {
    pub fn tensor(image_id: impl Into<String>, label: Label, image: ImageTensor) -> Self {
        Self {
            image_id: image_id.into(),
            label,
            attack_name: None,
            source: ImageSource::Tensor(image),
        }
    }

    pub fn with_attack(mut self, attack_name: impl Into<String>) -> Self {
        self.attack_name = Some(attack_name.into());
        self
    }

    pub fn load(&self) -> Result<ImageTensor, String> {
        match &self.source {
            ImageSource::Tensor(t) => Ok(t.clone()),
            ImageSource::File(p) => ImageTensor::load(p).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub samples: Vec<ScoreSample>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores every image with `detector`. Images that fail to load or score
/// are recorded in `failures` and logged; input order is preserved.
pub fn score_dataset(detector: &Detector, images: &[LabeledImage]) -> ScoredSet {
    let results: Vec<Result<ScoreSample, ScoreFailure>> = images
        .par_iter()
        .map(|item| {
            let fail = |message: String| ScoreFailure {
                image_id: item.image_id.clone(),
                message,
            };
            let image = item.load().map_err(fail)?;
            let score = detector.score(&image, &item.image_id).map_err(|e| fail(e.to_string()))?;
            Ok(ScoreSample::new(item.image_id.clone(), score, item.label))
        })
        .collect();
    let mut out = ScoredSet::default();
    for r in results {
        match r {
            Ok(s) => out.samples.push(s),
            Err(f) => out.failures.push(f),
        }
    }
    if !out.failures.is_empty() {
        log::warn!("{} of {} images could not be scored", out.failures.len(), images.len());
    }
    out
}

/// One threshold per attack: every clean sample against the adversarial
/// samples carrying that attack name. Unnamed adversarial images are left
/// out.
pub fn calibrate_per_attack(
    samples: &[ScoreSample],
    images: &[LabeledImage],
) -> Result<BTreeMap<String, CalibrationResult>, CalibrateError> {
    let attack_of: HashMap<&str, &str> = images
        .iter()
        .filter_map(|i| Some((i.image_id.as_str(), i.attack_name.as_deref()?)))
        .collect();
    let names: BTreeSet<&str> = samples
        .iter()
        .filter(|s| s.label == Label::Adversarial)
        .filter_map(|s| attack_of.get(s.image_id.as_str()).copied())
        .collect();
    names
        .into_iter()
        .map(|name| {
            let subset: Vec<ScoreSample> = samples
                .iter()
                .filter(|s| s.label == Label::Clean || attack_of.get(s.image_id.as_str()) == Some(&name))
                .cloned()
                .collect();
            Ok((name.to_string(), calibrate_threshold(&subset)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(clean: &[f64], adv: &[f64]) -> Vec<ScoreSample> {
        let mut out: Vec<_> = clean
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreSample::new(format!("c{i}"), s, Label::Clean))
            .collect();
        out.extend(adv.iter().enumerate().map(|(i, &s)| ScoreSample::new(format!("a{i}"), s, Label::Adversarial)));
        out
    }

    /// Independent scan: rebuild every candidate and count directly.
    fn brute_force(samples: &[ScoreSample]) -> (f64, f64) {
        let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        let mut cands = vec![scores[0] - 1.0];
        for w in scores.windows(2) {
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands.push(scores[scores.len() - 1] + 1.0);
        let rate = |label, t: f64| {
            let of: Vec<_> = samples.iter().filter(|s| s.label == label).collect();
            of.iter().filter(|s| s.score < t).count() as f64 / of.len() as f64
        };
        let mut best = (f64::NAN, f64::NEG_INFINITY);
        for t in cands {
            let j = rate(Label::Adversarial, t) - rate(Label::Clean, t);
            if j > best.1 + 1e-12 {
                best = (t, j);
            }
        }
        best
    }

    #[test]
    fn separated_example() {
        let r = calibrate_threshold(&set(&[0.9, 0.8], &[0.2, 0.3])).unwrap();
        assert!((r.threshold - 0.55).abs() < 1e-12);
        assert_eq!((r.tpr_at_threshold, r.fpr_at_threshold, r.youden), (1.0, 0.0, 1.0));
        let mids: Vec<f64> = r.curve[1..r.curve.len() - 1].iter().map(|p| p.threshold).collect();
        for (m, e) in mids.iter().zip([0.25, 0.55, 0.85]) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_distributions_pick_lowest_candidate() {
        let r = calibrate_threshold(&set(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7])).unwrap();
        assert_eq!(r.youden, 0.0);
        assert!(r.curve.iter().all(|p| p.tpr == p.fpr));
        assert_eq!(r.threshold, r.curve[0].threshold);
        assert!(r.threshold < 0.3);
    }

    #[test]
    fn missing_class() {
        assert_eq!(
            calibrate_threshold(&set(&[0.5], &[])).unwrap_err(),
            CalibrateError::MissingClass(Label::Adversarial)
        );
        assert_eq!(
            calibrate_threshold(&set(&[], &[0.5])).unwrap_err(),
            CalibrateError::MissingClass(Label::Clean)
        );
    }

    #[test]
    fn per_attack_thresholds_use_only_their_attack() {
        let samples = vec![
            ScoreSample::new("c0", 0.9, Label::Clean),
            ScoreSample::new("c1", 0.8, Label::Clean),
            ScoreSample::new("a0", 0.1, Label::Adversarial),
            ScoreSample::new("b0", 0.7, Label::Adversarial),
        ];
        let img = |id: &str, label| LabeledImage::tensor(id, label, ImageTensor::filled(1, 1, 1, 0.0).unwrap());
        let images = vec![
            img("c0", Label::Clean),
            img("c1", Label::Clean),
            img("a0", Label::Adversarial).with_attack("A"),
            img("b0", Label::Adversarial).with_attack("B"),
        ];
        let per = calibrate_per_attack(&samples, &images).unwrap();
        assert_eq!(per.keys().collect::<Vec<_>>(), vec!["A", "B"]);
        assert_eq!(per["A"].threshold, 0.45);
        assert_eq!(per["B"].threshold, 0.75);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&set(&[0.9, 0.8], &[0.2, 0.3])), Some(1.0));
        assert_eq!(roc_auc(&set(&[0.5], &[0.5])), Some(0.5));
        assert_eq!(roc_auc(&set(&[0.1], &[0.9, 0.05])), Some(0.5));
        assert_eq!(roc_auc(&set(&[0.5], &[])), None);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<ScoreSample>> {
        // Coarse grid so ties are common.
        (prop::collection::vec(0u8..20, 1..25), prop::collection::vec(0u8..20, 1..25))
            .prop_map(|(c, a)| {
                let f = |v: &Vec<u8>| v.iter().map(|&x| x as f64 / 20.0).collect::<Vec<_>>();
                set(&f(&c), &f(&a))
            })
    }

    proptest! {
        #[test]
        fn matches_brute_force(samples in arb_samples()) {
            let r = calibrate_threshold(&samples).unwrap();
            let (t, j) = brute_force(&samples);
            prop_assert!((r.youden - j).abs() < 1e-12);
            prop_assert_eq!(r.threshold, t);
            for w in r.curve.windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
            }
        }

        #[test]
        fn low_adversarial_never_hurts(samples in arb_samples()) {
            let before = calibrate_threshold(&samples).unwrap().youden;
            let min = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
            let mut more = samples.clone();
            more.push(ScoreSample::new("new", min - 0.5, Label::Adversarial));
            prop_assert!(calibrate_threshold(&more).unwrap().youden >= before - 1e-12);
        }

        #[test]
        fn classifying_reproduces_rates(samples in arb_samples()) {
            let r = calibrate_threshold(&samples).unwrap();
            let rate = |label| {
                let of: Vec<_> = samples.iter().filter(|s| s.label == label).collect();
                of.iter().filter(|s| crate::similarity::classify(s.score, r.threshold) == Label::Adversarial).count() as f64
                    / of.len() as f64
            };
            prop_assert_eq!(rate(Label::Adversarial), r.tpr_at_threshold);
            prop_assert_eq!(rate(Label::Clean), r.fpr_at_threshold);
        }
    }
}
