//! Per-image verdict records and the aggregate metrics derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::{roc_auc, ScoreFailure, ScoreSample};
use crate::similarity::{Label, Verdict};

/// One line of `verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    /// Detector configuration the verdict belongs to.
    pub cell: String,
    pub seed: u64,
    pub image_id: String,
    /// Predicted label.
    pub label: Label,
    pub truth: Label,
    pub attack_name: Option<String>,
    pub score: f64,
    pub threshold: f64,
    pub generator_id: Option<String>,
    pub encoder_ids: Vec<String>,
    pub otu_scale: f64,
    /// Per-image seed the detector derived its draws from.
    pub master_seed: u64,
    pub per_encoder: Vec<(String, f64)>,
}

impl VerdictRecord {
    pub fn new(cell: &str, seed: u64, image_id: &str, truth: Label, attack_name: Option<String>, verdict: &Verdict) -> Self {
        let prov = verdict.provenance.as_ref();
        Self {
            cell: cell.to_string(),
            seed,
            image_id: image_id.to_string(),
            label: verdict.label,
            truth,
            attack_name,
            score: verdict.score,
            threshold: verdict.threshold,
            generator_id: prov.map(|p| p.generator_id.clone()),
            encoder_ids: prov.map_or_else(
                || verdict.breakdown.per_encoder.iter().map(|(id, _)| id.clone()).collect(),
                |p| p.encoder_ids.clone(),
            ),
            otu_scale: prov.map_or(0.0, |p| p.otu_scale),
            master_seed: prov.map_or(0, |p| p.master_seed),
            per_encoder: verdict.breakdown.per_encoder.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Adversarial flagged adversarial.
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Adversarial, Label::Adversarial) => self.tp += 1,
            (Label::Clean, Label::Clean) => self.tn += 1,
            (Label::Adversarial, Label::Clean) => self.fp += 1,
            (Label::Clean, Label::Adversarial) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

/// `num / den`, or 0 for an empty denominator.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreStats {
    pub fn of(scores: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut count = 0;
        let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for s in scores {
            count += 1;
            sum += s;
            min = min.min(s);
            max = max.max(s);
        }
        (count > 0).then(|| Self {
            count,
            mean: sum / count as f64,
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBreakdown {
    pub attack_name: String,
    pub count: usize,
    pub detected: usize,
    pub detection_rate: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: String,
    pub seed: u64,
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub auc: Option<f64>,
    pub per_attack: Vec<AttackBreakdown>,
    pub clean: Option<ScoreStats>,
    pub adversarial: Option<ScoreStats>,
    pub failures: Vec<ScoreFailure>,
}

impl MetricsReport {
    /// Aggregates records that share a cell and seed. Attacks are listed in
    /// name order.
    pub fn from_records(cell: &str, seed: u64, threshold: f64, records: &[VerdictRecord], failures: Vec<ScoreFailure>) -> Self {
        let mut confusion = Confusion::default();
        let mut attacks: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
        for r in records {
            confusion.add(r.label, r.truth);
            if r.truth == Label::Adversarial {
                let name = r.attack_name.clone().unwrap_or_else(|| "unknown".into());
                let e = attacks.entry(name).or_default();
                e.0 += 1;
                e.1 += usize::from(r.label == Label::Adversarial);
                e.2 += r.score;
            }
        }
        let samples: Vec<ScoreSample> = records.iter().map(|r| ScoreSample::new(r.image_id.clone(), r.score, r.truth)).collect();
        let of = |l: Label| ScoreStats::of(records.iter().filter(|r| r.truth == l).map(|r| r.score));
        Self {
            cell: cell.to_string(),
            seed,
            threshold,
            accuracy: confusion.accuracy(),
            tpr: confusion.tpr(),
            fpr: confusion.fpr(),
            confusion,
            auc: roc_auc(&samples),
            per_attack: attacks
                .into_iter()
                .map(|(attack_name, (count, detected, sum))| AttackBreakdown {
                    attack_name,
                    count,
                    detected,
                    detection_rate: ratio(detected, count),
                    mean_score: sum / count as f64,
                })
                .collect(),
            clean: of(Label::Clean),
            adversarial: of(Label::Adversarial),
            failures,
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label, truth: Label, score: f64, attack: Option<&str>) -> VerdictRecord {
        VerdictRecord {
            cell: "c".into(),
            seed: 0,
            image_id: id.into(),
            label,
            truth,
            attack_name: attack.map(String::from),
            score,
            threshold: 0.5,
            generator_id: None,
            encoder_ids: vec![],
            otu_scale: 0.0,
            master_seed: 0,
            per_encoder: vec![],
        }
    }

    #[test]
    fn all_correct() {
        use Label::*;
        let r = vec![
            rec("a", Clean, Clean, 0.9, None),
            rec("b", Adversarial, Adversarial, 0.1, Some("FGSM")),
        ];
        let m = MetricsReport::from_records("c", 0, 0.5, &r, vec![]);
        assert_eq!((m.accuracy, m.tpr, m.fpr), (1.0, 1.0, 0.0));
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.per_attack[0].detection_rate, 1.0);
    }

    #[test]
    fn everything_clean_on_balanced_set() {
        use Label::*;
        let r: Vec<_> = (0..10)
            .map(|i| rec(&i.to_string(), Clean, if i % 2 == 0 { Clean } else { Adversarial }, 0.7, Some("PGD")))
            .collect();
        let m = MetricsReport::from_records("c", 0, 0.5, &r, vec![]);
        assert_eq!((m.accuracy, m.tpr, m.fpr), (0.5, 0.0, 0.0));
        assert_eq!(m.accuracy, (m.confusion.tp + m.confusion.tn) as f64 / m.confusion.total() as f64);
        let s = m.clean.unwrap();
        assert_eq!((s.count, s.min, s.max), (5, 0.7, 0.7));
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert!(MeanStd::of(&[]).is_none());
    }
}
