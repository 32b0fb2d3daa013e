//! End-to-end checks on the harness: written files recomputed from scratch,
//! selection frequencies, and consistency between related runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use regen_detect::calibrate::LabeledImage;
use regen_detect::harness::dataset::{synth_toy_dataset, SynthConfig};
use regen_detect::harness::report::{META_FILE, SUMMARY_FILE, VERDICTS_FILE};
use regen_detect::harness::{clean_ratio_sweep, evaluate, sweep, write_report, Environment, EvalConfig, SweepGrid};
use regen_detect::stochastic::{select_encoders, select_generator, Detector, DetectorMode};
use regen_detect::zoo::toy::ToyZooConfig;
use regen_detect::Label;

fn small_set(env: &Environment, n: usize) -> Vec<LabeledImage> {
    let cfg = SynthConfig {
        n_clean: n,
        n_adversarial: n,
        ..Default::default()
    };
    synth_toy_dataset(&env.world, env.victim(), &cfg).unwrap().images
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Fraction of (adversarial, clean) pairs ranked correctly, ties as half.
fn pairwise_auc(rows: &[&Value]) -> f64 {
    let score = |r: &&Value| r["score"].as_f64().unwrap();
    let adv: Vec<f64> = rows.iter().filter(|r| r["truth"] == "ADVERSARIAL").map(score).collect();
    let clean: Vec<f64> = rows.iter().filter(|r| r["truth"] == "CLEAN").map(score).collect();
    let mut wins = 0.0;
    for a in &adv {
        for c in &clean {
            wins += if a < c {
                1.0
            } else if a == c {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (adv.len() * clean.len()) as f64
}

#[test]
fn written_metrics_recompute_from_verdicts() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let images = small_set(&env, 40);
    let cfg = EvalConfig {
        seeds: vec![3, 4],
        ..Default::default()
    };
    let eval = evaluate(env.victim(), &env.zoo, &cfg, &images).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), "evaluate", &cfg, &env.zoo, &[eval]).unwrap();

    let verdicts = read_jsonl(&dir.path().join(VERDICTS_FILE));
    let mut by_seed: BTreeMap<u64, Vec<&Value>> = BTreeMap::new();
    for v in &verdicts {
        let predicted = if v["score"].as_f64().unwrap() < v["threshold"].as_f64().unwrap() { "ADVERSARIAL" } else { "CLEAN" };
        assert_eq!(v["label"], predicted);
        by_seed.entry(v["seed"].as_u64().unwrap()).or_default().push(v);
    }
    assert_eq!(by_seed.keys().copied().collect::<Vec<_>>(), vec![3, 4]);

    let mut reader = csv::Reader::from_path(dir.path().join(SUMMARY_FILE)).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut checked = 0;
    for row in reader.records().map(Result::unwrap) {
        let Ok(seed) = row[col("seed")].parse::<u64>() else { continue };
        let rows = &by_seed[&seed];
        let tp = rows.iter().filter(|r| r["truth"] == "ADVERSARIAL" && r["label"] == "ADVERSARIAL").count() as f64;
        let tn = rows.iter().filter(|r| r["truth"] == "CLEAN" && r["label"] == "CLEAN").count() as f64;
        let pos = rows.iter().filter(|r| r["truth"] == "ADVERSARIAL").count() as f64;
        let neg = rows.len() as f64 - pos;
        let num = |name: &str| row[col(name)].parse::<f64>().unwrap();
        assert_eq!(row[col("n_images")].parse::<usize>().unwrap(), rows.len());
        assert!((num("accuracy") - (tp + tn) / rows.len() as f64).abs() < 1e-12);
        assert!((num("tpr") - tp / pos).abs() < 1e-12);
        assert!((num("fpr") - (neg - tn) / neg).abs() < 1e-12);
        assert!((num("auc") - pairwise_auc(rows)).abs() < 1e-12);
        checked += 1;
    }
    assert_eq!(checked, 2);
}

#[test]
fn empty_report_writes_only_metadata() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), "sweep", &EvalConfig::default(), &env.zoo, &[]).unwrap();
    assert!(!dir.path().join(VERDICTS_FILE).exists());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(META_FILE)).unwrap()).unwrap();
    assert!(!meta["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn generator_and_encoder_draws_are_uniform() {
    let cfg = ToyZooConfig {
        n_generators: 4,
        ..Default::default()
    };
    let (zoo, _) = cfg.build();
    let trials = 10_000;
    let mut gens: BTreeMap<String, usize> = BTreeMap::new();
    let mut single: BTreeMap<String, usize> = BTreeMap::new();
    let mut triple: BTreeMap<String, usize> = BTreeMap::new();
    for s in 0..trials {
        *gens.entry(select_generator(&zoo, s).unwrap().model_id().into()).or_default() += 1;
        *single.entry(select_encoders(&zoo, 1, s).unwrap()[0].model_id().into()).or_default() += 1;
        for e in select_encoders(&zoo, 3, s).unwrap() {
            *triple.entry(e.model_id().into()).or_default() += 1;
        }
    }
    let share = |m: &BTreeMap<String, usize>| m.values().map(|&c| c as f64 / trials as f64).collect::<Vec<_>>();
    assert_eq!(gens.len(), 4);
    assert!(share(&gens).iter().all(|f| (0.225..=0.275).contains(f)), "{gens:?}");
    assert_eq!(single.len(), 10);
    assert!(share(&single).iter().all(|f| (0.08..=0.12).contains(f)), "{single:?}");
    assert!(share(&triple).iter().all(|f| (0.27..=0.33).contains(f)), "{triple:?}");
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn score_variance_shrinks_with_ensemble_size() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let x = env.world.sample(2, 123);
    let var = |n: usize| {
        let scores: Vec<f64> = (0..200)
            .map(|seed| {
                let mode = DetectorMode::Stochastic { n_encoders: n, otu_scale: 0.0 };
                let d = Detector::new(env.victim().clone(), env.zoo.clone(), mode, seed).unwrap();
                d.score(&x, "probe").unwrap()
            })
            .collect();
        sample_variance(&scores)
    };
    let v: Vec<f64> = [1, 3, 5, 10].into_iter().map(var).collect();
    // At n = 10 only the generation seed still varies.
    assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
}

#[test]
fn small_noise_rarely_flips_clean_labels() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let k = env.world.num_classes();
    let threshold = 0.6;
    let label = |scale: f64, x: &regen_detect::ImageTensor, id: &str| {
        let mode = DetectorMode::Stochastic { n_encoders: 10, otu_scale: scale };
        let d = Detector::new(env.victim().clone(), env.zoo.clone(), mode, 9).unwrap();
        d.detect(x, id, threshold).unwrap().label
    };
    let unchanged = (0..200u64)
        .filter(|&i| {
            let x = env.world.sample(i as usize % k, 5_000 + i);
            let id = format!("clean-{i}");
            label(0.0, &x, &id) == label(5e-4, &x, &id)
        })
        .count();
    assert!(unchanged >= 190, "{unchanged}/200 labels unchanged");
}

#[test]
fn full_noiseless_sweep_cell_matches_vanilla() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let images = small_set(&env, 20);
    let base = EvalConfig {
        seeds: vec![0, 1],
        ..Default::default()
    };
    let grid = SweepGrid {
        n_encoders: vec![10],
        otu_scales: vec![0.0],
    };
    let cells = sweep(env.victim(), &env.zoo, &base, &grid, &images).unwrap();
    let stochastic = cells[0].evaluation.as_ref().unwrap();
    let vanilla_cfg = EvalConfig {
        detector: DetectorMode::Vanilla {
            generator_id: None,
            encoder_ids: None,
        },
        ..base
    };
    let vanilla = evaluate(env.victim(), &env.zoo, &vanilla_cfg, &images).unwrap();
    let a: Vec<_> = stochastic.records().map(|r| (r.image_id.clone(), r.score, r.label)).collect();
    let b: Vec<_> = vanilla.records().map(|r| (r.image_id.clone(), r.score, r.label)).collect();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!((x.1 - y.1).abs() <= 1e-9);
        assert_eq!(x.2, y.2);
    }
}

#[test]
fn balanced_clean_ratio_reproduces_evaluation_auc() {
    let env = Environment::from_toy(&ToyZooConfig::default()).unwrap();
    let images = small_set(&env, 30);
    let cfg = EvalConfig {
        seeds: vec![2],
        ..Default::default()
    };
    let eval = evaluate(env.victim(), &env.zoo, &cfg, &images).unwrap();
    let rows = clean_ratio_sweep(env.victim(), &env.zoo, &cfg, &images, &[0.5]).unwrap();
    let ensemble = rows.iter().find(|r| r.encoder == "ensemble").unwrap();
    assert_eq!(ensemble.n_clean, ensemble.n_adversarial);
    assert_eq!(ensemble.auc, eval.runs[0].report.auc);
    assert!(rows.iter().filter(|r| r.encoder != "ensemble").count() >= 1);
    assert!(images.iter().any(|i| i.label == Label::Adversarial));
}
