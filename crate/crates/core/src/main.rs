use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use regen_detect::adaptive::{AdapterModel, AdaptiveTable};
use regen_detect::calibrate::{calibrate_per_attack, calibrate_threshold, score_dataset, CalibrationResult, LabeledImage};
use regen_detect::harness::dataset::{attack_dataset, synth_toy_dataset, write_dataset};
use regen_detect::harness::report::{write_csv, write_json, write_jsonl, write_meta};
use regen_detect::harness::{
    clean_ratio_sweep, evaluate, ingest, run_adaptive_experiment, sweep, train_toy_adapter, write_report, Environment,
    HarnessError, RunConfig,
};
use regen_detect::stochastic::Detector;
use regen_detect::ImageTensor;

#[derive(Parser)]
#[command(version, about = "Detect adversarial images by regenerating them from the victim's caption")]
struct Cli {
    /// Run config (JSON). Every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed list in the config with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Zoo manifest (JSON). Defaults to the toy zoo from the config.
    #[arg(long, global = true)]
    zoo: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the detection threshold on a labeled dataset.
    Calibrate {
        /// Also write one threshold per attack to calibration_per_attack.json.
        #[arg(long)]
        per_attack: bool,
    },
    /// Run the detector on one image.
    Detect {
        image: PathBuf,
        #[arg(long, conflicts_with = "calibration")]
        threshold: Option<f64>,
        /// A calibration.json written by `calibrate`.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Evaluate the configured detector over every seed.
    Evaluate,
    /// Evaluate a grid of ensemble sizes and noise scales.
    Sweep,
    /// Accuracy and AUC as the share of clean images varies.
    CleanRatio,
    /// Attack the clean images of the configured dataset, or of a synthetic
    /// toy set without one, and write the result to the output directory.
    Attack,
    /// Train the feature adapter used by the adaptive attack.
    TrainAdapter,
    /// Attack with the adaptive attacker and measure each defense cell.
    AdaptiveEval {
        /// Adapter checkpoint from `train-adapter`; trained on the fly otherwise.
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn environment(cli: &Cli, cfg: &RunConfig) -> Result<Environment, HarnessError> {
    match &cli.zoo {
        Some(p) => Environment::load(p),
        None => Environment::from_toy(&cfg.zoo),
    }
}

fn dataset(cfg: &RunConfig, env: &Environment) -> Result<Vec<LabeledImage>, HarnessError> {
    match &cfg.dataset {
        Some(path) => {
            let ds = ingest(path)?;
            for f in &ds.failures {
                eprintln!("skipping {}: {}", f.image_id, f.message);
            }
            Ok(ds.images)
        }
        None => Ok(synth_toy_dataset(&env.world, env.victim(), &cfg.synth)?.images),
    }
}

#[derive(Serialize)]
struct AdaptiveRow {
    cell: String,
    seeds: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    clean_fpr_mean: f64,
}

fn adaptive_rows(table: &AdaptiveTable) -> Vec<AdaptiveRow> {
    table
        .cells
        .iter()
        .map(|c| AdaptiveRow {
            cell: c.label.clone(),
            seeds: c.per_seed_accuracy.len(),
            accuracy_mean: c.accuracy_mean,
            accuracy_std: c.accuracy_std,
            clean_fpr_mean: c.clean_fpr_mean,
        })
        .collect()
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let env = environment(cli, &cfg)?;
    let out = cli.out_dir.as_path();
    let seeds = cfg.evaluation.seeds.clone();
    match &cli.command {
        Command::Calibrate { per_attack } => {
            let images = dataset(&cfg, &env)?;
            let detector = Detector::new(env.victim().clone(), env.zoo.clone(), cfg.evaluation.detector.clone(), seeds[0])?;
            let scored = score_dataset(&detector, &images);
            let result = calibrate_threshold(&scored.samples)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("calibration.json");
            write_json(&path, &result)?;
            let mut files = vec![path];
            if *per_attack {
                let path = out.join("calibration_per_attack.json");
                write_json(&path, &calibrate_per_attack(&scored.samples, &images)?)?;
                files.push(path);
            }
            write_meta(out, "calibrate", &cfg, &env.zoo, vec![seeds[0]], vec![cfg.evaluation.cell_label()], &files, vec![])?;
            println!(
                "threshold {:.6}  tpr {:.4}  fpr {:.4}  youden {:.4}",
                result.threshold, result.tpr_at_threshold, result.fpr_at_threshold, result.youden
            );
        }
        Command::Detect {
            image,
            threshold,
            calibration,
        } => {
            let threshold = match (threshold, calibration) {
                (Some(t), _) => *t,
                (None, Some(p)) => {
                    let c: CalibrationResult = serde_json::from_str(&std::fs::read_to_string(p)?)
                        .map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", p.display())))?;
                    c.threshold
                }
                (None, None) => return Err(HarnessError::InvalidConfig("detect needs --threshold or --calibration".into())),
            };
            let x = ImageTensor::load(image).map_err(std::io::Error::other)?;
            let id = image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            let detector = Detector::new(env.victim().clone(), env.zoo.clone(), cfg.evaluation.detector.clone(), seeds[0])?;
            let verdict = detector.detect(&x, &id, threshold)?;
            println!("{}", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
        }
        Command::Evaluate => {
            let images = dataset(&cfg, &env)?;
            let e = evaluate(env.victim(), &env.zoo, &cfg.evaluation, &images)?;
            write_report(out, "evaluate", &cfg, &env.zoo, std::slice::from_ref(&e))?;
            let s = &e.summary;
            println!(
                "{}: accuracy {:.4} ± {:.4}  tpr {:.4}  fpr {:.4}",
                e.cell, s.accuracy.mean, s.accuracy.std, s.tpr.mean, s.fpr.mean
            );
        }
        Command::Sweep => {
            let images = dataset(&cfg, &env)?;
            let cells = sweep(env.victim(), &env.zoo, &cfg.evaluation, &cfg.sweep, &images)?;
            let evaluations: Vec<_> = cells.iter().filter_map(|c| c.evaluation.clone()).collect();
            write_report(out, "sweep", &cfg, &env.zoo, &evaluations)?;
            for c in &cells {
                match (&c.evaluation, &c.error) {
                    (Some(e), _) => println!("n={:<3} scale={:<8} accuracy {:.4}", c.n_encoders, c.otu_scale, e.summary.accuracy.mean),
                    (None, Some(err)) => println!("n={:<3} scale={:<8} failed: {err}", c.n_encoders, c.otu_scale),
                    (None, None) => {}
                }
            }
        }
        Command::CleanRatio => {
            let images = dataset(&cfg, &env)?;
            let rows = clean_ratio_sweep(env.victim(), &env.zoo, &cfg.evaluation, &images, &cfg.clean_ratios)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("clean_ratio.csv");
            write_csv(&path, &rows)?;
            write_meta(out, "clean-ratio", &cfg, &env.zoo, seeds, vec![cfg.evaluation.cell_label()], &[path], vec![])?;
            for r in rows.iter().filter(|r| r.encoder == "ensemble") {
                println!("seed {} ratio {:.3}: auc {:?} accuracy {:.4}", r.seed, r.ratio, r.auc, r.accuracy);
            }
        }
        Command::Attack => {
            let ds = match &cfg.dataset {
                Some(path) => attack_dataset(&ingest(path)?, env.victim(), &cfg.synth)?,
                None => synth_toy_dataset(&env.world, env.victim(), &cfg.synth)?,
            };
            let dir = out.join("dataset");
            write_dataset(&dir, &ds.images)?;
            let records = dir.join("attacks.jsonl");
            write_jsonl(&records, &ds.records)?;
            let warnings = ds.failed_attacks.iter().map(|id| format!("attack on {id} left the output unchanged")).collect();
            write_meta(out, "attack", &cfg, &env.zoo, vec![cfg.synth.seed], vec![], &[dir.join("manifest.json"), records], warnings)?;
            println!("wrote {} images to {}", ds.images.len(), dir.display());
        }
        Command::TrainAdapter => {
            let model = train_toy_adapter(&env, &cfg.adapter)?;
            std::fs::create_dir_all(out)?;
            let (bin, json) = model.save(&out.join("adapter"))?;
            write_meta(out, "train-adapter", &cfg, &env.zoo, vec![cfg.adapter.train.seed], vec![], &[bin, json], vec![])?;
            let last = model.history.last();
            println!(
                "best epoch {}  final train {:.5}  val {:.5}",
                model.best_epoch,
                last.map_or(f64::NAN, |h| h.train_loss),
                last.map_or(f64::NAN, |h| h.val_loss)
            );
        }
        Command::AdaptiveEval { adapter } => {
            let model = match adapter {
                Some(p) => AdapterModel::load(p)?,
                None => train_toy_adapter(&env, &cfg.adapter)?,
            };
            let table = run_adaptive_experiment(&env, Arc::new(model), &cfg.adaptive)?;
            std::fs::create_dir_all(out)?;
            let csv = out.join("adaptive.csv");
            write_csv(&csv, &adaptive_rows(&table))?;
            let json = out.join("adaptive.json");
            write_json(&json, &table)?;
            let cells = table.cells.iter().map(|c| c.label.clone()).collect();
            write_meta(out, "adaptive-eval", &cfg, &env.zoo, cfg.adaptive.seeds.clone(), cells, &[csv, json], vec![])?;
            for c in &table.cells {
                println!("{:<40} accuracy {:.3} ± {:.3}", c.label, c.accuracy_mean, c.accuracy_std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
