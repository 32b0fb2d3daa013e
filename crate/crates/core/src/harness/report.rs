//! Run artifacts: raw verdicts as JSONL, a CSV summary, and run metadata.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiment::Evaluation;
use super::metrics::VerdictRecord;
use super::HarnessError;
use crate::stochastic::DetectorMode;
use crate::zoo::ModelZoo;

pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const META_FILE: &str = "run_meta.json";

/// SHA-256 of the config's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIds {
    pub victims: Vec<String>,
    pub generators: Vec<String>,
    pub encoders: Vec<String>,
}

impl ModelIds {
    pub fn of(zoo: &ModelZoo) -> Self {
        Self {
            victims: zoo.victims.list().iter().map(|v| v.model_id().to_string()).collect(),
            generators: zoo.generator_ids(),
            encoders: zoo.encoder_ids(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub models: ModelIds,
    pub cells: Vec<String>,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

/// One row of `summary.csv`. Per-seed rows carry the seed; the two
/// aggregate rows per cell carry `mean` and `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub cell: String,
    pub n_encoders: Option<usize>,
    pub otu_scale: Option<f64>,
    pub seed: String,
    pub n_images: usize,
    pub threshold: Option<f64>,
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub auc: Option<f64>,
    pub clean_mean: Option<f64>,
    pub clean_min: Option<f64>,
    pub clean_max: Option<f64>,
    pub adversarial_mean: Option<f64>,
    pub adversarial_min: Option<f64>,
    pub adversarial_max: Option<f64>,
    pub failures: usize,
}

fn mode_shape(mode: &DetectorMode, encoders: usize) -> (Option<usize>, Option<f64>) {
    match mode {
        DetectorMode::Vanilla { encoder_ids, .. } => (Some(encoder_ids.as_ref().map_or(encoders, Vec::len)), Some(0.0)),
        DetectorMode::Stochastic { n_encoders, otu_scale } => (Some(*n_encoders), Some(*otu_scale)),
    }
}

pub fn summary_rows(evaluations: &[Evaluation], zoo_encoders: usize, config_hash: &str) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for e in evaluations {
        let (n, scale) = mode_shape(&e.config.detector, zoo_encoders);
        for run in &e.runs {
            let r = &run.report;
            rows.push(SummaryRow {
                config_hash: config_hash.to_string(),
                cell: e.cell.clone(),
                n_encoders: n,
                otu_scale: scale,
                seed: run.seed.to_string(),
                n_images: r.confusion.total(),
                threshold: Some(r.threshold),
                accuracy: r.accuracy,
                tpr: r.tpr,
                fpr: r.fpr,
                auc: r.auc,
                clean_mean: r.clean.map(|s| s.mean),
                clean_min: r.clean.map(|s| s.min),
                clean_max: r.clean.map(|s| s.max),
                adversarial_mean: r.adversarial.map(|s| s.mean),
                adversarial_min: r.adversarial.map(|s| s.min),
                adversarial_max: r.adversarial.map(|s| s.max),
                failures: r.failures.len(),
            });
        }
        let s = &e.summary;
        let total: usize = e.runs.iter().map(|r| r.report.confusion.total()).sum();
        let failures: usize = e.runs.iter().map(|r| r.report.failures.len()).sum();
        for (name, pick) in [("mean", true), ("std", false)] {
            let f = |m: crate::harness::metrics::MeanStd| if pick { m.mean } else { m.std };
            rows.push(SummaryRow {
                config_hash: config_hash.to_string(),
                cell: e.cell.clone(),
                n_encoders: n,
                otu_scale: scale,
                seed: name.into(),
                n_images: total,
                threshold: None,
                accuracy: f(s.accuracy),
                tpr: f(s.tpr),
                fpr: f(s.fpr),
                auc: s.auc.map(f),
                clean_mean: s.clean_mean_similarity.map(f),
                clean_min: None,
                clean_max: None,
                adversarial_mean: s.adversarial_mean_similarity.map(f),
                adversarial_min: None,
                adversarial_max: None,
                failures,
            });
        }
    }
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `run_meta.json` listing `files` and itself.
#[allow(clippy::too_many_arguments)]
pub fn write_meta<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    zoo: &ModelZoo,
    seeds: Vec<u64>,
    cells: Vec<String>,
    files: &[PathBuf],
    warnings: Vec<String>,
) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let meta_path = out_dir.join(META_FILE);
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned());
    let mut names: Vec<String> = files.iter().filter_map(name).collect();
    names.extend(name(&meta_path));
    let meta = RunMeta {
        command: command.to_string(),
        config_hash: config_hash(config),
        config: serde_json::to_value(config).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?,
        seeds,
        models: ModelIds::of(zoo),
        cells,
        files: names,
        warnings,
    };
    write_json(&meta_path, &meta)?;
    Ok(meta_path)
}

#[derive(Serialize)]
struct HashedRecord<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a VerdictRecord,
}

/// Writes `verdicts.jsonl`, `summary.csv`, and `run_meta.json` into
/// `out_dir`. With no evaluations only the metadata is written, with a
/// warning. Returns the paths written.
pub fn write_report<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    zoo: &ModelZoo,
    evaluations: &[Evaluation],
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let hash = config_hash(config);
    let mut written = Vec::new();
    let mut warnings = Vec::new();
    if evaluations.is_empty() {
        log::warn!("no evaluations to report; writing metadata only");
        warnings.push("no evaluations to report".to_string());
    } else {
        let path = out_dir.join(VERDICTS_FILE);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for rec in evaluations.iter().flat_map(|e| e.records()) {
            let line = HashedRecord {
                config_hash: &hash,
                record: rec,
            };
            serde_json::to_writer(&mut f, &line).map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        written.push(path);
        let path = out_dir.join(SUMMARY_FILE);
        write_csv(&path, &summary_rows(evaluations, zoo.encoders.len(), &hash))?;
        written.push(path);
    }
    let mut seeds: Vec<u64> = evaluations.iter().flat_map(|e| e.config.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let cells: Vec<String> = evaluations.iter().map(|e| e.cell.clone()).collect();
    written.push(write_meta(out_dir, command, config, zoo, seeds, cells, &written, warnings)?);
    Ok(written)
}
