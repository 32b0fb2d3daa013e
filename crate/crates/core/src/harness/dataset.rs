//! Labeled image sets: manifest ingestion, and synthetic toy sets built by
//! attacking toy-world samples.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{bim, cw, deepfool, fgsm, pgd, AdvExample, AdvRecord, AttackBudget, AttackError};
use crate::calibrate::{ImageSource, LabeledImage};
use crate::image::ImageTensor;
use crate::seed::derive_seed;
use crate::similarity::Label;
use crate::zoo::toy::ToyWorld;
use crate::zoo::{BackendError, VictimHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestSchemaError {
    #[error("reading dataset manifest {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset manifest {path} does not match the schema: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("duplicate image_id `{0}`")]
    DuplicateImageId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeError {
    pub image_id: String,
    pub path: PathBuf,
    pub message: String,
}

/// Decoded images from a manifest, in manifest order, minus the entries
/// that failed to decode.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<LabeledImage>,
    pub failures: Vec<DecodeError>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self, ManifestSchemaError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestSchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Self = serde_json::from_str(&text).map_err(|source| ManifestSchemaError::Json {
            path: path.display().to_string(),
            source,
        })?;
        manifest.check_unique()?;
        Ok(manifest)
    }

    pub fn check_unique(&self) -> Result<(), ManifestSchemaError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(ManifestSchemaError::DuplicateImageId(e.image_id.clone()));
            }
        }
        Ok(())
    }
}

/// Reads a manifest and decodes every image to `[0, 1]`.
pub fn ingest(manifest_path: &Path) -> Result<Dataset, ManifestSchemaError> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let decoded: Vec<Result<LabeledImage, DecodeError>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
            let image = ImageTensor::load(&path).map_err(|err| DecodeError {
                image_id: e.image_id.clone(),
                path: path.clone(),
                message: err.to_string(),
            })?;
            Ok(LabeledImage {
                image_id: e.image_id.clone(),
                label: e.label,
                attack_name: e.attack_name.clone(),
                source: ImageSource::Tensor(image),
            })
        })
        .collect();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for d in decoded {
        match d {
            Ok(i) => images.push(i),
            Err(f) => {
                log::warn!("cannot decode {} ({}): {}", f.image_id, f.path.display(), f.message);
                failures.push(f);
            }
        }
    }
    Ok(Dataset {
        manifest,
        images,
        failures,
    })
}

/// Writes images as 16-bit PNGs next to a `manifest.json`.
pub fn write_dataset(dir: &Path, images: &[LabeledImage]) -> Result<DatasetManifest, std::io::Error> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for item in images {
        let tensor = item.load().map_err(std::io::Error::other)?;
        let file = PathBuf::from(format!("{}.png", item.image_id));
        tensor.save_png16(&dir.join(&file)).map_err(std::io::Error::other)?;
        entries.push(ManifestEntry {
            image_id: item.image_id.clone(),
            path: file,
            label: item.label,
            attack_name: item.attack_name.clone(),
            class_label: None,
        });
    }
    let manifest = DatasetManifest { entries };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    DeepFool,
    Cw,
}

impl AttackKind {
    pub fn run(
        self,
        victim: &VictimHandle,
        x: &ImageTensor,
        y: usize,
        budget: AttackBudget,
        seed: u64,
    ) -> Result<AdvExample, AttackError> {
        match self {
            AttackKind::Fgsm => fgsm(victim, x, y, budget),
            AttackKind::Bim => bim(victim, x, y, budget),
            AttackKind::Pgd => pgd(victim, x, y, budget, Some(seed)),
            AttackKind::DeepFool => match deepfool(victim, x, y, budget) {
                Err(AttackError::NoBoundaryFound { last }) => Ok(*last),
                other => other,
            },
            AttackKind::Cw => cw(victim, x, y, budget, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clean: usize,
    pub n_adversarial: usize,
    /// Adversarial images cycle through these attacks.
    pub attacks: Vec<AttackKind>,
    pub budget: AttackBudget,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clean: 200,
            n_adversarial: 200,
            attacks: vec![AttackKind::Fgsm, AttackKind::Pgd],
            budget: AttackBudget::linf(8.0 / 255.0, 20, 2.0 / 255.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: Vec<LabeledImage>,
    /// Attacked images whose victim output did not change.
    pub failed_attacks: Vec<String>,
    /// One record per attacked image, keyed by its image id.
    pub records: Vec<AdvRecord>,
}

/// Attacks each `(id, image, true class)` with the configured attacks in
/// turn. Attack `i` is seeded by `i`.
fn attack_all(
    victim: &VictimHandle,
    cfg: &SynthConfig,
    sources: Vec<(String, ImageTensor, usize)>,
) -> Result<Vec<(LabeledImage, AdvRecord)>, AttackError> {
    if !sources.is_empty() && cfg.attacks.is_empty() {
        return Err(AttackError::InvalidBudget("no attacks configured".into()));
    }
    sources
        .into_par_iter()
        .enumerate()
        .map(|(i, (id, x, y))| {
            let kind = cfg.attacks[i % cfg.attacks.len()];
            let adv = kind.run(victim, &x, y, cfg.budget, derive_seed(cfg.seed, "attack-start", i as u64))?;
            let record = AdvRecord {
                original_id: id.clone(),
                ..adv.record()
            };
            let item = LabeledImage::tensor(id, Label::Adversarial, adv.x_adv).with_attack(adv.attack_name);
            Ok((item, record))
        })
        .collect()
}

fn finish(mut images: Vec<LabeledImage>, attacked: Vec<(LabeledImage, AdvRecord)>) -> SynthDataset {
    let mut failed_attacks = Vec::new();
    let mut records = Vec::with_capacity(attacked.len());
    for (item, record) in attacked {
        if !record.success {
            failed_attacks.push(item.image_id.clone());
        }
        images.push(item);
        records.push(record);
    }
    if !failed_attacks.is_empty() {
        log::warn!("{} of {} attacks left the victim's output unchanged", failed_attacks.len(), records.len());
    }
    SynthDataset {
        images,
        failed_attacks,
        records,
    }
}

/// Clean toy samples plus attacked samples drawn from disjoint seeds, with
/// classes cycling so both halves are balanced. Clean images come first.
pub fn synth_toy_dataset(world: &ToyWorld, victim: &VictimHandle, cfg: &SynthConfig) -> Result<SynthDataset, AttackError> {
    let k = world.num_classes();
    let images: Vec<LabeledImage> = (0..cfg.n_clean)
        .map(|i| {
            let x = world.sample(i % k, derive_seed(cfg.seed, "clean", i as u64));
            LabeledImage::tensor(format!("clean-{i:05}"), Label::Clean, x)
        })
        .collect();
    let sources = (0..cfg.n_adversarial)
        .map(|i| {
            let y = i % k;
            (format!("adv-{i:05}"), world.sample(y, derive_seed(cfg.seed, "attacked", i as u64)), y)
        })
        .collect();
    Ok(finish(images, attack_all(victim, cfg, sources)?))
}

/// Keeps every image of `dataset` and adds an attacked copy `<id>-adv` of
/// each clean one. The true class is the entry's `class_label` when the
/// victim knows it, else the victim's own prediction. `n_clean` and
/// `n_adversarial` are ignored.
pub fn attack_dataset(dataset: &Dataset, victim: &VictimHandle, cfg: &SynthConfig) -> Result<SynthDataset, AttackError> {
    let dv = victim.differentiable().map_err(AttackError::from_backend)?;
    let class_of: std::collections::HashMap<&str, &str> = dataset
        .manifest
        .entries
        .iter()
        .filter_map(|e| Some((e.image_id.as_str(), e.class_label.as_deref()?)))
        .collect();
    let mut sources = Vec::new();
    for item in dataset.images.iter().filter(|i| i.label == Label::Clean) {
        let x = item.load().map_err(|e| BackendError::failure(&item.image_id, e))?;
        let named = class_of
            .get(item.image_id.as_str())
            .and_then(|c| dv.class_names().iter().position(|n| n == c));
        let y = named.unwrap_or_else(|| dv.predict(&x));
        sources.push((format!("{}-adv", item.image_id), x, y));
    }
    Ok(finish(dataset.images.clone(), attack_all(victim, cfg, sources)?))
}
