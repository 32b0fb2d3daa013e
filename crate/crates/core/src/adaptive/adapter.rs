//! A small conv-then-dense regressor from victim features to generator
//! conditioning, trained with squared L2 loss and Adam.
//!
//! Layout: standardize input → conv3×3 (1→c1) → ReLU → conv3×3 (c1→c2) →
//! ReLU → [2×2 max-pool] → dense → ReLU → dense → de-standardize.
//! Backpropagation is written out by hand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },
    #[error("need at least 2 feature pairs, got {0}")]
    TooFewPairs(usize),
    #[error("feature pair {index} has shape ({got_in}, {got_out}), expected ({want_in}, {want_out})")]
    ShapeMismatch {
        index: usize,
        got_in: usize,
        got_out: usize,
        want_in: usize,
        want_out: usize,
    },
    #[error("invalid adapter configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Shapes and widths of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
    pub max_pool: bool,
}

impl AdapterSpec {
    pub fn new(input: (usize, usize), output: (usize, usize)) -> Self {
        Self {
            in_rows: input.0,
            in_cols: input.1,
            out_rows: output.0,
            out_cols: output.1,
            conv_channels: [8, 16],
            hidden: 128,
            max_pool: false,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_rows * self.in_cols
    }

    pub fn out_len(&self) -> usize {
        self.out_rows * self.out_cols
    }

    fn pooled_dims(&self) -> (usize, usize) {
        if self.max_pool {
            (self.in_rows / 2, self.in_cols / 2)
        } else {
            (self.in_rows, self.in_cols)
        }
    }

    fn flat_len(&self) -> usize {
        let (r, c) = self.pooled_dims();
        self.conv_channels[1] * r * c
    }

    fn layout(&self) -> Layout {
        let [c1, c2] = self.conv_channels;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv1_w = take(c1 * 9);
        let conv1_b = take(c1);
        let conv2_w = take(c2 * c1 * 9);
        let conv2_b = take(c2);
        let fc1_w = take(self.hidden * self.flat_len());
        let fc1_b = take(self.hidden);
        let fc2_w = take(self.out_len() * self.hidden);
        let fc2_b = take(self.out_len());
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            total: at,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.in_len() == 0 || self.out_len() == 0 || self.hidden == 0 || self.conv_channels.contains(&0) {
            return Err(AdapterError::InvalidConfig("all sizes must be positive".into()));
        }
        if self.max_pool && (self.in_rows < 2 || self.in_cols < 2) {
            return Err(AdapterError::InvalidConfig("max pooling needs at least 2×2 inputs".into()));
        }
        Ok(())
    }
}

type Span = std::ops::Range<usize>;

struct Layout {
    conv1_w: Span,
    conv1_b: Span,
    conv2_w: Span,
    conv2_b: Span,
    fc1_w: Span,
    fc1_b: Span,
    fc2_w: Span,
    fc2_b: Span,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Features with (near) zero spread keep unit scale.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize) -> Self {
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0.0;
        for row in rows {
            for i in 0..n {
                sum[i] += row[i];
                sq[i] += row[i] * row[i];
            }
            count += 1.0;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

/// A trained (or freshly initialized) adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub spec: AdapterSpec,
    pub params: Vec<f64>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

struct Cache {
    p0: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    pooled: Vec<f64>,
    pool_arg: Vec<usize>,
    z3: Vec<f64>,
    out: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Patch matrix of a same-padded 3×3 convolution: row `p` holds the
/// `cin × 9` taps feeding output position `p`.
fn im2col(input: &[f64], cin: usize, rows: usize, cols: usize) -> Vec<f64> {
    let plane = rows * cols;
    let k = cin * 9;
    let mut out = vec![0.0; plane * k];
    for y in 0..rows {
        for x in 0..cols {
            let row = &mut out[(y * cols + x) * k..(y * cols + x + 1) * k];
            for i in 0..cin {
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy < 1 || sy > rows {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x + kx;
                        if sx < 1 || sx > cols {
                            continue;
                        }
                        row[i * 9 + ky * 3 + kx] = input[i * plane + (sy - 1) * cols + sx - 1];
                    }
                }
            }
        }
    }
    out
}

fn col2im(patches: &[f64], cin: usize, rows: usize, cols: usize) -> Vec<f64> {
    let plane = rows * cols;
    let k = cin * 9;
    let mut out = vec![0.0; cin * plane];
    for y in 0..rows {
        for x in 0..cols {
            let row = &patches[(y * cols + x) * k..(y * cols + x + 1) * k];
            for i in 0..cin {
                for ky in 0..3 {
                    let sy = y + ky;
                    if sy < 1 || sy > rows {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x + kx;
                        if sx < 1 || sx > cols {
                            continue;
                        }
                        out[i * plane + (sy - 1) * cols + sx - 1] += row[i * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
    out
}

/// Same-padded 3×3 convolution over `[channel][row][col]` planes, given
/// the input's patch matrix.
fn conv3(patches: &[f64], cout: usize, plane: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let k = w.len() / cout;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let wo = &w[o * k..(o + 1) * k];
        for (p, patch) in patches.chunks_exact(k).enumerate() {
            out[o * plane + p] = b[o] + wo.iter().zip(patch).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

/// Backward of [`conv3`]: accumulates weight and bias gradients and
/// returns the gradient on the patch matrix when `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv3_backward(
    patches: &[f64],
    grad_out: &[f64],
    cout: usize,
    plane: usize,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let k = w.len() / cout;
    let mut gp = want_input.then(|| vec![0.0; patches.len()]);
    for o in 0..cout {
        let go = &grad_out[o * plane..(o + 1) * plane];
        gb[o] += go.iter().sum::<f64>();
        let wo = &w[o * k..(o + 1) * k];
        let gwo = &mut gw[o * k..(o + 1) * k];
        for (p, patch) in patches.chunks_exact(k).enumerate() {
            let g = go[p];
            if g == 0.0 {
                continue;
            }
            for (a, c) in gwo.iter_mut().zip(patch) {
                *a += g * c;
            }
            if let Some(gp) = gp.as_mut() {
                for (a, c) in gp[p * k..(p + 1) * k].iter_mut().zip(wo) {
                    *a += g * c;
                }
            }
        }
    }
    gp
}

fn dense(input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    w.chunks_exact(input.len())
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn dense_backward(input: &[f64], grad_out: &[f64], w: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n = input.len();
    let mut gin = vec![0.0; n];
    for (o, &g) in grad_out.iter().enumerate() {
        gb[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n..(o + 1) * n];
        let grow = &mut gw[o * n..(o + 1) * n];
        for i in 0..n {
            grow[i] += g * input[i];
            gin[i] += g * row[i];
        }
    }
    gin
}

impl AdapterModel {
    /// Network with weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`
    /// and identity standardization. (He-normal weights with zero biases
    /// train far more slowly on this architecture.)
    pub fn init(spec: AdapterSpec, seed: u64) -> Result<Self, AdapterError> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; layout.total];
        let mut r = rng(derive_seed(seed, "adapter-init", 0));
        let mut fill = |spans: [&Span; 2], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for span in spans {
                for p in &mut params[span.clone()] {
                    *p = r.random_range(-bound..bound);
                }
            }
        };
        fill([&layout.conv1_w, &layout.conv1_b], 9);
        fill([&layout.conv2_w, &layout.conv2_b], 9 * spec.conv_channels[0]);
        fill([&layout.fc1_w, &layout.fc1_b], spec.flat_len());
        fill([&layout.fc2_w, &layout.fc2_b], spec.hidden);
        Ok(Self {
            input_norm: Standardizer::identity(spec.in_len()),
            output_norm: Standardizer::identity(spec.out_len()),
            spec,
            params,
            train_config: TrainConfig::default(),
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    fn forward_cached(&self, z: &[f64]) -> Cache {
        let s = &self.spec;
        let l = s.layout();
        let p = &self.params;
        let [c1, c2] = s.conv_channels;
        let plane = s.in_rows * s.in_cols;
        let a0 = self.input_norm.forward(z);
        let p0 = im2col(&a0, 1, s.in_rows, s.in_cols);
        let z1 = conv3(&p0, c1, plane, &p[l.conv1_w.clone()], &p[l.conv1_b.clone()]);
        let p1 = im2col(&relu(&z1), c1, s.in_rows, s.in_cols);
        let z2 = conv3(&p1, c2, plane, &p[l.conv2_w.clone()], &p[l.conv2_b.clone()]);
        let a2 = relu(&z2);
        let (pooled, pool_arg) = if s.max_pool {
            let (pr, pc) = s.pooled_dims();
            let mut out = Vec::with_capacity(c2 * pr * pc);
            let mut arg = Vec::with_capacity(c2 * pr * pc);
            for c in 0..c2 {
                for y in 0..pr {
                    for x in 0..pc {
                        let mut best = (usize::MAX, f64::NEG_INFINITY);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = c * s.in_rows * s.in_cols + (2 * y + dy) * s.in_cols + 2 * x + dx;
                                if a2[i] > best.1 {
                                    best = (i, a2[i]);
                                }
                            }
                        }
                        out.push(best.1);
                        arg.push(best.0);
                    }
                }
            }
            (out, arg)
        } else {
            (a2, Vec::new())
        };
        let z3 = dense(&pooled, &p[l.fc1_w.clone()], &p[l.fc1_b.clone()]);
        let a3 = relu(&z3);
        let out = dense(&a3, &p[l.fc2_w.clone()], &p[l.fc2_b.clone()]);
        Cache {
            p0,
            z1,
            p1,
            z2,
            pooled,
            pool_arg,
            z3,
            out,
        }
    }

    /// Backpropagates a gradient on the standardized output. Parameter
    /// gradients are added into `grad_params` when given; the gradient on
    /// the standardized input is returned when `want_input` is set.
    fn backward(&self, cache: &Cache, grad_out: &[f64], grad_params: Option<&mut [f64]>, want_input: bool) -> Option<Vec<f64>> {
        let s = &self.spec;
        let l = s.layout();
        let p = &self.params;
        let [c1, c2] = s.conv_channels;
        let mut scratch;
        let g = match grad_params {
            Some(g) => g,
            None => {
                scratch = vec![0.0; l.total];
                &mut scratch[..]
            }
        };
        let a3 = relu(&cache.z3);
        let (gw, rest) = g.split_at_mut(l.fc2_b.start);
        let g_a3 = dense_backward(&a3, grad_out, &p[l.fc2_w.clone()], &mut gw[l.fc2_w.clone()], &mut rest[..l.fc2_b.len()]);
        let g_z3: Vec<f64> = g_a3.iter().zip(&cache.z3).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let (gw, rest) = g.split_at_mut(l.fc1_b.start);
        let g_pooled = dense_backward(
            &cache.pooled,
            &g_z3,
            &p[l.fc1_w.clone()],
            &mut gw[l.fc1_w.clone()],
            &mut rest[..l.fc1_b.len()],
        );
        let plane = s.in_rows * s.in_cols;
        let g_a2 = if s.max_pool {
            let mut full = vec![0.0; c2 * plane];
            for (gv, &i) in g_pooled.iter().zip(&cache.pool_arg) {
                full[i] += gv;
            }
            full
        } else {
            g_pooled
        };
        let g_z2: Vec<f64> = g_a2.iter().zip(&cache.z2).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let (gw, rest) = g.split_at_mut(l.conv2_b.start);
        let g_p1 = conv3_backward(
            &cache.p1,
            &g_z2,
            c2,
            plane,
            &p[l.conv2_w.clone()],
            &mut gw[l.conv2_w.clone()],
            &mut rest[..l.conv2_b.len()],
            true,
        )
        .expect("input gradient requested");
        let g_a1 = col2im(&g_p1, c1, s.in_rows, s.in_cols);
        let g_z1: Vec<f64> = g_a1.iter().zip(&cache.z1).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let (gw, rest) = g.split_at_mut(l.conv1_b.start);
        conv3_backward(
            &cache.p0,
            &g_z1,
            c1,
            plane,
            &p[l.conv1_w.clone()],
            &mut gw[l.conv1_w.clone()],
            &mut rest[..l.conv1_b.len()],
            want_input,
        )
        .map(|g_p0| col2im(&g_p0, 1, s.in_rows, s.in_cols))
    }

    /// Maps a victim feature to a generator conditioning.
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        self.output_norm.inverse(&self.forward_cached(z).out)
    }

    /// Vector-Jacobian product of [`AdapterModel::forward`] with respect
    /// to its input.
    pub fn input_vjp(&self, z: &[f64], grad_output: &[f64]) -> Vec<f64> {
        let cache = self.forward_cached(z);
        let g_out: Vec<f64> = grad_output.iter().zip(&self.output_norm.std).map(|(g, s)| g * s).collect();
        let g_in = self.backward(&cache, &g_out, None, true).expect("input gradient requested");
        g_in.iter().zip(&self.input_norm.std).map(|(g, s)| g / s).collect()
    }

    /// `‖A(z) - target‖²` in original units.
    pub fn pair_loss(&self, z: &[f64], target: &[f64]) -> f64 {
        self.forward(z).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Mean [`AdapterModel::pair_loss`] over the pairs and its gradient
    /// with respect to the parameters.
    pub fn loss_and_grad(&self, pairs: &[FeaturePair]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = pairs.len() as f64;
        for pair in pairs {
            let cache = self.forward_cached(&pair.z_vlm);
            let t = self.output_norm.forward(&pair.z_t2i);
            let var: Vec<f64> = self.output_norm.std.iter().map(|s| s * s).collect();
            let mut g_out = vec![0.0; t.len()];
            for i in 0..t.len() {
                let d = cache.out[i] - t[i];
                loss += var[i] * d * d / n;
                g_out[i] = 2.0 * var[i] * d / n;
            }
            self.backward(&cache, &g_out, Some(&mut grad), false);
        }
        (loss, grad)
    }

    /// Accumulates the gradient of the mean standardized squared error
    /// into `grad`; returns the summed loss in original units.
    fn standardized_loss_grad(&self, pairs: &[&FeaturePair], targets: &[Vec<f64>], grad: &mut [f64]) -> f64 {
        let n = pairs.len() as f64;
        let mut loss = 0.0;
        for (pair, t) in pairs.iter().zip(targets) {
            let cache = self.forward_cached(&pair.z_vlm);
            let g_out: Vec<f64> = cache
                .out
                .iter()
                .zip(t)
                .zip(&self.output_norm.std)
                .map(|((o, tv), sd)| {
                    let d = o - tv;
                    loss += d * d * sd * sd;
                    2.0 * d / n
                })
                .collect();
            self.backward(&cache, &g_out, Some(grad), false);
        }
        loss
    }

    fn mean_loss(&self, pairs: &[&FeaturePair]) -> f64 {
        pairs.iter().map(|p| self.pair_loss(&p.z_vlm, &p.z_t2i)).sum::<f64>() / pairs.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<(PathBuf, PathBuf), AdapterError> {
        let blob_path = path.with_extension("bin");
        let meta_path = path.with_extension("json");
        let blob: Vec<u8> = self.params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
        fs::write(&blob_path, blob)?;
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            parameter_count: self.params.len(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
            train_config: self.train_config.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| AdapterError::Format(e.to_string()))?;
        fs::write(&meta_path, json)?;
        Ok((blob_path, meta_path))
    }

    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(path.with_extension("json"))?)
            .map_err(|e| AdapterError::Format(e.to_string()))?;
        let blob = fs::read(path.with_extension("bin"))?;
        if blob.len() != meta.parameter_count * 4 || meta.spec.parameter_count() != meta.parameter_count {
            return Err(AdapterError::Format("parameter blob does not match the sidecar".into()));
        }
        let params = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self {
            spec: meta.spec,
            params,
            input_norm: meta.input_norm,
            output_norm: meta.output_norm,
            train_config: meta.train_config,
            history: meta.history,
            best_epoch: meta.best_epoch,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: AdapterSpec,
    parameter_count: usize,
    input_norm: Standardizer,
    output_norm: Standardizer,
    train_config: TrainConfig,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

/// Paired victim feature and generator conditioning for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub z_vlm: Vec<f64>,
    pub z_t2i: Vec<f64>,
}

/// Trains an adapter on `pairs`. The last `validation_fraction` of a seeded
/// shuffle is held out and the parameters with the lowest validation loss
/// are returned.
pub fn train_adapter(pairs: &[FeaturePair], spec: AdapterSpec, cfg: &TrainConfig) -> Result<AdapterModel, AdapterError> {
    if pairs.len() < 2 {
        return Err(AdapterError::TooFewPairs(pairs.len()));
    }
    spec.validate()?;
    for (index, p) in pairs.iter().enumerate() {
        if p.z_vlm.len() != spec.in_len() || p.z_t2i.len() != spec.out_len() {
            return Err(AdapterError::ShapeMismatch {
                index,
                got_in: p.z_vlm.len(),
                got_out: p.z_t2i.len(),
                want_in: spec.in_len(),
                want_out: spec.out_len(),
            });
        }
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(AdapterError::InvalidConfig(format!("{cfg:?}")));
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng(derive_seed(cfg.seed, "adapter-split", 0)));
    let n_val = ((pairs.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&FeaturePair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let val: Vec<&FeaturePair> = val_idx.iter().map(|&i| &pairs[i]).collect();

    let mut model = AdapterModel::init(spec.clone(), cfg.seed)?;
    model.train_config = cfg.clone();
    model.input_norm = Standardizer::fit(train.iter().map(|p| p.z_vlm.as_slice()), spec.in_len());
    model.output_norm = Standardizer::fit(train.iter().map(|p| p.z_t2i.as_slice()), spec.out_len());
    let targets: Vec<Vec<f64>> = train.iter().map(|p| model.output_norm.forward(&p.z_t2i)).collect();

    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut t = 0i32;
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut batch_rng = rng(derive_seed(cfg.seed, "adapter-batches", 0));
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; model.params.len()];

    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut batch_rng);
        let mut running = 0.0;
        for chunk in idx.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let batch: Vec<&FeaturePair> = chunk.iter().map(|&i| train[i]).collect();
            let batch_targets: Vec<Vec<f64>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let loss = model.standardized_loss_grad(&batch, &batch_targets, &mut grad);
            if !loss.is_finite() {
                return Err(AdapterError::DivergenceDetected { epoch });
            }
            running += loss;
            t += 1;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..model.params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                model.params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        // Mean over the epoch's batches, measured before each update.
        let train_loss = running / train.len() as f64;
        let val_loss = model.mean_loss(&val);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(AdapterError::DivergenceDetected { epoch });
        }
        log::debug!("adapter epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        model.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
        }
    }
    model.params = best.1;
    model.best_epoch = best.2;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, r: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(r)).collect()
    }

    fn small_spec(pool: bool) -> AdapterSpec {
        AdapterSpec {
            conv_channels: [3, 4],
            hidden: 6,
            max_pool: pool,
            ..AdapterSpec::new((4, 4), (2, 3))
        }
    }

    #[test]
    fn forward_shapes_hold_for_random_inputs() {
        let spec = AdapterSpec::new((8, 8), (8, 32));
        let model = AdapterModel::init(spec, 1).unwrap();
        let mut r = rng(2);
        for _ in 0..100 {
            let z = gaussian(64, &mut r);
            let out = model.forward(&z);
            assert_eq!(out.len(), 256);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn parameter_and_input_gradients_match_finite_differences() {
        for pool in [false, true] {
            let mut model = AdapterModel::init(small_spec(pool), 3).unwrap();
            let mut r = rng(4);
            model.input_norm = Standardizer {
                mean: gaussian(16, &mut r),
                std: (0..16).map(|_| 0.5 + r.random::<f64>()).collect(),
            };
            model.output_norm = Standardizer {
                mean: gaussian(6, &mut r),
                std: (0..6).map(|_| 0.5 + r.random::<f64>()).collect(),
            };
            let pairs: Vec<FeaturePair> = (0..3)
                .map(|_| FeaturePair {
                    z_vlm: gaussian(16, &mut r),
                    z_t2i: gaussian(6, &mut r),
                })
                .collect();
            let (_, g) = model.loss_and_grad(&pairs);
            let h = 1e-6;
            for _ in 0..20 {
                let i = r.random_range(0..model.params.len());
                let mut p = model.clone();
                let mut m = model.clone();
                p.params[i] += h;
                m.params[i] -= h;
                let fd = (p.loss_and_grad(&pairs).0 - m.loss_and_grad(&pairs).0) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1e-6);
                assert!((fd - g[i]).abs() / scale < 1e-3, "param {i}: {fd} vs {}", g[i]);
            }
            let z = gaussian(16, &mut r);
            let go = gaussian(6, &mut r);
            let gi = model.input_vjp(&z, &go);
            for i in 0..16 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let f = |v: &[f64]| model.forward(v).iter().zip(&go).map(|(a, b)| a * b).sum::<f64>();
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                let scale = fd.abs().max(gi[i].abs()).max(1e-6);
                assert!((fd - gi[i]).abs() / scale < 1e-3, "input {i}: {fd} vs {}", gi[i]);
            }
        }
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut r = rng(5);
        let target = gaussian(6, &mut r);
        let pairs: Vec<FeaturePair> = (0..40)
            .map(|_| FeaturePair {
                z_vlm: gaussian(16, &mut r),
                z_t2i: target.clone(),
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let model = train_adapter(&pairs, small_spec(false), &cfg).unwrap();
        let energy: f64 = target.iter().map(|v| v * v).sum();
        let last = model.history.last().unwrap();
        assert!(last.val_loss < 1e-3 * energy, "{last:?}");
        assert!(last.train_loss < model.history[0].train_loss);
    }

    #[test]
    fn too_few_pairs_and_checkpoint_round_trip() {
        let pair = FeaturePair {
            z_vlm: vec![0.0; 16],
            z_t2i: vec![0.0; 6],
        };
        assert!(matches!(
            train_adapter(&[pair], small_spec(false), &TrainConfig::default()),
            Err(AdapterError::TooFewPairs(1))
        ));
        let model = AdapterModel::init(small_spec(true), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter");
        model.save(&path).unwrap();
        let back = AdapterModel::load(&path).unwrap();
        assert_eq!(back.spec, model.spec);
        for (a, b) in back.params.iter().zip(&model.params) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }
}
