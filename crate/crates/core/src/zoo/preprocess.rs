//! Declarative encoder preprocessing: resize, channel conversion, and
//! per-channel normalization.
//!
//! Every step is affine in the pixel values, so the module also provides
//! the adjoint used to pull gradients back to the input image.

use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;

/// Resize target plus per-channel `(x - mean) / std` normalization. The
/// number of output channels is `mean.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PreprocessSpec {
    /// Resize only.
    pub fn resize(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Length of the flattened output.
    pub fn output_len(&self) -> usize {
        self.height * self.width * self.channels()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.height == 0 || self.width == 0 {
            return Err("preprocess target size must be positive".into());
        }
        if !matches!(self.channels(), 1 | 3) {
            return Err(format!("preprocess expects 1 or 3 channels, got {}", self.channels()));
        }
        if self.std.len() != self.mean.len() {
            return Err("preprocess mean and std lengths differ".into());
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err("preprocess std entries must be positive".into());
        }
        Ok(())
    }

    /// Applies the preprocessing and returns the flattened `H × W × C` tensor.
    pub fn apply(&self, image: &ImageTensor) -> Vec<f64> {
        let resized = resize_raw(image.data(), image.height(), image.width(), image.channels(), self.height, self.width);
        let converted = convert_channels(&resized, image.channels(), self.channels());
        let c = self.channels();
        converted
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    /// Pulls a gradient with respect to the preprocessed tensor back to the
    /// input image of shape `(height, width, channels)`.
    pub fn adjoint(&self, input_shape: (usize, usize, usize), grad: &[f64]) -> Vec<f64> {
        let (h, w, ch) = input_shape;
        let c = self.channels();
        let scaled: Vec<f64> = grad
            .iter()
            .enumerate()
            .map(|(i, g)| g / self.std[i % c])
            .collect();
        let unconverted = convert_channels_adjoint(&scaled, ch, c);
        resize_bilinear_adjoint(&unconverted, h, w, ch, self.height, self.width)
    }
}

/// Source taps for one output coordinate under half-pixel-center bilinear
/// sampling.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_raw(data: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let at = |y: usize, x: usize| data[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

fn resize_bilinear_adjoint(grad: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let mut out = vec![0.0; h * w * c];
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let g = grad[(oy * ow + ox) * c + ch];
                out[(y0 * w + x0) * c + ch] += g * (1.0 - ty) * (1.0 - tx);
                out[(y0 * w + x1) * c + ch] += g * (1.0 - ty) * tx;
                out[(y1 * w + x0) * c + ch] += g * ty * (1.0 - tx);
                out[(y1 * w + x1) * c + ch] += g * ty * tx;
            }
        }
    }
    out
}

// Gray to RGB replicates; RGB to gray takes the channel mean.
fn convert_channels(data: &[f64], from: usize, to: usize) -> Vec<f64> {
    match (from, to) {
        (a, b) if a == b => data.to_vec(),
        (1, 3) => data.iter().flat_map(|&v| [v, v, v]).collect(),
        (3, 1) => data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        _ => unreachable!("channel counts are validated to be 1 or 3"),
    }
}

fn convert_channels_adjoint(grad: &[f64], from: usize, to: usize) -> Vec<f64> {
    match (from, to) {
        (a, b) if a == b => grad.to_vec(),
        (1, 3) => grad.chunks_exact(3).map(|p| p[0] + p[1] + p[2]).collect(),
        (3, 1) => grad.iter().flat_map(|&g| [g / 3.0; 3]).collect(),
        _ => unreachable!("channel counts are validated to be 1 or 3"),
    }
}
