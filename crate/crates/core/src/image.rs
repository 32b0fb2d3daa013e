//! Image and caption types shared by every pipeline stage.
//!
//! Images are stored as interleaved `H × W × C` floats in `[0, 1]`. Eight-bit
//! and sixteen-bit inputs are rescaled at ingestion so every backend sees one
//! canonical range.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised while constructing or decoding images and captions.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("unsupported channel count {0}; expected 1 or 3")]
    UnsupportedChannels(usize),
    #[error("data length {actual} does not match {height}x{width}x{channels}")]
    LengthMismatch {
        height: usize,
        width: usize,
        channels: usize,
        actual: usize,
    },
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("caption text is empty")]
    EmptyCaption,
    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("failed to encode {path}: {message}")]
    Encode { path: String, message: String },
}

/// An `H × W × C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, validating shape and range.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                channels,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image after clamping every value into `[0, 1]`.
    ///
    /// NaN values are mapped to zero.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Converts 8-bit samples to the canonical range by dividing by 255.
    pub fn from_u8(
        height: usize,
        width: usize,
        channels: usize,
        bytes: &[u8],
    ) -> Result<Self, ImageError> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Pixel value at row `y`, column `x`, channel `c`.
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Returns a copy with the same shape and new data, clamped to `[0, 1]`.
    pub fn with_data_clamped(&self, data: Vec<f64>) -> Result<Self, ImageError> {
        Self::from_clamped(self.height, self.width, self.channels, data)
    }

    /// Maximum absolute elementwise difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over shape and the raw bit patterns of the pixels.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for dim in [self.height, self.width, self.channels] {
            hasher.update((dim as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Decodes a PNG or JPEG file. 8-bit samples are divided by 255 and
    /// 16-bit samples by 65535. Alpha is dropped; grayscale stays single
    /// channel.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let decode_err = |message: String| ImageError::Decode {
            path: path.display().to_string(),
            message,
        };
        let dynamic = image::open(path).map_err(|e| decode_err(e.to_string()))?;
        let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
        let gray = !dynamic.color().has_color();
        let sixteen = dynamic.color().bytes_per_pixel() / dynamic.color().channel_count() > 1;
        let (channels, data): (usize, Vec<f64>) = match (gray, sixteen) {
            (true, false) => (
                1,
                dynamic.to_luma8().into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect(),
            ),
            (true, true) => (
                1,
                dynamic
                    .to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(|b| f64::from(b) / 65535.0)
                    .collect(),
            ),
            (false, false) => (
                3,
                dynamic.to_rgb8().into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect(),
            ),
            (false, true) => (
                3,
                dynamic
                    .to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(|b| f64::from(b) / 65535.0)
                    .collect(),
            ),
        };
        Self::new(h, w, channels, data).map_err(|e| decode_err(e.to_string()))
    }

    /// Writes a 16-bit PNG. Sixteen bits keep quantization error below
    /// 1e-5, far under any perturbation budget of interest.
    pub fn save_png16(&self, path: &Path) -> Result<(), ImageError> {
        let encode_err = |message: String| ImageError::Encode {
            path: path.display().to_string(),
            message,
        };
        let samples: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v * 65535.0).round() as u16)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = match self.channels {
            1 => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, samples)
                .map(image::DynamicImage::ImageLuma16),
            _ => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, samples)
                .map(image::DynamicImage::ImageRgb16),
        }
        .ok_or_else(|| encode_err("buffer size mismatch".into()))?;
        dynamic
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| encode_err(e.to_string()))
    }
}

/// Text produced by a captioning model, or a prompt passed to one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source_model_id: String,
}

impl Caption {
    /// A caption whose text is non-empty after trimming.
    pub fn new(text: impl Into<String>, source_model_id: impl Into<String>) -> Result<Self, ImageError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ImageError::EmptyCaption);
        }
        Ok(Self {
            text,
            source_model_id: source_model_id.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_shapes() {
        assert!(matches!(
            ImageTensor::new(1, 1, 1, vec![1.5]),
            Err(ImageError::OutOfRange { .. })
        ));
        assert!(matches!(
            ImageTensor::new(2, 2, 3, vec![0.0; 11]),
            Err(ImageError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ImageTensor::new(2, 2, 2, vec![0.0; 8]),
            Err(ImageError::UnsupportedChannels(2))
        ));
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn u8_ingestion_divides_by_255() {
        let img = ImageTensor::from_u8(1, 2, 1, &[0, 255]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        let img = ImageTensor::from_u8(1, 1, 1, &[51]).unwrap();
        assert!((img.data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn clamping_constructor() {
        let img = ImageTensor::from_clamped(1, 3, 1, vec![-0.5, 0.3, f64::NAN]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.3, 0.0]);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(Caption::new("   ", "m").is_err());
        assert!(Caption::new("a cat", "m").is_ok());
    }

    #[test]
    fn png16_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64) / 60.0).collect();
        let img = ImageTensor::new(4, 5, 3, data).unwrap();
        img.save_png16(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back.shape(), (4, 5, 3));
        assert!(back.linf_distance(&img) < 1e-5);
    }
}
