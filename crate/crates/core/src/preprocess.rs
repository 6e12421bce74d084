//! The fixed path from a decoded photo to a model input: resize, denoise,
//! scale to `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{denoise, DenoiseConfig, DenoiseError};
use crate::image::{denormalize, normalize, resize, ImageError, ImageTensor, ResizePolicy, Scale};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub resize: ResizePolicy,
    /// `None` skips denoising.
    pub denoise: Option<DenoiseConfig>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize: ResizePolicy::default(),
            denoise: Some(DenoiseConfig::default()),
        }
    }
}

/// Resized and denoised image, still on the byte scale. Resizing first
/// keeps the denoiser's cost bounded by the model resolution.
pub fn prepare(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor, PreprocessError> {
    let bytes = match img.scale() {
        Scale::Byte => img.clone(),
        Scale::Unit => denormalize(img)?,
    };
    let resized = resize(&bytes, cfg.resize);
    Ok(match &cfg.denoise {
        Some(d) => denoise(&resized, d)?,
        None => resized,
    })
}

/// [`prepare`] followed by scaling to `[0, 1]`.
pub fn preprocess(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor, PreprocessError> {
    Ok(normalize(&prepare(img, cfg)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_model_sized_and_unit_scaled() {
        let img = ImageTensor::filled(40, 60, Scale::Byte, [255.0, 51.0, 0.0]);
        let cfg = PreprocessConfig {
            resize: ResizePolicy::square(32),
            ..PreprocessConfig::default()
        };
        let out = preprocess(&img, &cfg).unwrap();
        assert_eq!((out.height(), out.width(), out.scale()), (32, 32, Scale::Unit));
        // a constant image is a fixed point of every stage
        let p = out.pixel(5, 7);
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] - 0.2).abs() < 1e-6 && p[2].abs() < 1e-6);
    }

    #[test]
    fn unit_input_is_accepted() {
        let img = ImageTensor::filled(8, 8, Scale::Unit, [0.5; 3]);
        let cfg = PreprocessConfig {
            resize: ResizePolicy::square(8),
            denoise: None,
        };
        assert_eq!(preprocess(&img, &cfg).unwrap(), img);
    }
}
