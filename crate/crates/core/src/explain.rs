//! Class activation maps for a trained head.
//!
//! Channel weights are the gradient of the class logit with respect to the
//! pooled feature vector, which equals the spatial sum of the gradient with
//! respect to the feature map itself. The weighted map is rectified,
//! upsampled to the image size, min-max normalized and blended over the
//! input as a blue-to-red overlay.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::heads::{Backbone, HeadError, HeadModel};
use crate::image::{denormalize, ImageError, ImageTensor, Scale};
use crate::nn::{argmax, Mode, NnError, Tensor};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("class index {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("feature map must be [H, W, C], got {0:?}")]
    BadFeatureMap(Vec<usize>),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Blend weight of the original image in the overlay.
pub const OVERLAY_ALPHA: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct CamResult {
    pub class_index: usize,
    pub class_name: String,
    /// Class probabilities of the head for this image.
    pub probabilities: Vec<f64>,
    /// Rectified weighted map at feature resolution, row-major.
    pub raw_map: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    /// Normalized map in `[0, 1]` at image resolution, row-major.
    pub heatmap: Vec<f64>,
    pub overlay: ImageTensor,
}

/// Gradient of logit `class` with respect to the pooled features, evaluated
/// in eval mode (in `f64`).
pub fn cam_weights(head: &HeadModel<f32>, pooled: &[f32], class: usize) -> Result<Vec<f64>> {
    let classes = head.num_classes();
    if class >= classes {
        return Err(ExplainError::BadClass { class, classes });
    }
    let mut h = head.cast::<f64>();
    let x = Tensor::matrix(1, pooled.len(), pooled.iter().map(|&v| f64::from(v)).collect())?;
    h.forward_pooled(&x, Mode::Eval)?;
    let mut onehot = vec![0.0; classes];
    onehot[class] = 1.0;
    let g = h.input_gradient(&Tensor::matrix(1, classes, onehot)?)?;
    Ok(g.into_data())
}

/// `relu(Σ_k w_k · f[i, j, k])` for an `[H, W, C]` feature map.
pub fn weighted_map(features: &Tensor<f32>, weights: &[f64]) -> Result<Vec<f64>> {
    let &[_, _, c] = features.shape() else {
        return Err(ExplainError::BadFeatureMap(features.shape().to_vec()));
    };
    if c != weights.len() {
        return Err(ExplainError::BadFeatureMap(features.shape().to_vec()));
    }
    Ok(features
        .data()
        .chunks_exact(c)
        .map(|px| {
            let s: f64 = px.iter().zip(weights).map(|(&f, &w)| f64::from(f) * w).sum();
            s.max(0.0)
        })
        .collect())
}

/// Bilinear upsampling with half-pixel-centred sampling.
pub fn upsample(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map size");
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = map[y0 * w + x0] + tx * (map[y0 * w + x1] - map[y0 * w + x0]);
            let bottom = map[y1 * w + x0] + tx * (map[y1 * w + x1] - map[y1 * w + x0]);
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// `0.6 · image + 0.4 · (255t, 0, 255(1 - t))` on the byte scale.
pub fn overlay(img: &ImageTensor, heatmap: &[f64]) -> Result<ImageTensor> {
    let base = match img.scale() {
        Scale::Byte => img.clone(),
        Scale::Unit => denormalize(img)?,
    };
    assert_eq!(heatmap.len(), base.height() * base.width(), "heatmap size");
    let a = OVERLAY_ALPHA;
    let data = base
        .data()
        .chunks_exact(3)
        .zip(heatmap)
        .flat_map(|(px, &t)| {
            let tint = [255.0 * t, 0.0, 255.0 * (1.0 - t)];
            (0..3).map(move |c| (a * f64::from(px[c]) + (1.0 - a) * tint[c]) as f32)
        })
        .collect();
    Ok(ImageTensor::new(base.height(), base.width(), Scale::Byte, data)?)
}

/// Computes the activation map of `class` (the predicted class when `None`)
/// for one model-input image.
pub fn cam(
    head: &HeadModel<f32>,
    backbone: &dyn Backbone,
    img: &ImageTensor,
    class: Option<usize>,
) -> Result<CamResult> {
    let features = backbone.extract(img, head.endpoint())?;
    let &[fh, fw, _] = features.shape() else {
        return Err(ExplainError::BadFeatureMap(features.shape().to_vec()));
    };
    let pooled = crate::nn::global_average_pool(&features)?.into_data();
    let probabilities = head.predict_pooled(&pooled)?;
    let class_index = class.unwrap_or_else(|| argmax(&probabilities));
    let weights = cam_weights(head, &pooled, class_index)?;
    let raw_map = weighted_map(&features, &weights)?;
    let heatmap = min_max_normalize(&upsample(&raw_map, fh, fw, img.height(), img.width()));
    let overlay = overlay(img, &heatmap)?;
    Ok(CamResult {
        class_name: head.classes()[class_index].clone(),
        class_index,
        probabilities,
        raw_map,
        map_height: fh,
        map_width: fw,
        heatmap,
        overlay,
    })
}

/// Writes the raw map as CSV, one row per feature-map row.
pub fn write_raw_map_csv(result: &CamResult, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for row in result.raw_map.chunks(result.map_width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
