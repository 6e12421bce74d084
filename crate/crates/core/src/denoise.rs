//! Non-local means denoising.
//!
//! Every output pixel is a convex combination of input pixels, weighted by
//! `exp(-d / h²)` where `d` is the squared Euclidean distance between the
//! RGB patches centred on the two pixels. Patches are extracted with edge
//! replication. The weight of a pixel pair is shared by all three channels.
//!
//! Two search modes exist. [`SearchMode::Exact`] compares each pixel against
//! every pixel of the image and is only accepted for small images; it is the
//! reference used in tests. [`SearchMode::Windowed`] restricts candidates to
//! a square window and is the production path.
//!
//! All accumulation is done in `f64`. Horizontal offsets `+dx` and `-dx` are
//! always summed as a pair, which makes the windowed filter commute exactly
//! with a horizontal flip.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageTensor, Scale, CHANNELS};

/// Largest side length accepted by [`SearchMode::Exact`].
pub const EXACT_MAX_SIDE: usize = 64;

const BAND_ROWS: usize = 32;
/// `exp(-x)` is exactly zero in `f64` beyond this point.
const EXP_CUTOFF: f64 = 746.0;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("invalid denoise configuration: {0}")]
    Config(String),
    #[error("pixel ({y}, {x}) outside {height}x{width} image")]
    OutOfBounds {
        y: usize,
        x: usize,
        height: usize,
        width: usize,
    },
    #[error("denoising expects a byte-scale image")]
    NotByteScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exact,
    Windowed { radius: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Patches are `(2r+1)×(2r+1)`.
    pub patch_radius: usize,
    /// Filtering degree, in byte intensity units.
    pub h: f32,
    pub search: SearchMode,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            h: 10.0,
            search: SearchMode::Windowed { radius: 10 },
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), DenoiseError> {
        if self.patch_radius < 1 {
            return Err(DenoiseError::Config("patch radius must be at least 1".into()));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(DenoiseError::Config(format!("h must be positive, got {}", self.h)));
        }
        if let SearchMode::Windowed { radius } = self.search {
            if radius < self.patch_radius {
                return Err(DenoiseError::Config(format!(
                    "search radius {radius} is smaller than patch radius {}",
                    self.patch_radius
                )));
            }
        }
        Ok(())
    }
}

/// Squared patch distance, in squared intensity units.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PatchDistance(pub f64);

impl PatchDistance {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Unnormalized weight `exp(-d / h²)`.
pub fn nlm_weight(d: PatchDistance, h: f64) -> f64 {
    (-d.0 / (h * h)).exp()
}

#[inline]
fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Sum over the `(2r+1)²` patch positions and three channels of squared
/// intensity differences between the patches centred on `i` and `j`.
pub fn patch_distance(
    img: &ImageTensor,
    i: (usize, usize),
    j: (usize, usize),
    r: usize,
) -> Result<PatchDistance, DenoiseError> {
    for &(y, x) in &[i, j] {
        if y >= img.height() || x >= img.width() {
            return Err(DenoiseError::OutOfBounds {
                y,
                x,
                height: img.height(),
                width: img.width(),
            });
        }
    }
    let r = r as isize;
    let term = |qy: isize, qx: isize| -> f64 {
        let a = img.pixel(
            clamp_index(i.0 as isize + qy, img.height()),
            clamp_index(i.1 as isize + qx, img.width()),
        );
        let b = img.pixel(
            clamp_index(j.0 as isize + qy, img.height()),
            clamp_index(j.1 as isize + qx, img.width()),
        );
        (0..CHANNELS)
            .map(|c| {
                let d = f64::from(a[c]) - f64::from(b[c]);
                d * d
            })
            .sum()
    };
    let mut total = 0.0;
    for qy in -r..=r {
        let mut row = term(qy, 0);
        for qx in 1..=r {
            row += term(qy, -qx) + term(qy, qx);
        }
        total += row;
    }
    Ok(PatchDistance(total))
}

fn check_input(img: &ImageTensor, cfg: &DenoiseConfig) -> Result<(), DenoiseError> {
    cfg.validate()?;
    if img.scale() != Scale::Byte {
        return Err(DenoiseError::NotByteScale);
    }
    if cfg.search == SearchMode::Exact && (img.height() > EXACT_MAX_SIDE || img.width() > EXACT_MAX_SIDE) {
        return Err(DenoiseError::Config(format!(
            "exact search is limited to {EXACT_MAX_SIDE}x{EXACT_MAX_SIDE} images"
        )));
    }
    Ok(())
}

/// Normalized weights `w(i, j)` of every candidate `j` for pixel `i`.
///
/// Uses the direct patch distance, so it doubles as an inspection tool for
/// the weight invariants of either search mode.
pub fn pixel_weights(
    img: &ImageTensor,
    i: (usize, usize),
    cfg: &DenoiseConfig,
) -> Result<Vec<((usize, usize), f64)>, DenoiseError> {
    check_input(img, cfg)?;
    if i.0 >= img.height() || i.1 >= img.width() {
        return Err(DenoiseError::OutOfBounds {
            y: i.0,
            x: i.1,
            height: img.height(),
            width: img.width(),
        });
    }
    let (ys, xs) = match cfg.search {
        SearchMode::Exact => (0..img.height(), 0..img.width()),
        SearchMode::Windowed { radius } => (
            i.0.saturating_sub(radius)..(i.0 + radius + 1).min(img.height()),
            i.1.saturating_sub(radius)..(i.1 + radius + 1).min(img.width()),
        ),
    };
    let h = f64::from(cfg.h);
    let mut raw = Vec::new();
    for y in ys {
        for x in xs.clone() {
            let d = patch_distance(img, i, (y, x), cfg.patch_radius)?;
            raw.push(((y, x), nlm_weight(d, h)));
        }
    }
    let z: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw.into_iter().map(|(j, w)| (j, w / z)).collect())
}

/// Denoises a byte-scale image.
pub fn denoise(img: &ImageTensor, cfg: &DenoiseConfig) -> Result<ImageTensor, DenoiseError> {
    check_input(img, cfg)?;
    let data = match cfg.search {
        SearchMode::Exact => exact(img, cfg),
        SearchMode::Windowed { radius } => windowed(img, cfg.patch_radius, radius, f64::from(cfg.h)),
    };
    Ok(ImageTensor::new(img.height(), img.width(), Scale::Byte, data).expect("shape preserved"))
}

/// Reference mode: every pixel of the image is a candidate.
fn exact(img: &ImageTensor, cfg: &DenoiseConfig) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let r = cfg.patch_radius as isize;
    let side = 2 * cfg.patch_radius + 1;
    let plen = side * side * CHANNELS;
    let mut patches = vec![0f64; h * w * plen];
    for y in 0..h {
        for x in 0..w {
            let p = &mut patches[(y * w + x) * plen..][..plen];
            let mut k = 0;
            for qy in -r..=r {
                for qx in -r..=r {
                    let px = img.pixel(
                        clamp_index(y as isize + qy, h),
                        clamp_index(x as isize + qx, w),
                    );
                    for c in px {
                        p[k] = f64::from(c);
                        k += 1;
                    }
                }
            }
        }
    }
    let h2 = f64::from(cfg.h) * f64::from(cfg.h);
    let mut out = Vec::with_capacity(h * w * CHANNELS);
    for i in 0..h * w {
        let pi = &patches[i * plen..][..plen];
        let mut z = 0.0;
        let mut acc = [0.0f64; 3];
        for j in 0..h * w {
            let pj = &patches[j * plen..][..plen];
            let d: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            let wgt = (-d / h2).exp();
            z += wgt;
            let v = img.pixel(j / w, j % w);
            for c in 0..CHANNELS {
                acc[c] += wgt * f64::from(v[c]);
            }
        }
        out.extend(acc.iter().map(|a| (a / z) as f32));
    }
    out
}

/// Edge-replicated copy of the image in `f64`, padded by `pad` on all sides.
struct Padded {
    data: Vec<f64>,
    width: usize,
    pad: usize,
}

impl Padded {
    fn new(img: &ImageTensor, pad: usize) -> Self {
        let (h, w) = (img.height(), img.width());
        let pw = w + 2 * pad;
        let ph = h + 2 * pad;
        let mut data = Vec::with_capacity(pw * ph * CHANNELS);
        for py in 0..ph {
            let y = clamp_index(py as isize - pad as isize, h);
            for px in 0..pw {
                let x = clamp_index(px as isize - pad as isize, w);
                data.extend(img.pixel(y, x).map(f64::from));
            }
        }
        Self { data, width: pw, pad }
    }

    /// Pixel at (possibly negative) image coordinates inside the padding.
    #[inline]
    fn at(&self, y: isize, x: isize) -> &[f64] {
        let i = ((y + self.pad as isize) as usize * self.width + (x + self.pad as isize) as usize) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }
}

/// Patch distances for one band of output rows and one offset.
struct BandScratch {
    diff: Vec<f64>,
    colsum: Vec<f64>,
    dist_pos: Vec<f64>,
    dist_neg: Vec<f64>,
}

fn windowed(img: &ImageTensor, r: usize, radius: usize, h: f64) -> Vec<f32> {
    let (height, width) = (img.height(), img.width());
    let padded = Padded::new(img, radius + r);
    let mut out = vec![0f32; height * width * CHANNELS];
    out.par_chunks_mut(BAND_ROWS * width * CHANNELS)
        .enumerate()
        .for_each(|(band, chunk)| {
            let y0 = band * BAND_ROWS;
            let rows = chunk.len() / (width * CHANNELS);
            denoise_band(img, &padded, y0, rows, r, radius, h * h, chunk);
        });
    out
}

#[allow(clippy::too_many_arguments)]
fn denoise_band(
    img: &ImageTensor,
    padded: &Padded,
    y0: usize,
    rows: usize,
    r: usize,
    radius: usize,
    h2: f64,
    out: &mut [f32],
) {
    let (height, width) = (img.height(), img.width());
    let ext_w = width + 2 * r;
    let ext_rows = rows + 2 * r;
    let mut scratch = BandScratch {
        diff: vec![0.0; ext_rows * ext_w],
        colsum: vec![0.0; rows * ext_w],
        dist_pos: vec![0.0; rows * width],
        dist_neg: vec![0.0; rows * width],
    };
    let mut z = vec![0f64; rows * width];
    let mut acc = vec![0f64; rows * width * CHANNELS];
    let radius_i = radius as isize;

    for dy in -radius_i..=radius_i {
        for dx in 0..=radius_i {
            offset_distances(padded, &mut scratch, y0, rows, width, r, dy, dx, true);
            if dx > 0 {
                offset_distances(padded, &mut scratch, y0, rows, width, r, dy, -dx, false);
            }
            for ry in 0..rows {
                let y = y0 + ry;
                let jy = y as isize + dy;
                if jy < 0 || jy >= height as isize {
                    continue;
                }
                let jy = jy as usize;
                for x in 0..width {
                    let k = ry * width + x;
                    let (w_pos, v_pos) = contribution(img, jy, x as isize + dx, width, scratch.dist_pos[k], h2);
                    if dx == 0 {
                        z[k] += w_pos;
                        for c in 0..CHANNELS {
                            acc[k * CHANNELS + c] += v_pos[c];
                        }
                    } else {
                        let (w_neg, v_neg) =
                            contribution(img, jy, x as isize - dx, width, scratch.dist_neg[k], h2);
                        z[k] += w_pos + w_neg;
                        for c in 0..CHANNELS {
                            acc[k * CHANNELS + c] += v_pos[c] + v_neg[c];
                        }
                    }
                }
            }
        }
    }
    for (k, zk) in z.iter().enumerate() {
        for c in 0..CHANNELS {
            out[k * CHANNELS + c] = (acc[k * CHANNELS + c] / zk) as f32;
        }
    }
}

#[inline]
fn contribution(img: &ImageTensor, jy: usize, jx: isize, width: usize, d: f64, h2: f64) -> (f64, [f64; 3]) {
    if jx < 0 || jx >= width as isize {
        return (0.0, [0.0; 3]);
    }
    let arg = d / h2;
    if arg > EXP_CUTOFF {
        return (0.0, [0.0; 3]);
    }
    let w = (-arg).exp();
    let v = img.pixel(jy, jx as usize);
    (w, v.map(|c| w * f64::from(c)))
}

/// Fills `dist_pos` (or `dist_neg`) with the patch distance between every
/// band pixel and its partner at offset `(dy, dx)`.
#[allow(clippy::too_many_arguments)]
fn offset_distances(
    padded: &Padded,
    s: &mut BandScratch,
    y0: usize,
    rows: usize,
    width: usize,
    r: usize,
    dy: isize,
    dx: isize,
    positive: bool,
) {
    let ext_w = width + 2 * r;
    let ri = r as isize;
    // per-position squared RGB difference over the band rows extended by r
    for t in 0..rows + 2 * r {
        let py = y0 as isize - ri + t as isize;
        let row = &mut s.diff[t * ext_w..(t + 1) * ext_w];
        for (u, cell) in row.iter_mut().enumerate() {
            let px = u as isize - ri;
            let a = padded.at(py, px);
            let b = padded.at(py + dy, px + dx);
            let d0 = a[0] - b[0];
            let d1 = a[1] - b[1];
            let d2 = a[2] - b[2];
            *cell = d0 * d0 + d1 * d1 + d2 * d2;
        }
    }
    // vertical patch sums
    for ry in 0..rows {
        let dst = &mut s.colsum[ry * ext_w..(ry + 1) * ext_w];
        dst.copy_from_slice(&s.diff[ry * ext_w..(ry + 1) * ext_w]);
        for t in 1..=2 * r {
            let src = &s.diff[(ry + t) * ext_w..(ry + t + 1) * ext_w];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    // horizontal patch sums, mirrored pairs
    let dist = if positive { &mut s.dist_pos } else { &mut s.dist_neg };
    for ry in 0..rows {
        let col = &s.colsum[ry * ext_w..(ry + 1) * ext_w];
        let drow = &mut dist[ry * width..(ry + 1) * width];
        for (x, d) in drow.iter_mut().enumerate() {
            let c = x + r;
            let mut sum = col[c];
            for k in 1..=r {
                sum += col[c - k] + col[c + k];
            }
            *d = sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
        ImageTensor::from_rgb8(h, w, &bytes).unwrap()
    }

    #[test]
    fn patch_distance_examples() {
        let img = ImageTensor::from_rgb8(1, 2, &[0, 0, 0, 3, 0, 0]).unwrap();
        assert_eq!(patch_distance(&img, (0, 0), (0, 1), 0).unwrap().value(), 9.0);
        let rnd = random_image(9, 7, 1);
        assert_eq!(patch_distance(&rnd, (4, 3), (4, 3), 3).unwrap().value(), 0.0);
        let flat = ImageTensor::filled(5, 5, Scale::Byte, [9.0, 8.0, 7.0]);
        assert_eq!(patch_distance(&flat, (0, 0), (4, 2), 2).unwrap().value(), 0.0);
        assert!(matches!(
            patch_distance(&flat, (5, 0), (0, 0), 1),
            Err(DenoiseError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(nlm_weight(PatchDistance(0.0), 10.0), 1.0);
        assert!((nlm_weight(PatchDistance(100.0), 10.0) - (-1f64).exp()).abs() < 1e-12);
        assert!((nlm_weight(PatchDistance(100.0), 10.0) - 0.36788).abs() < 1e-5);
        assert_eq!(nlm_weight(PatchDistance(1e9), 10.0), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            DenoiseConfig { patch_radius: 0, ..Default::default() },
            DenoiseConfig { h: 0.0, ..Default::default() },
            DenoiseConfig { h: f32::NAN, ..Default::default() },
            DenoiseConfig { patch_radius: 3, search: SearchMode::Windowed { radius: 2 }, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(DenoiseError::Config(_))), "{cfg:?}");
        }
        let img = ImageTensor::filled(65, 65, Scale::Byte, [0.0; 3]);
        let exact = DenoiseConfig { search: SearchMode::Exact, ..Default::default() };
        assert!(matches!(denoise(&img, &exact), Err(DenoiseError::Config(_))));
        let unit = ImageTensor::filled(4, 4, Scale::Unit, [0.5; 3]);
        assert_eq!(denoise(&unit, &DenoiseConfig::default()), Err(DenoiseError::NotByteScale));
    }

    #[test]
    fn constant_image_fixed_point() {
        let img = ImageTensor::filled(20, 13, Scale::Byte, [37.0, 200.0, 5.0]);
        for search in [SearchMode::Exact, SearchMode::Windowed { radius: 4 }] {
            let cfg = DenoiseConfig { patch_radius: 1, search, ..Default::default() };
            let out = denoise(&img, &cfg).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn windowed_matches_exact_when_window_covers_image() {
        let img = random_image(12, 10, 3);
        // large h so that many weights are non-negligible
        let base = DenoiseConfig { patch_radius: 1, h: 150.0, search: SearchMode::Exact };
        let exact = denoise(&img, &base).unwrap();
        let win = denoise(&img, &DenoiseConfig { search: SearchMode::Windowed { radius: 12 }, ..base }).unwrap();
        for (a, b) in exact.data().iter().zip(win.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn salt_pixel_pulled_toward_similar_patches() {
        // left half dark, right half bright, one bright salt pixel in the dark half
        let mut img = ImageTensor::filled(8, 8, Scale::Byte, [20.0; 3]);
        for y in 0..8 {
            for x in 4..8 {
                img.set_pixel(y, x, [220.0; 3]);
            }
        }
        img.set_pixel(2, 1, [120.0; 3]);
        let cfg = DenoiseConfig { patch_radius: 1, h: 10.0, search: SearchMode::Exact };
        let out = denoise(&img, &cfg).unwrap();
        let before = img.pixel(2, 1)[0];
        let after = out.pixel(2, 1)[0];
        let weights = pixel_weights(&img, (2, 1), &cfg).unwrap();
        let mean: f64 = weights.iter().map(|&((y, x), w)| w * f64::from(img.pixel(y, x)[0])).sum();
        assert!((f64::from(after) - mean).abs() < 1e-3);
        assert!((after - before).abs() <= (before - 20.0).abs());
        // weights are ordered inversely to patch distance
        let mut pairs: Vec<(f64, f64)> = weights
            .iter()
            .map(|&(j, w)| (patch_distance(&img, (2, 1), j, 1).unwrap().value(), w))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for p in pairs.windows(2) {
            assert!(p[0].1 >= p[1].1);
        }
    }

    #[test]
    fn weights_normalized() {
        let img = random_image(10, 10, 9);
        let cfg = DenoiseConfig { patch_radius: 1, h: 200.0, search: SearchMode::Windowed { radius: 3 } };
        for i in [(0, 0), (5, 5), (9, 2)] {
            let w = pixel_weights(&img, i, &cfg).unwrap();
            let s: f64 = w.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(w.iter().all(|(_, w)| (0.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn flip_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let h = rng.random_range(5..30);
            let w = rng.random_range(5..30);
            let img = random_image(h, w, rng.random());
            let cfg = DenoiseConfig { patch_radius: 2, h: 120.0, search: SearchMode::Windowed { radius: 5 } };
            let a = denoise(&img.flip_horizontal(), &cfg).unwrap();
            let b = denoise(&img, &cfg).unwrap().flip_horizontal();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn output_range_within_input_range() {
        let img = random_image(15, 17, 5);
        let cfg = DenoiseConfig { patch_radius: 1, h: 300.0, search: SearchMode::Windowed { radius: 4 } };
        let out = denoise(&img, &cfg).unwrap();
        let (lo, hi) = img.min_max();
        let (olo, ohi) = out.min_max();
        assert!(olo >= lo && ohi <= hi);
    }
}
