//! RGB image tensors: decoding, encoding, bilinear resampling and scaling.
//!
//! Pixels are stored row-major as interleaved `f32` RGB triples. A tensor is
//! either on the byte scale (`[0, 255]`) or the unit scale (`[0, 1]`); the
//! scale travels with the data so that stages which expect byte intensities
//! (denoising, gain) can refuse normalized input.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of colour channels carried by every [`ImageTensor`].
pub const CHANNELS: usize = 3;

/// Default input side length of the classification backbone.
pub const MODEL_SIDE: usize = 299;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("image is already normalized to the unit scale")]
    AlreadyNormalized,
    #[error("expected {expected:?} scale, got {actual:?}")]
    WrongScale { expected: Scale, actual: Scale },
    #[error("invalid dimensions {height}x{width}")]
    BadDimensions { height: usize, width: usize },
    #[error("data length {actual} does not match {height}x{width}x3")]
    LengthMismatch {
        height: usize,
        width: usize,
        actual: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    /// Intensities in `[0, 255]`.
    Byte,
    /// Intensities in `[0, 1]`.
    Unit,
}

#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    scale: Scale,
    data: Vec<f32>,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageTensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, scale: Scale, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::BadDimensions { height, width });
        }
        if data.len() != height * width * CHANNELS {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            scale,
            data,
        })
    }

    /// Image filled with a single colour.
    pub fn filled(height: usize, width: usize, scale: Scale, rgb: [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(height * width * CHANNELS).collect();
        Self {
            height,
            width,
            scale,
            data,
        }
    }

    /// Byte-scale image built from 8-bit RGB samples.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(height, width, Scale::Byte, bytes.iter().map(|&b| f32::from(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = self.index(y, x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = self.index(y, x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Largest value the current scale admits.
    pub fn scale_max(&self) -> f32 {
        match self.scale {
            Scale::Byte => 255.0,
            Scale::Unit => 1.0,
        }
    }

    /// Quantizes to 8-bit RGB, rounding to nearest and saturating.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let k = 255.0 / self.scale_max();
        self.data
            .iter()
            .map(|&v| (v * k).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// SHA-256 over the quantized RGB bytes, hex encoded.
    ///
    /// This is the content identity used for image ids and feature-archive
    /// lookups; it does not depend on file names or container formats.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u32).to_le_bytes());
        hasher.update((self.width as u32).to_le_bytes());
        hasher.update(self.to_rgb8());
        hex(&hasher.finalize())
    }

    /// Mirror image around the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Codecs
// ---------------------------------------------------------------------------

/// Decodes a PNG or binary PPM (P6) payload into a byte-scale tensor.
///
/// Alpha is dropped and grayscale is replicated across the three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else {
        Err(ImageError::Decode("unrecognized image format".into()))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor, ImageError> {
    decode_image(&std::fs::read(path)?)
}

/// Writes PNG unless the extension is `.ppm`.
pub fn write_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| ImageError::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let per_pixel = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(ImageError::Decode("unexpanded palette image".into()));
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(stride).take(h) {
        for px in row[..w * per_pixel].chunks_exact(per_pixel) {
            match per_pixel {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    ImageTensor::from_rgb8(h, w, &rgb)
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, ImageError> {
    // header: magic, width, height, maxval, each separated by whitespace,
    // '#' comments allowed; exactly one whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ImageError::Decode("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Decode("malformed PPM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Decode("malformed PPM header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Decode(format!("unsupported PPM maxval {maxval}")));
    }
    let n = w * h * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| ImageError::Decode("truncated PPM raster".into()))?;
    if maxval == 255 {
        ImageTensor::from_rgb8(h, w, raster)
    } else {
        let k = 255.0 / maxval as f32;
        let data = raster.iter().map(|&b| (f32::from(b) * k).round()).collect();
        ImageTensor::new(h, w, Scale::Byte, data)
    }
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        writer
            .write_image_data(&img.to_rgb8())
            .map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeFilter {
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizePolicy {
    pub target_h: usize,
    pub target_w: usize,
    pub filter: ResizeFilter,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        Self {
            target_h: MODEL_SIDE,
            target_w: MODEL_SIDE,
            filter: ResizeFilter::Bilinear,
        }
    }
}

impl ResizePolicy {
    pub fn square(side: usize) -> Self {
        Self {
            target_h: side,
            target_w: side,
            filter: ResizeFilter::Bilinear,
        }
    }
}

/// Bilinear resize with half-pixel-centred sampling; aspect ratio is not kept.
pub fn resize(img: &ImageTensor, policy: ResizePolicy) -> ImageTensor {
    assert!(policy.target_h > 0 && policy.target_w > 0, "resize targets must be positive");
    resample_region(
        img,
        [0.0, 0.0],
        [img.height as f64, img.width as f64],
        policy.target_h,
        policy.target_w,
    )
}

/// Samples the continuous source rectangle starting at `origin` (y, x) with
/// extent `size` (h, w) onto an `out_h`×`out_w` grid.
///
/// Output pixel centres map to source coordinates
/// `origin + (dst + 0.5) * size / out - 0.5`, clamped to the image.
pub(crate) fn resample_region(
    img: &ImageTensor,
    origin: [f64; 2],
    size: [f64; 2],
    out_h: usize,
    out_w: usize,
) -> ImageTensor {
    let taps = |n_out: usize, o: f64, extent: f64, n_in: usize| -> Vec<(usize, usize, f32)> {
        let step = extent / n_out as f64;
        (0..n_out)
            .map(|d| {
                let s = (o + (d as f64 + 0.5) * step - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, origin[0], size[0], img.height);
    let xs = taps(out_w, origin[1], size[1], img.width);
    let mut data = Vec::with_capacity(out_h * out_w * CHANNELS);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for ch in 0..CHANNELS {
                // lerp as a + t(b - a) keeps constant fields exact
                let top = a[ch] + tx * (b[ch] - a[ch]);
                let bottom = c[ch] + tx * (d[ch] - c[ch]);
                data.push(top + ty * (bottom - top));
            }
        }
    }
    ImageTensor {
        height: out_h,
        width: out_w,
        scale: img.scale,
        data,
    }
}

// ---------------------------------------------------------------------------
// Scaling
// ---------------------------------------------------------------------------

/// Divides byte intensities by 255.
pub fn normalize(img: &ImageTensor) -> Result<ImageTensor, ImageError> {
    if img.scale == Scale::Unit {
        return Err(ImageError::AlreadyNormalized);
    }
    Ok(ImageTensor {
        data: img.data.iter().map(|&v| v / 255.0).collect(),
        scale: Scale::Unit,
        ..*img
    })
}

/// Inverse of [`normalize`]; values are not rounded.
pub fn denormalize(img: &ImageTensor) -> Result<ImageTensor, ImageError> {
    if img.scale == Scale::Byte {
        return Err(ImageError::WrongScale {
            expected: Scale::Unit,
            actual: Scale::Byte,
        });
    }
    Ok(ImageTensor {
        data: img.data.iter().map(|&v| v * 255.0).collect(),
        scale: Scale::Byte,
        ..*img
    })
}
