//! Image preparation: resize, augmentation, channel replication, normalization.
//!
//! Pixels are handled as floats in [0, 1] with 1 = white background.

use hfw_core::fewshot::ImageRef;
use hfw_core::{Element, Tensor};
use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, CharacterDataset};
use crate::error::{AppError, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Square output extent before model padding.
    pub target: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub crop_pad: usize,
    pub hflip_p: f64,
    pub rotation_deg: f64,
    /// Apply augmentation on the training partition.
    pub augment: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target: 84,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            crop_pad: 8,
            hflip_p: 0.5,
            rotation_deg: 15.0,
            augment: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target == 0 {
            return Err(AppError::Config("data.target must be > 0".into()));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(AppError::Config("data.rotation_deg must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(AppError::Config("data.hflip_p must lie in [0, 1]".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(AppError::Config("data.std entries must be > 0".into()));
        }
        Ok(())
    }

    /// Normalized value of a white pixel per channel, used to pad model inputs.
    pub fn background(&self) -> [f64; 3] {
        std::array::from_fn(|c| (1.0 - self.mean[c]) / self.std[c])
    }
}

/// Row-major single-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn from_gray(img: &GrayImage) -> Self {
        Plane {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Bilinear resize to `target`×`target`; a no-op when already that size.
pub fn resize(img: &GrayImage, target: usize) -> Plane {
    let t = target as u32;
    if img.width() == t && img.height() == t {
        return Plane::from_gray(img);
    }
    Plane::from_gray(&imageops::resize(img, t, t, FilterType::Triangle))
}

pub fn pad(p: &Plane, by: usize, fill: f32) -> Plane {
    let (w, h) = (p.width + 2 * by, p.height + 2 * by);
    let mut data = vec![fill; w * h];
    for y in 0..p.height {
        let dst = (y + by) * w + by;
        data[dst..dst + p.width].copy_from_slice(&p.data[y * p.width..(y + 1) * p.width]);
    }
    Plane { width: w, height: h, data }
}

pub fn crop(p: &Plane, x: usize, y: usize, w: usize, h: usize) -> Plane {
    assert!(x + w <= p.width && y + h <= p.height, "crop window outside image");
    let mut data = Vec::with_capacity(w * h);
    for row in y..y + h {
        data.extend_from_slice(&p.data[row * p.width + x..row * p.width + x + w]);
    }
    Plane { width: w, height: h, data }
}

pub fn hflip(p: &Plane) -> Plane {
    let mut data = Vec::with_capacity(p.data.len());
    for row in p.data.chunks(p.width) {
        data.extend(row.iter().rev());
    }
    Plane { data, ..*p }
}

/// Rotation about the centre by `deg` degrees (counter-clockwise), bilinear,
/// with `fill` outside the source.
pub fn rotate(p: &Plane, deg: f64, fill: f32) -> Plane {
    if deg == 0.0 {
        return p.clone();
    }
    let (s, c) = deg.to_radians().sin_cos();
    let cx = (p.width as f64 - 1.0) / 2.0;
    let cy = (p.height as f64 - 1.0) / 2.0;
    let sample = |x: f64, y: f64| -> f32 {
        if x < 0.0 || y < 0.0 || x > (p.width - 1) as f64 || y > (p.height - 1) as f64 {
            return fill;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(p.width - 1), (y0 + 1).min(p.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = p.at(x0, y0) * (1.0 - fx) + p.at(x1, y0) * fx;
        let bottom = p.at(x0, y1) * (1.0 - fx) + p.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height {
        for x in 0..p.width {
            // inverse map: rotate the destination back onto the source
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            data.push(sample(sx, sy));
        }
    }
    Plane { data, ..*p }
}

/// Augmentation draws, always taken in this order so that disabled steps
/// leave the stream aligned.
struct Draws {
    x: usize,
    y: usize,
    flip: bool,
    angle: f64,
}

fn draw<R: Rng + ?Sized>(cfg: &PreprocessConfig, rng: &mut R) -> Draws {
    let span = 2 * cfg.crop_pad;
    let x = rng.random_range(0..=span);
    let y = rng.random_range(0..=span);
    let flip = rng.random::<f64>() < cfg.hflip_p;
    let angle = (2.0 * rng.random::<f64>() - 1.0) * cfg.rotation_deg;
    Draws { x, y, flip, angle }
}

/// Resize, pad by `crop_pad` with white and crop back to `target` at a random offset.
pub fn random_crop<R: Rng + ?Sized>(img: &GrayImage, cfg: &PreprocessConfig, rng: &mut R) -> Plane {
    let d = draw(cfg, rng);
    let base = resize(img, cfg.target);
    crop(&pad(&base, cfg.crop_pad, 1.0), d.x, d.y, cfg.target, cfg.target)
}

/// Grayscale image → normalized `3×target×target` values.
///
/// Training mode: resize, pad, random crop, optional flip, rotation, then
/// replicate and normalize. Evaluation mode: resize, replicate, normalize.
pub fn preprocess<R: Rng + ?Sized>(img: &GrayImage, cfg: &PreprocessConfig, train_mode: bool, rng: &mut R) -> Vec<f32> {
    let t = cfg.target;
    let plane = if train_mode {
        let d = draw(cfg, rng);
        let base = resize(img, t);
        let mut p = crop(&pad(&base, cfg.crop_pad, 1.0), d.x, d.y, t, t);
        if d.flip {
            p = hflip(&p);
        }
        rotate(&p, d.angle, 1.0)
    } else {
        resize(img, t)
    };
    let mut out = Vec::with_capacity(3 * t * t);
    for c in 0..3 {
        let (m, s) = (cfg.mean[c] as f32, cfg.std[c] as f32);
        out.extend(plane.data.iter().map(|&v| (v - m) / s));
    }
    out
}

/// Preprocesses `refs` into `[n, 3, extent, extent]`, padding with the
/// normalized background when the model extent exceeds the target.
///
/// Each image draws from its own stream seeded by `(seed, position)`, so
/// the result does not depend on processing order.
pub fn image_batch<T: Element>(
    ds: &CharacterDataset,
    refs: &[ImageRef],
    cfg: &PreprocessConfig,
    train_mode: bool,
    seed: u64,
    extent: usize,
) -> Result<Tensor<T>> {
    let t = cfg.target;
    if extent < t {
        return Err(AppError::Config(format!(
            "model input {extent} is smaller than the preprocessing target {t}"
        )));
    }
    let mut data = Vec::with_capacity(refs.len() * 3 * t * t);
    for (i, &r) in refs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let px = preprocess(ds.image(r)?, cfg, train_mode, &mut rng);
        data.extend(px.into_iter().map(|v| T::of(v as f64)));
    }
    let batch = Tensor::new(&[refs.len(), 3, t, t], data)?;
    if extent == t {
        return Ok(batch);
    }
    let fill: Vec<T> = cfg.background().iter().map(|&v| T::of(v)).collect();
    Ok(batch.pad_spatial(extent, extent, &fill)?)
}
