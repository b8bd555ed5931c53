use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::GrayImage;
use crate::error::{Error, Result};

/// Ranges and gate probabilities for the augmentation chain, applied in the
/// order rotate, shear, elastic, contrast, noise to normalized images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Rotation angle drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Horizontal shear factor drawn from `±shear`.
    pub shear: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    /// Contrast factor drawn from `[lo, hi]`.
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    pub p_rotate: f64,
    pub p_shear: f64,
    pub p_elastic: f64,
    pub p_contrast: f64,
    pub p_noise: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_deg: 2.0,
            shear: 0.2,
            elastic_alpha: 1.5,
            elastic_sigma: 3.0,
            contrast: (0.6, 1.0),
            noise_sigma: 0.1,
            p_rotate: 0.5,
            p_shear: 0.5,
            p_elastic: 0.3,
            p_contrast: 0.5,
            p_noise: 0.5,
        }
    }
}

impl AugmentSpec {
    /// Every transform gated off.
    pub fn none() -> Self {
        AugmentSpec {
            p_rotate: 0.0,
            p_shear: 0.0,
            p_elastic: 0.0,
            p_contrast: 0.0,
            p_noise: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.rotation_deg,
            self.shear,
            self.elastic_alpha,
            self.elastic_sigma,
            self.contrast.0,
            self.contrast.1,
            self.noise_sigma,
        ];
        if ranges.iter().any(|v| !v.is_finite() || *v < 0.0) || self.contrast.0 > self.contrast.1 {
            return Err(Error::Config(format!("invalid augmentation ranges: {self:?}")));
        }
        let probs = [self.p_rotate, self.p_shear, self.p_elastic, self.p_contrast, self.p_noise];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn warp(img: &GrayImage, map: impl Fn(f64, f64) -> (f64, f64)) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            out.push(img.sample(sy, sx));
        }
    }
    GrayImage::new(h, w, out).unwrap()
}

fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * field[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Applies the gated transform chain with a stream seeded by `seed`; the
/// result is clamped to `[−1, 1]`.
pub fn augment(img: &GrayImage, spec: &AugmentSpec, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = img.clone();

    // Each gate consumes its draws whether or not it fires, so one
    // transform's setting never shifts another's randomness.
    let fire = rng.random_bool(spec.p_rotate);
    let angle = rng.random_range(-1.0..=1.0) * spec.rotation_deg.to_radians();
    if fire {
        let (s, c) = angle.sin_cos();
        out = warp(&out, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + c * dy - s * dx, cx + s * dy + c * dx)
        });
    }

    let fire = rng.random_bool(spec.p_shear);
    let k = rng.random_range(-1.0..=1.0) * spec.shear;
    if fire {
        out = warp(&out, |y, x| (y, x + k * (y - cy)));
    }

    let fire = rng.random_bool(spec.p_elastic);
    let field_seed: u64 = rng.random();
    if fire && spec.elastic_alpha > 0.0 {
        let mut frng = ChaCha8Rng::seed_from_u64(field_seed);
        let mut field = || -> Vec<f64> {
            let raw: Vec<f64> = (0..h * w).map(|_| frng.random_range(-1.0..=1.0)).collect();
            gaussian_blur(&raw, h, w, spec.elastic_sigma)
        };
        let (fy, fx) = (field(), field());
        // rescale so the strongest displacement equals alpha pixels
        let peak = fy.iter().chain(&fx).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let a = spec.elastic_alpha / peak;
        out = warp(&out, |y, x| {
            let i = y as usize * w + x as usize;
            (y + a * fy[i], x + a * fx[i])
        });
    }

    let fire = rng.random_bool(spec.p_contrast);
    let factor = if spec.contrast.0 < spec.contrast.1 {
        rng.random_range(spec.contrast.0..=spec.contrast.1)
    } else {
        spec.contrast.0
    };
    if fire {
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.data().len() as f64;
        for v in out.data_mut() {
            *v = (mean + factor * (*v as f64 - mean)) as f32;
        }
    }

    let fire = rng.random_bool(spec.p_noise);
    let noise_seed: u64 = rng.random();
    if fire && spec.noise_sigma > 0.0 {
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, spec.noise_sigma).unwrap();
        for v in out.data_mut() {
            *v += normal.sample(&mut nrng) as f32;
        }
    }

    for v in out.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    out
}
