//! Seeded synthetic image pairs related by a known homography.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::homography::{dlt, image_corners, Homography};
use crate::image_io::GrayImage;

/// Blur applied to white noise to make the texture band-limited, in pixels.
pub const TEXTURE_BLUR: f64 = 1.5;
/// Contrast factor of the low-texture kind.
pub const LOW_CONTRAST: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// Horizontal shift by `magnitude` pixels.
    Translate,
    /// Rotation by `magnitude` degrees about the image center.
    Rotate,
    /// Corners moved by up to `magnitude` pixels each.
    Homography,
    /// Like `Translate`, on a texture with a tenth of the contrast.
    Lowtexture,
}

impl FromStr for PairKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Self::Translate),
            "rotate" => Ok(Self::Rotate),
            "homography" => Ok(Self::Homography),
            "lowtexture" => Ok(Self::Lowtexture),
            other => Err(HarnessError::Core(winmatch_core::Error::Parameter(format!(
                "unknown pair kind `{other}` (translate, rotate, homography, lowtexture)"
            )))),
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translate => "translate",
            Self::Rotate => "rotate",
            Self::Homography => "homography",
            Self::Lowtexture => "lowtexture",
        })
    }
}

/// Parameters that fully determine a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub kind: PairKind,
    pub h: usize,
    pub w: usize,
    pub magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub spec: PairSpec,
    pub image_a: GrayImage,
    pub image_b: GrayImage,
    /// Maps A pixel coordinates to B pixel coordinates.
    pub h_gt: Homography,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable blur with edge clamping.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * src[y * w + clamp(x as i64 + i as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * tmp[clamp(y as i64 + i as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

/// Blurred white noise stretched to `[0, 1]`.
pub fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let t = blur(&noise, h, w, TEXTURE_BLUR);
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    t.into_iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect()
}

/// Bilinear sample with pixel `i` centered at `i`; zero outside the image.
pub fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    if !(x >= 0.0 && y >= 0.0 && x <= (img.w - 1) as f64 && y <= (img.h - 1) as f64) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.w - 1), (y0 + 1).min(img.h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// `out(p) = img(H⁻¹ p)`.
pub fn warp(img: &GrayImage, h: &Homography) -> Result<GrayImage> {
    let inv = h
        .inverse()
        .ok_or_else(|| HarnessError::Core(winmatch_core::Error::Degenerate("homography is singular".into())))?;
    let mut pixels = Vec::with_capacity(img.h * img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            pixels.push(sample_bilinear(img, sx, sy));
        }
    }
    Ok(GrayImage::new(img.h, img.w, pixels))
}

fn ground_truth(spec: &PairSpec, rng: &mut ChaCha8Rng) -> Result<Homography> {
    let m = spec.magnitude;
    Ok(match spec.kind {
        PairKind::Translate | PairKind::Lowtexture => Homography::translation(m, 0.0),
        PairKind::Rotate => Homography::rotation_about(m, (spec.w as f64 - 1.0) / 2.0, (spec.h as f64 - 1.0) / 2.0),
        PairKind::Homography if m == 0.0 => Homography::identity(),
        PairKind::Homography => {
            let corners = image_corners(spec.h, spec.w);
            let moved: Vec<[f64; 2]> = corners
                .iter()
                .map(|c| {
                    let m = m.abs();
                    [c[0] + rng.random_range(-m..=m), c[1] + rng.random_range(-m..=m)]
                })
                .collect();
            dlt(&corners, &moved)?
        }
    })
}

pub fn gen_pair(spec: PairSpec) -> Result<SyntheticPair> {
    let PairSpec { h, w, magnitude, noise_sigma, seed, kind } = spec;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(HarnessError::Core(winmatch_core::Error::Partition { h, w, s: 16 }));
    }
    if !magnitude.is_finite() || !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(HarnessError::Core(winmatch_core::Error::Parameter(format!(
            "magnitude {magnitude} and noise sigma {noise_sigma} must be finite, sigma nonnegative"
        ))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex = texture(h, w, &mut rng);
    if kind == PairKind::Lowtexture {
        tex.iter_mut().for_each(|v| *v = 0.5 + LOW_CONTRAST * (*v - 0.5));
    }
    let image_a = GrayImage::new(h, w, tex);
    let h_gt = ground_truth(&spec, &mut rng)?;
    let mut image_b = warp(&image_a, &h_gt)?;
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
        image_b.pixels.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(SyntheticPair { spec, image_a, image_b, h_gt })
}
