//! Photometric and geometric augmentation of flare and background images.
//!
//! | op               | distribution            | applied to  |
//! |------------------|-------------------------|-------------|
//! | inverse gamma    | γ ~ U(1.8, 2.2)         | both        |
//! | RGB scaling      | U(0.5, 1.2) per channel | both        |
//! | Gaussian noise   | σ² ~ 0.01·χ²(1)         | background  |
//! | intensity offset | U(−0.02, 0.02)          | flare       |
//! | color jitter     | U(0.8, 3.0) per channel | flare       |
//! | rotation         | U(0, 2π)                | flare       |
//! | translation      | U(−300, 300) px per axis| flare       |
//! | shear            | U(−20°, 20°)            | flare       |
//! | scaling          | U(0.8, 1.5)             | flare       |
//! | Gaussian blur    | σ ~ U(0.1, 3.0)         | flare       |
//!
//! Flares go through inverse gamma → RGB scale → affine warp → blur →
//! color jitter → intensity offset; backgrounds through inverse gamma →
//! RGB scale → noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::rng::SeededRng;

pub const GAMMA_RANGE: (f64, f64) = (1.8, 2.2);
pub const RGB_GAIN_RANGE: (f64, f64) = (0.5, 1.2);
pub const NOISE_VAR_SCALE: f64 = 0.01;
pub const NOISE_CHI2_DOF: f64 = 1.0;
pub const OFFSET_RANGE: (f64, f64) = (-0.02, 0.02);
pub const JITTER_RANGE: (f64, f64) = (0.8, 3.0);
pub const ROTATION_RANGE: (f64, f64) = (0.0, std::f64::consts::TAU);
pub const TRANSLATION_RANGE: (f64, f64) = (-300.0, 300.0);
pub const SHEAR_RANGE: (f64, f64) = (
    -20.0 * std::f64::consts::PI / 180.0,
    20.0 * std::f64::consts::PI / 180.0,
);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.5);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 3.0);

/// Every random parameter of one augmentation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPlan {
    pub gamma: f64,
    pub rgb_gains: [f64; 3],
    pub noise_var: f64,
    pub offset: f64,
    pub jitter_gains: [f64; 3],
    /// Radians.
    pub rotation: f64,
    /// `(x, y)` in pixels.
    pub translation: [f64; 2],
    /// Radians.
    pub shear: f64,
    pub scale: f64,
    pub blur_sigma: f64,
}

fn inside(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

impl AugPlan {
    /// Parameters that leave both pipelines (numerically) unchanged. Not
    /// inside the sampling supports: γ = 1 and blur σ sits at the lower bound.
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            rgb_gains: [1.0; 3],
            noise_var: 0.0,
            offset: 0.0,
            jitter_gains: [1.0; 3],
            rotation: 0.0,
            translation: [0.0, 0.0],
            shear: 0.0,
            scale: 1.0,
            blur_sigma: BLUR_SIGMA_RANGE.0,
        }
    }

    pub fn within_support(&self) -> bool {
        inside(self.gamma, GAMMA_RANGE)
            && self.rgb_gains.iter().all(|&g| inside(g, RGB_GAIN_RANGE))
            && self.noise_var >= 0.0
            && self.noise_var.is_finite()
            && inside(self.offset, OFFSET_RANGE)
            && self.jitter_gains.iter().all(|&g| inside(g, JITTER_RANGE))
            && inside(self.rotation, ROTATION_RANGE)
            && self
                .translation
                .iter()
                .all(|&t| inside(t, TRANSLATION_RANGE))
            && inside(self.shear, SHEAR_RANGE)
            && inside(self.scale, SCALE_RANGE)
            && inside(self.blur_sigma, BLUR_SIGMA_RANGE)
    }

    pub fn affine(&self) -> AffineParams {
        AffineParams {
            rotation: self.rotation,
            translation: self.translation,
            shear: self.shear,
            scale: self.scale,
        }
    }
}

fn draw(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    rng.uniform(lo, hi)
}

/// Draws a plan; fields are sampled in declaration order.
pub fn draw_plan(rng: &mut SeededRng) -> AugPlan {
    let gamma = draw(rng, GAMMA_RANGE);
    let rgb_gains = [(); 3].map(|_| draw(rng, RGB_GAIN_RANGE));
    let noise_var = NOISE_VAR_SCALE * rng.chi_squared(NOISE_CHI2_DOF);
    let offset = draw(rng, OFFSET_RANGE);
    let jitter_gains = [(); 3].map(|_| draw(rng, JITTER_RANGE));
    let rotation = draw(rng, ROTATION_RANGE);
    let translation = [(); 2].map(|_| draw(rng, TRANSLATION_RANGE));
    let shear = draw(rng, SHEAR_RANGE);
    let scale = draw(rng, SCALE_RANGE);
    let blur_sigma = draw(rng, BLUR_SIGMA_RANGE);
    AugPlan {
        gamma,
        rgb_gains,
        noise_var,
        offset,
        jitter_gains,
        rotation,
        translation,
        shear,
        scale,
        blur_sigma,
    }
}

/// `out = in^gamma`.
pub fn inverse_gamma(img: &ImageF, gamma: f64) -> Result<ImageF> {
    if img.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("inverse gamma needs nonnegative samples"));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    Ok(img.map(|v| v.powf(gamma)))
}

fn require_rgb(img: &ImageF) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected a 3-channel image, got {}",
            img.channels()
        )));
    }
    Ok(())
}

fn per_channel_gain(img: &ImageF, gains: [f64; 3]) -> Result<ImageF> {
    require_rgb(img)?;
    let mut out = img.clone();
    for (c, g) in gains.iter().enumerate() {
        out.plane_mut(c).iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

pub fn rgb_scale(img: &ImageF, gains: [f64; 3]) -> Result<ImageF> {
    per_channel_gain(img, gains)
}

/// Per-channel multiplicative gain on the flare.
pub fn color_jitter(img: &ImageF, gains: [f64; 3]) -> Result<ImageF> {
    per_channel_gain(img, gains)
}

/// Adds `offset` and clips at zero.
pub fn intensity_offset(img: &ImageF, offset: f64) -> Result<ImageF> {
    require_rgb(img)?;
    Ok(img.map(|v| (v + offset).max(0.0)))
}

/// Adds i.i.d. `N(0, var)` to every sample; no clipping.
pub fn gaussian_noise(img: &ImageF, var: f64, rng: &mut SeededRng) -> Result<ImageF> {
    if !(var >= 0.0 && var.is_finite()) {
        return Err(Error::invalid("noise variance must be finite and >= 0"));
    }
    if var == 0.0 {
        return Ok(img.clone());
    }
    let std = var.sqrt();
    let data = img
        .data()
        .iter()
        .map(|&v| v + rng.normal(0.0, std))
        .collect();
    ImageF::new(img.height(), img.width(), img.channels(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translation: [f64; 2],
    pub shear: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: [0.0, 0.0],
            shear: 0.0,
            scale: 1.0,
        }
    }

    /// Row-major 2×2 `R · Sh · S` acting on `(x, y)`.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.shear.tan();
        let z = self.scale;
        // R = [[c, -s], [s, c]], Sh = [[1, k], [0, 1]], S = z·I
        [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]]
    }
}

/// Warps about the image center: scale, then shear, rotate, translate.
/// Bilinear sampling; pixels mapping outside the source are zero.
pub fn affine_warp(img: &ImageF, params: AffineParams) -> Result<ImageF> {
    let m = params.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::invalid("affine map is singular"));
    }
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let (h, w, channels) = img.shape();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let [tx, ty] = params.translation;
    let mut out = ImageF::zeros(h, w, channels);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            for c in 0..channels {
                out.set(c, y, x, sample_bilinear(img, c, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Bilinear lookup with zero outside the raster.
pub fn sample_bilinear(img: &ImageF, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            img.get(c, yy as usize, xx as usize)
        }
    };
    let mut v = (1.0 - fx) * (1.0 - fy) * at(y0, x0);
    if fx != 0.0 {
        v += fx * (1.0 - fy) * at(y0, x0 + 1);
    }
    if fy != 0.0 {
        v += (1.0 - fx) * fy * at(y0 + 1, x0);
        if fx != 0.0 {
            v += fx * fy * at(y0 + 1, x0 + 1);
        }
    }
    v
}

/// Mirror index without repeating the edge sample (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Normalized 1-D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageF, sigma: f64) -> Result<ImageF> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (h, w, channels) = img.shape();
    let mut planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let src = img.plane(c);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * src[y * w + reflect_index(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * tmp[reflect_index(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
        planes.push(out);
    }
    ImageF::from_planes(h, w, planes)
}

/// Resamples to `h × w` by bilinear interpolation of pixel centers, edges clamped.
pub fn resize_bilinear(img: &ImageF, h: usize, w: usize) -> Result<ImageF> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("resize target must be nonempty"));
    }
    let (sh, sw, channels) = img.shape();
    let sy = sh as f64 / h as f64;
    let sx = sw as f64 / w as f64;
    Ok(ImageF::from_fn(h, w, channels, |c, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        sample_bilinear(img, c, fy, fx)
    }))
}

/// The `h × w` window whose top-left corner is `(top, left)`.
pub fn crop(img: &ImageF, top: usize, left: usize, h: usize, w: usize) -> Result<ImageF> {
    if top + h > img.height() || left + w > img.width() || h == 0 || w == 0 {
        return Err(Error::invalid("crop window outside image"));
    }
    Ok(ImageF::from_fn(h, w, img.channels(), |c, y, x| {
        img.get(c, top + y, left + x)
    }))
}

/// One pipeline stage, recorded by the traced pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    InverseGamma,
    RgbScale,
    GaussianNoise,
    IntensityOffset,
    ColorJitter,
    AffineWarp,
    GaussianBlur,
}

pub fn apply_flare_pipeline(img: &ImageF, plan: &AugPlan) -> Result<ImageF> {
    apply_flare_pipeline_traced(img, plan, &mut Vec::new())
}

pub fn apply_flare_pipeline_traced(
    img: &ImageF,
    plan: &AugPlan,
    trace: &mut Vec<AugOp>,
) -> Result<ImageF> {
    let mut x = inverse_gamma(img, plan.gamma)?;
    trace.push(AugOp::InverseGamma);
    x = rgb_scale(&x, plan.rgb_gains)?;
    trace.push(AugOp::RgbScale);
    x = affine_warp(&x, plan.affine())?;
    trace.push(AugOp::AffineWarp);
    x = gaussian_blur(&x, plan.blur_sigma)?;
    trace.push(AugOp::GaussianBlur);
    x = color_jitter(&x, plan.jitter_gains)?;
    trace.push(AugOp::ColorJitter);
    x = intensity_offset(&x, plan.offset)?;
    trace.push(AugOp::IntensityOffset);
    Ok(x)
}

pub fn apply_background_pipeline(
    img: &ImageF,
    plan: &AugPlan,
    rng: &mut SeededRng,
) -> Result<ImageF> {
    apply_background_pipeline_traced(img, plan, rng, &mut Vec::new())
}

pub fn apply_background_pipeline_traced(
    img: &ImageF,
    plan: &AugPlan,
    rng: &mut SeededRng,
    trace: &mut Vec<AugOp>,
) -> Result<ImageF> {
    let mut x = inverse_gamma(img, plan.gamma)?;
    trace.push(AugOp::InverseGamma);
    x = rgb_scale(&x, plan.rgb_gains)?;
    trace.push(AugOp::RgbScale);
    x = gaussian_noise(&x, plan.noise_var, rng)?;
    trace.push(AugOp::GaussianNoise);
    Ok(x)
}
