//! Restoration metrics and training-loss terms.
//!
//! PSNR, SSIM and region-restricted PSNR score restorations. The losses
//! (L1, high-frequency, masked flare reconstruction) come with analytic
//! gradients with respect to the prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::augment::reflect_index;
use crate::error::{Error, Result};
use crate::image::ImageF;

/// A PSNR value; identical inputs have no finite PSNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Psnr::Infinite
    }

    fn from_mse(mse: f64, peak: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Db(10.0 * (peak * peak / mse).log10())
        }
    }
}

/// Finite values serialize as numbers, the infinite marker as `"inf"`.
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Mean squared error over the samples whose pixel index passes `keep`,
/// summed in storage order. `None` when nothing is kept.
fn mse_where(a: &ImageF, b: &ImageF, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let n = a.height() * a.width();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if keep(i % n) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn psnr(a: &ImageF, b: &ImageF, peak: f64) -> Result<Psnr> {
    a.same_shape(b)?;
    if !(peak > 0.0) {
        return Err(Error::invalid("peak must be > 0"));
    }
    let mse = mse_where(a, b, |_| true).expect("images are nonempty");
    Ok(Psnr::from_mse(mse, peak))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM with peak 1.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

/// Mean SSIM over all fully covered 11×11 Gaussian windows (σ = 1.5) of the
/// channel-mean grayscale images.
pub fn ssim_with_peak(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (ga, gb) = (channel_mean(a), channel_mean(b));
    let taps = gaussian_window();
    let aa: Vec<f64> = ga.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = gb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();
    let f = |p: &[f64]| filter_valid(p, h, w, &taps);
    let (mu_a, mu_b, e_aa, e_bb, e_ab) = (f(&ga), f(&gb), f(&aa), f(&bb), f(&ab));
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn channel_mean(img: &ImageF) -> Vec<f64> {
    let n = img.height() * img.width();
    let c = img.channels() as f64;
    (0..n)
        .map(|i| (0..img.channels()).map(|ch| img.plane(ch)[i]).sum::<f64>() / c)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable filtering keeping only positions where the window fits.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(t, c)| c * p[y * w + x + t])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(t, c)| c * rows[(y + t) * ow + x])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Glare,
    Streak,
    Full,
}

/// Per-pixel weights in `[0, 1]` selecting an evaluation region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    grid: Vec<f64>,
    kind: MaskKind,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, grid: Vec<f64>, kind: MaskKind) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} mask"),
                format!("{} samples", grid.len()),
            ));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            grid,
            kind,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![1.0; height * width],
            kind: MaskKind::Full,
        }
    }

    /// Channel mean of a mask image.
    pub fn from_image(img: &ImageF, kind: MaskKind) -> Result<Self> {
        let grid = channel_mean(img)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(img.height(), img.width(), grid, kind)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn check(&self, img: &ImageF) -> Result<()> {
        if (self.height, self.width) != (img.height(), img.width()) {
            return Err(Error::shape(
                format!("mask {}x{}", self.height, self.width),
                format!("image {}x{}", img.height(), img.width()),
            ));
        }
        Ok(())
    }
}

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// PSNR over the pixels with `mask ≥ thresh` (all channels of those pixels).
/// G-PSNR uses a glare mask, S-PSNR a streak mask.
pub fn masked_psnr(
    a: &ImageF,
    b: &ImageF,
    mask: &RegionMask,
    thresh: f64,
    peak: f64,
) -> Result<Psnr> {
    a.same_shape(b)?;
    mask.check(a)?;
    if !(peak > 0.0) {
        return Err(Error::invalid("peak must be > 0"));
    }
    let mse = mse_where(a, b, |i| mask.grid[i] >= thresh).ok_or_else(|| {
        Error::invalid(format!(
            "no {:?} mask pixels at or above {thresh}",
            mask.kind
        ))
    })?;
    Ok(Psnr::from_mse(mse, peak))
}

pub fn l1_loss(pred: &ImageF, gt: &ImageF) -> Result<f64> {
    pred.same_shape(gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(pred − gt) / count`, zero at ties.
pub fn grad_l1(pred: &ImageF, gt: &ImageF) -> Result<ImageF> {
    pred.same_shape(gt)?;
    let n = pred.data().len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| sign(p - g) / n)
        .collect();
    ImageF::new(pred.height(), pred.width(), pred.channels(), data)
}

pub const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3×3 cross-correlation with reflect padding. For zero-sum kernels taps are
/// read relative to the center sample, the same linear map but exactly zero
/// on constant regions.
pub fn correlate3(plane: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let zero_sum = k.iter().flatten().sum::<f64>() == 0.0;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let reference = if zero_sum { plane[y * w + x] } else { 0.0 };
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let sy = reflect_index(y as isize + dy as isize - 1, h);
                for (dx, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        acc += c
                            * (plane[sy * w + reflect_index(x as isize + dx as isize - 1, w)]
                                - reference);
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Exact adjoint of [`correlate3`]: scatters `g` back through the same taps,
/// folding reflected reads onto the pixels they came from.
pub fn correlate3_adjoint(g: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x];
            if v == 0.0 {
                continue;
            }
            for (dy, row) in k.iter().enumerate() {
                let sy = reflect_index(y as isize + dy as isize - 1, h);
                for (dx, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        out[sy * w + reflect_index(x as isize + dx as isize - 1, w)] += c * v;
                    }
                }
            }
        }
    }
    out
}

fn hf_check(pred: &ImageF, gt: &ImageF) -> Result<()> {
    pred.same_shape(gt)?;
    if pred.height() < 3 || pred.width() < 3 {
        return Err(Error::invalid(
            "high-frequency loss needs at least 3x3 pixels",
        ));
    }
    Ok(())
}

fn difference(pred: &ImageF, gt: &ImageF, c: usize) -> Vec<f64> {
    pred.plane(c)
        .iter()
        .zip(gt.plane(c))
        .map(|(p, g)| p - g)
        .collect()
}

/// `½·mean|lap(pred) − lap(gt)| + ½·mean|sob(pred) − sob(gt)|`, where the
/// Sobel term averages over both the x and the y response.
pub fn hf_loss(pred: &ImageF, gt: &ImageF) -> Result<f64> {
    hf_check(pred, gt)?;
    let (h, w, channels) = pred.shape();
    let n = (h * w * channels) as f64;
    let (mut lap, mut sob) = (0.0, 0.0);
    for c in 0..channels {
        let d = difference(pred, gt, c);
        lap += correlate3(&d, h, w, &LAPLACIAN)
            .iter()
            .map(|v| v.abs())
            .sum::<f64>();
        sob += correlate3(&d, h, w, &SOBEL_X)
            .iter()
            .map(|v| v.abs())
            .sum::<f64>();
        sob += correlate3(&d, h, w, &SOBEL_Y)
            .iter()
            .map(|v| v.abs())
            .sum::<f64>();
    }
    Ok(0.5 * lap / n + 0.5 * sob / (2.0 * n))
}

/// Gradient of [`hf_loss`] with respect to `pred`.
pub fn grad_hf(pred: &ImageF, gt: &ImageF) -> Result<ImageF> {
    hf_check(pred, gt)?;
    let (h, w, channels) = pred.shape();
    let n = (h * w * channels) as f64;
    let mut planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let d = difference(pred, gt, c);
        let mut g = vec![0.0; h * w];
        for (kernel, weight) in [
            (&LAPLACIAN, 0.5 / n),
            (&SOBEL_X, 0.25 / n),
            (&SOBEL_Y, 0.25 / n),
        ] {
            let s: Vec<f64> = correlate3(&d, h, w, kernel)
                .iter()
                .map(|&v| weight * sign(v))
                .collect();
            for (gi, a) in g.iter_mut().zip(correlate3_adjoint(&s, h, w, kernel)) {
                *gi += a;
            }
        }
        planes.push(g);
    }
    ImageF::from_planes(h, w, planes)
}

/// Masked flare-reconstruction L1: mean of `|(input − pred_scene) − gt_flare|`
/// over the pixels with `mask ≥ 0.5`.
pub fn rec_loss(
    pred_scene: &ImageF,
    input: &ImageF,
    gt_flare: &ImageF,
    mask: &RegionMask,
) -> Result<f64> {
    pred_scene.same_shape(input)?;
    pred_scene.same_shape(gt_flare)?;
    mask.check(pred_scene)?;
    let n = pred_scene.height() * pred_scene.width();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred_scene.data().len() {
        if mask.grid[i % n] >= DEFAULT_MASK_THRESHOLD {
            sum += (input.data()[i] - pred_scene.data()[i] - gt_flare.data()[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("reconstruction mask is empty"));
    }
    Ok(sum / count as f64)
}

/// Reconstruction mask: everything except the light-source core of `flare`.
pub fn rec_mask_from_light_source(flare: &ImageF, threshold: f64) -> Result<RegionMask> {
    let grid = flare
        .luminance()
        .into_iter()
        .map(|l| if l >= threshold { 0.0 } else { 1.0 })
        .collect();
    RegionMask::new(flare.height(), flare.width(), grid, MaskKind::Full)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub vgg: f64,
    pub rec: f64,
    pub hf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.5,
            vgg: 0.5,
            rec: 1.0,
            hf: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.vgg, self.rec, self.hf]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Loss components. The perceptual term needs a pretrained network and is
/// supplied from outside when available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l1: f64,
    pub vgg: Option<f64>,
    pub rec: f64,
    pub hf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub total: f64,
    /// False when the perceptual term was absent and contributed nothing.
    pub vgg_included: bool,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<TotalLoss> {
    w.validate()?;
    let values = [Some(parts.l1), parts.vgg, Some(parts.rec), Some(parts.hf)];
    if values
        .iter()
        .flatten()
        .any(|v| !(*v >= 0.0 && v.is_finite()))
    {
        return Err(Error::invalid("loss components must be finite and >= 0"));
    }
    let total =
        w.l1 * parts.l1 + w.vgg * parts.vgg.unwrap_or(0.0) + w.rec * parts.rec + w.hf * parts.hf;
    Ok(TotalLoss {
        total,
        vgg_included: parts.vgg.is_some(),
    })
}

/// A full-reference score computed outside this crate (LPIPS, VGG distance).
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    /// Score for the pair stored under `key`; `None` when unavailable.
    fn score(&self, key: &str, pred: &ImageF, gt: &ImageF) -> Option<f64>;
}

/// Scores read from a precomputed `{ "image name": score }` table.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(transparent)]
pub struct ExternalScores {
    scores: BTreeMap<String, f64>,
}

impl ExternalScores {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("score table: {e}")))
    }
}

impl PerceptualMetric for ExternalScores {
    fn name(&self) -> &str {
        "external"
    }

    fn score(&self, key: &str, _pred: &ImageF, _gt: &ImageF) -> Option<f64> {
        self.scores.get(key).copied()
    }
}
