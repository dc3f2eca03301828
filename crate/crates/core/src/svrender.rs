//! Spatially varying blur and flare/background compositing.
//!
//! A pixel's kernel is `h_x = Σ_i β_i(x) φ_i`, centered on the pixel, so
//!
//! ```text
//! out(x) = Σ_u h_x(u) · in(x − u) = Σ_i β_i(x) · (φ_i ⊛ in)(x)
//! ```
//!
//! with zero padding outside the image. The right-hand form costs `K`
//! ordinary convolutions, done directly or through the FFT.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2Plan;
use crate::image::ImageF;
use crate::optics::PsfBasis;

/// Largest image side accepted by [`brute_force_sv`].
pub const BRUTE_FORCE_MAX_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMethod {
    /// Direct summation for kernels up to 9×9, FFT above.
    Auto,
    Direct,
    Fft,
}

/// "Same"-size zero-padded convolution of an `h × w` plane with a `k × k`
/// kernel whose zero-shift tap is `(k/2, k/2)`.
pub fn convolve_direct(plane: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let c = (k / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    let mut out = vec![0.0; h * w];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for ty in 0..k as isize {
                let sy = y - (ty - c);
                if sy < 0 || sy >= hi {
                    continue;
                }
                let row = &plane[(sy * wi) as usize..];
                let krow = &kernel[(ty as usize) * k..];
                for tx in 0..k as isize {
                    let sx = x - (tx - c);
                    if sx < 0 || sx >= wi {
                        continue;
                    }
                    acc += krow[tx as usize] * row[sx as usize];
                }
            }
            out[(y * wi + x) as usize] = acc;
        }
    }
    out
}

/// FFT convolution over a `(h+k-1) × (w+k-1)` grid, with the same result as
/// [`convolve_direct`] up to rounding.
pub struct FftConvolver {
    h: usize,
    w: usize,
    k: usize,
    ph: usize,
    pw: usize,
    plan: Fft2Plan,
}

impl FftConvolver {
    pub fn new(h: usize, w: usize, k: usize) -> Self {
        let (ph, pw) = (h + k - 1, w + k - 1);
        Self {
            h,
            w,
            k,
            ph,
            pw,
            plan: Fft2Plan::new(ph, pw),
        }
    }

    fn spectrum(&self, src: &[f64], sh: usize, sw: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.ph * self.pw];
        for y in 0..sh {
            for x in 0..sw {
                buf[y * self.pw + x] = Complex64::new(src[y * sw + x], 0.0);
            }
        }
        self.plan.process(&mut buf, FftDirection::Forward);
        buf
    }

    pub fn plane_spectrum(&self, plane: &[f64]) -> Vec<Complex64> {
        self.spectrum(plane, self.h, self.w)
    }

    pub fn kernel_spectrum(&self, kernel: &[f64]) -> Vec<Complex64> {
        self.spectrum(kernel, self.k, self.k)
    }

    /// Inverse of the spectral product, cropped back to `h × w`.
    pub fn apply(&self, plane_hat: &[Complex64], kernel_hat: &[Complex64]) -> Vec<f64> {
        // unitary transforms: F(a * b) = sqrt(N) F(a) F(b)
        let scale = ((self.ph * self.pw) as f64).sqrt();
        let mut buf: Vec<Complex64> = plane_hat
            .iter()
            .zip(kernel_hat)
            .map(|(a, b)| a * b * scale)
            .collect();
        self.plan.process(&mut buf, FftDirection::Inverse);
        let c = self.k / 2;
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.push(buf[(y + c) * self.pw + x + c].re);
            }
        }
        out
    }

    pub fn convolve(&self, plane: &[f64], kernel: &[f64]) -> Vec<f64> {
        self.apply(&self.plane_spectrum(plane), &self.kernel_spectrum(kernel))
    }
}

pub fn sv_convolve(clear: &ImageF, basis: &PsfBasis) -> Result<ImageF> {
    sv_convolve_with(clear, basis, ConvMethod::Auto)
}

/// Spatially varying convolution of every channel of `clear`.
pub fn sv_convolve_with(clear: &ImageF, basis: &PsfBasis, method: ConvMethod) -> Result<ImageF> {
    let (h, w, channels) = clear.shape();
    if basis.resolution() != (h, w) {
        return Err(Error::shape(
            format!("coefficient maps {:?}", basis.resolution()),
            format!("image {:?}", (h, w)),
        ));
    }
    let k = basis.kernel_size();
    let use_fft = match method {
        ConvMethod::Auto => k > 9,
        ConvMethod::Direct => false,
        ConvMethod::Fft => true,
    };
    let convolver = use_fft.then(|| FftConvolver::new(h, w, k));
    let kernel_hats: Vec<Vec<Complex64>> = match &convolver {
        Some(cv) => basis
            .bases()
            .iter()
            .map(|b| cv.kernel_spectrum(b))
            .collect(),
        None => Vec::new(),
    };
    let planes: Vec<Vec<f64>> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let plane = clear.plane(c);
            let plane_hat = convolver.as_ref().map(|cv| cv.plane_spectrum(plane));
            let mut out = vec![0.0; h * w];
            for (i, (kernel, beta)) in basis.bases().iter().zip(basis.coeff_maps()).enumerate() {
                let blurred = match (&convolver, &plane_hat) {
                    (Some(cv), Some(ph)) => cv.apply(ph, &kernel_hats[i]),
                    _ => convolve_direct(plane, h, w, kernel, k),
                };
                for ((o, b), v) in out.iter_mut().zip(beta).zip(blurred) {
                    *o += b * v;
                }
            }
            out
        })
        .collect();
    ImageF::from_planes(h, w, planes)
}

/// Reference implementation: reassemble `h_x` at every pixel and sum directly.
/// Limited to images of at most 64×64.
pub fn brute_force_sv(clear: &ImageF, basis: &PsfBasis) -> Result<ImageF> {
    let (h, w, channels) = clear.shape();
    if h > BRUTE_FORCE_MAX_SIDE || w > BRUTE_FORCE_MAX_SIDE {
        return Err(Error::invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_SIDE}x{BRUTE_FORCE_MAX_SIDE}, got {h}x{w}"
        )));
    }
    if basis.resolution() != (h, w) {
        return Err(Error::shape(
            format!("coefficient maps {:?}", basis.resolution()),
            format!("image {:?}", (h, w)),
        ));
    }
    let k = basis.kernel_size() as isize;
    let c = k / 2;
    let mut out = ImageF::zeros(h, w, channels);
    for y in 0..h {
        for x in 0..w {
            let kernel = basis.kernel_at(y, x);
            for ch in 0..channels {
                let mut acc = 0.0;
                for ty in 0..k {
                    for tx in 0..k {
                        let sy = y as isize - (ty - c);
                        let sx = x as isize - (tx - c);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += kernel[(ty * k + tx) as usize]
                                * clear.get(ch, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(ch, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// How a flare and a background become an (input, ground truth) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeRecipe {
    /// Display gamma of the scene files; used when reading and writing PNGs.
    pub gamma: f64,
    pub clip_high: f64,
    pub include_light_source_in_gt: bool,
    /// Luminance cut for the light-source core added to the ground truth.
    pub light_source_threshold: f64,
}

impl Default for CompositeRecipe {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            clip_high: 1.0,
            include_light_source_in_gt: true,
            light_source_threshold: 0.97,
        }
    }
}

impl CompositeRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if !(self.clip_high > 0.0 && self.clip_high.is_finite()) {
            return Err(Error::invalid("clip_high must be > 0"));
        }
        if !(self.light_source_threshold > 0.0 && self.light_source_threshold <= 1.0) {
            return Err(Error::invalid("light_source_threshold must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Additive composite in linear light. Both outputs are clipped to `[0, clip_high]`.
pub fn composite(
    background: &ImageF,
    flare: &ImageF,
    recipe: &CompositeRecipe,
) -> Result<(ImageF, ImageF)> {
    recipe.validate()?;
    if background.channels() != 3 {
        return Err(Error::invalid("composite expects 3-channel images"));
    }
    background.same_shape(flare)?;
    let hi = recipe.clip_high;
    let add = |a: &ImageF, b: &ImageF| {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x + y).clamp(0.0, hi))
            .collect();
        ImageF::new(a.height(), a.width(), a.channels(), data)
    };
    let input = add(background, flare)?;
    let gt = if recipe.include_light_source_in_gt {
        add(
            background,
            &light_source_core(flare, recipe.light_source_threshold)?,
        )?
    } else {
        background.map(|v| v.clamp(0.0, hi))
    };
    Ok((input, gt))
}

/// `flare` where its luminance is at least `threshold`, zero elsewhere.
pub fn light_source_core(flare: &ImageF, threshold: f64) -> Result<ImageF> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let lum = flare.luminance();
    let mut out = flare.clone();
    for c in 0..flare.channels() {
        for (v, &l) in out.plane_mut(c).iter_mut().zip(&lum) {
            if l < threshold {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
