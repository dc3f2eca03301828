//! Pupils, FFT-based PSFs, anchor PSF grids and their low-rank basis.
//!
//! A PSF is `|F{A · exp(jφ)}|^2` with the unitary FFT, shifted so the zero
//! frequency sits at `(h/2, w/2)`. With that normalization `Σ h = Σ |P|^2`.
//! The phase convention is `exp(+jφ)` with `φ` in radians throughout.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift, ComplexField};
use crate::image::ImageF;
use crate::tensor::Tensor;
use crate::zernike::{phase_map, AnchorGrid, CoeffField, ZernikeBasis};

/// Amplitude transmittance of the pupil on a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureMask {
    grid_size: usize,
    grid: Vec<f64>,
    radius_frac: f64,
}

impl ApertureMask {
    /// Wraps a user-supplied transmittance grid. `radius_frac` is recorded as 1.
    pub fn from_grid(grid_size: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != grid_size * grid_size {
            return Err(Error::shape(
                format!("{grid_size}x{grid_size} aperture"),
                format!("{} samples", grid.len()),
            ));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("aperture transmittance must lie in [0, 1]"));
        }
        Ok(Self {
            grid_size,
            grid,
            radius_frac: 1.0,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn radius_frac(&self) -> f64 {
        self.radius_frac
    }
}

/// Hard-edged disk of radius `radius_frac · grid_size / 2` around the grid
/// center, tested at pixel centers (distance ≤ radius is inside).
pub fn circular_aperture(grid_size: usize, radius_frac: f64) -> Result<ApertureMask> {
    if !(radius_frac > 0.0 && radius_frac <= 1.0) {
        return Err(Error::invalid(format!(
            "radius_frac must be in (0, 1], got {radius_frac}"
        )));
    }
    if grid_size == 0 {
        return Err(Error::invalid("aperture grid must be nonempty"));
    }
    let half = grid_size as f64 / 2.0;
    let radius = radius_frac * half;
    let grid = (0..grid_size * grid_size)
        .map(|i| {
            let dy = (i / grid_size) as f64 + 0.5 - half;
            let dx = (i % grid_size) as f64 + 0.5 - half;
            if dx.hypot(dy) <= radius {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ApertureMask {
        grid_size,
        grid,
        radius_frac,
    })
}

/// `P = A · exp(jφ)`.
pub fn pupil(aperture: &ApertureMask, phase: &[f64]) -> Result<ComplexField> {
    if phase.len() != aperture.grid.len() {
        return Err(Error::shape(
            format!("{} phase samples", aperture.grid.len()),
            format!("{}", phase.len()),
        ));
    }
    let (re, im): (Vec<f64>, Vec<f64>) = aperture
        .grid
        .iter()
        .zip(phase)
        .map(|(&a, &p)| (a * p.cos(), a * p.sin()))
        .unzip();
    ComplexField::from_re_im(aperture.grid_size, aperture.grid_size, &re, &im)
}

/// A nonnegative kernel with its zero-shift tap at `center = (row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    height: usize,
    width: usize,
    kernel: Vec<f64>,
    center: (usize, usize),
}

impl Psf {
    pub fn new(
        height: usize,
        width: usize,
        kernel: Vec<f64>,
        center: (usize, usize),
    ) -> Result<Self> {
        if kernel.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(
                format!("{height}x{width} kernel"),
                format!("{} taps", kernel.len()),
            ));
        }
        if center.0 >= height || center.1 >= width {
            return Err(Error::invalid("PSF center outside kernel"));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("PSF taps must be finite and nonnegative"));
        }
        Ok(Self {
            height,
            width,
            kernel,
            center,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.kernel[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.kernel.iter().sum()
    }

    /// Intensity-weighted mean tap position `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        let total = self.sum();
        let (mut cy, mut cx) = (0.0, 0.0);
        for (i, &v) in self.kernel.iter().enumerate() {
            cy += v * (i / self.width) as f64;
            cx += v * (i % self.width) as f64;
        }
        (cy / total, cx / total)
    }

    /// Square `size × size` window around the center tap; the new center is `size / 2`.
    pub fn crop_centered(&self, size: usize) -> Result<Psf> {
        if size == 0 || size > self.height || size > self.width {
            return Err(Error::invalid(format!(
                "cannot crop {}x{} PSF to {size}",
                self.height, self.width
            )));
        }
        let half = size / 2;
        if self.center.0 < half || self.center.1 < half {
            return Err(Error::invalid("crop window leaves the kernel"));
        }
        let (oy, ox) = (self.center.0 - half, self.center.1 - half);
        if oy + size > self.height || ox + size > self.width {
            return Err(Error::invalid("crop window leaves the kernel"));
        }
        let mut kernel = Vec::with_capacity(size * size);
        for y in oy..oy + size {
            kernel.extend_from_slice(&self.kernel[y * self.width + ox..y * self.width + ox + size]);
        }
        Psf::new(size, size, kernel, (half, half))
    }
}

/// Squared magnitude of the unitary FFT of `p`, zero frequency moved to the center.
pub fn psf_from_pupil(p: &ComplexField) -> Psf {
    let spectrum = fft2(p);
    let power: Vec<f64> = spectrum.data().iter().map(|z| z.norm_sqr()).collect();
    let (h, w) = (p.height(), p.width());
    Psf {
        height: h,
        width: w,
        kernel: fftshift(&power, h, w),
        center: (h / 2, w / 2),
    }
}

pub fn normalize_psf(h: &Psf) -> Result<Psf> {
    let s = h.sum();
    if !(s > 0.0) {
        return Err(Error::invalid("cannot normalize an all-zero PSF"));
    }
    Ok(Psf {
        kernel: h.kernel.iter().map(|v| v / s).collect(),
        ..h.clone()
    })
}

/// FFT and output sizes for PSF synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsfSampling {
    /// Taps per side of the emitted kernels.
    pub kernel_size: usize,
    /// Side of the zero-padded grid the pupil is embedded in before the FFT.
    /// Padding by `k` samples the PSF `k` times finer than the pupil grid.
    pub fft_size: usize,
}

/// One normalized PSF per anchor, row-major over the anchor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfGrid {
    anchors: AnchorGrid,
    psfs: Vec<Psf>,
    kernel_size: usize,
}

impl PsfGrid {
    pub fn new(anchors: AnchorGrid, psfs: Vec<Psf>) -> Result<Self> {
        if psfs.len() != anchors.len() || psfs.is_empty() {
            return Err(Error::shape(
                format!("{} PSFs", anchors.len()),
                format!("{}", psfs.len()),
            ));
        }
        let k = psfs[0].height;
        if psfs.iter().any(|p| p.height != k || p.width != k) {
            return Err(Error::invalid("anchor PSFs must share one square size"));
        }
        Ok(Self {
            anchors,
            psfs,
            kernel_size: k,
        })
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn psfs(&self) -> &[Psf] {
        &self.psfs
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// `[anchors, k, k]` tensor of all kernels.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self
            .psfs
            .iter()
            .flat_map(|p| p.kernel.iter().copied())
            .collect();
        Tensor::from_f64(
            vec![self.psfs.len(), self.kernel_size, self.kernel_size],
            &data,
        )
        .expect("consistent PSF grid")
    }
}

/// Per anchor: phase map → pupil → zero-pad to `fft_size` → PSF → center crop → normalize.
pub fn build_psf_grid(
    aperture: &ApertureMask,
    basis: &ZernikeBasis,
    field: &CoeffField,
    sampling: PsfSampling,
) -> Result<PsfGrid> {
    if aperture.grid_size != basis.grid_size() {
        return Err(Error::shape(
            format!("aperture grid {}", basis.grid_size()),
            format!("{}", aperture.grid_size),
        ));
    }
    if sampling.fft_size < aperture.grid_size {
        return Err(Error::invalid(
            "fft_size must be at least the pupil grid size",
        ));
    }
    if sampling.kernel_size == 0 || sampling.kernel_size > sampling.fft_size {
        return Err(Error::invalid(format!(
            "kernel_size must be in 1..={}",
            sampling.fft_size
        )));
    }
    let psfs = field
        .coeffs()
        .par_iter()
        .map(|coeffs| {
            let phase = phase_map(basis, coeffs)?;
            let p = pupil(aperture, &phase)?.pad_centered(sampling.fft_size)?;
            let h = psf_from_pupil(&p).crop_centered(sampling.kernel_size)?;
            normalize_psf(&h)
        })
        .collect::<Result<Vec<_>>>()?;
    PsfGrid::new(*field.anchors(), psfs)
}

/// Spatially varying PSF as `h_x = Σ_i β_i(x) φ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfBasis {
    bases: Vec<Vec<f64>>,
    coeff_maps: Vec<Vec<f64>>,
    kernel_size: usize,
    height: usize,
    width: usize,
}

impl PsfBasis {
    /// `bases` are `kernel_size²` kernels centered at `kernel_size / 2`;
    /// `coeff_maps` are `height × width` weight maps, one per kernel.
    pub fn new(
        bases: Vec<Vec<f64>>,
        coeff_maps: Vec<Vec<f64>>,
        kernel_size: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if bases.is_empty() || bases.len() != coeff_maps.len() {
            return Err(Error::shape(
                format!("{} coefficient maps", bases.len()),
                format!("{}", coeff_maps.len()),
            ));
        }
        if bases.iter().any(|b| b.len() != kernel_size * kernel_size) {
            return Err(Error::invalid("basis kernel has wrong tap count"));
        }
        if coeff_maps.iter().any(|m| m.len() != height * width) {
            return Err(Error::invalid(
                "coefficient map does not match image resolution",
            ));
        }
        Ok(Self {
            bases,
            coeff_maps,
            kernel_size,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bases(&self) -> &[Vec<f64>] {
        &self.bases
    }

    pub fn coeff_maps(&self) -> &[Vec<f64>] {
        &self.coeff_maps
    }

    /// Reassembled kernel at pixel `(y, x)`.
    pub fn kernel_at(&self, y: usize, x: usize) -> Vec<f64> {
        let mut k = vec![0.0; self.kernel_size * self.kernel_size];
        for (basis, map) in self.bases.iter().zip(&self.coeff_maps) {
            let beta = map[y * self.width + x];
            for (t, &b) in k.iter_mut().zip(basis) {
                *t += beta * b;
            }
        }
        k
    }

    /// `[K, k, k]` kernels and `[K, H, W]` coefficient maps.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let k = self.kernel_size;
        let b: Vec<f64> = self.bases.concat();
        let m: Vec<f64> = self.coeff_maps.concat();
        (
            Tensor::from_f64(vec![self.len(), k, k], &b).expect("consistent basis"),
            Tensor::from_f64(vec![self.len(), self.height, self.width], &m)
                .expect("consistent maps"),
        )
    }
}

/// Result of [`decompose_basis`]: the basis plus the per-anchor projections
/// it was interpolated from.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub basis: PsfBasis,
    /// `anchor_coeffs[a][i]` is β_i at anchor `a`.
    pub anchor_coeffs: Vec<Vec<f64>>,
}

impl Decomposition {
    /// `Σ_i β_i(a) φ_i` at anchor `a`.
    pub fn reconstruct_anchor(&self, a: usize) -> Vec<f64> {
        let n = self.basis.kernel_size * self.basis.kernel_size;
        let mut out = vec![0.0; n];
        for (basis, &beta) in self.basis.bases.iter().zip(&self.anchor_coeffs[a]) {
            for (o, &b) in out.iter_mut().zip(basis) {
                *o += beta * b;
            }
        }
        out
    }

    /// Frobenius norm of the anchor reconstruction error.
    pub fn residual(&self, grid: &PsfGrid) -> f64 {
        (0..grid.psfs.len())
            .map(|a| {
                self.reconstruct_anchor(a)
                    .iter()
                    .zip(&grid.psfs[a].kernel)
                    .map(|(r, h)| (r - h).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Truncated SVD of the `taps × anchors` matrix of flattened kernels (no mean
/// removal). The top `k` left singular vectors become the basis kernels, each
/// signed so its taps sum to a nonnegative value; anchor coefficients are the
/// projections onto them, bilinearly interpolated to `image_size = (h, w)`.
/// Interpolation runs in normalized coordinates, so the anchor lattice spans
/// the target image whatever resolution it was laid out for.
pub fn decompose_basis(
    grid: &PsfGrid,
    k: usize,
    image_size: (usize, usize),
) -> Result<Decomposition> {
    let n_anchors = grid.psfs.len();
    if k == 0 || k > n_anchors {
        return Err(Error::invalid(format!(
            "basis size must be in 1..={n_anchors}, got {k}"
        )));
    }
    let (height, width) = image_size;
    if height == 0 || width == 0 {
        return Err(Error::invalid("image size must be nonempty"));
    }
    let taps = grid.kernel_size * grid.kernel_size;
    let m = DMatrix::from_fn(taps, n_anchors, |t, a| grid.psfs[a].kernel[t]);
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let bases: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = u.column(c).iter().copied().collect();
            if v.iter().sum::<f64>() < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let anchor_coeffs: Vec<Vec<f64>> = (0..n_anchors)
        .map(|a| {
            bases
                .iter()
                .map(|b| b.iter().zip(&grid.psfs[a].kernel).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let coeff_maps = (0..k)
        .map(|i| {
            let values: Vec<f64> = anchor_coeffs.iter().map(|c| c[i]).collect();
            interpolate_anchors(grid.anchors, &values, height, width)
        })
        .collect();
    Ok(Decomposition {
        basis: PsfBasis::new(bases, coeff_maps, grid.kernel_size, height, width)?,
        anchor_coeffs,
    })
}

/// Bilinear interpolation of row-major anchor values onto an `h × w` raster.
pub fn interpolate_anchors(anchors: AnchorGrid, values: &[f64], h: usize, w: usize) -> Vec<f64> {
    let axis = |i: usize, extent: usize, count: usize| -> (usize, usize, f64) {
        if count == 1 || extent == 1 {
            return (0, 0, 0.0);
        }
        let u = i as f64 / (extent - 1) as f64 * (count - 1) as f64;
        let i0 = (u.floor() as usize).min(count - 2);
        (i0, i0 + 1, u - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (r0, r1, fy) = axis(y, h, anchors.rows);
        for x in 0..w {
            let (c0, c1, fx) = axis(x, w, anchors.cols);
            let v = |r: usize, c: usize| values[r * anchors.cols + c];
            let top = v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx;
            let bottom = v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Max-normalized false-color rendering of a kernel (black → red → yellow → white).
pub fn heatmap(psf: &Psf) -> ImageF {
    let peak = psf.kernel.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    ImageF::from_fn(psf.height, psf.width, 3, |c, y, x| {
        let t = psf.get(y, x) * scale;
        let lo = c as f64 / 3.0;
        ((t - lo) * 3.0).clamp(0.0, 1.0)
    })
}
