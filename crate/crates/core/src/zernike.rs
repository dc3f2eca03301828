//! Zernike modes on the unit disk and random aberration coefficients.
//!
//! Modes use Noll's single-index ordering and normalization, so every mode
//! has unit RMS over the disk:
//!
//! ```text
//! Z_j = sqrt(n+1)          R_n^0(ρ)                 m = 0
//! Z_j = sqrt(2(n+1))       R_n^|m|(ρ) cos(|m| θ)    m > 0 (even j)
//! Z_j = sqrt(2(n+1))       R_n^|m|(ρ) sin(|m| θ)    m < 0 (odd j)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Radial order `n` and signed azimuthal order `m` of Noll index `j`.
/// Positive `m` is the cosine member of a pair, negative the sine member.
pub fn noll_to_nm(j: usize) -> Result<(u32, i32)> {
    if j == 0 {
        return Err(Error::invalid("Noll indices start at 1"));
    }
    let mut n = 0usize;
    let mut rem = j - 1;
    while rem > n {
        n += 1;
        rem -= n;
    }
    let m = (n % 2) + 2 * ((rem + (n + 1) % 2) / 2);
    let m = if j % 2 == 0 { m as i32 } else { -(m as i32) };
    Ok((n as u32, m))
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Unnormalized radial polynomial `R_n^m(ρ)` for `m ≥ 0`, `n − m` even.
pub fn radial(n: u32, m: u32, rho: f64) -> f64 {
    (0..=(n - m) / 2)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - k)
                / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k))
                * rho.powi((n - 2 * k) as i32)
        })
        .sum()
}

/// Noll-normalized `Z_j(ρ, θ)`; no disk test is applied.
pub fn zernike_value(j: usize, rho: f64, theta: f64) -> Result<f64> {
    let (n, m) = noll_to_nm(j)?;
    let r = radial(n, m.unsigned_abs(), rho);
    let n1 = f64::from(n + 1);
    Ok(match m.cmp(&0) {
        std::cmp::Ordering::Equal => n1.sqrt() * r,
        std::cmp::Ordering::Greater => (2.0 * n1).sqrt() * r * (f64::from(m) * theta).cos(),
        std::cmp::Ordering::Less => (2.0 * n1).sqrt() * r * (f64::from(-m) * theta).sin(),
    })
}

/// Normalized disk coordinates `(ρ, θ)` of pixel center `(row, col)` on an
/// `n × n` grid whose inscribed disk is the unit disk.
pub fn pixel_polar(row: usize, col: usize, n: usize) -> (f64, f64) {
    let half = n as f64 / 2.0;
    let x = (col as f64 + 0.5 - half) / half;
    let y = (row as f64 + 0.5 - half) / half;
    (x.hypot(y), y.atan2(x))
}

/// The first `n_modes` Noll modes sampled at pixel centers of a square grid.
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    grid_size: usize,
    modes: Vec<Vec<f64>>,
    disk_mask: Vec<bool>,
}

impl ZernikeBasis {
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Mode with Noll index `j` (1-based).
    pub fn mode(&self, j: usize) -> &[f64] {
        &self.modes[j - 1]
    }

    pub fn disk_mask(&self) -> &[bool] {
        &self.disk_mask
    }
}

pub fn build_basis(grid_size: usize, n_modes: usize) -> Result<ZernikeBasis> {
    if grid_size < 8 {
        return Err(Error::invalid(format!(
            "basis grid must be at least 8, got {grid_size}"
        )));
    }
    if n_modes == 0 {
        return Err(Error::invalid("need at least one Zernike mode"));
    }
    let n = grid_size;
    let polar: Vec<(f64, f64)> = (0..n * n).map(|i| pixel_polar(i / n, i % n, n)).collect();
    let disk_mask: Vec<bool> = polar.iter().map(|&(rho, _)| rho <= 1.0).collect();
    let modes = (1..=n_modes)
        .into_par_iter()
        .map(|j| {
            polar
                .iter()
                .zip(&disk_mask)
                .map(|(&(rho, theta), &inside)| {
                    if inside {
                        zernike_value(j, rho, theta).expect("j >= 1")
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(ZernikeBasis {
        grid_size,
        modes,
        disk_mask,
    })
}

/// Per-mode amplitudes in radians of phase; index 0 is Noll mode 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZernikeCoeffs(pub Vec<f64>);

impl ZernikeCoeffs {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Phase `Σ a_j Z_j` over the basis grid, zero outside the disk.
pub fn phase_map(basis: &ZernikeBasis, coeffs: &ZernikeCoeffs) -> Result<Vec<f64>> {
    if coeffs.len() != basis.n_modes() {
        return Err(Error::shape(
            format!("{} coefficients", basis.n_modes()),
            format!("{}", coeffs.len()),
        ));
    }
    let mut phase = vec![0.0; basis.grid_size * basis.grid_size];
    for (mode, &a) in basis.modes.iter().zip(&coeffs.0) {
        if a == 0.0 {
            continue;
        }
        for (p, &z) in phase.iter_mut().zip(mode) {
            *p += a * z;
        }
    }
    Ok(phase)
}

/// A uniform `rows × cols` lattice of anchor points spanning an image,
/// corners included. A single row or column sits on the image center line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl AnchorGrid {
    pub fn new(rows: usize, cols: usize, image_height: usize, image_width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("anchor grid needs at least one anchor"));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::invalid("anchor grid needs a nonempty image"));
        }
        Ok(Self {
            rows,
            cols,
            image_height,
            image_width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis(i: usize, count: usize, extent: usize) -> f64 {
        if count == 1 {
            (extent - 1) as f64 / 2.0
        } else {
            i as f64 * (extent - 1) as f64 / (count - 1) as f64
        }
    }

    /// `(y, x)` image position of anchor `(row, col)`.
    pub fn position(&self, row: usize, col: usize) -> (f64, f64) {
        (
            Self::axis(row, self.rows, self.image_height),
            Self::axis(col, self.cols, self.image_width),
        )
    }

    /// All anchor positions in row-major order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.position(r, c))
            .collect()
    }
}

/// Zernike coefficients at every anchor of an [`AnchorGrid`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffField {
    anchors: AnchorGrid,
    coeffs: Vec<ZernikeCoeffs>,
}

impl CoeffField {
    pub fn new(anchors: AnchorGrid, coeffs: Vec<ZernikeCoeffs>) -> Result<Self> {
        if coeffs.len() != anchors.len() {
            return Err(Error::shape(
                format!("{} anchor coefficient vectors", anchors.len()),
                format!("{}", coeffs.len()),
            ));
        }
        let n = coeffs[0].len();
        if coeffs.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("coefficient vectors differ in length"));
        }
        if coeffs.iter().flat_map(|c| &c.0).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Zernike coefficient"));
        }
        Ok(Self { anchors, coeffs })
    }

    /// The same coefficients at every anchor.
    pub fn uniform(anchors: AnchorGrid, coeffs: ZernikeCoeffs) -> Result<Self> {
        Self::new(anchors, vec![coeffs; anchors.len()])
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn coeffs(&self) -> &[ZernikeCoeffs] {
        &self.coeffs
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs[0].len()
    }

    /// Row-major `anchors × modes` flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .flat_map(|c| c.0.iter().copied())
            .collect()
    }
}

/// Knobs of the coefficient prior: `a_j ~ N(0, (base_sigma · j^-decay_alpha)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurbulenceConfig {
    pub n_modes: usize,
    pub base_sigma: f64,
    pub decay_alpha: f64,
    pub skip_piston: bool,
}

impl Default for TurbulenceConfig {
    fn default() -> Self {
        Self {
            n_modes: 15,
            base_sigma: 1.5,
            decay_alpha: 1.0,
            skip_piston: true,
        }
    }
}

impl TurbulenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::invalid("n_modes must be at least 1"));
        }
        if !(self.base_sigma >= 0.0 && self.base_sigma.is_finite()) {
            return Err(Error::invalid("base_sigma must be finite and >= 0"));
        }
        if !(self.decay_alpha >= 0.0 && self.decay_alpha.is_finite()) {
            return Err(Error::invalid("decay_alpha must be finite and >= 0"));
        }
        Ok(())
    }

    /// Standard deviation of Noll mode `j`.
    pub fn sigma(&self, j: usize) -> f64 {
        self.base_sigma * (j as f64).powf(-self.decay_alpha)
    }
}

/// Independent Gaussian coefficients at every anchor. Anchors are visited
/// row-major and modes in Noll order; piston is drawn and then zeroed when
/// `skip_piston` is set, so the stream layout does not depend on the flag.
pub fn sample_coeff_field(
    rng: &mut SeededRng,
    cfg: &TurbulenceConfig,
    anchors: &AnchorGrid,
) -> Result<CoeffField> {
    cfg.validate()?;
    let coeffs = (0..anchors.len())
        .map(|_| {
            let mut a: Vec<f64> = (1..=cfg.n_modes)
                .map(|j| rng.normal(0.0, cfg.sigma(j)))
                .collect();
            if cfg.skip_piston {
                a[0] = 0.0;
            }
            ZernikeCoeffs(a)
        })
        .collect();
    CoeffField::new(*anchors, coeffs)
}
