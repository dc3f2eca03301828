//! Complex grids and the unitary 2-D FFT.
//!
//! Both directions are scaled by `1/sqrt(height * width)`, so
//! `sum |f|^2 == sum |fft2(f)|^2` and `ifft2(fft2(f)) == f` up to rounding.
//! Any size is accepted; rustfft picks radix or Bluestein kernels as needed.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// A `height × width` row-major grid of complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::shape(
                format!("{height}x{width} nonempty grid"),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("complex field contains non-finite samples"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_re_im(height: usize, width: usize, re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape(
                format!("{} imaginary samples", re.len()),
                format!("{}", im.len()),
            ));
        }
        let data = re
            .iter()
            .zip(im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
        Self::new(height, width, data)
    }

    pub fn from_real(height: usize, width: usize, re: &[f64]) -> Result<Self> {
        let data = re.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.im).collect()
    }

    /// `sum |z|^2`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Embeds `self` in the center of a `size × size` zero grid. The sample at
    /// `(h/2, w/2)` lands on `(size/2, size/2)`.
    pub fn pad_centered(&self, size: usize) -> Result<Self> {
        if size < self.height || size < self.width {
            return Err(Error::invalid(format!(
                "cannot pad {}x{} into {size}x{size}",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(size, size);
        let oy = size / 2 - self.height / 2;
        let ox = size / 2 - self.width / 2;
        for y in 0..self.height {
            let src = &self.data[y * self.width..(y + 1) * self.width];
            let start = (y + oy) * size + ox;
            out.data[start..start + self.width].copy_from_slice(src);
        }
        Ok(out)
    }
}

/// Cached 1-D plans for repeated 2-D transforms of one size.
pub struct Fft2Plan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft(width, FftDirection::Forward),
            row_inv: planner.plan_fft(width, FftDirection::Inverse),
            col_fwd: planner.plan_fft(height, FftDirection::Forward),
            col_inv: planner.plan_fft(height, FftDirection::Inverse),
        }
    }

    /// In-place unitary transform of a row-major `height × width` buffer.
    pub fn process(&self, data: &mut [Complex64], direction: FftDirection) {
        assert_eq!(
            data.len(),
            self.height * self.width,
            "buffer size does not match plan"
        );
        let (rows, cols) = match direction {
            FftDirection::Forward => (&self.row_fwd, &self.col_fwd),
            FftDirection::Inverse => (&self.row_inv, &self.col_inv),
        };
        rows.process(data);
        let mut t = transpose(data, self.height, self.width);
        cols.process(&mut t);
        let back = transpose(&t, self.width, self.height);
        let scale = 1.0 / ((self.height * self.width) as f64).sqrt();
        for (d, b) in data.iter_mut().zip(back) {
            *d = b * scale;
        }
    }
}

fn transpose(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = data[y * w + x];
        }
    }
    out
}

pub fn fft2(field: &ComplexField) -> ComplexField {
    let mut out = field.clone();
    Fft2Plan::new(field.height, field.width).process(&mut out.data, FftDirection::Forward);
    out
}

pub fn ifft2(field: &ComplexField) -> ComplexField {
    let mut out = field.clone();
    Fft2Plan::new(field.height, field.width).process(&mut out.data, FftDirection::Inverse);
    out
}

/// Moves the zero-frequency sample from `(0, 0)` to `(h/2, w/2)`.
pub fn fftshift(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = data[y * w + x];
        }
    }
    out
}
