//! Planar real-valued rasters and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

/// An `height × width × channels` raster in linear light.
///
/// Samples are stored channel-planar and row-major: index
/// `(c * height + y) * width + x`. Only 1 and 3 channels are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageF {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if height * width * channels != data.len() {
            return Err(Error::shape(
                format!("{} samples", height * width * channels),
                format!("{} samples", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant image. Panics on invalid dimensions, like `vec!`.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
        .expect("valid image dimensions")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds an image from `f(c, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data).expect("valid image from closure")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Builds an image from per-channel planes of `height * width` samples each.
    pub fn from_planes(height: usize, width: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        let channels = planes.len();
        Self::new(height, width, channels, planes.concat())
    }

    /// Elementwise map. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.height, self.width, self.channels, data).expect("map produced non-finite")
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &ImageF) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Rec. 709 luminance of a 3-channel image; a 1-channel image is returned as is.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.2126 * r + 0.7152 * g + 0.0722 * b)
            .collect()
    }
}

/// Reads an 8- or 16-bit grayscale/RGB PNG, maps samples to `[0, 1]`, then
/// raises them to `gamma`. An alpha channel, if present, is dropped.
pub fn load_png(path: impl AsRef<Path>, gamma: f64) -> Result<ImageF> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, samples): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => {
            (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageLumaA8(b) => (
            1,
            b.into_raw()
                .chunks(2)
                .map(|p| p[0] as f64 / 255.0)
                .collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            b.into_raw()
                .chunks(4)
                .flat_map(|p| p[..3].iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>())
                .collect(),
        ),
        DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageLumaA16(b) => (
            1,
            b.into_raw()
                .chunks(2)
                .map(|p| p[0] as f64 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageRgb16(b) => (
            3,
            b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        ),
        DynamicImage::ImageRgba16(b) => (
            3,
            b.into_raw()
                .chunks(4)
                .flat_map(|p| {
                    p[..3]
                        .iter()
                        .map(|&v| v as f64 / 65535.0)
                        .collect::<Vec<_>>()
                })
                .collect(),
        ),
        other => {
            return Err(Error::Image {
                path: path.to_owned(),
                message: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    };
    // interleaved -> planar
    let mut data = vec![0.0; samples.len()];
    let n = w * h;
    for (i, px) in samples.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = if gamma == 1.0 { v } else { v.powf(gamma) };
        }
    }
    ImageF::new(h, w, channels, data)
}

/// Quantizes `img` to an 8-bit PNG: clip to `[0, 1]`, raise to `1 / inv_gamma`,
/// round to nearest. The file is written to a temporary sibling and renamed.
pub fn save_png(img: &ImageF, path: impl AsRef<Path>, inv_gamma: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png_bytes(img, inv_gamma);
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let tmp = tmp_sibling(path);
    image::save_buffer_with_format(&tmp, &bytes, w, h, color, ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        }
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Interleaved 8-bit samples as written by [`save_png`].
pub fn encode_png_bytes(img: &ImageF, inv_gamma: f64) -> Vec<u8> {
    let n = img.width() * img.height();
    let c = img.channels();
    let mut out = vec![0u8; n * c];
    for ch in 0..c {
        for (i, &v) in img.plane(ch).iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let v = if inv_gamma == 1.0 {
                v
            } else {
                v.powf(1.0 / inv_gamma)
            };
            out[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    out
}

pub(crate) fn tmp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|s| s.to_owned()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
