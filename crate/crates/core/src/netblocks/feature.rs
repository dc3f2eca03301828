//! Feature maps, convolutions, normalization and pixel (un)shuffle.

use rayon::prelude::*;

use crate::augment::reflect_index;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::params::{Init, Param};

/// Channel-planar feature map, sample `(c, y, x)` at `(c·H + y)·W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureBlock {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature dims must be > 0, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} samples"),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature samples must be finite"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

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
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub(crate) fn from_planes(height: usize, width: usize, planes: Vec<Vec<f64>>) -> Self {
        let channels = planes.len();
        let data: Vec<f64> = planes.into_iter().flatten().collect();
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn from_image(img: &ImageF) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.data().to_vec(),
        }
    }

    pub fn to_image(&self) -> Result<ImageF> {
        ImageF::new(self.height, self.width, self.channels, self.data.clone())
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add(&self, other: &FeatureBlock) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            ..*self
        })
    }

    pub fn check_same(&self, other: &FeatureBlock) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Splits the channels into `[0, at)` and `[at, C)`.
    pub fn split(&self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.channels {
            return Err(Error::invalid(format!(
                "cannot split {} channels at {at}",
                self.channels
            )));
        }
        let cut = at * self.pixels();
        Ok((
            Self {
                channels: at,
                data: self.data[..cut].to_vec(),
                ..*self
            },
            Self {
                channels: self.channels - at,
                data: self.data[cut..].to_vec(),
                ..*self
            },
        ))
    }

    /// Even split into two halves.
    pub fn halves(&self) -> Result<(Self, Self)> {
        if self.channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "{} channels cannot be halved",
                self.channels
            )));
        }
        self.split(self.channels / 2)
    }

    pub fn concat(&self, other: &FeatureBlock) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            data,
            ..*self
        })
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.pixels() as f64;
        (0..self.channels)
            .map(|c| self.plane(c).iter().sum::<f64>() / n)
            .collect()
    }

    /// Multiplies channel `c` by `gates[c]`.
    pub fn scale_channels(&self, gates: &[f64]) -> Result<Self> {
        if gates.len() != self.channels {
            return Err(Error::shape(
                format!("{} gates", self.channels),
                gates.len(),
            ));
        }
        let n = self.pixels();
        Ok(Self {
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v * gates[i / n])
                .collect(),
            ..*self
        })
    }
}

/// 2-D cross-correlation with groups and dilation. Weights are stored
/// `[out, in / groups, k, k]`; padding mirrors the input so the output keeps
/// the input's height and width.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    groups: usize,
    dilation: usize,
    pub weight: Param,
    pub bias: Param,
}

crate::impl_parameterized!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        dilation: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || groups == 0 || dilation == 0 {
            return Err(Error::invalid("convolution sizes must be > 0"));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "{in_channels} -> {out_channels} channels are not divisible into {groups} groups"
            )));
        }
        let per_group = in_channels / groups;
        let fan_in = per_group * kernel * kernel;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            groups,
            dilation,
            weight: Param::learned(
                vec![out_channels, per_group, kernel, kernel],
                Init::Uniform { fan_in },
            ),
            bias: Param::learned(vec![out_channels], Init::Zeros),
        })
    }

    pub fn full(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, 1)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, 1, 1, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, channels, dilation)
    }

    pub fn dilated(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, dilation)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Sets the weight to the identity map (requires equal in/out channels).
    pub fn set_identity(&mut self) -> Result<()> {
        if self.in_channels != self.out_channels {
            return Err(Error::invalid(
                "identity needs equal input and output channels",
            ));
        }
        let (per_group, k) = (self.in_channels / self.groups, self.kernel);
        self.weight.data.fill(0.0);
        self.bias.data.fill(0.0);
        for o in 0..self.out_channels {
            let i = o % per_group;
            self.weight.data[((o * per_group + i) * k + k / 2) * k + k / 2] = 1.0;
        }
        Ok(())
    }
}

pub fn conv2d(x: &FeatureBlock, conv: &Conv2d) -> Result<FeatureBlock> {
    if x.channels != conv.in_channels {
        return Err(Error::shape(
            format!("{} input channels", conv.in_channels),
            x.channels,
        ));
    }
    let (h, w) = (x.height, x.width);
    let (k, d) = (conv.kernel, conv.dilation);
    let r = (k / 2) as isize;
    let offsets: Vec<isize> = (0..k as isize).map(|t| (t - r) * d as isize).collect();
    let rows: Vec<Vec<usize>> = offsets
        .iter()
        .map(|&o| (0..h).map(|y| reflect_index(y as isize + o, h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = offsets
        .iter()
        .map(|&o| (0..w).map(|xx| reflect_index(xx as isize + o, w)).collect())
        .collect();
    let in_per = conv.in_channels / conv.groups;
    let out_per = conv.out_channels / conv.groups;
    let planes: Vec<Vec<f64>> = (0..conv.out_channels)
        .into_par_iter()
        .map(|o| {
            let g = o / out_per;
            let mut out = vec![conv.bias.data[o]; h * w];
            for i in 0..in_per {
                let plane = x.plane(g * in_per + i);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = conv.weight.data[((o * in_per + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let cx = &cols[kx];
                        for (y, &sy) in rows[ky].iter().enumerate() {
                            let src = &plane[sy * w..(sy + 1) * w];
                            let dst = &mut out[y * w..(y + 1) * w];
                            for (dv, &sx) in dst.iter_mut().zip(cx) {
                                *dv += wv * src[sx];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(FeatureBlock::from_planes(h, w, planes))
}

pub fn pointwise_conv(x: &FeatureBlock, conv: &Conv2d) -> Result<FeatureBlock> {
    if conv.kernel != 1 || conv.groups != 1 {
        return Err(Error::invalid(
            "pointwise convolution needs a 1x1 ungrouped kernel",
        ));
    }
    conv2d(x, conv)
}

pub fn depthwise_conv(x: &FeatureBlock, conv: &Conv2d) -> Result<FeatureBlock> {
    if conv.groups != conv.in_channels || conv.in_channels != conv.out_channels {
        return Err(Error::invalid(
            "depthwise convolution needs one group per channel",
        ));
    }
    conv2d(x, conv)
}

pub fn dilated_conv(x: &FeatureBlock, conv: &Conv2d) -> Result<FeatureBlock> {
    if conv.dilation < 2 {
        return Err(Error::invalid(
            "dilated convolution needs a dilation of at least 2",
        ));
    }
    conv2d(x, conv)
}

/// `(H, W, C) → (H/r, W/r, C·r²)`: output channel `c·r² + i·r + j` holds
/// input sample `(c, y·r + i, x·r + j)`.
pub fn pixel_unshuffle(x: &FeatureBlock, r: usize) -> Result<FeatureBlock> {
    if r == 0 || x.height % r != 0 || x.width % r != 0 {
        return Err(Error::invalid(format!(
            "{}x{} is not divisible by {r}",
            x.height, x.width
        )));
    }
    let (oh, ow) = (x.height / r, x.width / r);
    Ok(FeatureBlock::from_fn(
        oh,
        ow,
        x.channels * r * r,
        |oc, y, xx| {
            let (c, sub) = (oc / (r * r), oc % (r * r));
            x.get(c, y * r + sub / r, xx * r + sub % r)
        },
    ))
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &FeatureBlock, r: usize) -> Result<FeatureBlock> {
    if r == 0 || x.channels % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "{} channels are not divisible by {}",
            x.channels,
            r * r
        )));
    }
    Ok(FeatureBlock::from_fn(
        x.height * r,
        x.width * r,
        x.channels / (r * r),
        |c, y, xx| x.get(c * r * r + (y % r) * r + xx % r, y / r, xx / r),
    ))
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-pixel normalization across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

crate::impl_parameterized!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::learned(vec![channels], Init::Ones),
            beta: Param::learned(vec![channels], Init::Zeros),
        }
    }

    pub fn forward(&self, x: &FeatureBlock) -> Result<FeatureBlock> {
        let c = x.channels;
        if self.gamma.len() != c {
            return Err(Error::shape(format!("{} channels", self.gamma.len()), c));
        }
        let n = x.pixels();
        let mut out = vec![0.0; x.data.len()];
        for p in 0..n {
            let mean = (0..c).map(|ch| x.data[ch * n + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (x.data[ch * n + p] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for ch in 0..c {
                out[ch * n + p] =
                    (x.data[ch * n + p] - mean) * inv * self.gamma.data[ch] + self.beta.data[ch];
            }
        }
        Ok(FeatureBlock { data: out, ..*x })
    }
}

/// Batch normalization at inference: running statistics, then an affine map.
/// The affine starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

crate::impl_parameterized!(BatchNorm {
    gamma,
    beta,
    running_mean,
    running_var
});

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::learned(vec![channels], Init::Zeros),
            beta: Param::learned(vec![channels], Init::Zeros),
            running_mean: Param::buffer(vec![channels], Init::Zeros),
            running_var: Param::buffer(vec![channels], Init::Ones),
        }
    }

    pub fn forward(&self, x: &FeatureBlock) -> Result<FeatureBlock> {
        if self.gamma.len() != x.channels {
            return Err(Error::shape(
                format!("{} channels", self.gamma.len()),
                x.channels,
            ));
        }
        let n = x.pixels();
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / n;
                (v - self.running_mean.data[c]) / (self.running_var.data[c] + NORM_EPS).sqrt()
                    * self.gamma.data[c]
                    + self.beta.data[c]
            })
            .collect();
        Ok(FeatureBlock { data, ..*x })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_params;
    use crate::rng::SeededRng;

    fn random_block(h: usize, w: usize, c: usize, seed: u64) -> FeatureBlock {
        let mut rng = SeededRng::new(seed);
        FeatureBlock::from_fn(h, w, c, |_, _, _| rng.uniform(-1.0, 1.0))
    }

    fn naive(x: &FeatureBlock, conv: &Conv2d) -> FeatureBlock {
        let (k, d, g) = (conv.kernel as isize, conv.dilation as isize, conv.groups);
        let (inp, outp) = (conv.in_channels / g, conv.out_channels / g);
        FeatureBlock::from_fn(x.height, x.width, conv.out_channels, |o, y, xx| {
            let mut acc = conv.bias.data[o];
            for i in 0..inp {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = reflect_index(y as isize + (ky - k / 2) * d, x.height);
                        let sx = reflect_index(xx as isize + (kx - k / 2) * d, x.width);
                        let wv = conv.weight.data
                            [((o * inp + i) * k as usize + ky as usize) * k as usize + kx as usize];
                        acc += wv * x.get((o / outp) * inp + i, sy, sx);
                    }
                }
            }
            acc
        })
    }

    fn max_diff(a: &FeatureBlock, b: &FeatureBlock) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = random_block(8, 8, 4, 1);
        let mut rng = SeededRng::new(2);
        for mut conv in [
            Conv2d::full(4, 6, 3).unwrap(),
            Conv2d::pointwise(4, 2).unwrap(),
            Conv2d::depthwise(4, 3, 1).unwrap(),
            Conv2d::dilated(4, 4, 3, 2).unwrap(),
            Conv2d::new(4, 6, 5, 2, 3).unwrap(),
        ] {
            init_params(&mut conv, &mut rng);
            conv.bias
                .data
                .iter_mut()
                .for_each(|b| *b = rng.uniform(-0.5, 0.5));
            let out = conv2d(&x, &conv).unwrap();
            assert_eq!(out.shape(), (8, 8, conv.out_channels));
            assert!(max_diff(&out, &naive(&x, &conv)) < 1e-6);
        }
    }

    #[test]
    fn conv_identity_and_zero() {
        let x = random_block(6, 5, 4, 3);
        for mut conv in [
            Conv2d::pointwise(4, 4).unwrap(),
            Conv2d::depthwise(4, 3, 2).unwrap(),
            Conv2d::full(4, 4, 3).unwrap(),
        ] {
            conv.set_identity().unwrap();
            assert_eq!(conv2d(&x, &conv).unwrap(), x);
        }
        let mut conv = Conv2d::full(4, 3, 3).unwrap();
        conv.bias.data = vec![0.0, 0.5, -1.0];
        let out = conv2d(&x, &conv).unwrap();
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| v == conv.bias.data[c]));
        }
    }

    #[test]
    fn conv_kind_checks() {
        let x = random_block(4, 4, 4, 4);
        assert!(pointwise_conv(&x, &Conv2d::full(4, 4, 3).unwrap()).is_err());
        assert!(depthwise_conv(&x, &Conv2d::full(4, 4, 3).unwrap()).is_err());
        assert!(dilated_conv(&x, &Conv2d::full(4, 4, 3).unwrap()).is_err());
        assert!(conv2d(&x, &Conv2d::full(3, 4, 3).unwrap()).is_err());
        assert!(Conv2d::full(4, 4, 2).is_err());
        assert!(Conv2d::new(4, 6, 3, 4, 1).is_err());
    }

    #[test]
    fn unshuffle_ramp_ordering() {
        let x = FeatureBlock::from_fn(4, 4, 1, |_, y, xx| (y * 4 + xx) as f64);
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.shape(), (2, 2, 4));
        assert_eq!(u.plane(0), [0.0, 2.0, 8.0, 10.0]);
        assert_eq!(u.plane(1), [1.0, 3.0, 9.0, 11.0]);
        assert_eq!(u.plane(2), [4.0, 6.0, 12.0, 14.0]);
        assert_eq!(u.plane(3), [5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x = random_block(8, 12, 3, 5);
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.channels(), 12);
        assert_eq!(pixel_shuffle(&u, 2).unwrap(), x);
        let v = random_block(3, 5, 8, 6);
        assert_eq!(
            pixel_unshuffle(&pixel_shuffle(&v, 2).unwrap(), 2).unwrap(),
            v
        );
        assert!(pixel_unshuffle(&random_block(5, 4, 1, 7), 2).is_err());
        assert!(pixel_shuffle(&random_block(4, 4, 6, 7), 2).is_err());
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let x = random_block(3, 3, 8, 8);
        let y = LayerNorm::new(8).forward(&x).unwrap();
        for p in 0..9 {
            let v: Vec<f64> = (0..8).map(|c| y.plane(c)[p]).collect();
            let mean = v.iter().sum::<f64>() / 8.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_default_is_zero() {
        let x = random_block(3, 3, 2, 9);
        let y = BatchNorm::new(2).forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_concat_round_trip() {
        let x = random_block(3, 4, 6, 10);
        let (a, b) = x.split(2).unwrap();
        assert_eq!((a.channels(), b.channels()), (2, 4));
        assert_eq!(a.concat(&b).unwrap(), x);
        assert!(random_block(2, 2, 3, 1).halves().is_err());
    }
}
