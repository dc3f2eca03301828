//! Frequency, local and directional blocks of the restoration network.

use rayon::prelude::*;

use super::feature::{conv2d, BatchNorm, Conv2d, FeatureBlock, LayerNorm};
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, ComplexField};
use crate::zvae::{gelu, Activation, Mlp};

fn require_divisible(channels: usize, by: usize, what: &str) -> Result<()> {
    if channels == 0 || channels % by != 0 {
        return Err(Error::invalid(format!(
            "{what} needs channels divisible by {by}, got {channels}"
        )));
    }
    Ok(())
}

/// Frequency context module. Real and imaginary spectra of the input are
/// stacked along channels, mixed by two 1×1 convolutions and mapped back.
#[derive(Debug, Clone, PartialEq)]
pub struct Fcm {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub bn: BatchNorm,
}

crate::impl_parameterized!(Fcm { conv_a, conv_b, bn });

impl Fcm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            conv_a: Conv2d::pointwise(2 * channels, 2 * channels)?,
            conv_b: Conv2d::pointwise(2 * channels, 2 * channels)?,
            bn: BatchNorm::new(2 * channels),
        })
    }
}

/// Unitary per-channel spectrum, real parts then imaginary parts.
pub fn spectrum(x: &FeatureBlock) -> FeatureBlock {
    let (h, w, c) = x.shape();
    let spectra: Vec<ComplexField> = (0..c)
        .into_par_iter()
        .map(|ch| fft2(&ComplexField::from_real(h, w, x.plane(ch)).expect("plane matches dims")))
        .collect();
    let mut planes: Vec<Vec<f64>> = spectra.iter().map(|s| s.re()).collect();
    planes.extend(spectra.iter().map(|s| s.im()));
    FeatureBlock::from_planes(h, w, planes)
}

/// Real part of the inverse transform of a stacked spectrum.
pub fn inverse_spectrum_real(f: &FeatureBlock) -> FeatureBlock {
    let (h, w, c2) = f.shape();
    let c = c2 / 2;
    let planes = (0..c)
        .into_par_iter()
        .map(|ch| {
            let field = ComplexField::from_re_im(h, w, f.plane(ch), f.plane(c + ch))
                .expect("plane matches dims");
            ifft2(&field).re()
        })
        .collect();
    FeatureBlock::from_planes(h, w, planes)
}

pub fn fcm(x: &FeatureBlock, w: &Fcm) -> Result<FeatureBlock> {
    if w.conv_a.in_channels() != 2 * x.channels() {
        return Err(Error::shape(
            format!("{} channels", w.conv_a.in_channels() / 2),
            x.channels(),
        ));
    }
    let f = spectrum(x);
    let f = conv2d(&f, &w.conv_a)?.add(&f)?;
    let f = conv2d(&f, &w.conv_b)?.map(gelu);
    let f = w.bn.forward(&f.map(|v| v.max(0.0)))?;
    x.add(&inverse_spectrum_real(&f))
}

/// Local enhancement module: a token-wise MLP on one half of the channels
/// and a dilated convolution on the other.
#[derive(Debug, Clone, PartialEq)]
pub struct Lem {
    pub mlp: Mlp,
    pub conv: Conv2d,
}

crate::impl_parameterized!(Lem { mlp, conv });

impl Lem {
    pub fn new(channels: usize, dilation: usize) -> Result<Self> {
        require_divisible(channels, 2, "LEM")?;
        let half = channels / 2;
        Ok(Self {
            mlp: Mlp::chain(
                &[half, 2 * half, half],
                Activation::Gelu,
                Activation::Identity,
            )?,
            conv: Conv2d::dilated(half, half, 3, dilation)?,
        })
    }
}

/// Applies `mlp` independently to the channel vector of every pixel.
pub fn token_mlp(x: &FeatureBlock, mlp: &Mlp) -> Result<FeatureBlock> {
    let (h, w, c) = x.shape();
    if mlp.input_dim() != c {
        return Err(Error::shape(format!("{} channels", mlp.input_dim()), c));
    }
    let n = h * w;
    let tokens: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let v: Vec<f64> = (0..c).map(|ch| x.data()[ch * n + p]).collect();
            mlp.forward(&v).expect("token length checked")
        })
        .collect();
    let oc = mlp.output_dim();
    let planes = (0..oc)
        .map(|ch| tokens.iter().map(|t| t[ch]).collect())
        .collect();
    Ok(FeatureBlock::from_planes(h, w, planes))
}

pub fn lem(x: &FeatureBlock, w: &Lem) -> Result<FeatureBlock> {
    let (a, b) = x.halves()?;
    token_mlp(&a, &w.mlp)?.concat(&conv2d(&b, &w.conv)?)
}

/// Squeeze-and-excitation: pooled channel statistics through two FC layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Se {
    pub fc: Mlp,
}

crate::impl_parameterized!(Se { fc });

impl Se {
    pub fn new(channels: usize) -> Result<Self> {
        require_divisible(channels, 4, "SE")?;
        Ok(Self {
            fc: Mlp::chain(
                &[channels, channels / 4, channels],
                Activation::Relu,
                Activation::Sigmoid,
            )?,
        })
    }
}

/// Per-channel gates in (0, 1).
pub fn se_gates(x: &FeatureBlock, w: &Se) -> Result<Vec<f64>> {
    w.fc.forward(&x.channel_means())
}

pub fn se_block(x: &FeatureBlock, w: &Se) -> Result<FeatureBlock> {
    x.scale_channels(&se_gates(x, w)?)
}

/// Frequency excitation module.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffem {
    pub pw_in: Conv2d,
    pub lem: Lem,
    pub fcm: Fcm,
    pub pw_out: Conv2d,
    pub se: Se,
}

crate::impl_parameterized!(Ffem {
    pw_in,
    lem,
    fcm,
    pw_out,
    se
});

impl Ffem {
    pub fn new(channels: usize, dilation: usize) -> Result<Self> {
        require_divisible(channels, 4, "FFEM")?;
        Ok(Self {
            pw_in: Conv2d::pointwise(channels, channels)?,
            lem: Lem::new(channels / 2, dilation)?,
            fcm: Fcm::new(channels / 2)?,
            pw_out: Conv2d::pointwise(channels, channels)?,
            se: Se::new(channels)?,
        })
    }
}

pub fn ffem(x: &FeatureBlock, w: &Ffem) -> Result<FeatureBlock> {
    let f = conv2d(x, &w.pw_in)?;
    let (local, global) = f.halves()?;
    let f = lem(&local, &w.lem)?
        .concat(&fcm(&global, &w.fcm)?)?
        .map(gelu);
    se_block(&conv2d(&f, &w.pw_out)?, &w.se)
}

/// Elementwise product of the two channel halves.
pub fn simple_gate(x: &FeatureBlock) -> Result<FeatureBlock> {
    let (a, b) = x.halves()?;
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
    FeatureBlock::new(a.height(), a.width(), a.channels(), data)
}

/// Simplified channel attention: `S = FC(AvgPool(x))`, output `S ⊙ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sca {
    pub fc: Mlp,
}

crate::impl_parameterized!(Sca { fc });

impl Sca {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            fc: Mlp::chain(
                &[channels, channels],
                Activation::Identity,
                Activation::Identity,
            )?,
        })
    }

    pub fn set_identity(&mut self) {
        let layer = &mut self.fc.layers[0];
        let n = layer.spec().input;
        layer.weight.data.fill(0.0);
        layer.bias.data.fill(0.0);
        for i in 0..n {
            layer.weight.data[i * n + i] = 1.0;
        }
    }
}

pub fn sca_scales(x: &FeatureBlock, w: &Sca) -> Result<Vec<f64>> {
    w.fc.forward(&x.channel_means())
}

pub fn sca(x: &FeatureBlock, w: &Sca) -> Result<FeatureBlock> {
    x.scale_channels(&sca_scales(x, w)?)
}

/// Directional spatial module. Channels are expanded to `E`; one half goes
/// through depthwise and dilated depthwise convolutions, the other through
/// simple gating and channel attention, and the concatenation (`3E/4`
/// channels) is projected back.
#[derive(Debug, Clone, PartialEq)]
pub struct Desm {
    pub up: Conv2d,
    pub dw: Conv2d,
    pub dw_dilated: Conv2d,
    pub sca: Sca,
    pub proj: Conv2d,
}

crate::impl_parameterized!(Desm {
    up,
    dw,
    dw_dilated,
    sca,
    proj
});

impl Desm {
    pub fn new(channels: usize, expansion: usize, dilation: usize) -> Result<Self> {
        let e = channels * expansion;
        require_divisible(e, 4, "DESM expansion")?;
        Ok(Self {
            up: Conv2d::pointwise(channels, e)?,
            dw: Conv2d::depthwise(e / 2, 3, 1)?,
            dw_dilated: Conv2d::depthwise(e / 2, 3, dilation)?,
            sca: Sca::new(e / 4)?,
            proj: Conv2d::pointwise(3 * e / 4, channels)?,
        })
    }
}

pub fn desm(x: &FeatureBlock, w: &Desm) -> Result<FeatureBlock> {
    let f = conv2d(x, &w.up)?;
    let (a, b) = f.halves()?;
    let dir = conv2d(&conv2d(&a, &w.dw)?, &w.dw_dilated)?;
    let gate = sca(&simple_gate(&b)?, &w.sca)?;
    conv2d(&dir.concat(&gate)?, &w.proj)
}

/// Global-local block: two pre-norm residual sub-layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gltb {
    pub norm1: LayerNorm,
    pub ffem: Ffem,
    pub norm2: LayerNorm,
    pub desm: Desm,
}

crate::impl_parameterized!(Gltb {
    norm1,
    ffem,
    norm2,
    desm
});

impl Gltb {
    pub fn new(channels: usize, expansion: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(channels),
            ffem: Ffem::new(channels, dilation)?,
            norm2: LayerNorm::new(channels),
            desm: Desm::new(channels, expansion, dilation)?,
        })
    }
}

pub fn gltb(x: &FeatureBlock, w: &Gltb) -> Result<FeatureBlock> {
    let x = x.add(&ffem(&w.norm1.forward(x)?, &w.ffem)?)?;
    x.add(&desm(&w.norm2.forward(&x)?, &w.desm)?)
}
