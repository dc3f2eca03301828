//! Shape plumbing for the VAE refinement stage: an MLP encoder from
//! Zernike coefficients and kernel sizes to latent statistics, the
//! reparameterized sampler, and an MLP decoder to a flare image.
//!
//! No trained weights ship with the crate. Weights are seeded at random or
//! loaded from a parameter manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::optics::PsfGrid;
use crate::params::{self, Init, Manifest, Param};
use crate::rng::SeededRng;
use crate::zernike::{AnchorGrid, CoeffField};

pub const LOGVAR_CLAMP: f64 = 20.0;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_LATENT_DIM: usize = 32;
/// Fraction of PSF energy that defines its effective support.
pub const KERNEL_SIZE_ENERGY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    mu: Vec<f64>,
    logvar: Vec<f64>,
}

impl LatentStats {
    /// `logvar` is clamped to ±[`LOGVAR_CLAMP`].
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::shape(
                format!("{} log-variances", mu.len()),
                logvar.len(),
            ));
        }
        if mu.is_empty() || mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "latent statistics must be nonempty and finite",
            ));
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        Ok(Self { mu, logvar })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = μ + exp(½·logvar) ⊙ eps`.
pub fn reparameterize(stats: &LatentStats, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != stats.dim() {
        return Err(Error::shape(
            format!("{} noise values", stats.dim()),
            eps.len(),
        ));
    }
    Ok(stats
        .mu
        .iter()
        .zip(&stats.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Draws standard-normal noise and reparameterizes.
pub fn sample_latent(stats: &LatentStats, rng: &mut SeededRng) -> Vec<f64> {
    let eps: Vec<f64> = (0..stats.dim()).map(|_| rng.standard_normal()).collect();
    reparameterize(stats, &eps).expect("noise length matches")
}

/// Effective PSF support in taps, one value per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSizeMap {
    anchors: AnchorGrid,
    grid: Vec<f64>,
}

impl KernelSizeMap {
    pub fn new(anchors: AnchorGrid, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != anchors.len() {
            return Err(Error::shape(
                format!("{} anchors", anchors.len()),
                grid.len(),
            ));
        }
        if grid.iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
            return Err(Error::invalid("kernel sizes must be finite and >= 1"));
        }
        Ok(Self { anchors, grid })
    }

    /// Side of the smallest odd window around each kernel center that holds
    /// [`KERNEL_SIZE_ENERGY`] of the kernel's energy.
    pub fn from_psf_grid(grid: &PsfGrid) -> Self {
        let sizes = grid
            .psfs()
            .iter()
            .map(|p| {
                let total = p.sum();
                let (cy, cx) = p.center();
                let max_r = cy.max(cx).max(p.height() - 1 - cy).max(p.width() - 1 - cx);
                (0..=max_r)
                    .find(|&r| {
                        let mut s = 0.0;
                        for y in cy.saturating_sub(r)..=(cy + r).min(p.height() - 1) {
                            for x in cx.saturating_sub(r)..=(cx + r).min(p.width() - 1) {
                                s += p.get(y, x);
                            }
                        }
                        s >= KERNEL_SIZE_ENERGY * total
                    })
                    .map_or(p.height().max(p.width()), |r| 2 * r + 1) as f64
            })
            .collect();
        Self {
            anchors: *grid.anchors(),
            grid: sizes,
        }
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Gelu => gelu(v),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Fully connected layer, weight stored `[output, input]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    spec: LayerSpec,
    pub weight: Param,
    pub bias: Param,
}

crate::impl_parameterized!(Dense { weight, bias });

impl Dense {
    pub fn new(spec: LayerSpec) -> Self {
        Self {
            spec,
            weight: Param::learned(
                vec![spec.output, spec.input],
                Init::Uniform { fan_in: spec.input },
            ),
            bias: Param::learned(vec![spec.output], Init::Zeros),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let n = self.spec.input;
        out.extend(
            self.weight
                .data
                .chunks_exact(n)
                .zip(&self.bias.data)
                .map(|(row, b)| {
                    let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                    self.spec.activation.apply(s + b)
                }),
        );
    }
}

/// Multi-layer perceptron with a named activation per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

crate::impl_parameterized!(Mlp { layers });

impl Mlp {
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if specs.iter().any(|s| s.input == 0 || s.output == 0) {
            return Err(Error::invalid("layer sizes must be > 0"));
        }
        if let Some(w) = specs.windows(2).find(|w| w[0].output != w[1].input) {
            return Err(Error::shape(
                format!("layer input {}", w[0].output),
                w[1].input,
            ));
        }
        Ok(Self {
            layers: specs.iter().map(|&s| Dense::new(s)).collect(),
        })
    }

    /// Hidden layers use `hidden_act`, the final layer `out_act`.
    pub fn chain(sizes: &[usize], hidden_act: Activation, out_act: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs an input and an output size"));
        }
        let last = sizes.len() - 2;
        let specs: Vec<LayerSpec> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input: w[0],
                output: w[1],
                activation: if i == last { out_act } else { hidden_act },
            })
            .collect();
        Self::new(&specs)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                format!("{} inputs", self.input_dim()),
                x.len(),
            ));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}

/// Encoder input: flattened coefficients followed by the kernel sizes.
pub fn encoder_input(coeffs: &CoeffField, ksize: &KernelSizeMap) -> Result<Vec<f64>> {
    if coeffs.anchors() != ksize.anchors() {
        return Err(Error::invalid(
            "coefficient field and kernel-size map use different anchors",
        ));
    }
    let mut x = coeffs.flatten();
    x.extend_from_slice(&ksize.grid);
    Ok(x)
}

/// Runs the encoder and splits its output into `(μ, logvar)`.
pub fn encode(coeffs: &CoeffField, ksize: &KernelSizeMap, w: &Mlp) -> Result<LatentStats> {
    let out = w.forward(&encoder_input(coeffs, ksize)?)?;
    if out.len() % 2 != 0 {
        return Err(Error::invalid(format!(
            "encoder output {} is not 2·D",
            out.len()
        )));
    }
    let d = out.len() / 2;
    LatentStats::new(out[..d].to_vec(), out[d..].to_vec())
}

/// Output pixels are held strictly inside (0, 1) even where the sigmoid
/// saturates in floating point.
const DECODE_MARGIN: f64 = 1e-12;

/// Runs the decoder, applies a sigmoid and reshapes to `(height, width, channels)`.
pub fn decode(z: &[f64], w: &Mlp, out_shape: (usize, usize, usize)) -> Result<ImageF> {
    let (h, wd, c) = out_shape;
    if w.output_dim() != h * wd * c {
        return Err(Error::shape(
            format!("decoder output {}", h * wd * c),
            w.output_dim(),
        ));
    }
    let out = w.forward(z)?;
    let data = out
        .into_iter()
        .map(|v| sigmoid(v).clamp(DECODE_MARGIN, 1.0 - DECODE_MARGIN))
        .collect();
    ImageF::new(h, wd, c, data)
}

/// Encoder, decoder and their shape contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ZVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    out_shape: (usize, usize, usize),
}

crate::impl_parameterized!(ZVae { encoder, decoder });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZVaeMeta {
    kind: String,
    out_shape: (usize, usize, usize),
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
}

impl ZVae {
    /// Default architecture: two GELU hidden layers on both sides.
    pub fn new(
        input_dim: usize,
        latent_dim: usize,
        out_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let (h, w, c) = out_shape;
        let [a, b] = DEFAULT_HIDDEN;
        Self::from_parts(
            Mlp::chain(
                &[input_dim, a, b, 2 * latent_dim],
                Activation::Gelu,
                Activation::Identity,
            )?,
            Mlp::chain(
                &[latent_dim, a, b, h * w * c],
                Activation::Gelu,
                Activation::Identity,
            )?,
            out_shape,
        )
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        out_shape: (usize, usize, usize),
    ) -> Result<Self> {
        if encoder.output_dim() != 2 * decoder.input_dim() {
            return Err(Error::shape(
                format!("encoder output 2·{}", decoder.input_dim()),
                encoder.output_dim(),
            ));
        }
        if decoder.output_dim() != out_shape.0 * out_shape.1 * out_shape.2 {
            return Err(Error::shape(
                format!("decoder output for {out_shape:?}"),
                decoder.output_dim(),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            out_shape,
        })
    }

    pub fn init(&mut self, rng: &mut SeededRng) {
        params::init_params(self, rng);
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    /// Encode, sample and decode one flare.
    pub fn refine(
        &self,
        coeffs: &CoeffField,
        ksize: &KernelSizeMap,
        rng: &mut SeededRng,
    ) -> Result<ImageF> {
        let stats = encode(coeffs, ksize, &self.encoder)?;
        decode(&sample_latent(&stats, rng), &self.decoder, self.out_shape)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = ZVaeMeta {
            kind: "zvae".into(),
            out_shape: self.out_shape,
            encoder: self.encoder.specs(),
            decoder: self.decoder.specs(),
        };
        params::save_params(
            self,
            serde_json::to_value(meta).expect("meta serializes"),
            dir,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir)?;
        let meta: ZVaeMeta = serde_json::from_value(manifest.meta.clone())
            .map_err(|e| Error::TensorFormat(format!("VAE manifest: {e}")))?;
        if meta.kind != "zvae" {
            return Err(Error::TensorFormat(format!(
                "expected a zvae manifest, got {}",
                meta.kind
            )));
        }
        let mut model = Self::from_parts(
            Mlp::new(&meta.encoder)?,
            Mlp::new(&meta.decoder)?,
            meta.out_shape,
        )?;
        params::load_params_from(&mut model, &manifest, dir)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zero_learned;
    use crate::zernike::ZernikeCoeffs;

    fn stats(mu: f64, logvar: f64, d: usize) -> LatentStats {
        LatentStats::new(vec![mu; d], vec![logvar; d]).unwrap()
    }

    #[test]
    fn reparameterize_cases() {
        let s = stats(0.3, 0.0, 4);
        assert_eq!(reparameterize(&s, &[0.0; 4]).unwrap(), vec![0.3; 4]);
        assert_eq!(reparameterize(&s, &[1.0; 4]).unwrap(), vec![1.3; 4]);
        assert!(reparameterize(&s, &[0.0; 3]).is_err());
    }

    #[test]
    fn reparameterize_is_affine_in_noise() {
        let s = LatentStats::new(vec![0.0, 0.0, 0.0], vec![0.7, -1.3, 2.0]).unwrap();
        let eps = [0.4, -1.1, 2.5];
        let z = reparameterize(&s, &eps).unwrap();
        for a in [2.0, 0.5, -4.0] {
            let scaled: Vec<f64> = eps.iter().map(|e| a * e).collect();
            let za = reparameterize(&s, &scaled).unwrap();
            for (p, q) in za.iter().zip(&z) {
                assert_eq!(*p, a * q);
            }
        }
        let s = LatentStats::new(vec![0.25, -1.5, 3.0], vec![0.7, -1.3, 2.0]).unwrap();
        let z = reparameterize(&s, &eps).unwrap();
        let za = reparameterize(&s, &eps.map(|e| 3.0 * e)).unwrap();
        for i in 0..3 {
            assert!(((za[i] - s.mu()[i]) - 3.0 * (z[i] - s.mu()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_std_matches_logvar() {
        let s = stats(0.0, 4f64.ln(), 1);
        let mut rng = SeededRng::new(21);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| sample_latent(&s, &mut rng)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((std - 2.0).abs() < 0.06, "{std}");
    }

    #[test]
    fn logvar_is_clamped() {
        let s = LatentStats::new(vec![0.0, 0.0], vec![100.0, -100.0]).unwrap();
        assert_eq!(s.logvar(), [20.0, -20.0]);
        assert!(LatentStats::new(vec![0.0], vec![f64::NAN]).is_err());
        assert!(LatentStats::new(vec![0.0], vec![]).is_err());
    }

    fn field(anchors: AnchorGrid, n: usize) -> CoeffField {
        let coeffs = (0..anchors.len())
            .map(|a| ZernikeCoeffs((0..n).map(|j| (a * n + j) as f64 * 0.01).collect()))
            .collect();
        CoeffField::new(anchors, coeffs).unwrap()
    }

    #[test]
    fn encode_shape_and_zero_weights() {
        let anchors = AnchorGrid::new(2, 2, 32, 32).unwrap();
        let f = field(anchors, 6);
        let k = KernelSizeMap::new(anchors, vec![3.0; 4]).unwrap();
        let mut vae = ZVae::new(28, 8, (4, 4, 3)).unwrap();
        vae.init(&mut SeededRng::new(1));
        let s = encode(&f, &k, &vae.encoder).unwrap();
        assert_eq!(s.dim(), 8);
        assert_eq!(s, encode(&f, &k, &vae.encoder).unwrap());
        zero_learned(&mut vae);
        let s = encode(&f, &k, &vae.encoder).unwrap();
        assert!(s.mu().iter().chain(s.logvar()).all(|&v| v == 0.0));
        let wrong = Mlp::chain(&[27, 16], Activation::Relu, Activation::Identity).unwrap();
        assert!(encode(&f, &k, &wrong).is_err());
    }

    #[test]
    fn decode_cases() {
        let mut dec = Mlp::chain(&[4, 8, 12], Activation::Relu, Activation::Identity).unwrap();
        params::init_params(&mut dec, &mut SeededRng::new(2));
        let img = decode(&[0.1, -0.2, 0.3, 0.9], &dec, (2, 2, 3)).unwrap();
        assert_eq!(img.shape(), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(decode(&[0.0; 4], &dec, (2, 3, 3)).is_err());
        zero_learned(&mut dec);
        let img = decode(&[0.1, -0.2, 0.3, 0.9], &dec, (2, 2, 3)).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_stays_inside_unit_interval_when_saturated() {
        let mut dec = Mlp::chain(&[1, 2], Activation::Identity, Activation::Identity).unwrap();
        dec.layers[0].bias.data = vec![1e3, -1e3];
        let img = decode(&[0.0], &dec, (1, 2, 1)).unwrap();
        assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn raising_last_bias_raises_every_pixel() {
        let mut dec = Mlp::chain(&[3, 6, 8], Activation::Gelu, Activation::Identity).unwrap();
        params::init_params(&mut dec, &mut SeededRng::new(3));
        let z = [0.5, -0.5, 1.0];
        let base = decode(&z, &dec, (2, 4, 1)).unwrap();
        for t in [0.1, 1.0, 5.0] {
            let mut d = dec.clone();
            d.layers[1].bias.data.iter_mut().for_each(|b| *b += t);
            let up = decode(&z, &d, (2, 4, 1)).unwrap();
            assert!(up.data().iter().zip(base.data()).all(|(u, b)| u > b));
        }
    }

    #[test]
    fn kernel_size_from_psfs() {
        use crate::optics::Psf;
        let anchors = AnchorGrid::new(1, 2, 16, 16).unwrap();
        let mut delta = vec![0.0; 25];
        delta[12] = 1.0;
        let flat = vec![1.0 / 25.0; 25];
        let grid = PsfGrid::new(
            anchors,
            vec![
                Psf::new(5, 5, delta, (2, 2)).unwrap(),
                Psf::new(5, 5, flat, (2, 2)).unwrap(),
            ],
        )
        .unwrap();
        let k = KernelSizeMap::from_psf_grid(&grid);
        assert_eq!(k.grid(), [1.0, 5.0]);
        assert!(KernelSizeMap::new(anchors, vec![0.5, 2.0]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut vae = ZVae::new(10, 4, (2, 3, 1)).unwrap();
        vae.init(&mut SeededRng::new(5));
        vae.save(dir.path()).unwrap();
        assert_eq!(ZVae::load(dir.path()).unwrap(), vae);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }
}
