//! The full U-shaped restoration network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blocks::{gltb, Gltb};
use super::feature::{conv2d, pixel_shuffle, pixel_unshuffle, Conv2d, FeatureBlock};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::params::{self, Manifest};
use crate::rng::SeededRng;
use crate::zvae::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Resolution levels, including the bottleneck.
    pub stages: usize,
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub dilation: usize,
    /// Channel expansion inside the directional module.
    pub desm_expansion: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            base_channels: 16,
            blocks_per_stage: 1,
            dilation: 2,
            desm_expansion: 2,
            image_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0
            || self.blocks_per_stage == 0
            || self.dilation == 0
            || self.desm_expansion == 0
        {
            return Err(Error::invalid(
                "stages, blocks_per_stage, dilation and desm_expansion must be >= 1",
            ));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::invalid(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if self.stages > 8 {
            return Err(Error::invalid("at most 8 stages are supported"));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::invalid("image_channels must be 1 or 3"));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Height and width must be multiples of this.
    pub fn resolution_multiple(&self) -> usize {
        1 << (self.stages - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub blocks: Vec<Gltb>,
    /// After unshuffling: `4C → 2C`.
    pub down: Conv2d,
}

crate::impl_parameterized!(EncoderStage { blocks, down });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    /// Before shuffling: `2C → 4C`.
    pub up: Conv2d,
    /// After the skip concatenation: `2C → C`.
    pub fuse: Conv2d,
    pub blocks: Vec<Gltb>,
}

crate::impl_parameterized!(DecoderStage { up, fuse, blocks });

#[derive(Debug, Clone, PartialEq)]
pub struct Slcformer {
    cfg: ModelConfig,
    pub stem: Conv2d,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: Vec<Gltb>,
    /// Deepest level first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

crate::impl_parameterized!(Slcformer {
    stem,
    encoder,
    bottleneck,
    decoder,
    head
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
}

impl Slcformer {
    /// Builds the architecture with unset (zero or unit) parameters; call
    /// [`Slcformer::init`] or load weights next.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = |c: usize| -> Result<Vec<Gltb>> {
            (0..cfg.blocks_per_stage)
                .map(|_| Gltb::new(c, cfg.desm_expansion, cfg.dilation))
                .collect()
        };
        let levels = cfg.stages - 1;
        let encoder = (0..levels)
            .map(|l| {
                let c = cfg.channels_at(l);
                Ok(EncoderStage {
                    blocks: blocks(c)?,
                    down: Conv2d::pointwise(4 * c, 2 * c)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..levels)
            .rev()
            .map(|l| {
                let c = cfg.channels_at(l);
                Ok(DecoderStage {
                    up: Conv2d::pointwise(2 * c, 4 * c)?,
                    fuse: Conv2d::pointwise(2 * c, c)?,
                    blocks: blocks(c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            stem: Conv2d::full(cfg.image_channels, cfg.base_channels, 3)?,
            encoder,
            bottleneck: blocks(cfg.channels_at(levels))?,
            decoder,
            head: Conv2d::full(cfg.base_channels, cfg.image_channels, 3)?,
        })
    }

    pub fn seeded(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.init(&mut SeededRng::new(seed));
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init(&mut self, rng: &mut SeededRng) {
        params::init_params(self, rng);
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = ModelMeta {
            kind: "slcformer".into(),
            config: self.cfg,
        };
        params::save_params(
            self,
            serde_json::to_value(meta).expect("meta serializes"),
            dir,
        )?;
        Ok(())
    }

    /// Rebuilds the model from the configuration stored in the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::read(dir)?;
        let meta: ModelMeta = serde_json::from_value(manifest.meta.clone())
            .map_err(|e| Error::TensorFormat(format!("model manifest: {e}")))?;
        if meta.kind != "slcformer" {
            return Err(Error::TensorFormat(format!(
                "expected a slcformer manifest, got {}",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.config)?;
        params::load_params_from(&mut model, &manifest, dir)?;
        Ok(model)
    }
}

fn run_blocks(mut x: FeatureBlock, blocks: &[Gltb]) -> Result<FeatureBlock> {
    for b in blocks {
        x = gltb(&x, b)?;
    }
    Ok(x)
}

/// Keeps outputs strictly inside (0, 1) where the sigmoid saturates.
const OUTPUT_MARGIN: f64 = 1e-12;

/// Restores `img`: `sigmoid(img + residual)` with the residual predicted by
/// the encoder-decoder.
pub fn slcformer_forward(img: &ImageF, model: &Slcformer) -> Result<ImageF> {
    let cfg = model.cfg;
    let m = cfg.resolution_multiple();
    if img.height() % m != 0 || img.width() % m != 0 {
        return Err(Error::invalid(format!(
            "{}x{} is not divisible by {m} for {} stages",
            img.height(),
            img.width(),
            cfg.stages
        )));
    }
    if img.channels() != cfg.image_channels {
        return Err(Error::shape(
            format!("{} image channels", cfg.image_channels),
            img.channels(),
        ));
    }
    let input = FeatureBlock::from_image(img);
    let mut x = conv2d(&input, &model.stem)?;
    let mut skips = Vec::with_capacity(model.encoder.len());
    for stage in &model.encoder {
        x = run_blocks(x, &stage.blocks)?;
        skips.push(x.clone());
        x = conv2d(&pixel_unshuffle(&x, 2)?, &stage.down)?;
    }
    x = run_blocks(x, &model.bottleneck)?;
    for stage in &model.decoder {
        let skip = skips.pop().expect("one skip per decoder stage");
        x = pixel_shuffle(&conv2d(&x, &stage.up)?, 2)?;
        x = conv2d(&x.concat(&skip)?, &stage.fuse)?;
        x = run_blocks(x, &stage.blocks)?;
    }
    let residual = conv2d(&x, &model.head)?;
    let data = input
        .data()
        .iter()
        .zip(residual.data())
        .map(|(i, r)| sigmoid(i + r).clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN))
        .collect();
    ImageF::new(img.height(), img.width(), img.channels(), data)
}
