//! Inference-only building blocks of the flare-removal network.
//!
//! Everything runs on channel-planar [`FeatureBlock`]s. Weights come from a
//! seeded initialization or a parameter manifest; there is no training code.

pub mod blocks;
pub mod feature;
pub mod model;

pub use blocks::{
    desm, fcm, ffem, gltb, lem, sca, se_block, simple_gate, token_mlp, Desm, Fcm, Ffem, Gltb, Lem,
    Sca, Se,
};
pub use feature::{
    conv2d, depthwise_conv, dilated_conv, pixel_shuffle, pixel_unshuffle, pointwise_conv,
    BatchNorm, Conv2d, FeatureBlock, LayerNorm,
};
pub use model::{slcformer_forward, ModelConfig, Slcformer};
