//! Physically based scatter-flare synthesis and flare-removal evaluation.
//!
//! The pipeline runs Zernike aberrations through Fourier optics into
//! spatially varying PSFs, renders them onto flare images, augments and
//! composites training pairs, and scores restorations. The `book/` directory
//! at the repository root walks through each stage; its code listings are
//! compiled as doc-tests of this crate.

pub mod augment;
pub mod error;
pub mod fft;
pub mod image;
pub mod metrics;
pub mod netblocks;
pub mod optics;
pub mod params;
pub mod rng;
pub mod svrender;
pub mod tensor;
pub mod zernike;
pub mod zvae;

pub use error::{Error, Result};
pub use fft::ComplexField;
pub use image::ImageF;
pub use rng::SeededRng;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/zernike.md")]
    mod zernike {}
    #[doc = include_str!("../../../book/src/optics.md")]
    mod optics {}
    #[doc = include_str!("../../../book/src/svrender.md")]
    mod svrender {}
    #[doc = include_str!("../../../book/src/augment.md")]
    mod augment {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/netblocks.md")]
    mod netblocks {}
    #[doc = include_str!("../../../book/src/zvae.md")]
    mod zvae {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
