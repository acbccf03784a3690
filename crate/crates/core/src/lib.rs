pub mod diffmath;
pub mod dsp;
pub mod losses;
pub mod classifier;
pub mod embedder;
pub mod datagen;
pub mod protocol;
pub mod verify;
pub mod presets;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    pub mod features {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    pub mod classifier {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    pub mod protocol {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
