//! Slide data: tessellation, augmentation, on-disk dataset layout and a synthetic generator.

pub mod augment;
pub mod dataset;
pub mod preprocess;
pub mod synth;
pub mod tessellate;

pub use augment::{two_views, AugmentationPolicy, FloatImage};
pub use dataset::{Cohort, Dataset, SlideRecord};
pub use preprocess::{preprocess, PreprocessReport};
pub use tessellate::{tessellate, tessellate_image, BackgroundParams, PatchRect, SlideManifest};
