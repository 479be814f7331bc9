//! Contrastive self-supervised pretraining for patch-based pathology encoders.
//!
//! The crate covers the full desk-scale loop: synthetic or real slide
//! tessellation, momentum-pair contrastive pretraining with InfoNCE and three
//! similarity-ranked sampling variants, frozen stage-wise feature extraction,
//! attention-MIL bag classification with patient-level cross-validation, and
//! AUROC/AUPRC reporting.

// `!(x >= min)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod features;
pub mod kv;
pub mod loss;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod mil;
pub mod momentum;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
