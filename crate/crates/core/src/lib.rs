#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

//! Interpretable case-based classification of lesion margins.
//!
//! A convolutional backbone maps each image to a 14×14 grid of latent
//! patches. A bank of class-tagged prototypes scores every patch by squared
//! L2 distance, turns distances into log similarities and pools each map with
//! a top-k average. A linear head turns the pooled similarities into margin
//! logits and a logistic head turns those logits into a malignancy
//! probability.
//!
//! Training alternates joint backbone/prototype optimisation, projection of
//! prototypes onto real training patches, and head fine-tuning, then fits the
//! malignancy head once. A fine-annotation penalty keeps prototype activation
//! inside the regions experts marked as relevant.
//!
//! The crate also contains a deterministic synthetic lesion corpus, the
//! evaluation metrics (AUROC, activation precision, Cohen's κ, bootstrap
//! intervals) and HTML explanation reports.

pub mod autodiff;
pub mod classes;
pub mod config;
pub mod error;
pub mod explain;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod protonet;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use classes::{MarginClass, NUM_CLASSES};
pub use error::{Error, Result};
