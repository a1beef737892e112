//! Neuron-level saliency estimation, hypo/hyper/mid-band pruning and
//! selective unsupervised adaptation for fully connected networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense network, backprop, SGD and the cross-validated learning-rate schedule.
//! - [`saliency`]: magnitude (MBP), second-order (OBS) and temporal cross-correlation (MI)
//!   neuron scores, plus rank-band selection.
//! - [`pruning`]: prune plans, masks and structural surgery.
//! - [`adaptation`]: pseudo-labelling and the blind / selective / mixed adaptation variants.
//! - [`datagen`]: a synthetic, temporally correlated frame corpus with an in-domain and a
//!   reverberant out-of-domain condition.
//! - [`harness`]: multi-seed experiment runner and result tables.

pub mod adaptation;
pub mod datagen;
mod error;
pub mod harness;
pub mod nn;
pub mod pruning;
pub mod saliency;

pub use error::{Error, Result};
