//! Single-process simulator for single-source federated domain generalization.
//!
//! The crate trains a small convolutional classifier across simulated
//! federated clients whose shards come from one source domain, using
//! style-complement augmentation plus globally guided prediction/CAM
//! consistency and a dynamic (dual-variable) regularizer. Baselines
//! (FedAvg, FedDyn, and their +RC variants) are recovered by disabling
//! the corresponding loss terms.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod digits;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tape;

pub use error::{Error, Result};
