//! Training engine and privacy audit for spiking and conventional networks.
//!
//! The crate trains ANN and SNN classifiers from scratch (reverse-mode
//! differentiation with surrogate spike gradients and straight-through
//! quantizers), then measures how much they leak about their training sets
//! with a shadow-model membership-inference attack scored by ROC-AUC.

pub mod data;
pub mod error;
pub mod harness;
pub mod mia;
pub mod nets;
pub mod quant;
pub mod rng;
pub mod spiking;
pub mod tensor;

pub use error::{Error, Result};
