//! Numerical laboratory for architecture-aware majorise-minimise optimisation
//! and for Gaussian-process / PAC-Bayes analysis of Bayes point machines.

pub mod error;
pub mod kernel;
pub mod mlp;
pub mod deep_linear;
pub mod network;
pub mod numerics;
pub mod optim;
pub mod pac_bayes;
pub mod bpm;
pub mod config;
pub mod data;

pub use error::{Error, Result};
pub mod experiments;
