//! Modality composition awareness lab.
//!
//! A small unified encoder trained on synthetic composed-retrieval data, with
//! contrastive, composition-preference and composition-regularization
//! objectives, plus the diagnostics used to detect modality shortcuts.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod ranking;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
