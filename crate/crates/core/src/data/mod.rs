//! Synthetic composed-retrieval datasets with a controllable modality shortcut.
//!
//! Every example starts from a hidden latent base `z` on the unit sphere. An
//! image view is a fixed random linear rendering of a latent plus Gaussian
//! noise; a text token names a modification offset `Δ_m`. The composed target
//! is `normalize(z + Δ_m)`. In-distribution modifications are small, so the
//! query image alone nearly identifies the target; out-of-distribution
//! modifications are large, so the text is indispensable.

mod generate;
mod io;
mod oracle;

pub use generate::generate;
pub use io::{deserialize, from_bytes, serialize, to_bytes, DATASET_MAGIC};
pub use oracle::{oracle_image_only, oracle_latent, SplitAccuracy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub image_dim: usize,
    pub vocab_size: usize,
    pub ind_modification_norm: f64,
    pub ood_modification_norm: f64,
    pub image_noise_std: f64,
    pub n_train: usize,
    pub n_ind_test: usize,
    pub n_ood_test: usize,
    pub pool_size: usize,
    pub hard_distractors: usize,
    pub unimodal_pair_fraction: f64,
    /// Number of distinct base latents shared by the training pairs; 0 draws
    /// a fresh base for every pair.
    pub n_train_bases: usize,
    pub seed: u64,
}

/// Named noise levels standing in for input resolution.
pub const NOISE_HIGH_RES: f64 = 0.05;
pub const NOISE_MID_RES: f64 = 0.2;
pub const NOISE_LOW_RES: f64 = 0.5;

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            image_dim: 32,
            vocab_size: 16,
            ind_modification_norm: 0.15,
            ood_modification_norm: 1.2,
            image_noise_std: NOISE_MID_RES,
            n_train: 8192,
            n_ind_test: 1024,
            n_ood_test: 1024,
            pool_size: 64,
            hard_distractors: 8,
            unimodal_pair_fraction: 0.25,
            n_train_bases: 0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Tokens `0..ind_vocab()` carry in-distribution modifications; the rest
    /// are out-of-distribution.
    pub fn ind_vocab(&self) -> usize {
        self.vocab_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("data.vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.latent_dim == 0 || self.image_dim == 0 {
            return bad("data.latent_dim and data.image_dim must be >= 1".into());
        }
        if !(self.ind_modification_norm >= 0.0 && self.ind_modification_norm < self.ood_modification_norm) {
            return bad(format!(
                "data.ind_modification_norm ({}) must be >= 0 and < data.ood_modification_norm ({})",
                self.ind_modification_norm, self.ood_modification_norm
            ));
        }
        if !(self.image_noise_std >= 0.0) {
            return bad(format!("data.image_noise_std must be >= 0, got {}", self.image_noise_std));
        }
        if !(0.0..=1.0).contains(&self.unimodal_pair_fraction) {
            return bad(format!(
                "data.unimodal_pair_fraction must lie in [0, 1], got {}",
                self.unimodal_pair_fraction
            ));
        }
        if self.n_train == 0 || self.n_ind_test == 0 || self.n_ood_test == 0 {
            return bad("data.n_train, data.n_ind_test and data.n_ood_test must be >= 1".into());
        }
        let other_half = self.ind_vocab().min(self.vocab_size - self.ind_vocab());
        if self.hard_distractors < 2 || self.hard_distractors > other_half {
            return bad(format!(
                "data.hard_distractors must lie in [2, {other_half}], got {}",
                self.hard_distractors
            ));
        }
        if self.pool_size < self.hard_distractors + 1 {
            return bad(format!(
                "data.pool_size ({}) must exceed data.hard_distractors ({})",
                self.pool_size, self.hard_distractors
            ));
        }
        Ok(())
    }
}

/// A retrieval input: an image view, a text token, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image_view: Option<Vec<f32>>,
    pub text_token: Option<u32>,
}

impl Item {
    pub fn image(view: Vec<f32>) -> Self {
        Self {
            image_view: Some(view),
            text_token: None,
        }
    }

    pub fn text(token: u32) -> Self {
        Self {
            image_view: None,
            text_token: Some(token),
        }
    }

    pub fn composed(view: Vec<f32>, token: u32) -> Self {
        Self {
            image_view: Some(view),
            text_token: Some(token),
        }
    }

    pub fn is_composed(&self) -> bool {
        self.image_view.is_some() && self.text_token.is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.image_view.is_none() && self.text_token.is_none()
    }

    /// The single-modality restrictions of a composed item, ordered
    /// `[image-only, text-only]`.
    pub fn unimodal_parts(&self) -> Result<[Item; 2]> {
        match (&self.image_view, self.text_token) {
            (Some(v), Some(t)) => Ok([Item::image(v.clone()), Item::text(t)]),
            _ => Err(Error::Contract("unimodal_parts needs a composed item".into())),
        }
    }
}

/// A training pair. The latent fields are for oracles only and never reach
/// the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub query: Item,
    pub positive_doc: Item,
    pub latent_base: Vec<f32>,
    pub modification_id: Option<u32>,
}

/// One evaluation query with its candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query: Item,
    pub pool: Vec<Item>,
    pub gold: usize,
    pub latent_base: Vec<f32>,
    pub modification_id: u32,
    /// True latent of every pool candidate.
    pub pool_latents: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub name: String,
    pub queries: Vec<EvalQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub config: GeneratorConfig,
    /// `vocab_size x latent_dim` table of modification offsets.
    pub modification_offsets: Vec<Vec<f32>>,
    pub train: Vec<Pair>,
    pub ind_test: EvalSplit,
    pub ood_test: EvalSplit,
}

impl DatasetBundle {
    pub fn splits(&self) -> [&EvalSplit; 2] {
        [&self.ind_test, &self.ood_test]
    }

    /// `normalize(z + Δ_m)` for an evaluation query.
    pub fn composed_latent(&self, q: &EvalQuery) -> Vec<f64> {
        let delta = &self.modification_offsets[q.modification_id as usize];
        let v: Vec<f64> = q
            .latent_base
            .iter()
            .zip(delta)
            .map(|(&z, &d)| z as f64 + d as f64)
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn composed_fraction(&self) -> f64 {
        let c = self.train.iter().filter(|p| p.query.is_composed()).count();
        c as f64 / self.train.len() as f64
    }
}
