//! Mixers that fold a `[text, image]` pair of unimodal embeddings into one
//! composed prototype of the same width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    MeanPool,
    GatedFusion,
    Mfb,
}

/// Factor size of the factorized bilinear mixer.
pub const MFB_FACTOR: usize = 4;

/// Learnable mixer parameters (none for mean pooling).
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    kind: MixerKind,
    dim: usize,
    tensors: Vec<Tensor>,
}

impl MixerParams {
    /// Gated fusion starts from `W = 0, b = 0`, i.e. exactly mean pooling.
    /// MFB factors are gaussian(0, 1/sqrt(d)).
    pub fn init(kind: MixerKind, dim: usize, seed: u64) -> Result<Self> {
        let tensors = match kind {
            MixerKind::MeanPool => vec![],
            MixerKind::GatedFusion => vec![
                Tensor::matrix(2 * dim, dim, vec![0.0; 2 * dim * dim])?,
                Tensor::matrix(1, dim, vec![0.0; dim])?,
            ],
            MixerKind::Mfb => {
                let k = MFB_FACTOR;
                let std = 1.0 / (dim as f64).sqrt();
                let factor = |name: &str| {
                    let mut rng = SeededRng::derive(seed, name);
                    let data = (0..dim * k * dim).map(|_| rng.gaussian(0.0, std)).collect();
                    Tensor::matrix(dim, k * dim, data)
                };
                vec![factor("mixer/mfb.text")?, factor("mixer/mfb.image")?]
            }
        };
        Ok(Self { kind, dim, tensors })
    }

    pub fn from_tensors(kind: MixerKind, dim: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::init(kind, dim, 0)?;
        let shapes_match = expected.tensors.len() == tensors.len()
            && expected.tensors.iter().zip(&tensors).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::InvalidShape(format!("mixer {kind:?} tensors do not match width {dim}")));
        }
        Ok(Self { kind, dim, tensors })
    }

    pub fn kind(&self) -> MixerKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self.kind {
            MixerKind::MeanPool => &[],
            MixerKind::GatedFusion => &["mixer.gate.weight", "mixer.gate.bias"],
            MixerKind::Mfb => &["mixer.mfb.text", "mixer.mfb.image"],
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn register(&self, tape: &mut Tape, track_grad: bool) -> MixerVars {
        MixerVars {
            kind: self.kind,
            dim: self.dim,
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone().with_grad(track_grad)))
                .collect(),
        }
    }

    /// Mixes single prototypes without a gradient tape.
    pub fn mix(&self, text: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let t = tape.constant(Tensor::matrix(1, text.len(), text.to_vec())?);
        let v = tape.constant(Tensor::matrix(1, image.len(), image.to_vec())?);
        let out = vars.mix(&mut tape, t, v)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct MixerVars {
    kind: MixerKind,
    dim: usize,
    pub vars: Vec<Var>,
}

impl MixerVars {
    /// Handles for mixer tensors already on a tape, in [`MixerParams::names`]
    /// order.
    pub fn from_vars(kind: MixerKind, dim: usize, vars: Vec<Var>) -> Result<Self> {
        let expected = MixerParams::init(kind, dim, 0)?.tensors.len();
        if vars.len() != expected {
            return Err(Error::Contract(format!("mixer {kind:?} takes {expected} tensors, got {}", vars.len())));
        }
        Ok(Self { kind, dim, vars })
    }

    /// Row-wise prototypes from `n x d` text and image embeddings; output
    /// rows are unit-norm.
    pub fn mix(&self, tape: &mut Tape, text: Var, image: Var) -> Result<Var> {
        let d = tape.value(text).cols();
        if d != self.dim || tape.value(image).cols() != self.dim {
            return Err(Error::InvalidShape(format!(
                "mixer expects width {}, got {d} and {}",
                self.dim,
                tape.value(image).cols()
            )));
        }
        let pre = match self.kind {
            MixerKind::MeanPool => {
                let s = tape.add(text, image)?;
                tape.scale(s, 0.5)?
            }
            MixerKind::GatedFusion => {
                let both = tape.concat_cols(text, image)?;
                let logits = tape.matmul(both, self.vars[0])?;
                let logits = tape.add_row(logits, self.vars[1])?;
                let gate = tape.sigmoid(logits)?;
                // g*t + (1-g)*v = v + g*(t - v)
                let diff = tape.sub(text, image)?;
                let gated = tape.mul_elementwise(gate, diff)?;
                tape.add(image, gated)?
            }
            MixerKind::Mfb => {
                let pt = tape.matmul(text, self.vars[0])?;
                let qv = tape.matmul(image, self.vars[1])?;
                let joint = tape.mul_elementwise(pt, qv)?;
                let pool = sum_pool_matrix(tape, d)?;
                let pooled = tape.matmul(joint, pool)?;
                tape.signed_sqrt(pooled)?
            }
        };
        tape.l2_normalize_rows(pre).map_err(|e| match e {
            Error::DegenerateInput(m) => Error::DegeneratePrototype(m),
            other => other,
        })
    }
}

/// `(k*d) x d` matrix summing consecutive windows of `k` columns.
fn sum_pool_matrix(tape: &mut Tape, d: usize) -> Result<Var> {
    let k = MFB_FACTOR;
    let mut data = vec![0.0; k * d * d];
    for j in 0..d {
        for w in 0..k {
            data[(j * k + w) * d + j] = 1.0;
        }
    }
    Ok(tape.constant(Tensor::matrix(k * d, d, data)?))
}
