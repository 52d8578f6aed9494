//! Contrastive and modality-composition objectives.
//!
//! All similarities are cosines of unit embeddings divided by the temperature.
//! Each loss has a tape form (used in training and gradient checks) and a
//! plain-slice convenience wrapper that builds a throwaway tape.

mod mixer;
mod suite;
mod total;

pub use mixer::{MixerKind, MixerParams, MixerVars, MFB_FACTOR};
pub use suite::{gradient_suite, GradCase, GRAD_TOLERANCE};
pub use total::{total_loss, LossBreakdown, TotalLoss};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MCAConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mixer: MixerKind,
    pub mcp_bidirectional: bool,
    pub prototype_stop_gradient: bool,
    pub cl_symmetric: bool,
    /// When set, each MCP part term becomes `max(0, diff + margin)`. Off by
    /// default; the unclamped difference is the reference form.
    pub mcp_margin: Option<f64>,
}

impl Default for MCAConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            alpha: 0.01,
            beta: 0.01,
            mixer: MixerKind::GatedFusion,
            mcp_bidirectional: true,
            prototype_stop_gradient: false,
            cl_symmetric: false,
            mcp_margin: None,
        }
    }
}

impl MCAConfig {
    /// Plain contrastive learning: both auxiliary weights at zero.
    pub fn vanilla() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("mca.tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("mca.alpha and mca.beta must be >= 0".into()));
        }
        Ok(())
    }
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("{name} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `cos(h_a, h_b) / tau` for unit vectors.
pub fn similarity(h_a: &[f64], h_b: &[f64], tau: f64) -> Result<f64> {
    check_unit("h_a", h_a)?;
    check_unit("h_b", h_b)?;
    if h_a.len() != h_b.len() {
        return Err(Error::InvalidShape(format!("{} vs {}", h_a.len(), h_b.len())));
    }
    Ok(h_a.iter().zip(h_b).map(|(x, y)| x * y).sum::<f64>() / tau)
}

/// Mean of `-log softmax` at the target column of `scores / tau`.
fn softmax_xent(tape: &mut Tape, rows: Var, cols: Var, targets: &[usize], tau: f64) -> Result<Var> {
    let ct = tape.transpose(cols)?;
    let logits = tape.matmul(rows, ct)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_per_row(logp, targets)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

/// In-batch contrastive loss. Query `i`'s positive is document
/// `positives[i]`; every other document is a negative. With `symmetric`, the
/// document-to-query direction is averaged in.
pub fn cl_loss_on_tape(
    tape: &mut Tape,
    queries: Var,
    docs: Var,
    positives: &[usize],
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    let n = tape.value(queries).rows();
    let m = tape.value(docs).rows();
    if positives.len() != n {
        return Err(Error::Contract(format!("{} positives for {n} queries", positives.len())));
    }
    if n < 2 {
        return Err(Error::Contract("contrastive loss needs a batch of at least 2".into()));
    }
    let mut seen = vec![false; m];
    for &p in positives {
        if p >= m {
            return Err(Error::Contract(format!("positive index {p} outside {m} documents")));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("document {p} is the positive of two queries")));
        }
    }
    let forward = softmax_xent(tape, queries, docs, positives, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let pos_docs = tape.gather_rows(docs, positives)?;
    let identity: Vec<usize> = (0..n).collect();
    let backward = softmax_xent(tape, pos_docs, queries, &identity, tau)?;
    let sum = tape.add(forward, backward)?;
    tape.scale(sum, 0.5)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

pub fn cl_loss(
    queries: &[Vec<f64>],
    docs: &[Vec<f64>],
    positives: &[usize],
    tau: f64,
    symmetric: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(matrix(queries)?);
    let d = tape.constant(matrix(docs)?);
    let l = cl_loss_on_tape(&mut tape, q, d, positives, tau, symmetric)?;
    Ok(tape.value(l).data()[0])
}

/// Per-row composition preference:
/// `sum over parts of [sim(part, target) - sim(composed, target)]`, or the
/// clamped `max(0, diff + margin)` per part when a margin is given. Returns a
/// length-`n` vector.
pub fn mcp_rows_on_tape(
    tape: &mut Tape,
    composed: Var,
    parts: &[Var],
    target: Var,
    tau: f64,
    margin: Option<f64>,
) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Contract("MCP needs at least one unimodal part".into()));
    }
    let comp_sim = tape.row_dot(composed, target)?;
    let mut total: Option<Var> = None;
    for &p in parts {
        let part_sim = tape.row_dot(p, target)?;
        let diff = tape.sub(part_sim, comp_sim)?;
        let mut term = tape.scale(diff, 1.0 / tau)?;
        if let Some(m) = margin {
            let n = tape.value(term).len();
            let shift = tape.constant(Tensor::new(vec![n], vec![m; n])?);
            let shifted = tape.add(term, shift)?;
            term = tape.relu(shifted)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("parts is nonempty"))
}

/// Single-example MCP value.
pub fn mcp_loss(composed: &[f64], parts: &[Vec<f64>], target: &[f64], tau: f64) -> Result<f64> {
    if parts.is_empty() {
        return Err(Error::Contract("MCP needs at least one unimodal part".into()));
    }
    check_unit("composed", composed)?;
    check_unit("target", target)?;
    for p in parts {
        check_unit("part", p)?;
    }
    let mut tape = Tape::new();
    let c = tape.constant(matrix(&[composed.to_vec()])?);
    let t = tape.constant(matrix(&[target.to_vec()])?);
    let ps: Vec<Var> = parts
        .iter()
        .map(|p| Ok(tape.constant(matrix(&[p.clone()])?)))
        .collect::<Result<_>>()?;
    let out = mcp_rows_on_tape(&mut tape, c, &ps, t, tau, None)?;
    Ok(tape.value(out).data()[0])
}

/// Composition regularization: each composed embedding must pick its own
/// prototype out of all prototypes in the batch. Fewer than two composed
/// inputs yields `None` (the term contributes zero).
pub fn mcr_loss_on_tape(tape: &mut Tape, composed: Var, prototypes: Var, tau: f64) -> Result<Option<Var>> {
    let n = tape.value(composed).rows();
    if tape.value(prototypes).rows() != n {
        return Err(Error::Contract(format!(
            "{n} composed embeddings but {} prototypes",
            tape.value(prototypes).rows()
        )));
    }
    if n < 2 {
        return Ok(None);
    }
    let identity: Vec<usize> = (0..n).collect();
    softmax_xent(tape, composed, prototypes, &identity, tau).map(Some)
}

pub fn mcr_loss(composed: &[Vec<f64>], prototypes: &[Vec<f64>], tau: f64) -> Result<f64> {
    if composed.len() != prototypes.len() {
        return Err(Error::Contract(format!(
            "{} composed embeddings but {} prototypes",
            composed.len(),
            prototypes.len()
        )));
    }
    if composed.len() < 2 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let c = tape.constant(matrix(composed)?);
    let p = tape.constant(matrix(prototypes)?);
    let l = mcr_loss_on_tape(&mut tape, c, p, tau)?.expect("n >= 2");
    Ok(tape.value(l).data()[0])
}
