use serde::{Deserialize, Serialize};

use super::{cl_loss_on_tape, mcp_rows_on_tape, mcr_loss_on_tape, MCAConfig, MixerVars};
use crate::data::{Item, Pair};
use crate::error::{Error, Result};
use crate::model::{encode_on_tape, EncoderConfig, EncoderVars};
use crate::tensor::{Tape, Var};

/// Raw (unweighted) values of every term, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cl: f64,
    pub mcp: f64,
    pub mcr: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// A composed input somewhere in the batch: its row, its partner's row, and
/// the rows of its image-only and text-only parts.
struct ComposedSide {
    pair: usize,
    is_query: bool,
    row: usize,
    partner: usize,
    image_part: usize,
    text_part: usize,
}

fn rows(tape: &mut Tape, all: Var, idx: impl Iterator<Item = usize>) -> Result<Var> {
    let idx: Vec<usize> = idx.collect();
    tape.gather_rows(all, &idx)
}

/// `L = L_CL + alpha * L_MCP + beta * L_MCR` for one batch of pairs.
///
/// Queries, documents and the unimodal parts of every composed input are
/// encoded in a single pass. MCP and MCR only see pairs with a composed side;
/// terms with zero weight (or nothing to act on) are left out of the graph, so
/// the total is then bit-identical to the contrastive term.
pub fn total_loss(
    tape: &mut Tape,
    batch: &[Pair],
    encoder: &EncoderVars,
    encoder_cfg: &EncoderConfig,
    mixer: &MixerVars,
    cfg: &MCAConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("total_loss on an empty batch".into()));
    }
    let n = batch.len();
    let mut items: Vec<Item> = Vec::with_capacity(4 * n);
    items.extend(batch.iter().map(|p| p.query.clone()));
    items.extend(batch.iter().map(|p| p.positive_doc.clone()));

    let mut sides = Vec::new();
    for (i, p) in batch.iter().enumerate() {
        for (is_query, item, row, partner) in [(true, &p.query, i, n + i), (false, &p.positive_doc, n + i, i)] {
            if item.is_composed() {
                let [img, txt] = item.unimodal_parts()?;
                sides.push(ComposedSide {
                    pair: i,
                    is_query,
                    row,
                    partner,
                    image_part: items.len(),
                    text_part: items.len() + 1,
                });
                items.push(img);
                items.push(txt);
            }
        }
    }

    let all = encode_on_tape(tape, encoder, encoder_cfg, &items)?;
    let q = rows(tape, all, 0..n)?;
    let d = rows(tape, all, n..2 * n)?;
    let identity: Vec<usize> = (0..n).collect();
    let cl = cl_loss_on_tape(tape, q, d, &identity, cfg.tau, cfg.cl_symmetric)?;
    let mut breakdown = LossBreakdown {
        cl: tape.value(cl).data()[0],
        ..Default::default()
    };
    let mut total = cl;

    let mcp_sides: Vec<&ComposedSide> = sides
        .iter()
        .filter(|s| s.is_query || cfg.mcp_bidirectional)
        .collect();
    if !mcp_sides.is_empty() {
        let comp = rows(tape, all, mcp_sides.iter().map(|s| s.row))?;
        let target = rows(tape, all, mcp_sides.iter().map(|s| s.partner))?;
        let img = rows(tape, all, mcp_sides.iter().map(|s| s.image_part))?;
        let txt = rows(tape, all, mcp_sides.iter().map(|s| s.text_part))?;
        let per_side = mcp_rows_on_tape(tape, comp, &[img, txt], target, cfg.tau, cfg.mcp_margin)?;
        let mut pairs: Vec<usize> = mcp_sides.iter().map(|s| s.pair).collect();
        pairs.dedup();
        let sum = tape.sum_all(per_side)?;
        let mcp = tape.scale(sum, 1.0 / pairs.len() as f64)?;
        breakdown.mcp = tape.value(mcp).data()[0];
        if cfg.alpha != 0.0 {
            let w = tape.scale(mcp, cfg.alpha)?;
            total = tape.add(total, w)?;
        }
    }

    if sides.len() >= 2 {
        let comp = rows(tape, all, sides.iter().map(|s| s.row))?;
        let img = rows(tape, all, sides.iter().map(|s| s.image_part))?;
        let txt = rows(tape, all, sides.iter().map(|s| s.text_part))?;
        let mut proto = mixer.mix(tape, txt, img)?;
        if cfg.prototype_stop_gradient {
            proto = tape.detach(proto);
        }
        if let Some(mcr) = mcr_loss_on_tape(tape, comp, proto, cfg.tau)? {
            breakdown.mcr = tape.value(mcr).data()[0];
            if cfg.beta != 0.0 {
                let w = tape.scale(mcr, cfg.beta)?;
                total = tape.add(total, w)?;
            }
        }
    }

    breakdown.total = tape.value(total).data()[0];
    Ok(TotalLoss {
        loss: total,
        breakdown,
    })
}
