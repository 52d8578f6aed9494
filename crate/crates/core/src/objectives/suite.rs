//! Finite-difference gradient checks over every objective term and the
//! full encoder-plus-mixer training loss.

use serde::Serialize;

use super::{cl_loss_on_tape, mcp_rows_on_tape, mcr_loss_on_tape, total_loss, MCAConfig, MixerKind, MixerParams, MixerVars};
use crate::data::{Item, Pair};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderParams, EncoderVars};
use crate::rng::SeededRng;
use crate::tensor::{create, grad_check, Init, Tape, Tensor, Var};

/// Largest relative error a case may show and still pass.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

const MIXERS: [MixerKind; 3] = [MixerKind::MeanPool, MixerKind::GatedFusion, MixerKind::Mfb];

fn gauss(name: &str, shape: &[usize], std: f64, seed: u64) -> Result<(String, Tensor)> {
    Ok((name.to_string(), create(shape, Init::Gaussian { mean: 0.0, std, seed })?))
}

fn check<F>(out: &mut Vec<GradCase>, name: String, seed: u64, params: &[(String, Tensor)], f: F) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = grad_check(params, f)?;
    out.push(GradCase {
        name,
        seed,
        max_rel_error: report.max_rel_error(),
    });
    Ok(())
}

/// Mixer tensors moved away from their initial values so that every branch
/// (including a closed gate) carries gradient.
fn perturbed_mixer(kind: MixerKind, dim: usize, seed: u64) -> Result<Vec<(String, Tensor)>> {
    let mixer = MixerParams::init(kind, dim, seed)?;
    mixer
        .names()
        .iter()
        .zip(mixer.tensors())
        .enumerate()
        .map(|(i, (name, t))| {
            let noise = create(t.shape(), Init::Gaussian { mean: 0.0, std: 0.5, seed: seed + 100 + i as u64 })?;
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Ok((name.to_string(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect()
}

fn probe_batch(seed: u64, image_dim: usize) -> Vec<Pair> {
    let mut rng = SeededRng::derive(seed, "gradcheck/batch");
    let view = |rng: &mut SeededRng| (0..image_dim).map(|_| rng.normal() as f32).collect::<Vec<_>>();
    let pair = |query, positive_doc| Pair {
        query,
        positive_doc,
        latent_base: vec![],
        modification_id: None,
    };
    vec![
        pair(Item::composed(view(&mut rng), 1), Item::image(view(&mut rng))),
        pair(Item::composed(view(&mut rng), 3), Item::image(view(&mut rng))),
        pair(Item::image(view(&mut rng)), Item::composed(view(&mut rng), 0)),
        pair(Item::text(2), Item::image(view(&mut rng))),
    ]
}

/// Runs every case for seeds `0..n_seeds`.
pub fn gradient_suite(n_seeds: u64) -> Result<Vec<GradCase>> {
    if n_seeds == 0 {
        return Err(Error::InvalidInput("gradient suite needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for seed in 0..n_seeds {
        for symmetric in [false, true] {
            let params = [gauss("q", &[5, 6], 1.0, seed * 7)?, gauss("d", &[5, 6], 1.0, seed * 7 + 1)?];
            check(&mut out, format!("cl symmetric={symmetric}"), seed, &params, |t, v| {
                let q = t.l2_normalize_rows(v[0])?;
                let d = t.l2_normalize_rows(v[1])?;
                cl_loss_on_tape(t, q, d, &[2, 0, 1, 4, 3], 0.5, symmetric)
            })?;
        }

        let params: Vec<_> = ["comp", "img", "txt", "tgt"]
            .iter()
            .enumerate()
            .map(|(i, n)| gauss(n, &[4, 6], 1.0, seed * 11 + i as u64))
            .collect::<Result<_>>()?;
        check(&mut out, "mcp".into(), seed, &params, |t, v| {
            let n: Vec<Var> = v.iter().map(|&x| t.l2_normalize_rows(x)).collect::<Result<_>>()?;
            let rows = mcp_rows_on_tape(t, n[0], &[n[1], n[2]], n[3], 0.3, None)?;
            t.mean_all(rows)
        })?;

        for kind in MIXERS {
            let d = 5;
            let mut params: Vec<_> = ["comp", "txt", "img"]
                .iter()
                .enumerate()
                .map(|(i, n)| gauss(n, &[4, d], 1.0, seed * 13 + i as u64))
                .collect::<Result<_>>()?;
            params.extend(perturbed_mixer(kind, d, seed)?);
            check(&mut out, format!("mcr {kind:?}"), seed, &params, |t, v| {
                let comp = t.l2_normalize_rows(v[0])?;
                let txt = t.l2_normalize_rows(v[1])?;
                let img = t.l2_normalize_rows(v[2])?;
                let proto = MixerVars::from_vars(kind, d, v[3..].to_vec())?.mix(t, txt, img)?;
                mcr_loss_on_tape(t, comp, proto, 0.4)?
                    .ok_or_else(|| Error::Contract("regularizer needs two composed rows".into()))
            })?;
        }

        let cfg = EncoderConfig {
            d_model: 6,
            d_out: 5,
            n_hidden_layers: 1,
            image_dim: 4,
            text_vocab: 4,
        };
        for kind in MIXERS {
            let enc = EncoderParams::init(&cfg, seed)?;
            let mut params: Vec<(String, Tensor)> = enc
                .named()
                .map(|(n, t)| {
                    // The 0.02-scale rows are lifted so differences stay well above rounding.
                    if n == "text_embedding" || n.starts_with("absent") {
                        gauss(&n, t.shape(), 1.0, seed + 7)
                    } else {
                        Ok((n, t.clone()))
                    }
                })
                .collect::<Result<_>>()?;
            let n_enc = params.len();
            params.extend(perturbed_mixer(kind, cfg.d_out, seed)?);
            let batch = probe_batch(seed, cfg.image_dim);
            let mca = MCAConfig {
                tau: 0.5,
                alpha: 0.3,
                beta: 0.7,
                mixer: kind,
                ..Default::default()
            };
            check(&mut out, format!("total {kind:?}"), seed, &params, |t, v| {
                let enc_vars = EncoderVars { vars: v[..n_enc].to_vec() };
                let mix_vars = MixerVars::from_vars(kind, cfg.d_out, v[n_enc..].to_vec())?;
                Ok(total_loss(t, &batch, &enc_vars, &cfg, &mix_vars, &mca)?.loss)
            })?;
        }
    }
    Ok(out)
}
