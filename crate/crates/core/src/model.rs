//! The unified encoder: one parameter set for composed, image-only and
//! text-only items.
//!
//! Each item fills two slots of width `d_model`. The image slot is an affine
//! projection of the image view, or a learned absent-image vector; the text
//! slot is an embedding-table row, or a learned absent-text vector. The
//! concatenated slots go through a GELU trunk and an output projection, then
//! are L2-normalized.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, NamedArray};
use crate::data::Item;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCACKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_out: usize,
    pub n_hidden_layers: usize,
    pub image_dim: usize,
    pub text_vocab: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_out: 64,
            n_hidden_layers: 2,
            image_dim: 32,
            text_vocab: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("encoder.d_model", self.d_model),
            ("encoder.d_out", self.d_out),
            ("encoder.n_hidden_layers", self.n_hidden_layers),
            ("encoder.image_dim", self.image_dim),
            ("encoder.text_vocab", self.text_vocab),
        ];
        for (k, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{k} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Ordered `(name, shape)` manifest of every parameter.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut m = vec![
            ("image_proj.weight".to_string(), vec![self.image_dim, d]),
            ("image_proj.bias".to_string(), vec![1, d]),
            ("text_embedding".to_string(), vec![self.text_vocab, d]),
            ("absent_image".to_string(), vec![1, d]),
            ("absent_text".to_string(), vec![1, d]),
        ];
        for i in 0..self.n_hidden_layers {
            let fan_in = if i == 0 { 2 * d } else { d };
            m.push((format!("trunk.{i}.weight"), vec![fan_in, d]));
            m.push((format!("trunk.{i}.bias"), vec![1, d]));
        }
        m.push(("output.weight".to_string(), vec![d, self.d_out]));
        m.push(("output.bias".to_string(), vec![1, self.d_out]));
        m
    }
}

const IMAGE_W: usize = 0;
const IMAGE_B: usize = 1;
const TEXT_TABLE: usize = 2;
const ABSENT_IMAGE: usize = 3;
const ABSENT_TEXT: usize = 4;
const TRUNK_START: usize = 5;

/// Encoder parameters, stored in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Gaussian(0, 1/sqrt(fan_in)) weights, zero biases, gaussian(0, 0.02)
    /// absent vectors and embedding table.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let mut rng = SeededRng::derive(seed, &format!("init/{name}"));
                let std = if name.ends_with(".bias") {
                    0.0
                } else if name.ends_with(".weight") {
                    1.0 / (shape[0] as f64).sqrt()
                } else {
                    0.02
                };
                let data = (0..n)
                    .map(|_| if std > 0.0 { rng.gaussian(0.0, std) } else { 0.0 })
                    .collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.config.manifest().into_iter().map(|(n, _)| n).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.config.manifest().iter().position(|(n, _)| n == name)?;
        Some(&mut self.tensors[idx])
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, track_grad: bool) -> EncoderVars {
        EncoderVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone().with_grad(track_grad)))
                .collect(),
        }
    }

    /// Encodes a batch without recording gradients. Rows are unit-norm.
    pub fn encode(&self, items: &[Item]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = encode_on_tape(&mut tape, &vars, &self.config, items)?;
        let t = tape.value(out);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// Tape handles for an [`EncoderParams`], in manifest order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub vars: Vec<Var>,
}

fn check_item(cfg: &EncoderConfig, i: usize, item: &Item) -> Result<()> {
    if item.is_empty() {
        return Err(Error::Contract(format!("item {i} has no modality")));
    }
    if let Some(t) = item.text_token {
        if t as usize >= cfg.text_vocab {
            return Err(Error::InvalidInput(format!(
                "item {i}: token {t} outside vocabulary of {}",
                cfg.text_vocab
            )));
        }
    }
    if let Some(v) = &item.image_view {
        if v.len() != cfg.image_dim {
            return Err(Error::InvalidInput(format!(
                "item {i}: image view has {} values, expected {}",
                v.len(),
                cfg.image_dim
            )));
        }
    }
    Ok(())
}

/// Records the encoder forward pass for `items`; returns a
/// `items.len() x d_out` matrix of unit rows.
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    items: &[Item],
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Contract("encode needs at least one item".into()));
    }
    for (i, item) in items.iter().enumerate() {
        check_item(cfg, i, item)?;
    }
    let v = &vars.vars;

    let images: Vec<&Vec<f32>> = items.iter().filter_map(|it| it.image_view.as_ref()).collect();
    let n_img = images.len();
    let image_table = if n_img > 0 {
        let flat: Vec<f64> = images.iter().flat_map(|v| v.iter().map(|&x| x as f64)).collect();
        let x = tape.constant(Tensor::matrix(n_img, cfg.image_dim, flat)?);
        let proj = tape.matmul(x, v[IMAGE_W])?;
        let proj = tape.add_row(proj, v[IMAGE_B])?;
        tape.concat_rows(proj, v[ABSENT_IMAGE])?
    } else {
        v[ABSENT_IMAGE]
    };
    let mut next = 0;
    let image_idx: Vec<usize> = items
        .iter()
        .map(|it| {
            if it.image_view.is_some() {
                next += 1;
                next - 1
            } else {
                n_img
            }
        })
        .collect();
    let image_slot = tape.gather_rows(image_table, &image_idx)?;

    let text_table = tape.concat_rows(v[TEXT_TABLE], v[ABSENT_TEXT])?;
    let text_idx: Vec<usize> = items
        .iter()
        .map(|it| it.text_token.map_or(cfg.text_vocab, |t| t as usize))
        .collect();
    let text_slot = tape.gather_rows(text_table, &text_idx)?;

    let mut h = tape.concat_cols(image_slot, text_slot)?;
    for layer in 0..cfg.n_hidden_layers {
        let w = v[TRUNK_START + 2 * layer];
        let b = v[TRUNK_START + 2 * layer + 1];
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        h = tape.gelu(h)?;
    }
    let out_w = v[TRUNK_START + 2 * cfg.n_hidden_layers];
    let out_b = v[TRUNK_START + 2 * cfg.n_hidden_layers + 1];
    let h = tape.matmul(h, out_w)?;
    let h = tape.add_row(h, out_b)?;
    tape.l2_normalize_rows(h)
}

/// Writes encoder parameters as float32 with a trailing checksum.
pub fn save_checkpoint(params: &EncoderParams, step: u64, path: &Path) -> Result<()> {
    container::write_file(path, &checkpoint_bytes(params, step)?)
}

pub fn checkpoint_bytes(params: &EncoderParams, step: u64) -> Result<Vec<u8>> {
    let manifest = params.config.manifest();
    let arrays: Vec<NamedArray> = manifest
        .iter()
        .zip(&params.tensors)
        .map(|((name, shape), t)| {
            NamedArray::f32(name.clone(), shape.clone(), t.data().iter().map(|&x| x as f32).collect())
        })
        .collect();
    let meta = json!({
        "kind": "checkpoint",
        "encoder": params.config,
        "step": step,
        "manifest": manifest.iter().map(|(n, s)| json!({"name": n, "shape": s})).collect::<Vec<_>>(),
    });
    container::encode(CHECKPOINT_MAGIC, meta, &arrays)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EncoderParams, u64)> {
    let d = container::decode(CHECKPOINT_MAGIC, bytes)?;
    if d.meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
        return Err(Error::format(16, "header: not a checkpoint file"));
    }
    let cfg: EncoderConfig = serde_json::from_value(d.meta["encoder"].clone())
        .map_err(|e| Error::format(16, format!("header: bad encoder config: {e}")))?;
    let step = d.meta["step"]
        .as_u64()
        .ok_or_else(|| Error::format(16, "header: missing step"))?;
    let manifest = cfg.manifest();
    if d.arrays.len() != manifest.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} arrays stored, encoder config implies {}",
            d.arrays.len(),
            manifest.len()
        )));
    }
    let tensors = manifest
        .iter()
        .zip(&d.arrays)
        .map(|((name, shape), a)| {
            if &a.name != name {
                return Err(Error::IncompatibleCheckpoint(format!("expected '{name}', found '{}'", a.name)));
            }
            let vals = d.f32(name, shape).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
            Tensor::new(shape.clone(), vals.iter().map(|&x| x as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((EncoderParams::from_tensors(&cfg, tensors)?, step))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, u64)> {
    checkpoint_from_bytes(&container::read_file(path)?)
}

/// Loads a checkpoint and checks it against the encoder configuration the
/// caller expects.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<(EncoderParams, u64)> {
    let (params, step) = load_checkpoint(path)?;
    if params.config() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint encoder {:?} does not match configured {:?}",
            params.config(),
            expected
        )));
    }
    Ok((params, step))
}
