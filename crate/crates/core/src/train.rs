//! Optimization loop: seeded batch assembly, AdamW with a linear warmup and
//! decay schedule, metric and probe logs, checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Pair};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalReport};
use crate::model::{save_checkpoint, EncoderConfig, EncoderParams};
use crate::objectives::{total_loss, MCAConfig, MixerParams};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between evaluation probes; 0 disables probing.
    pub eval_every: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Record measured step durations in `wall_ms`. Off by default so that
    /// metric logs are a pure function of data and configuration.
    pub record_wall_time: bool,
    pub mca: MCAConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_steps: 200,
            peak_learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 256,
            seed: 0,
            eval_every: 100,
            betas: (0.9, 0.999),
            eps: 1e-8,
            record_wall_time: false,
            mca: MCAConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.warmup_steps > self.steps {
            return bad(format!(
                "train.warmup_steps ({}) must not exceed train.steps ({})",
                self.warmup_steps, self.steps
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.peak_learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.peak_learning_rate and train.weight_decay must be >= 0".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("train.betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("train.eps must be > 0, got {}", self.eps));
        }
        self.mca.validate()?;
        self.encoder.validate()
    }

    /// Encoder widths implied by a dataset, keeping the rest of `encoder`.
    pub fn fit_encoder_to(&mut self, data: &DatasetBundle) {
        self.encoder.image_dim = data.config.image_dim;
        self.encoder.text_vocab = data.config.vocab_size;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cl: f64,
    pub loss_mcp: f64,
    pub loss_mcr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub ind: RetrievalReport,
    pub ood: RetrievalReport,
}

/// Linear ramp from 0 to the peak over `warmup_steps`, then linear decay to 0
/// at `steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_learning_rate;
    let step = step.min(config.steps);
    if step < config.warmup_steps {
        peak * step as f64 / config.warmup_steps as f64
    } else if config.steps == config.warmup_steps {
        peak
    } else {
        peak * (config.steps - step) as f64 / (config.steps - config.warmup_steps) as f64
    }
}

/// Draws batches from successive seeded permutations of the training pairs.
/// A new epoch starts whenever the current one cannot fill a whole batch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    n: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        if batch_size > n {
            return Err(Error::InvalidConfig(format!(
                "train.batch_size ({batch_size}) exceeds the {n} training pairs"
            )));
        }
        Ok(Self {
            rng: SeededRng::derive(seed, "train/batches"),
            order: vec![],
            cursor: 0,
            batch_size,
            n,
        })
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order = self.rng.permutation(self.n);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

/// One batch from `dataset` using the sampler's stream.
pub fn assemble_batch(dataset: &[Pair], sampler: &mut BatchSampler) -> Vec<Pair> {
    sampler.next_indices().into_iter().map(|i| dataset[i].clone()).collect()
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// Decoupled-weight-decay Adam with bias correction. Every gradient is
/// checked before any parameter moves, so a divergence error leaves the
/// parameters and state untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::Contract("parameter, gradient and state counts differ".into()));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.len() != g.len() {
            return Err(Error::InvalidShape(format!(
                "gradient for '{name}' has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if let Some(x) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient {x} in parameter '{name}'")));
        }
    }
    state.step += 1;
    let (b1, b2) = h.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= h.lr * h.weight_decay * *x;
            *x -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Where `run_training` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub metrics: PathBuf,
    pub probes: PathBuf,
    pub checkpoint: PathBuf,
    pub last_good: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.jsonl"),
            probes: dir.join("probes.jsonl"),
            checkpoint: dir.join("checkpoint.bin"),
            last_good: dir.join("last_good.bin"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub mixer: MixerParams,
    pub log: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
}

struct JsonLines(Option<BufWriter<File>>, PathBuf);

impl JsonLines {
    fn create(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None, PathBuf::new())),
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(BufWriter::new(f)), p.to_path_buf()))
            }
        }
    }

    fn push<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

fn probe(params: &EncoderParams, data: &DatasetBundle, step: usize) -> Result<ProbeRecord> {
    Ok(ProbeRecord {
        step,
        ind: eval::evaluate(params, &data.ind_test)?,
        ood: eval::evaluate(params, &data.ood_test)?,
    })
}

/// Trains the encoder (and the mixer) on `dataset.train`.
///
/// Each step assembles a batch, records the total loss on a fresh tape,
/// backpropagates and applies AdamW. With `paths`, the metric log and probe log
/// are streamed to disk and the final encoder is checkpointed. A non-finite
/// loss or gradient aborts the run with a divergence error after writing the
/// last good parameters to `paths.last_good`.
pub fn run_training(dataset: &DatasetBundle, config: &TrainConfig, paths: Option<&TrainPaths>) -> Result<TrainOutput> {
    config.validate()?;
    if config.encoder.image_dim != dataset.config.image_dim || config.encoder.text_vocab != dataset.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "encoder.image_dim/text_vocab ({}, {}) do not match the dataset ({}, {})",
            config.encoder.image_dim, config.encoder.text_vocab, dataset.config.image_dim, dataset.config.vocab_size
        )));
    }
    let mut params = EncoderParams::init(&config.encoder, config.seed)?;
    let mut mixer = MixerParams::init(config.mca.mixer, config.encoder.d_out, config.seed)?;
    let names: Vec<String> = config
        .encoder
        .manifest()
        .into_iter()
        .map(|(n, _)| n)
        .chain(mixer.names().iter().map(|s| s.to_string()))
        .collect();
    let mut state = AdamState::new(&params.tensors().iter().chain(mixer.tensors()).collect::<Vec<_>>());
    let mut sampler = BatchSampler::new(dataset.train.len(), config.batch_size, config.seed)?;

    let mut metrics = JsonLines::create(paths.map(|p| p.metrics.as_path()))?;
    let mut probes_out = JsonLines::create(paths.map(|p| p.probes.as_path()))?;
    let mut log = Vec::with_capacity(config.steps);
    let mut probes = Vec::new();

    for step in 0..config.steps {
        if config.eval_every > 0 && step % config.eval_every == 0 {
            let p = probe(&params, dataset, step)?;
            probes_out.push(&p)?;
            probes.push(p);
        }
        let started = Instant::now();
        let batch = assemble_batch(&dataset.train, &mut sampler);
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape, true);
        let mix_vars = mixer.register(&mut tape, true);
        let last_good = params.clone();
        let outcome = total_loss(&mut tape, &batch, &enc_vars, &config.encoder, &mix_vars, &config.mca)
            .map_err(|e| match e {
                Error::DegenerateInput(m) | Error::DegeneratePrototype(m) => {
                    Error::Divergence(format!("step {step}: {m}"))
                }
                other => other,
            })
            .and_then(|loss| {
                if !loss.breakdown.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss {} at step {step}",
                        loss.breakdown.total
                    )));
                }
                tape.backward(loss.loss)?;
                let grads: Vec<Vec<f64>> = enc_vars
                    .vars
                    .iter()
                    .chain(&mix_vars.vars)
                    .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                    .collect();
                let lr = lr_at(step, config);
                let hyper = AdamHyper {
                    lr,
                    weight_decay: config.weight_decay,
                    betas: config.betas,
                    eps: config.eps,
                };
                let mut all: Vec<&mut Tensor> = params.tensors_mut().iter_mut().chain(mixer.tensors_mut()).collect();
                adamw_step(&mut all, &names, &grads, &mut state, hyper)?;
                if let Some(name) = all
                    .iter()
                    .zip(&names)
                    .find(|(t, _)| t.data().iter().any(|x| !x.is_finite()))
                    .map(|(_, n)| n)
                {
                    return Err(Error::Divergence(format!("parameter '{name}' became non-finite at step {step}")));
                }
                Ok((loss.breakdown, lr))
            });
        let (b, lr) = match outcome {
            Ok(v) => v,
            Err(e) => {
                metrics.flush()?;
                probes_out.flush()?;
                if let (Error::Divergence(_), Some(p)) = (&e, paths) {
                    save_checkpoint(&last_good, step as u64, &p.last_good)?;
                }
                return Err(e);
            }
        };
        let rec = StepRecord {
            step,
            lr,
            loss_total: b.total,
            loss_cl: b.cl,
            loss_mcp: b.mcp,
            loss_mcr: b.mcr,
            wall_ms: if config.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        metrics.push(&rec)?;
        log.push(rec);
    }
    if config.eval_every > 0 {
        let p = probe(&params, dataset, config.steps)?;
        probes_out.push(&p)?;
        probes.push(p);
    }
    metrics.flush()?;
    probes_out.flush()?;
    if let Some(p) = paths {
        save_checkpoint(&params, config.steps as u64, &p.checkpoint)?;
    }
    Ok(TrainOutput {
        params,
        mixer,
        log,
        probes,
    })
}

/// Mean of the last `window` values (or all of them if fewer).
pub fn smoothed_tail(values: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, values.len().max(1));
    let tail = &values[values.len().saturating_sub(w)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}
