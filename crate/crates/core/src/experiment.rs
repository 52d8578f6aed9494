//! Seed-paired comparisons of training variants across noise levels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{generate, GeneratorConfig, NOISE_MID_RES};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalReport};
use crate::objectives::MCAConfig;
use crate::train::{run_training, smoothed_tail, TrainConfig};

/// Steps averaged for the final smoothed loss values.
pub const LOSS_WINDOW: usize = 100;

/// A named set of objective overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

impl Variant {
    pub fn new(name: &str, alpha: f64, beta: f64) -> Self {
        let mut overrides = Map::new();
        overrides.insert("alpha".into(), alpha.into());
        overrides.insert("beta".into(), beta.into());
        Self {
            name: name.into(),
            overrides,
        }
    }

    /// The objective settings of this variant.
    pub fn resolve(&self, base: &MCAConfig) -> Result<MCAConfig> {
        let mut value = serde_json::to_value(base)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.overrides {
            if !map.contains_key(k) {
                let valid: Vec<&String> = map.keys().collect();
                return Err(Error::InvalidConfig(format!(
                    "variant '{}': unknown objective key '{k}'; valid keys: {valid:?}",
                    self.name
                )));
            }
            map.insert(k.clone(), v.clone());
        }
        let cfg: MCAConfig = serde_json::from_value(value)
            .map_err(|e| Error::InvalidConfig(format!("variant '{}': {e}", self.name)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The axes of a grid: variants, image noise levels and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub variants: Vec<Variant>,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSettings {
    /// Contrastive baseline, each auxiliary loss alone, and both, over five
    /// seeds at mid noise.
    fn default() -> Self {
        Self {
            variants: vec![
                Variant::new("cl", 0.0, 0.0),
                Variant::new("cl+mcp", 0.01, 0.0),
                Variant::new("cl+mcr", 0.0, 0.01),
                Variant::new("cl+mca", 0.01, 0.01),
            ],
            noise_levels: vec![NOISE_MID_RES],
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentSettings {
    /// Equal auxiliary weights `0, 0.01, 0.1, 1` at each noise level.
    pub fn weighting(noise_levels: Vec<f64>, seeds: Vec<u64>) -> Self {
        Self {
            variants: [0.0, 0.01, 0.1, 1.0]
                .iter()
                .map(|&w| Variant::new(&format!("w={w}"), w, w))
                .collect(),
            noise_levels,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("experiment.variants must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment.seeds must not be empty".into()));
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|n| !(*n >= 0.0)) {
            return Err(Error::InvalidConfig(
                "experiment.noise_levels must be a non-empty list of values >= 0".into(),
            ));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("experiment.variants names must be unique".into()));
        }
        Ok(())
    }
}

/// A full grid: axes plus the base data and training configs every cell
/// starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub settings: ExperimentSettings,
    pub data: GeneratorConfig,
    pub train: TrainConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        self.data.validate()?;
        for v in &self.settings.variants {
            v.resolve(&self.train.mca)?;
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub ind: RetrievalReport,
    pub ood: RetrievalReport,
    pub final_loss_cl: f64,
    pub final_loss_total: f64,
}

/// One (variant, noise, seed) cell; exactly one of `metrics` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub noise_level: f64,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two runs.
    pub std: Option<f64>,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }
}

/// Seed-paired differences against the baseline variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub ood_acc_at_1: f64,
    pub ind_acc_at_1: f64,
    pub positive_seeds: usize,
    pub n_pairs: usize,
}

/// Aggregates of one variant at one noise level. Diagnostics are measured on
/// the OOD split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub noise_level: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub ind_acc: Option<MeanStd>,
    pub ood_acc: Option<MeanStd>,
    pub ood_acc_at_5: Option<MeanStd>,
    pub shortcut_index: Option<f64>,
    pub margin_rate: Option<f64>,
    pub final_loss_cl: Option<f64>,
    pub paired_delta_vs_baseline: Option<PairedDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub grid: ExperimentGrid,
    pub baseline: Option<String>,
    pub runs: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
}

/// Trains and evaluates one cell. The dataset and initialization depend only
/// on `(noise, seed)`, so variants at the same cell are paired.
pub fn run_cell(grid: &ExperimentGrid, variant: &Variant, noise: f64, seed: u64) -> Result<RunMetrics> {
    let data_cfg = GeneratorConfig {
        image_noise_std: noise,
        seed,
        ..grid.data.clone()
    };
    let data = generate(&data_cfg)?;
    let mut cfg = grid.train.clone();
    cfg.seed = seed;
    cfg.mca = variant.resolve(&grid.train.mca)?;
    cfg.fit_encoder_to(&data);
    let out = run_training(&data, &cfg, None)?;
    let cl: Vec<f64> = out.log.iter().map(|r| r.loss_cl).collect();
    let total: Vec<f64> = out.log.iter().map(|r| r.loss_total).collect();
    Ok(RunMetrics {
        ind: evaluate(&out.params, &data.ind_test)?,
        ood: evaluate(&out.params, &data.ood_test)?,
        final_loss_cl: smoothed_tail(&cl, LOSS_WINDOW),
        final_loss_total: smoothed_tail(&total, LOSS_WINDOW),
    })
}

fn baseline_name(grid: &ExperimentGrid) -> Result<Option<String>> {
    for v in &grid.settings.variants {
        let c = v.resolve(&grid.train.mca)?;
        if c.alpha == 0.0 && c.beta == 0.0 {
            return Ok(Some(v.name.clone()));
        }
    }
    Ok(None)
}

/// Aggregates per-run records into summary rows, one per (variant, noise).
pub fn summarize(grid: &ExperimentGrid, runs: &[RunRecord]) -> Result<(Option<String>, Vec<SummaryRow>)> {
    let baseline = baseline_name(grid)?;
    let find = |variant: &str, noise: f64, seed: u64| {
        runs.iter()
            .find(|r| r.variant == variant && r.noise_level == noise && r.seed == seed)
            .and_then(|r| r.metrics.as_ref())
    };
    let mut rows = Vec::new();
    for &noise in &grid.settings.noise_levels {
        for v in &grid.settings.variants {
            let cell: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.variant == v.name && r.noise_level == noise)
                .collect();
            let ok: Vec<&RunMetrics> = cell.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let col = |f: &dyn Fn(&RunMetrics) -> f64| ok.iter().map(|m| f(m)).collect::<Vec<_>>();
            let mean = |xs: Vec<f64>| MeanStd::of(&xs).map(|m| m.mean);
            let paired = baseline.as_ref().map(|b| {
                let pairs: Vec<(&RunMetrics, &RunMetrics)> = grid
                    .settings
                    .seeds
                    .iter()
                    .filter_map(|&s| Some((find(&v.name, noise, s)?, find(b, noise, s)?)))
                    .collect();
                let n = pairs.len().max(1) as f64;
                let d_ood: Vec<f64> = pairs
                    .iter()
                    .map(|(x, y)| x.ood.accuracy_at_1 - y.ood.accuracy_at_1)
                    .collect();
                PairedDelta {
                    ood_acc_at_1: d_ood.iter().sum::<f64>() / n,
                    ind_acc_at_1: pairs
                        .iter()
                        .map(|(x, y)| x.ind.accuracy_at_1 - y.ind.accuracy_at_1)
                        .sum::<f64>()
                        / n,
                    positive_seeds: d_ood.iter().filter(|&&d| d > 0.0).count(),
                    n_pairs: pairs.len(),
                }
            });
            rows.push(SummaryRow {
                variant: v.name.clone(),
                noise_level: noise,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                ind_acc: MeanStd::of(&col(&|m| m.ind.accuracy_at_1)),
                ood_acc: MeanStd::of(&col(&|m| m.ood.accuracy_at_1)),
                ood_acc_at_5: MeanStd::of(&col(&|m| m.ood.accuracy_at_5)),
                shortcut_index: mean(col(&|m| m.ood.shortcut_index)),
                margin_rate: mean(col(&|m| m.ood.composition_margin_rate)),
                final_loss_cl: mean(col(&|m| m.final_loss_cl)),
                paired_delta_vs_baseline: paired.filter(|p| p.n_pairs > 0),
            });
        }
    }
    Ok((baseline, rows))
}

/// Runs every cell in (noise, seed, variant) order. A failing cell is recorded
/// with its error and the grid carries on. `on_run` sees each record as it
/// completes.
pub fn run_grid(grid: &ExperimentGrid, mut on_run: impl FnMut(&RunRecord)) -> Result<GridSummary> {
    grid.validate()?;
    let mut runs = Vec::new();
    for &noise in &grid.settings.noise_levels {
        for &seed in &grid.settings.seeds {
            for v in &grid.settings.variants {
                let outcome = run_cell(grid, v, noise, seed);
                let rec = RunRecord {
                    variant: v.name.clone(),
                    noise_level: noise,
                    seed,
                    error: outcome.as_ref().err().map(ToString::to_string),
                    metrics: outcome.ok(),
                };
                on_run(&rec);
                runs.push(rec);
            }
        }
    }
    let (baseline, rows) = summarize(grid, &runs)?;
    Ok(GridSummary {
        grid: grid.clone(),
        baseline,
        runs,
        rows,
    })
}

pub fn write_summary(summary: &GridSummary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    crate::container::write_file(path, text.as_bytes())
}

/// Aligned plain-text table of the summary rows.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let fmt_ms = |m: &Option<MeanStd>| match m {
        Some(MeanStd { mean, std: Some(s) }) => format!("{mean:.3}±{s:.3}"),
        Some(MeanStd { mean, std: None }) => format!("{mean:.3}"),
        None => "-".into(),
    };
    let fmt_opt = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.4}"));
    let header = [
        "variant", "noise", "ok/failed", "ind@1", "ood@1", "ood@5", "shortcut", "margin", "cl_final", "Δood@1", "Δind@1",
        "Δ>0",
    ];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let p = r.paired_delta_vs_baseline.as_ref();
        table.push(vec![
            r.variant.clone(),
            format!("{}", r.noise_level),
            format!("{}/{}", r.n_ok, r.n_failed),
            fmt_ms(&r.ind_acc),
            fmt_ms(&r.ood_acc),
            fmt_ms(&r.ood_acc_at_5),
            fmt_opt(r.shortcut_index),
            fmt_opt(r.margin_rate),
            fmt_opt(r.final_loss_cl),
            p.map_or("-".into(), |p| format!("{:+.4}", p.ood_acc_at_1)),
            p.map_or("-".into(), |p| format!("{:+.4}", p.ind_acc_at_1)),
            p.map_or("-".into(), |p| format!("{}/{}", p.positive_seeds, p.n_pairs)),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
