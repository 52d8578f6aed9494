use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mca_lab::config::{load_json, with_overrides, LabConfig};
use mca_lab::data::{self, oracle_image_only, oracle_latent, DatasetBundle};
use mca_lab::eval::{evaluate, export_embeddings, pca_project};
use mca_lab::experiment::{run_grid, summary_table, write_summary, ExperimentGrid};
use mca_lab::model::load_checkpoint_for;
use mca_lab::objectives::{gradient_suite, GRAD_TOLERANCE};
use mca_lab::train::{run_training, TrainPaths};
use mca_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "mcalab", version, about = "Composed-retrieval shortcut lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file with optional `data`, `train` and `experiment` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path override such as `train.mca.alpha=0`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset file written by `gen-data`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and print oracle calibration.
    GenData(Common),
    /// Train an encoder and write logs plus a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Evaluate a checkpoint on both test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Seeds per case.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Export embeddings of both test splits with 2-D PCA coordinates.
    ExportEmb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a variant x noise x seed grid.
    Experiment(Common),
}

fn resolve_config(c: &Common) -> Result<LabConfig> {
    let base = match &c.config {
        Some(p) => load_json::<LabConfig>(p)?,
        None => LabConfig::default(),
    };
    let mut cfg = with_overrides(&base, &c.set)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Records the config echo, the seed and the hashes of inputs and outputs.
fn write_manifest(command: &str, cfg: &LabConfig, out: &Path, inputs: &[&Path], artifacts: &[&str]) -> Result<()> {
    let hashes = |entries: Vec<(String, PathBuf)>| -> Result<Value> {
        let mut map = serde_json::Map::new();
        for (name, p) in entries {
            map.insert(name, sha256_file(&p)?.into());
        }
        Ok(Value::Object(map))
    };
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": {"data": cfg.data.seed, "train": cfg.train.seed},
        "config": cfg,
        "inputs": hashes(inputs.iter().map(|p| (p.display().to_string(), p.to_path_buf())).collect())?,
        "artifacts": hashes(artifacts.iter().map(|a| (a.to_string(), out.join(a))).collect())?,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn load_data(cfg: &LabConfig, arg: &DataArg) -> Result<DatasetBundle> {
    match &arg.data {
        Some(p) => data::deserialize(p),
        None => data::generate(&cfg.data),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    create_dir(&c.out)?;
    let bundle = data::generate(&cfg.data)?;
    data::serialize(&bundle, &c.out.join("dataset.bin"))?;
    let image = oracle_image_only(&bundle)?;
    let latent = oracle_latent(&bundle)?;
    println!("image-only oracle: ind {:.4} ood {:.4}", image.ind, image.ood);
    println!("latent oracle:     ind {:.4} ood {:.4}", latent.ind, latent.ood);
    write_json(&c.out.join("oracles.json"), &json!({"image_only": image, "latent": latent}))?;
    write_manifest("gen-data", &cfg, &c.out, &[], &["dataset.bin", "oracles.json"])
}

fn train(c: &Common, d: &DataArg) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let bundle = load_data(&cfg, d)?;
    if d.data.is_some() {
        cfg.data = bundle.config.clone();
    }
    cfg.train.fit_encoder_to(&bundle);
    create_dir(&c.out)?;
    let paths = TrainPaths::in_dir(&c.out);
    let out = run_training(&bundle, &cfg.train, Some(&paths))?;
    for rec in out.log.iter().filter(|r| (r.step + 1) % 100 == 0 || r.step + 1 == out.log.len()) {
        println!(
            "step {:>5}  lr {:.2e}  total {:.4}  cl {:.4}  mcp {:.4}  mcr {:.4}",
            rec.step + 1,
            rec.lr,
            rec.loss_total,
            rec.loss_cl,
            rec.loss_mcp,
            rec.loss_mcr
        );
    }
    if let Some(p) = out.probes.last() {
        println!(
            "final probe: ind acc@1 {:.4}  ood acc@1 {:.4}",
            p.ind.accuracy_at_1, p.ood.accuracy_at_1
        );
    }
    let inputs: Vec<&Path> = d.data.iter().map(PathBuf::as_path).collect();
    write_manifest("train", &cfg, &c.out, &inputs, &["metrics.jsonl", "probes.jsonl", "checkpoint.bin"])
}

fn eval(c: &Common, d: &DataArg, checkpoint: &Path) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let bundle = load_data(&cfg, d)?;
    cfg.train.fit_encoder_to(&bundle);
    let (params, _) = load_checkpoint_for(checkpoint, &cfg.train.encoder)?;
    create_dir(&c.out)?;
    let reports = [evaluate(&params, &bundle.ind_test)?, evaluate(&params, &bundle.ood_test)?];
    for r in &reports {
        println!(
            "{:<4} acc@1 {:.4}  acc@5 {:.4}  shortcut {:.4}  margin {:.4}  (n={})",
            r.split, r.accuracy_at_1, r.accuracy_at_5, r.shortcut_index, r.composition_margin_rate, r.n_queries
        );
    }
    write_json(&c.out.join("report.json"), &reports)?;
    let mut inputs = vec![checkpoint];
    inputs.extend(d.data.iter().map(PathBuf::as_path));
    write_manifest("eval", &cfg, &c.out, &inputs, &["report.json"])
}

fn grad_check(c: &Common, seeds: u64) -> Result<bool> {
    let cfg = resolve_config(c)?;
    let cases = gradient_suite(seeds)?;
    let mut ok = true;
    for case in &cases {
        ok &= case.passed();
        println!(
            "{:<28} seed {:>2}  max rel error {:.3e}  {}",
            case.name,
            case.seed,
            case.max_rel_error,
            if case.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!("{} cases, {failed} failed (tolerance {GRAD_TOLERANCE:e})", cases.len());
    create_dir(&c.out)?;
    write_json(&c.out.join("grad_check.json"), &cases)?;
    write_manifest("grad-check", &cfg, &c.out, &[], &["grad_check.json"])?;
    Ok(ok)
}

fn export_emb(c: &Common, d: &DataArg, checkpoint: &Path) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let bundle = load_data(&cfg, d)?;
    cfg.train.fit_encoder_to(&bundle);
    let (params, _) = load_checkpoint_for(checkpoint, &cfg.train.encoder)?;
    create_dir(&c.out)?;
    let mut artifacts = Vec::new();
    for split in bundle.splits() {
        let file = format!("embeddings_{}.bin", split.name);
        let dump = export_embeddings(&params, split, &c.out.join(&file))?;
        let coords = pca_project(&dump.embeddings, 2)?;
        let pca_file = format!("pca_{}.json", split.name);
        write_json(
            &c.out.join(&pca_file),
            &json!({"groups": dump.groups, "query_index": dump.query_index, "coords": coords}),
        )?;
        println!("{}: {} embeddings -> {file}, {pca_file}", split.name, dump.embeddings.len());
        artifacts.push(file);
        artifacts.push(pca_file);
    }
    let mut inputs = vec![checkpoint];
    inputs.extend(d.data.iter().map(PathBuf::as_path));
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest("export-emb", &cfg, &c.out, &inputs, &names)
}

fn experiment(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    let grid = ExperimentGrid {
        settings: cfg.experiment.clone(),
        data: cfg.data.clone(),
        train: cfg.train.clone(),
    };
    grid.validate()?;
    create_dir(&c.out)?;
    let summary = run_grid(&grid, |r| match (&r.metrics, &r.error) {
        (Some(m), _) => eprintln!(
            "{} noise {} seed {}: ind {:.4} ood {:.4}",
            r.variant, r.noise_level, r.seed, m.ind.accuracy_at_1, m.ood.accuracy_at_1
        ),
        (None, Some(e)) => eprintln!("{} noise {} seed {}: failed: {e}", r.variant, r.noise_level, r.seed),
        (None, None) => {}
    })?;
    write_summary(&summary, &c.out.join("summary.json"))?;
    print!("{}", summary_table(&summary.rows));
    write_manifest("experiment", &cfg, &c.out, &[], &["summary.json"])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c).map(|_| true),
        Command::Train { common, data } => train(common, data).map(|_| true),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => eval(common, data, checkpoint).map(|_| true),
        Command::GradCheck { common, seeds } => grad_check(common, *seeds),
        Command::ExportEmb {
            common,
            data,
            checkpoint,
        } => export_emb(common, data, checkpoint).map(|_| true),
        Command::Experiment(c) => experiment(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
