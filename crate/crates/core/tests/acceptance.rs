//! Acceptance report: one PASS/FAIL line per criterion, then the detail
//! tables. With `MCA_ACCEPTANCE_STRICT=1` the process exits nonzero when any
//! criterion fails.

use std::time::Instant;

use mca_lab::data::{self, generate, oracle_image_only, oracle_latent, GeneratorConfig, Item, NOISE_LOW_RES};
use mca_lab::eval::evaluate;
use mca_lab::experiment::{run_grid, summary_table, ExperimentGrid, ExperimentSettings, GridSummary, RunRecord};
use mca_lab::model::{checkpoint_bytes, checkpoint_from_bytes, encode_on_tape, EncoderConfig, EncoderParams};
use mca_lab::objectives::{
    cl_loss, cl_loss_on_tape, gradient_suite, mcp_loss, mcr_loss, total_loss, MCAConfig, MixerParams,
};
use mca_lab::tensor::Tape;
use mca_lab::train::{run_training, TrainConfig, TrainPaths};
use mca_lab::Error;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Report,
}

struct Line {
    id: usize,
    name: &'static str,
    status: Status,
    detail: String,
}

fn line(id: usize, name: &'static str, ok: bool, detail: String) -> Line {
    Line {
        id,
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn gradient_criterion() -> Line {
    let started = Instant::now();
    let cases = gradient_suite(10).expect("gradient suite runs");
    let secs = started.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed = cases.iter().filter(|c| !c.passed()).count();
    line(
        1,
        "gradient suite",
        failed == 0 && worst < 1e-4 && secs < 60.0,
        format!("{} cases x 10 seeds, {failed} failed, max rel error {worst:.2e}, {secs:.1}s", cases.len() / 10),
    )
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn closed_form_criterion() -> Line {
    let b = 8usize;
    let h = unit(&[0.3, -0.2, 0.9, 0.1]);
    let same = vec![h.clone(); b];
    let ids: Vec<usize> = (0..b).collect();
    let ln_b = (b as f64).ln();
    let cl = cl_loss(&same, &same, &ids, 0.02, false).unwrap();
    let mcr = mcr_loss(&same, &same, 0.02).unwrap();
    let target = unit(&[1.0, 0.0, 0.0, 0.0]);
    let c = unit(&[0.6, 0.8, 0.0, 0.0]);
    let parts = vec![unit(&[0.6, 0.0, 0.8, 0.0]), unit(&[0.6, 0.0, 0.0, 0.8])];
    let mcp = mcp_loss(&c, &parts, &target, 0.02).unwrap();

    let d = generate(&GeneratorConfig {
        n_train: 64,
        n_ind_test: 1,
        n_ood_test: 1,
        ..Default::default()
    })
    .unwrap();
    let enc_cfg = EncoderConfig {
        image_dim: d.config.image_dim,
        text_vocab: d.config.vocab_size,
        ..Default::default()
    };
    let enc = EncoderParams::init(&enc_cfg, 0).unwrap();
    let mixer = MixerParams::init(MCAConfig::default().mixer, enc_cfg.d_out, 0).unwrap();
    let batch = &d.train[..32];
    let mut t = Tape::new();
    let ev = enc.register(&mut t, false);
    let mv = mixer.register(&mut t, false);
    let total = total_loss(&mut t, batch, &ev, &enc_cfg, &mv, &MCAConfig::vanilla()).unwrap();
    let total_bits = t.value(total.loss).data()[0].to_bits();
    let mut t2 = Tape::new();
    let ev2 = enc.register(&mut t2, false);
    let items: Vec<Item> = batch
        .iter()
        .map(|p| p.query.clone())
        .chain(batch.iter().map(|p| p.positive_doc.clone()))
        .collect();
    let emb = encode_on_tape(&mut t2, &ev2, &enc_cfg, &items).unwrap();
    let n = batch.len();
    let q = t2.gather_rows(emb, &(0..n).collect::<Vec<_>>()).unwrap();
    let dd = t2.gather_rows(emb, &(n..2 * n).collect::<Vec<_>>()).unwrap();
    let plain = cl_loss_on_tape(&mut t2, q, dd, &(0..n).collect::<Vec<_>>(), 0.02, false).unwrap();
    let plain_bits = t2.value(plain).data()[0].to_bits();

    let ok = (cl - ln_b).abs() <= 1e-9 && mcp == 0.0 && (mcr - ln_b).abs() <= 1e-9 && total_bits == plain_bits;
    line(
        2,
        "closed-form loss values",
        ok,
        format!(
            "cl uniform {cl:.12} (ln 8 = {ln_b:.12}), mcp equal {mcp}, mcr identical {mcr:.12}, zero-weight total bit-equal: {}",
            total_bits == plain_bits
        ),
    )
}

fn calibration_criterion() -> Line {
    let b = generate(&GeneratorConfig::default()).unwrap();
    let img = oracle_image_only(&b).unwrap();
    let lat = oracle_latent(&b).unwrap();
    line(
        3,
        "dataset calibration",
        img.ind >= 0.90 && img.ood <= 0.30 && lat.ind == 1.0 && lat.ood == 1.0,
        format!(
            "image-only ind {:.4} ood {:.4}; latent ind {:.4} ood {:.4}",
            img.ind, img.ood, lat.ind, lat.ood
        ),
    )
}

struct Timed {
    summary: GridSummary,
    seconds: Vec<(String, f64)>,
}

fn timed_grid(grid: &ExperimentGrid) -> Timed {
    let mut last = Instant::now();
    let mut seconds = Vec::new();
    let summary = run_grid(grid, |r: &RunRecord| {
        let s = last.elapsed().as_secs_f64();
        last = Instant::now();
        seconds.push((r.variant.clone(), s));
        match &r.metrics {
            Some(m) => eprintln!(
                "  {:<8} noise {} seed {}: ind {:.4} ood {:.4} ood@5 {:.4} ({s:.1}s)",
                r.variant, r.noise_level, r.seed, m.ind.accuracy_at_1, m.ood.accuracy_at_1, m.ood.accuracy_at_5
            ),
            None => eprintln!("  {} seed {}: failed: {:?}", r.variant, r.seed, r.error),
        }
    })
    .expect("grid is valid");
    Timed { summary, seconds }
}

fn paired<'a>(s: &'a GridSummary, a: &str, b: &str) -> Vec<(&'a RunRecord, &'a RunRecord)> {
    s.grid
        .settings
        .seeds
        .iter()
        .filter_map(|&seed| {
            let x = s.runs.iter().find(|r| r.variant == a && r.seed == seed && r.metrics.is_some())?;
            let y = s.runs.iter().find(|r| r.variant == b && r.seed == seed && r.metrics.is_some())?;
            Some((x, y))
        })
        .collect()
}

fn shortcut_criterion(t: &Timed) -> Line {
    let pairs = paired(&t.summary, "cl+mca", "cl");
    let deltas: Vec<f64> = pairs
        .iter()
        .map(|(m, c)| m.metrics.as_ref().unwrap().ood.accuracy_at_1 - c.metrics.as_ref().unwrap().ood.accuracy_at_1)
        .collect();
    let ind: Vec<f64> = pairs
        .iter()
        .map(|(m, c)| m.metrics.as_ref().unwrap().ind.accuracy_at_1 - c.metrics.as_ref().unwrap().ind.accuracy_at_1)
        .collect();
    let mean = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
    let ind_mean = ind.iter().sum::<f64>() / ind.len().max(1) as f64;
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let secs: f64 = t
        .seconds
        .iter()
        .filter(|(v, _)| v == "cl" || v == "cl+mca")
        .map(|(_, s)| s)
        .sum();
    line(
        4,
        "shortcut reproduction (OOD acc@1, CL+MCA vs CL)",
        pairs.len() == 5 && mean > 0.0 && positive >= 4 && ind_mean.abs() <= 0.02 && secs < 600.0,
        format!(
            "paired OOD deltas {:?}, mean {mean:+.4}, {positive}/5 positive; IND delta mean {ind_mean:+.4}; 2x5 runs took {secs:.0}s",
            deltas.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn diagnostic_criterion(t: &Timed) -> Line {
    let pairs = paired(&t.summary, "cl+mca", "cl");
    let mut both = 0;
    let mut detail = Vec::new();
    for (m, c) in &pairs {
        let (m, c) = (&m.metrics.as_ref().unwrap().ood, &c.metrics.as_ref().unwrap().ood);
        let ok = m.shortcut_index < c.shortcut_index && m.composition_margin_rate > c.composition_margin_rate;
        both += ok as usize;
        detail.push(format!(
            "index {:.4} vs {:.4}, margin {:.3} vs {:.3}",
            m.shortcut_index, c.shortcut_index, m.composition_margin_rate, c.composition_margin_rate
        ));
    }
    line(
        5,
        "diagnostic direction (OOD split, MCA vs CL)",
        both >= 4,
        format!("{both}/5 seeds in the expected direction [{}]", detail.join("; ")),
    )
}

fn ablation_criterion(t: &Timed) -> Line {
    let delta = |v: &str| {
        t.summary
            .rows
            .iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.paired_delta_vs_baseline.as_ref())
            .map(|d| d.ood_acc_at_1)
    };
    let (mca, mcp, mcr) = (delta("cl+mca"), delta("cl+mcp"), delta("cl+mcr"));
    let ok = matches!((mca, mcp, mcr), (Some(a), Some(p), Some(r)) if a >= p && a >= r);
    let vacuous = [mca, mcp, mcr].iter().all(|d| *d == Some(0.0));
    line(
        6,
        "ablation structure",
        ok,
        format!(
            "mean OOD deltas: both {mca:?}, mcp only {mcp:?}, mcr only {mcr:?}{}",
            if vacuous { " (every delta is 0, so the comparison carries no signal)" } else { "" }
        ),
    )
}

fn convergence_criterion(t: &Timed) -> Line {
    let pairs = paired(&t.summary, "cl+mca", "cl");
    let ratios: Vec<f64> = pairs
        .iter()
        .map(|(m, c)| m.metrics.as_ref().unwrap().final_loss_cl / c.metrics.as_ref().unwrap().final_loss_cl)
        .collect();
    let mean_m: f64 = pairs.iter().map(|(m, _)| m.metrics.as_ref().unwrap().final_loss_cl).sum::<f64>();
    let mean_c: f64 = pairs.iter().map(|(_, c)| c.metrics.as_ref().unwrap().final_loss_cl).sum::<f64>();
    let rel = (mean_m - mean_c).abs() / mean_c;
    line(
        7,
        "convergence non-interference",
        !pairs.is_empty() && rel < 0.20,
        format!(
            "final smoothed CL term, MCA / CL per seed {:?}; mean relative gap {:.1}%",
            ratios.iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>(),
            100.0 * rel
        ),
    )
}

fn noise_criterion(t: &Timed) -> Line {
    let deltas: Vec<(String, f64)> = t
        .summary
        .rows
        .iter()
        .filter(|r| r.variant != "w=0")
        .filter_map(|r| Some((r.variant.clone(), r.paired_delta_vs_baseline.as_ref()?.ood_acc_at_1)))
        .collect();
    let best = deltas
        .iter()
        .fold(None::<&(String, f64)>, |b, d| match b {
            Some(x) if x.1 >= d.1 => Some(x),
            _ => Some(d),
        })
        .cloned();
    let all_equal = deltas.windows(2).all(|w| w[0].1 == w[1].1);
    let holds = match &best {
        Some((name, _)) => !all_equal && name != "w=0.01",
        None => false,
    };
    Line {
        id: 8,
        name: "noise-interaction trend (high noise)",
        status: if holds { Status::Pass } else { Status::Report },
        detail: format!(
            "OOD paired deltas {deltas:?}; best {best:?}{}",
            if holds { "" } else { " (trend not reproduced; report-only, grid table below)" }
        ),
    }
}

fn reproducibility_criterion() -> Line {
    let data = generate(&GeneratorConfig {
        n_train: 1024,
        n_ind_test: 128,
        n_ood_test: 128,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = TrainConfig {
        steps: 60,
        warmup_steps: 10,
        batch_size: 64,
        eval_every: 20,
        seed: 21,
        ..Default::default()
    };
    cfg.fit_encoder_to(&data);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs
        .iter()
        .map(|d| run_training(&data, &cfg, Some(&TrainPaths::in_dir(d.path()))).unwrap())
        .collect();
    let files_equal = ["metrics.jsonl", "probes.jsonl", "checkpoint.bin"].iter().all(|f| {
        std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap()
    });
    let reports_equal = evaluate(&outs[0].params, &data.ood_test).unwrap()
        == evaluate(&outs[1].params, &data.ood_test).unwrap();
    let data_equal = data::to_bytes(&data).unwrap()
        == data::to_bytes(&generate(&data.config).unwrap()).unwrap();
    line(
        9,
        "reproducibility",
        files_equal && reports_equal && data_equal && outs[0].log == outs[1].log,
        format!("logs/probes/checkpoint bytes equal: {files_equal}; reports equal: {reports_equal}; dataset bytes equal: {data_equal}"),
    )
}

fn format_criterion() -> Line {
    let bundle = generate(&GeneratorConfig {
        n_train: 256,
        n_ind_test: 32,
        n_ood_test: 32,
        ..Default::default()
    })
    .unwrap();
    let bytes = data::to_bytes(&bundle).unwrap();
    let data_rt = data::to_bytes(&data::from_bytes(&bytes).unwrap()).unwrap() == bytes;
    let params = EncoderParams::init(
        &EncoderConfig {
            image_dim: 32,
            text_vocab: 16,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let ck = checkpoint_bytes(&params, 7).unwrap();
    let (back, _) = checkpoint_from_bytes(&ck).unwrap();
    let ck_rt = checkpoint_bytes(&back, 7).unwrap() == ck;

    let located = |r: Result<(), Error>| match r {
        Err(Error::Format { offset, message }) => Some(format!("@{offset}: {message}")),
        _ => None,
    };
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let truncated = bytes[..bytes.len() * 2 / 3].to_vec();
    let mut flipped = ck.clone();
    let n = flipped.len();
    flipped[n - 10] ^= 1;
    let errors = [
        located(data::from_bytes(&magic).map(|_| ())),
        located(data::from_bytes(&truncated).map(|_| ())),
        located(checkpoint_from_bytes(&flipped).map(|_| ())),
        located(checkpoint_from_bytes(&ck[..ck.len() / 2]).map(|_| ())),
    ];
    let rejected = errors.iter().all(Option::is_some);
    line(
        10,
        "format round-trips",
        data_rt && ck_rt && rejected,
        format!("dataset byte-identical: {data_rt}; checkpoint byte-identical: {ck_rt}; corrupt files: {errors:?}"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut lines = vec![
        gradient_criterion(),
        closed_form_criterion(),
        calibration_criterion(),
    ];

    eprintln!("running the paired grid (4 variants x 5 seeds, mid noise)...");
    let base = TrainConfig {
        eval_every: 0,
        ..Default::default()
    };
    let main_grid = ExperimentGrid {
        settings: ExperimentSettings::default(),
        data: GeneratorConfig::default(),
        train: base.clone(),
    };
    let main = timed_grid(&main_grid);
    lines.push(shortcut_criterion(&main));
    lines.push(diagnostic_criterion(&main));
    lines.push(ablation_criterion(&main));
    lines.push(convergence_criterion(&main));

    eprintln!("running the weighting grid (4 weights x 3 seeds, high noise)...");
    let weight_grid = ExperimentGrid {
        settings: ExperimentSettings::weighting(vec![NOISE_LOW_RES], vec![0, 1, 2]),
        data: GeneratorConfig::default(),
        train: base,
    };
    let weights = timed_grid(&weight_grid);
    lines.push(noise_criterion(&weights));
    lines.push(reproducibility_criterion());
    lines.push(format_criterion());

    println!("acceptance criteria");
    for l in &lines {
        let tag = match l.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Report => "REPORT",
        };
        println!("[{tag:<6}] {:>2} {}: {}", l.id, l.name, l.detail);
    }
    println!("\npaired grid, mid noise:\n{}", summary_table(&main.summary.rows));
    println!("weighting grid, high noise:\n{}", summary_table(&weights.summary.rows));
    let failed = lines.iter().filter(|l| l.status == Status::Fail).count();
    println!("{failed} of {} criteria failed", lines.len());
    if failed > 0 && std::env::var("MCA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
