use mca_lab::data::GeneratorConfig;
use mca_lab::experiment::{
    run_grid, summarize, summary_table, write_summary, ExperimentGrid, ExperimentSettings, RunMetrics, RunRecord,
    Variant,
};
use mca_lab::eval::RetrievalReport;
use mca_lab::train::TrainConfig;
use mca_lab::Error;

fn tiny_grid(variants: Vec<Variant>, seeds: Vec<u64>) -> ExperimentGrid {
    ExperimentGrid {
        settings: ExperimentSettings {
            variants,
            noise_levels: vec![0.2],
            seeds,
        },
        data: GeneratorConfig {
            n_train: 256,
            n_ind_test: 32,
            n_ood_test: 32,
            ..Default::default()
        },
        train: TrainConfig {
            steps: 12,
            warmup_steps: 3,
            batch_size: 32,
            eval_every: 0,
            ..Default::default()
        },
    }
}

#[test]
fn self_comparison_has_zero_delta() {
    let grid = tiny_grid(vec![Variant::new("cl", 0.0, 0.0)], vec![0, 1]);
    let s = run_grid(&grid, |_| {}).unwrap();
    assert_eq!(s.baseline.as_deref(), Some("cl"));
    let d = s.rows[0].paired_delta_vs_baseline.as_ref().unwrap();
    assert_eq!(d.ood_acc_at_1, 0.0);
    assert_eq!(d.ind_acc_at_1, 0.0);
    assert_eq!(d.n_pairs, 2);
    assert!(s.rows[0].ind_acc.unwrap().std.is_some());
}

#[test]
fn identical_grids_write_identical_bytes() {
    let grid = tiny_grid(vec![Variant::new("cl", 0.0, 0.0), Variant::new("mca", 0.01, 0.01)], vec![4]);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_summary(&run_grid(&grid, |_| {}).unwrap(), &a).unwrap();
    write_summary(&run_grid(&grid, |_| {}).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn failed_cells_are_recorded_and_the_grid_continues() {
    let mut broken = Variant::new("broken", 0.0, 0.0);
    broken.overrides.insert("tau".into(), 5e-324.into());
    let grid = tiny_grid(vec![Variant::new("cl", 0.0, 0.0), broken], vec![0]);
    let mut seen = 0;
    let s = run_grid(&grid, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert!(s.runs[0].metrics.is_some());
    assert!(s.runs[1].error.as_deref().unwrap().contains("diverged"), "{:?}", s.runs[1].error);
    assert_eq!(s.rows[1].n_failed, 1);
    assert!(s.rows[1].paired_delta_vs_baseline.is_none());
    assert!(summary_table(&s.rows).contains("0/1"));
}

#[test]
fn invalid_grids_are_rejected() {
    let empty = tiny_grid(vec![], vec![0]);
    assert!(matches!(run_grid(&empty, |_| {}), Err(Error::InvalidConfig(_))));
    let no_seeds = tiny_grid(vec![Variant::new("cl", 0.0, 0.0)], vec![]);
    assert!(matches!(run_grid(&no_seeds, |_| {}), Err(Error::InvalidConfig(_))));
    let mut typo = Variant::new("x", 0.0, 0.0);
    typo.overrides.insert("gamma".into(), 1.0.into());
    let err = run_grid(&tiny_grid(vec![typo], vec![0]), |_| {}).unwrap_err();
    assert!(err.to_string().contains("gamma"));
    let dup = tiny_grid(vec![Variant::new("a", 0.0, 0.0), Variant::new("a", 0.1, 0.1)], vec![0]);
    assert!(matches!(run_grid(&dup, |_| {}), Err(Error::InvalidConfig(_))));
}

fn report(acc: f64) -> RetrievalReport {
    RetrievalReport {
        split: "s".into(),
        accuracy_at_1: acc,
        accuracy_at_5: acc,
        n_queries: 10,
        shortcut_index: 0.5,
        composition_margin_rate: 0.5,
    }
}

fn record(variant: &str, seed: u64, ind: f64, ood: f64) -> RunRecord {
    RunRecord {
        variant: variant.into(),
        noise_level: 0.2,
        seed,
        metrics: Some(RunMetrics {
            ind: report(ind),
            ood: report(ood),
            final_loss_cl: 1.0,
            final_loss_total: 1.0,
        }),
        error: None,
    }
}

#[test]
fn paired_deltas_match_a_hand_computation() {
    let grid = tiny_grid(vec![Variant::new("cl", 0.0, 0.0), Variant::new("mca", 0.01, 0.01)], vec![0, 1, 2]);
    let runs = vec![
        record("cl", 0, 0.9, 0.10),
        record("mca", 0, 0.8, 0.30),
        record("cl", 1, 0.9, 0.20),
        record("mca", 1, 1.0, 0.15),
        record("cl", 2, 0.7, 0.00),
        record("mca", 2, 0.7, 0.25),
    ];
    let (_, rows) = summarize(&grid, &runs).unwrap();
    let d = rows[1].paired_delta_vs_baseline.as_ref().unwrap();
    assert!((d.ood_acc_at_1 - (0.20 - 0.05 + 0.25) / 3.0).abs() < 1e-12);
    assert!((d.ind_acc_at_1 - 0.0).abs() < 1e-12);
    assert_eq!(d.positive_seeds, 2);
    let ood = rows[1].ood_acc.unwrap();
    assert!((ood.mean - 0.7 / 3.0).abs() < 1e-12);
    let var = [0.30, 0.15, 0.25].iter().map(|x| (x - 0.7 / 3.0f64).powi(2)).sum::<f64>() / 2.0;
    assert!((ood.std.unwrap() - var.sqrt()).abs() < 1e-12);
}

#[test]
fn single_seed_rows_have_no_spread() {
    let grid = tiny_grid(vec![Variant::new("cl", 0.0, 0.0)], vec![0]);
    let (_, rows) = summarize(&grid, &[record("cl", 0, 0.5, 0.5)]).unwrap();
    assert!(rows[0].ood_acc.unwrap().std.is_none());
}

#[test]
fn grids_without_a_baseline_report_no_delta() {
    let grid = tiny_grid(vec![Variant::new("mca", 0.01, 0.01)], vec![0]);
    let (baseline, rows) = summarize(&grid, &[record("mca", 0, 0.5, 0.5)]).unwrap();
    assert!(baseline.is_none());
    assert!(rows[0].paired_delta_vs_baseline.is_none());
}
