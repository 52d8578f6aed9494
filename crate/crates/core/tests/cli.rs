use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.n_train=512",
    "--set",
    "data.n_ind_test=64",
    "--set",
    "data.n_ood_test=64",
    "--set",
    "train.steps=30",
    "--set",
    "train.warmup_steps=5",
    "--set",
    "train.batch_size=64",
    "--set",
    "train.eval_every=15",
];

fn mcalab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcalab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = mcalab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn gen_train_eval_export_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = run_ok(dir, &with_small(&["gen-data", "--out", "d"]));
    assert!(gen.contains("image-only oracle") && gen.contains("latent oracle"));
    run_ok(dir, &with_small(&["train", "--data", "d/dataset.bin", "--out", "t"]));
    for f in ["metrics.jsonl", "probes.jsonl", "checkpoint.bin", "manifest.json"] {
        assert!(dir.join("t").join(f).exists(), "{f}");
    }
    let eval = run_ok(
        dir,
        &with_small(&["eval", "--data", "d/dataset.bin", "--checkpoint", "t/checkpoint.bin", "--out", "e"]),
    );
    assert!(eval.contains("acc@1"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["split"], "ind");
    run_ok(
        dir,
        &with_small(&["export-emb", "--data", "d/dataset.bin", "--checkpoint", "t/checkpoint.bin", "--out", "x"]),
    );
    assert!(dir.join("x/embeddings_ood.bin").exists() && dir.join("x/pca_ind.json").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("t/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["steps"], 30);
    assert_eq!(manifest["artifacts"]["checkpoint.bin"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out in ["a", "b"] {
        run_ok(dir, &with_small(&["train", "--seed", "3", "--out", out]));
    }
    for f in ["metrics.jsonl", "probes.jsonl", "checkpoint.bin", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(f)).unwrap(),
            std::fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_weight_override_reproduces_the_contrastive_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = r#"{"train": {"mca": {"alpha": 0.0, "beta": 0.0}}}"#;
    std::fs::write(dir.join("cl.json"), config).unwrap();
    run_ok(dir, &with_small(&["train", "--config", "cl.json", "--out", "file"]));
    run_ok(
        dir,
        &with_small(&["train", "--set", "train.mca.alpha=0", "--set", "train.mca.beta=0", "--out", "set"]),
    );
    let a = std::fs::read_to_string(dir.join("file/metrics.jsonl")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.join("set/metrics.jsonl")).unwrap());
    for line in a.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["loss_total"], rec["loss_cl"]);
    }
}

#[test]
fn grad_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(tmp.path(), &["grad-check", "--out", "g"]);
    assert!(out.contains("0 failed"), "{out}");
}

#[test]
fn bad_arguments_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let unknown = mcalab(dir, &["train", "--set", "train.mca.gamma=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    let err = String::from_utf8_lossy(&unknown.stderr);
    assert!(err.contains("train.mca.gamma") && err.contains("train.mca.alpha"), "{err}");
    assert_eq!(mcalab(dir, &["train", "--set", "train.steps=many"]).status.code(), Some(2));
    assert_eq!(mcalab(dir, &["train", "--set", "train.warmup_steps=9999"]).status.code(), Some(2));
    assert_eq!(mcalab(dir, &["no-such-command"]).status.code(), Some(2));
    std::fs::write(dir.join("broken.json"), "{\"train\": ").unwrap();
    assert_eq!(mcalab(dir, &["train", "--config", "broken.json"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("junk.bin"), b"not a checkpoint at all").unwrap();
    let out = mcalab(dir, &with_small(&["eval", "--checkpoint", "junk.bin", "--out", "e"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
    let missing = mcalab(dir, &with_small(&["train", "--data", "nope.bin", "--out", "t"]));
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn experiment_writes_summary_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = with_small(&["experiment", "--out", "x"]);
    args.extend(["--set", "experiment.seeds=[0,1]", "--set", "train.eval_every=0"]);
    let table = run_ok(dir, &args);
    assert!(table.lines().next().unwrap().starts_with("variant"));
    assert_eq!(table.lines().count(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("x/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 8);
    assert_eq!(summary["baseline"], "cl");
}
