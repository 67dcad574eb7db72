//! End-to-end checks of the command-line interface: exit codes, file
//! outputs, sweep/run equivalence, and checkpoint evaluation. Everything
//! runs on a miniature scenario so the whole file stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_buda"))
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).expect("write fixture");
}

/// Small scenario: 3 shared + 1 private classes on 6x6 grids.
const SMALL_SPEC: &str = r#"{
    "n_shared": 3, "n_private": 1, "h": 6, "w": 6, "d_in": 4, "d_a": 4,
    "n_source": 24, "n_target_train": 24, "n_target_test": 12,
    "shift": {"strength": 0.3}, "noise_std": 0.25, "seed": 9
}"#;

/// Small training budget to match.
const SMALL_CONFIG: &str = r#"{
    "pretrain_epochs": 2, "adapt_epochs": 1, "gen_iters": 60, "gen_batch": 16,
    "head_iters": 60, "self_train_epochs": 1, "n_gen_per_class": 40,
    "d_hidden": 10, "d_f": 6, "d_z": 3
}"#;

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
    spec: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture_with_dataset() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.json");
    let config = root.join("config.json");
    write(&spec, SMALL_SPEC);
    write(&config, SMALL_CONFIG);
    let data = root.join("data");
    let out = bin().args(["gen-data", "--spec"]).arg(&spec).arg("--out").arg(&data).output().expect("gen-data");
    assert!(out.status.success(), "gen-data: {}", String::from_utf8_lossy(&out.stderr));
    Fixture { dir, root, spec, config, data }
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let fx = fixture_with_dataset();
    let again = fx.root.join("data-again");
    let out = bin().args(["gen-data", "--spec"]).arg(&fx.spec).arg("--out").arg(&again).output().expect("gen-data");
    assert!(out.status.success());
    for entry in std::fs::read_dir(&fx.data).expect("read dataset dir") {
        let name = entry.expect("entry").file_name();
        let a = std::fs::read(fx.data.join(&name)).expect("first copy");
        let b = std::fs::read(again.join(&name)).expect("second copy");
        assert_eq!(a, b, "{name:?} differs between identical gen-data invocations");
    }
    buda::scenario::load_dataset(&fx.data).expect("generated dataset loads");
}

#[test]
fn gen_data_seed_flag_overrides_spec_seed() {
    let fx = fixture_with_dataset();
    let other = fx.root.join("data-seed");
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(&fx.spec)
        .args(["--seed", "10", "--out"])
        .arg(&other)
        .output()
        .expect("gen-data");
    assert!(out.status.success());
    let a = buda::scenario::load_dataset(&fx.data).expect("load");
    let b = buda::scenario::load_dataset(&other).expect("load");
    assert_eq!(b.spec.seed, 10);
    assert_ne!(
        a.source[0].inputs, b.source[0].inputs,
        "different seeds must give different draws"
    );
}

#[test]
fn gen_data_rejects_degenerate_and_malformed_specs() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cases = [
        ("no-private", r#"{"n_private": 0}"#),
        ("one-shared", r#"{"n_shared": 1}"#),
        ("zero-noise", r#"{"noise_std": 0.0}"#),
        ("unknown-field", r#"{"n_shared": 3, "bogus": 1}"#),
        ("malformed", r#"{"n_shared": "#),
    ];
    for (name, body) in cases {
        let spec = dir.path().join(format!("{name}.json"));
        write(&spec, body);
        let out = bin()
            .args(["gen-data", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .expect("gen-data");
        assert_eq!(out.status.code(), Some(2), "{name} should exit 2");
    }
}

#[test]
fn run_rejects_unknown_mode_with_exit_2() {
    let fx = fixture_with_dataset();
    let out = bin()
        .args(["run", "--data"])
        .arg(&fx.data)
        .args(["--mode", "zs4", "--out"])
        .arg(fx.root.join("out"))
        .output()
        .expect("run");
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("zs4"),
        "error should name the unknown mode"
    );
}

#[test]
fn run_rejects_malformed_config_with_exit_2() {
    let fx = fixture_with_dataset();
    let bad = fx.root.join("bad-config.json");
    write(&bad, r#"{"k_pct": 0.0}"#);
    let out = bin()
        .args(["run", "--data"])
        .arg(&fx.data)
        .args(["--mode", "zs3", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(fx.root.join("out"))
        .output()
        .expect("run");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_single_cell_equals_run() {
    let fx = fixture_with_dataset();
    // The sweep regenerates each task's dataset in memory with the task seed,
    // so the equivalent run uses a dataset generated with that same seed.
    let data_s3 = fx.root.join("data-s3");
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(&fx.spec)
        .args(["--seed", "3", "--out"])
        .arg(&data_s3)
        .output()
        .expect("gen-data");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_out = fx.root.join("run-out");
    let out = bin()
        .args(["run", "--data"])
        .arg(&data_s3)
        .args(["--mode", "budanet", "--config"])
        .arg(&fx.config)
        .args(["--seed", "3", "--out"])
        .arg(&run_out)
        .output()
        .expect("run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let sweep_out = fx.root.join("sweep-out");
    let out = bin()
        .args(["sweep", "--param", "p", "--values", "50", "--seeds", "3", "--spec"])
        .arg(&fx.spec)
        .args(["--config"])
        .arg(&fx.config)
        .args(["--out"])
        .arg(&sweep_out)
        .output()
        .expect("sweep");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report_csv = std::fs::read_to_string(run_out.join("report.csv")).expect("report.csv");
    let run_row = report_csv.lines().nth(1).expect("metrics row").to_string();
    let runs_csv = std::fs::read_to_string(sweep_out.join("sweep_runs.csv")).expect("sweep_runs.csv");
    let sweep_row = runs_csv.lines().nth(1).expect("sweep row");
    assert_eq!(
        sweep_row, &format!("p,50,3,{run_row}"),
        "degenerate sweep must reproduce the equivalent run"
    );
    let mean_csv = std::fs::read_to_string(sweep_out.join("sweep_mean.csv")).expect("sweep_mean.csv");
    assert_eq!(mean_csv.lines().nth(1).expect("mean row"), &format!("p,50,1,{run_row}"));
}

#[test]
fn sweep_oracle_flag_adds_gt_rows() {
    let fx = fixture_with_dataset();
    let sweep_out = fx.root.join("sweep-gt");
    let out = bin()
        .args(["sweep", "--param", "p", "--values", "50", "--seeds", "3,4", "--oracle", "--spec"])
        .arg(&fx.spec)
        .args(["--config"])
        .arg(&fx.config)
        .args(["--out"])
        .arg(&sweep_out)
        .output()
        .expect("sweep");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(sweep_out.join("sweep_runs.csv")).expect("runs csv");
    let gt_rows: Vec<&str> = runs.lines().filter(|l| l.starts_with("p,gt,")).collect();
    assert_eq!(gt_rows.len(), 2, "one gt row per seed:\n{runs}");
    let means = std::fs::read_to_string(sweep_out.join("sweep_mean.csv")).expect("mean csv");
    assert!(means.lines().any(|l| l.starts_with("p,gt,2,")), "gt mean over 2 seeds:\n{means}");
}

#[test]
fn sweep_private_count_varies_the_scenario() {
    let fx = fixture_with_dataset();
    let sweep_out = fx.root.join("sweep-pc");
    let out = bin()
        .args(["sweep", "--param", "private-count", "--values", "1,2", "--seeds", "5", "--mode", "zs3", "--spec"])
        .arg(&fx.spec)
        .args(["--config"])
        .arg(&fx.config)
        .args(["--out"])
        .arg(&sweep_out)
        .output()
        .expect("sweep");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(sweep_out.join("sweep_runs.csv")).expect("runs csv");
    assert!(runs.lines().any(|l| l.starts_with("private-count,1,5,")));
    assert!(runs.lines().any(|l| l.starts_with("private-count,2,5,")));
}

#[test]
fn sweep_rejects_invalid_values_and_oracle_misuse() {
    let fx = fixture_with_dataset();
    let cases: [&[&str]; 4] = [
        &["--param", "p", "--values", "0", "--seeds", "1"],
        &["--param", "p", "--values", "101", "--seeds", "1"],
        &["--param", "private-count", "--values", "0", "--seeds", "1"],
        &["--param", "private-count", "--values", "1", "--seeds", "1", "--oracle"],
    ];
    for args in cases {
        let out = bin()
            .arg("sweep")
            .args(args)
            .args(["--spec"])
            .arg(&fx.spec)
            .args(["--out"])
            .arg(fx.root.join("sweep-bad"))
            .output()
            .expect("sweep");
        assert_eq!(out.status.code(), Some(2), "args {args:?} should exit 2");
    }
}

#[test]
fn eval_reproduces_the_run_report_byte_for_byte() {
    let fx = fixture_with_dataset();
    let run_out = fx.root.join("run-out");
    let out = bin()
        .args(["run", "--data"])
        .arg(&fx.data)
        .args(["--mode", "zs3-adapt", "--config"])
        .arg(&fx.config)
        .args(["--seed", "1", "--out"])
        .arg(&run_out)
        .output()
        .expect("run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval_out = fx.root.join("eval-out");
    let out = bin()
        .args(["eval", "--data"])
        .arg(&fx.data)
        .args(["--model"])
        .arg(run_out.join("f_final.ckpt"))
        .args(["--out"])
        .arg(&eval_out)
        .output()
        .expect("eval");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(run_out.join("report.json")).expect("run report");
    let b = std::fs::read(eval_out.join("report.json")).expect("eval report");
    assert_eq!(a, b, "evaluating the final checkpoint must reproduce the run report");
}

#[test]
fn eval_rejects_head_width_mismatch_with_exit_2() {
    let fx = fixture_with_dataset();
    let run_out = fx.root.join("run-out");
    let out = bin()
        .args(["run", "--data"])
        .arg(&fx.data)
        .args(["--mode", "zs3", "--config"])
        .arg(&fx.config)
        .args(["--seed", "0", "--out"])
        .arg(&run_out)
        .output()
        .expect("run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Same input dimensionality, one extra private class: the checkpoint's
    // 4-wide head cannot score 5 classes.
    let wide_spec = fx.root.join("wide-spec.json");
    write(
        &wide_spec,
        r#"{
            "n_shared": 3, "n_private": 2, "h": 6, "w": 6, "d_in": 4, "d_a": 4,
            "n_source": 8, "n_target_train": 8, "n_target_test": 6,
            "shift": {"strength": 0.3}, "noise_std": 0.25, "seed": 9
        }"#,
    );
    let wide_data = fx.root.join("wide-data");
    let out = bin().args(["gen-data", "--spec"]).arg(&wide_spec).arg("--out").arg(&wide_data).output().expect("gen-data");
    assert!(out.status.success());

    let out = bin()
        .args(["eval", "--data"])
        .arg(&wide_data)
        .args(["--model"])
        .arg(run_out.join("f_final.ckpt"))
        .args(["--out"])
        .arg(fx.root.join("eval-bad"))
        .output()
        .expect("eval");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_every_component_and_exits_0() {
    let out = bin().arg("gradcheck").output().expect("gradcheck");
    assert!(out.status.success());
    let stdout = stdout_of(&out);
    for component in [
        "segmenter+cross_entropy",
        "segmenter+masked_entropy",
        "generator+gmmn_mmd",
        "generator+adversarial",
        "discriminator+bce",
    ] {
        assert!(stdout.contains(component), "missing {component} in:\n{stdout}");
    }
    assert!(stdout.contains("max_rel_err"));
}

#[test]
fn run_writes_manifest_covering_every_output() {
    let fx = fixture_with_dataset();
    let run_out = fx.root.join("run-out");
    let out = bin()
        .args(["run", "--data"])
        .arg(&fx.data)
        .args(["--mode", "budanet", "--config"])
        .arg(&fx.config)
        .args(["--seed", "2", "--out"])
        .arg(&run_out)
        .output()
        .expect("run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: buda::cli::RunManifest =
        serde_json::from_slice(&std::fs::read(run_out.join("run_manifest.json")).expect("manifest"))
            .expect("manifest parses");
    assert_eq!(manifest.mode, "budanet");
    assert_eq!(manifest.seed, 2);
    for f in &manifest.outputs {
        assert!(run_out.join(f).exists(), "manifest lists missing file {f}");
    }
    for required in ["report.json", "report.csv", "run_log.json", "f_pre.ckpt", "f_final.ckpt"] {
        assert!(
            manifest.outputs.iter().any(|f| f == required),
            "manifest must list {required}"
        );
    }
}
