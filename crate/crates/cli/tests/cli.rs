//! End-to-end tests of the `labelshift` binary: the documented exit codes
//! and a full synth -> train -> eval -> adapt workflow.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labelshift"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn help_and_version_exit_zero() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert_code(&run(&["train", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    // Unknown subcommand and unknown flag.
    assert_code(&run(&["frobnicate"]), 1);
    assert_code(&run(&["eval", "--no-such-flag"]), 1);
    // Missing required flags.
    assert_code(&run(&["eval"]), 1);
    // Invalid enum value.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "{\"id\":\"1\",\"features\":[],\"labels\":[\"A\"]}\n").unwrap();
    assert_code(
        &run(&[
            "adapt",
            "--model",
            data.to_str().unwrap(),
            "--test",
            data.to_str().unwrap(),
            "--method",
            "warp-drive",
        ]),
        1,
    );
    // Out-of-range fraction is a usage error too.
    assert_code(
        &run(&[
            "tune-threshold",
            "--model",
            data.to_str().unwrap(),
            "--test",
            data.to_str().unwrap(),
            "--kind",
            "max",
            "--clean-fraction",
            "1.5",
        ]),
        1,
    );
}

#[test]
fn data_errors_exit_two() {
    assert_code(
        &run(&[
            "eval",
            "--model",
            "/no/such/model.json",
            "--data",
            "/no/such/data.jsonl",
        ]),
        2,
    );

    // Malformed corpus line: the error names the file and line.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\":\"1\",\"features\":[],\"labels\":[\"A\"]}\n{\"id\":\"2\",\"features\":[]}\n",
    )
    .unwrap();
    let model = dir.path().join("model.json");
    let out = run(&[
        "train",
        "--train",
        bad.to_str().unwrap(),
        "--model-out",
        model.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.jsonl:2"), "{stderr}");
}

fn synth_single(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let out = run(&[
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--single",
        &n.to_string(),
        "--k",
        "3",
        "--vocab-size",
        "30",
        "--feats",
        "8",
        "--none-share",
        "0.6",
        "--seed",
        &seed.to_string(),
    ]);
    assert_code(&out, 0);
    dir.join("data.jsonl")
}

#[test]
fn train_eval_tune_adapt_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = synth_single(&dir.path().join("train"), 600, 1);
    let test_path = synth_single(&dir.path().join("test"), 300, 2);
    let model_path = dir.path().join("model.json");
    let log_path = dir.path().join("log.csv");

    let out = run(&[
        "train",
        "--train",
        train_path.to_str().unwrap(),
        "--model-out",
        model_path.to_str().unwrap(),
        "--trainlog",
        log_path.to_str().unwrap(),
        "--lr0",
        "0.1",
        "--max-epochs",
        "8",
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
    assert!(model_path.exists());
    let log = std::fs::read_to_string(&log_path).unwrap();
    assert!(log.starts_with("epoch,dev_loss,dev_f1,lr"), "{log}");

    let out = run(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--data",
        test_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report = stdout_json(&out);
    let f1 = report["micro_f1"].as_f64().unwrap();
    assert!(f1 > 0.3, "surprisingly poor fit: {f1}");

    let out = run(&[
        "tune-threshold",
        "--model",
        model_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--kind",
        "entropy",
        "--grid-steps",
        "21",
    ]);
    assert_code(&out, 0);
    let tuned = stdout_json(&out);
    assert_eq!(tuned["threshold"]["kind"], "entropy");

    // BA-Set with the prior recorded in the model.
    let out = run(&[
        "adapt",
        "--model",
        model_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--method",
        "ba-set",
    ]);
    assert_code(&out, 0);
    let adapted = stdout_json(&out);
    assert_eq!(adapted["method"], "ba-set");
    assert!(adapted["report"]["micro_f1"].as_f64().unwrap() > 0.2);

    // BA-Fix needs a fixed-bias model.
    let out = run(&[
        "adapt",
        "--model",
        model_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--method",
        "ba-fix",
    ]);
    assert_code(&out, 2);

    let fix_model = dir.path().join("model_fix.json");
    let out = run(&[
        "train",
        "--train",
        train_path.to_str().unwrap(),
        "--model-out",
        fix_model.to_str().unwrap(),
        "--ba-fix",
        "--lr0",
        "0.1",
        "--max-epochs",
        "8",
    ]);
    assert_code(&out, 0);
    let out = run(&[
        "adapt",
        "--model",
        fix_model.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--method",
        "ba-fix",
    ]);
    assert_code(&out, 0);
}

#[test]
fn shift_report_between_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = synth_single(&dir.path().join("a"), 400, 3);
    let test_path = synth_single(&dir.path().join("b"), 200, 4);
    let csv = dir.path().join("bins.csv");
    let out = run(&[
        "shift-report",
        "--train",
        train_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let body = stdout_json(&out);
    let props: Vec<f64> = body["report"]["bin_proportions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((props.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("bin_lo,bin_hi,proportion"));
}

#[test]
fn experiment_with_config_file_and_suite() {
    let dir = tempfile::tempdir().unwrap();
    let suite_dir = dir.path().join("suite");
    let out = run(&[
        "synth",
        "--out-dir",
        suite_dir.to_str().unwrap(),
        "--k",
        "3",
        "--vocab-size",
        "30",
        "--feats",
        "8",
        "--none-share",
        "0.6",
        "--n-train",
        "200",
        "--n-test",
        "120",
        "--seed",
        "9",
    ]);
    assert_code(&out, 0);
    assert!(suite_dir.join("train_S0.jsonl").exists());
    assert!(suite_dir.join("train_S5.jsonl").exists());
    assert!(suite_dir.join("test.jsonl").exists());
    assert!(suite_dir.join("priors.json").exists());

    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "suite_dir={}\nseeds=1,2\nmax_epochs=3\ngrid_steps=11\nlr0=0.1\n",
            suite_dir.display()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("results");
    let out = run(&[
        "experiment",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for file in ["results.json", "table.csv", "shift_bins.csv"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    assert_eq!(results["runs"].as_array().unwrap().len(), 2 * 6 * 5);
    // A flag overrides the config file.
    let out = run(&[
        "experiment",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--seeds",
        "1",
    ]);
    assert_code(&out, 0);
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    assert_eq!(results["seeds"], serde_json::json!([1]));
}

#[test]
fn output_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "synth",
            "--single",
            "50",
            "--k",
            "3",
            "--vocab-size",
            "30",
            "--feats",
            "6",
        ])
        .env("LABELSHIFT_OUT_DIR", dir.path())
        .output()
        .expect("binary runs");
    assert_code(&out, 0);
    assert!(dir.path().join("data.jsonl").exists());
}
