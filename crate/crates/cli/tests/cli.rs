use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ceg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ceg"))
        .args(args)
        .current_dir(dir)
        .env_remove("CEG_SEED")
        .output()
        .expect("binary runs")
}

const SMALL_SPEC: &str = r#"{"num_domains": 3, "samples_per_domain": 30, "ambient_dim": 6,
    "rotation_angles_deg": [0, 15, 30], "seed": 4}"#;

fn write_manifest(dir: &Path, strategies: &str, targets: &str, seeds: &str, extra: &str) {
    let manifest = format!(
        r#"{{"name": "tiny", "dataset": {{"path": "data.jsonl"}}, "strategies": {strategies},
            "budgets": [0.2], "targets": {targets}, "seeds": {seeds}, "output_dir": "out",
            "config": {{"pretrain_epochs": 1, "learn_epochs": 3, "hidden_width": 8,
                        "discriminator_hidden_width": 4, "steps_per_epoch": 3}}{extra}}}"#
    );
    fs::write(dir.join("manifest.json"), manifest).unwrap();
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    let out = ceg(&["generate", "--spec", "spec.json", "--out", "data.jsonl"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_default_spec_writes_header_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = ceg(&["generate", "--out", "d.jsonl"], dir.path());
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4 * 300 + 1);

    let again = ceg(&["generate", "--out", "e.jsonl"], dir.path());
    assert!(again.status.success());
    assert_eq!(text, fs::read_to_string(dir.path().join("e.jsonl")).unwrap());
}

#[test]
fn generate_rejects_single_domain_spec() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"num_domains": 1, "rotation_angles_deg": [0]}"#).unwrap();
    let out = ceg(&["generate", "--spec", "bad.json", "--out", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_domains"));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn single_cell_run_writes_one_report() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), r#"["ceg"]"#, "[1]", "[3]", "");
    let out = ceg(&["run", "manifest.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: Vec<_> = fs::read_dir(dir.path().join("out/reports")).unwrap().collect();
    assert_eq!(reports.len(), 1);
    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "dataset,target,strategy,budget,seed,accuracy");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("tiny,1,ceg,0.2,3,"));
}

#[test]
fn rerun_is_byte_identical_and_flags_override_env() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), r#"["ceg", "coreset"]"#, r#""all""#, "[0, 1]", r#", "parallelism": 3"#);
    let first = ceg(&["run", "manifest.json"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv_a = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let log_a = fs::read_to_string(dir.path().join("out/query_logs/ceg_t2_b0.2_s1.jsonl")).unwrap();
    assert_eq!(csv_a.lines().count(), 1 + 2 * 3 * 2);
    let agg = fs::read_to_string(dir.path().join("out/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 3);

    let second = ceg(&["run", "manifest.json", "--parallelism", "1"], dir.path());
    assert!(second.status.success());
    assert_eq!(csv_a, fs::read_to_string(dir.path().join("out/results.csv")).unwrap());
    assert_eq!(
        log_a,
        fs::read_to_string(dir.path().join("out/query_logs/ceg_t2_b0.2_s1.jsonl")).unwrap()
    );

    let env = Command::new(env!("CARGO_BIN_EXE_ceg"))
        .args(["run", "manifest.json", "--output-dir", "env_out", "--strategies", "uniform"])
        .current_dir(dir.path())
        .env("CEG_SEED", "9")
        .output()
        .unwrap();
    assert!(env.status.success());
    let rows = fs::read_to_string(dir.path().join("env_out/results.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.contains(",uniform,0.2,9,")));

    let flagged = Command::new(env!("CARGO_BIN_EXE_ceg"))
        .args(["run", "manifest.json", "--output-dir", "flag_out", "--seeds", "5", "--targets", "0"])
        .current_dir(dir.path())
        .env("CEG_SEED", "9")
        .output()
        .unwrap();
    assert!(flagged.status.success());
    let rows = fs::read_to_string(dir.path().join("flag_out/results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().skip(1).all(|l| l.starts_with("tiny,0,") && l.contains(",0.2,5,")));
}

#[test]
fn invalid_manifest_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "[]", r#""all""#, "[0]", "");
    let out = ceg(&["run", "manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("strategy"));

    let out = ceg(&["run", "manifest.json", "--strategies", "ceg", "--budgets", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_runs_full_and_listed_variants() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "[]", "[0]", "[2]", r#", "ablations": [["L_ac", "L_eg"], ["dynamicT"]]"#);
    let out = ceg(&["ablate", "manifest.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let strategies: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(strategies, vec!["ceg", "ceg-w/o-L_ac-L_eg", "ceg-w/o-dynamicT"]);
}

#[test]
fn compare_pivots_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("results.csv"),
        "dataset,target,strategy,budget,seed,accuracy\n\
         d,0,ceg,0.05,0,0.9\nd,1,ceg,0.05,0,0.7\nd,0,uniform,0.05,0,0.8\nd,1,uniform,0.05,0,0.8\n",
    )
    .unwrap();
    let out = ceg(&["compare", "results.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("90.00*"));
    assert!(text.contains("80.00*"));
    let table = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "strategy,target_0,target_1,average,best");
    assert_eq!(lines[1], "ceg,0.9,0.7,0.8,target_0;average");
    assert_eq!(lines[2], "uniform,0.8,0.8,0.8,target_1;average");

    let missing = ceg(&["compare", "nope.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}
