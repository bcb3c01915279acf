use std::path::Path;
use std::process::{Command, Output};

fn lora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lora-dyn")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--out", out, "--k", "3", "--d", "12", "--seed", "4"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_sgd_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["run-sgd"];
    args.extend(small(out, &["--eta", "0.01", "--T", "200", "--seeds", "2"]));
    let res = lora(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = stdout_json(&res);
    let dir = report["dir"].as_str().unwrap();
    assert!(Path::new(dir).join("trajectories/seed-000.csv").exists());
    assert_eq!(lora(&["verify", dir]).status.code(), Some(0));

    std::fs::write(Path::new(dir).join("summary.json"), "{}").unwrap();
    let res = lora(&["verify", dir]);
    assert_eq!(res.status.code(), Some(4));
    assert_eq!(stdout_json(&res)["mismatches"][0], "summary.json");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // Missing step size.
    let mut args = vec!["run-sgd"];
    args.extend(small(out, &[]));
    assert_eq!(lora(&args).status.code(), Some(2));
    // Unknown flag.
    assert_eq!(lora(&["run-sgd", "--bogus"]).status.code(), Some(2));
    // Empty grid.
    let mut args = vec!["sweep-xi"];
    args.extend(small(out, &["--eta", "0.01", "--T", "10"]));
    assert_eq!(lora(&args).status.code(), Some(2));
    // Missing config file.
    assert_eq!(lora(&["anticonc", "--config", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["recover-c"];
    args.extend(small(out, &["--xi", "0", "--use-true-u", "--ridge", "0", "--samples", "1000"]));
    let res = lora(&args);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(tmp.path().join("failed").exists());
}

#[test]
fn failed_check_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    // Zero step size cannot recover u.
    let mut args = vec!["hardness-demo"];
    args.extend(small(out, &["--eta", "0", "--T", "10"]));
    let res = lora(&args);
    assert_eq!(res.status.code(), Some(4));
    let report = stdout_json(&res);
    assert_eq!(report["checks"]["perturbed_gram_identity"], true);
    assert_eq!(report["checks"]["all_seeds_recover"], false);
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"kind": "anticonc", "instance": {"k": 8, "d": 16}, "trials": 200, "gamma_grid": [0.5]}"#,
    )
    .unwrap();
    let out = tmp.path().join("runs");
    let res = lora(&[
        "anticonc",
        "--config",
        cfg.to_str().unwrap(),
        "--k",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = stdout_json(&res);
    assert_eq!(report["summary"]["k"], 12);
    let dir = Path::new(report["dir"].as_str().unwrap());
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["trials"], 200);
    assert_eq!(echo["instance"]["k"], 12);
}

#[test]
fn recover_c_emits_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["recover-c"];
    args.extend(small(out, &["--use-true-u", "--samples", "4096"]));
    let res = lora(&args);
    assert_eq!(res.status.code(), Some(0));
    let s = &stdout_json(&res)["summary"];
    assert_eq!(s["agreement"], 3);
    assert_eq!(s["c_extracted"].as_array().unwrap().len(), 3);
    assert!(s["mc_error"].as_f64().unwrap() >= 0.0);
}

#[test]
fn grids_parse_from_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["validate-gradients"];
    args.extend(small(out, &["--m-grid", "-0.5,0,0.5", "--samples", "20000"]));
    let res = lora(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(stdout_json(&res)["summary"]["rows"], 3);
}
