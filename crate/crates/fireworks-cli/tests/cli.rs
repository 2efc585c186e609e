//! End-to-end checks of the binary: exit-code contract and the JSON error
//! objects on failure paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn out_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fireworks-cli-tests").join(tag);
    std::fs::remove_dir_all(&dir).ok();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fireworks"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn check_passes_on_default_scenario_with_delta_half() {
    let out = out_dir("check-ok");
    let result = run(&[
        "check",
        "--config",
        scenario("default.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{result:?}");
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("delta = 0.500000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("check.json")).unwrap()).unwrap();
    assert!((report["delta"]["delta"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn check_fails_with_exit_3_on_rate_bound_violation() {
    let result = run(&[
        "check",
        "--config",
        scenario("default.toml").to_str().unwrap(),
        "--out",
        out_dir("check-gamma").to_str().unwrap(),
        "--override",
        "kernels.gamma.value=1.5",
    ]);
    assert_eq!(result.status.code(), Some(3));
    let json: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&result.stdout).trim()).unwrap();
    assert_eq!(json["error"]["kind"], "condition");
    assert!(json["error"]["message"]
        .as_str()
        .unwrap()
        .contains("gamma"));
}

#[test]
fn check_fails_with_exit_3_when_survival_ratio_saturates() {
    // eta = 1 keeps the bounds but pushes the redistribution fraction to 1
    let result = run(&[
        "check",
        "--config",
        scenario("default.toml").to_str().unwrap(),
        "--out",
        out_dir("check-eta").to_str().unwrap(),
        "--override",
        "kernels.eta.value=1.0",
    ]);
    assert_eq!(result.status.code(), Some(3));
    let json: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&result.stdout).trim()).unwrap();
    assert!(json["error"]["message"]
        .as_str()
        .unwrap()
        .contains("delta = 1"));
}

#[test]
fn config_errors_exit_2() {
    let result = run(&[
        "solve",
        "--config",
        scenario("default.toml").to_str().unwrap(),
        "--out",
        out_dir("solve-badcfg").to_str().unwrap(),
        "--override",
        "grid.nt=1",
    ]);
    assert_eq!(result.status.code(), Some(2));
    let json: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&result.stdout).trim()).unwrap();
    assert_eq!(json["error"]["kind"], "config");

    let result = run(&["check", "--config", "/nonexistent.toml"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_4_and_still_writes_diagnostics() {
    let out = out_dir("solve-nonconv");
    let result = run(&[
        "solve",
        "--config",
        scenario("default.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "solver.max_iter=2",
        "--override",
        "grid.nx=[32]",
        "--override",
        "grid.nv=[32]",
        "--override",
        "grid.nt=41",
    ]);
    assert_eq!(result.status.code(), Some(4), "{result:?}");
    let diag = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(diag.lines().count() >= 3, "two sweeps recorded:\n{diag}");
}

#[test]
fn solve_then_rerun_reproduces_the_record() {
    let args_for = |out: &Path| {
        vec![
            "solve".to_string(),
            "--config".into(),
            scenario("local_era.toml").to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--override".into(),
            "grid.nx=[32]".into(),
            "--override".into(),
            "grid.nt=21".into(),
        ]
    };
    let out1 = out_dir("solve-rerun-1");
    let out2 = out_dir("solve-rerun-2");
    for (out, workers) in [(&out1, "1"), (&out2, "4")] {
        let mut args = args_for(out);
        args.push("--workers".into());
        args.push(workers.into());
        let result = Command::new(env!("CARGO_BIN_EXE_fireworks"))
            .args(&args)
            .output()
            .unwrap();
        assert!(result.status.success(), "{result:?}");
    }
    let rec1 = std::fs::read(out1.join("run_record.json")).unwrap();
    let rec2 = std::fs::read(out2.join("run_record.json")).unwrap();
    assert_eq!(rec1, rec2);
}

#[test]
fn mc_writes_observables_csv() {
    let out = out_dir("mc");
    let result = run(&[
        "mc",
        "--config",
        scenario("local_era.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
        "--override",
        "mc.n_particles=5000",
        "--override",
        "mc.histogram=true",
    ]);
    assert!(result.status.success(), "{result:?}");
    let csv = std::fs::read_to_string(out.join("mc.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,mass,mass_se,mean_v0,mean_v0_se,second_v0,second_v0_se"
    );
    assert!(csv.lines().count() > 10);
    assert!(out.join("mc_histogram.csv").exists());
}
