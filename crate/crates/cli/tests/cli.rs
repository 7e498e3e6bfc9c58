use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nfim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfim"))
        .args(args)
        .output()
        .expect("nfim binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL: &str = r#"
channels = ["SM1.omega_m", "SM1.p_e"]
trials = 3
seed = 7
alpha_max = 10.0
realizations = 20

[scenario]
t_end = 5.0
dt = 5e-3

[[parameters]]
path = "SM1.gov.K_t"
initial = 1.4
lower = 0.75
upper = 2.25

[[parameters]]
path = "SM1.gov.delta"
initial = 0.85
lower = 0.4
upper = 1.2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("study.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_measure_fit_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let sim = nfim(&["simulate", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    let trace = out.join("SM1.p_e.csv");
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("t,SM1.p_e [MW]\n"));
    assert_eq!(text.lines().count(), 1 + 1001);

    let meas = nfim(&["measure", "--trace", trace.to_str().unwrap(), "--seed", "3", "--out", out_s]);
    assert_eq!(code(&meas), 0, "{}", String::from_utf8_lossy(&meas.stderr));
    let z = out.join("SM1.p_e.meas.csv");
    assert!(out.join("SM1.p_e.meas.csv.json").exists());

    let fit = nfim(&["fit", "--config", &cfg, "--measurements", z.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code(&fit), 0, "{}", String::from_utf8_lossy(&fit.stderr));
    let est: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("estimation.json")).unwrap()).unwrap();
    let entries = est["p_hat"].as_array().unwrap();
    let k_t = entries[0]["value"].as_f64().unwrap();
    assert!((k_t - 1.5).abs() / 1.5 < 0.05, "K_t = {k_t}");
    let log = fs::read_to_string(out.join("fit_log.csv")).unwrap();
    assert!(log.starts_with("iter,sse,step_norm,damping\n"));
}

#[test]
fn fim_and_select_skip_the_blind_channel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let fim = nfim(&["fim", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&fim), 0, "{}", String::from_utf8_lossy(&fim.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fim.json")).unwrap()).unwrap();
    assert!(v[0]["fim"].is_null() && v[0]["infeasible"].is_string());
    assert!(v[1]["fim"]["v_e"].as_f64().unwrap() > 0.0);

    let sel = nfim(&["select", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&sel), 0, "{}", String::from_utf8_lossy(&sel.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(v["channel"], "SM1.p_e");
    assert_eq!(v["selected"], 1);
}

#[test]
fn study_output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, workers) in [(&a, "1"), (&b, "3")] {
        let run = nfim(&["study", "--config", &cfg, "--out", out.to_str().unwrap(), "--parallel", workers]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for f in ["study.json", "table3.csv", "table4.csv", "convergence.csv", "traces.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("study.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 3);
    assert_eq!(report["selected_channel"], "SM1.p_e");
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let run = nfim(&[
        "study", "--config", &cfg, "--out", out.to_str().unwrap(), "--trials", "2", "--seed", "11", "--snr-db", "70",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(report["trials"], 2);
    assert_eq!(report["seed"], 11);
    assert_eq!(report["snr_db"], 70.0);
}

#[test]
fn sweep_writes_normalized_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("trials = 3", "trials = 2"));
    let out = dir.path().join("run");
    let run = nfim(&[
        "sweep", "--config", &cfg, "--parameter", "SM1.gov.K_t", "--alphas", "0.01,0.1,1.0", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = fs::read_to_string(out.join("sweep_SM1.gov.K_t.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "parameter,alpha,nfim,normalized");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].ends_with(",1"), "{}", lines[3]);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&nfim(&["study", "--config", missing.to_str().unwrap()])), 1);
    let bad = write_config(dir.path(), "channels = []\nparameters = []\n");
    assert_eq!(code(&nfim(&["study", "--config", &bad])), 1);
    let out = dir.path().join("run");
    let unknown = write_config(dir.path(), SMALL);
    let run = nfim(&["sweep", "--config", &unknown, "--parameter", "SM1.avr.T_a", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 1);
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blind = SMALL
        .replace(r#"channels = ["SM1.omega_m", "SM1.p_e"]"#, r#"channels = ["SM1.omega_m"]"#)
        .replace("alpha_max = 10.0", "alpha_max = 1.0");
    let cfg = write_config(dir.path(), &blind);
    let out = dir.path().join("run");
    let run = nfim(&["select", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 2, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no candidate channel"));
}
