//! End-to-end checks of the `zapq` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use zapq::expcli::aggregate::read_run_csv;
use zapq::funcapprox::Checkpoint;
use zapq::mdp::fixtures;

fn zapq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zapq")).args(args).output().unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    fixtures::six_state(0.9).save(dir.path().join("six.toml")).unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let path = path.to_str().unwrap().to_string();
    (dir, path)
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_with_zero_steps_keeps_the_initial_parameter() {
    let (dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 0\n[family]\nkind = \"mlp\"\nhidden = [3]\n");
    let out = dir.path().join("out");
    let o = zapq(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let thetas = read(&out.join("checkpoints.csv"));
    let lines: Vec<&str> = thetas.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("n,theta_1,"));
    assert!(lines[1].starts_with("0,"));
    let ck = Checkpoint::load(out.join("checkpoint.json")).unwrap();
    let theta0: Vec<f64> = lines[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(ck.theta().as_slice(), theta0.as_slice());
    let timing: Value = serde_json::from_str(&read(&out.join("timing.json"))).unwrap();
    assert_eq!(timing["seed"], 4);
}

#[test]
fn single_run_sweep_percentiles_coincide() {
    let (dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 600\ncheckpoint_every = 200\nnum_runs = 1\n[eval]\nnum_rollouts = 5\nhorizon = 20\n");
    let out = dir.path().join("sweep");
    let o = zapq(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = read_run_csv(&read(&out.join("runs.csv"))).unwrap();
    for metric in ["avg_reward", "fbar_norm", "bellman_error", "mse_to_qstar"] {
        let text = read(&out.join(format!("aggregate_{metric}.csv")));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("n,p10,p25,p50,p75,p90"));
        let mut count = 0;
        for line in lines {
            let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert!(vals[1..].iter().all(|v| *v == vals[1]), "{metric}: {line}");
            let single = runs.iter().find(|r| r.n == vals[0] as u64 && r.metric.name() == metric).unwrap();
            assert_eq!(single.value, vals[1]);
            count += 1;
        }
        assert_eq!(count, 4);
        assert!(read(&out.join(format!("aggregate_{metric}.svg"))).starts_with("<svg"));
    }
}

#[test]
fn analyze_scalar_fixture() {
    let o = zapq(&["analyze", "--a-star", "-1", "--sigma-delta", "1", "--gain", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((doc["Sigma_theta"][0][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(doc["gap"][0][0].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn analyze_reports_infinite_covariance_and_expansion() {
    let o = zapq(&["analyze", "--a-star", "[[-0.25]]", "--sigma-delta", "[[1]]", "--gain", "1", "--eps", "0.01,0.005"]);
    assert!(o.status.success());
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["Sigma_theta"], "infinite");
    assert_eq!(doc["epsilon_expansion"]["levels"].as_array().unwrap().len(), 2);
}

#[test]
fn analyze_config_mode_writes_report() {
    let (dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 10\n");
    let out = dir.path().join("analysis.json");
    let o = zapq(&["analyze", "--config", &cfg, "--eps", "1e-5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&read(&out)).unwrap();
    for key in ["zap", "watkins", "watkins_probe", "gq", "epsilon_expansion"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    assert!(doc["zap"]["Sigma_theta"].is_array());
    assert_eq!(doc["gq"]["bound_holds"], true);
}

#[test]
fn eval_reads_a_checkpoint() {
    let (dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 2000\n[eval]\nnum_rollouts = 7\nhorizon = 30\n");
    let train_out = dir.path().join("t");
    assert!(zapq(&["train", "--config", &cfg, "--out", train_out.to_str().unwrap()]).status.success());
    let eval_out = dir.path().join("e");
    let ck = train_out.join("checkpoint.json");
    let o = zapq(&["eval", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&eval_out.join("eval.csv"));
    assert!(text.starts_with("num_rollouts,horizon,seed,mean,stderr\n7,30,0,"));
}

#[test]
fn flow_writes_trace_and_plot() {
    let (dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 10\n[flow]\nt_final = 0.1\ndt = 0.01\n");
    let out = dir.path().join("f");
    let o = zapq(&["flow", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("flow.csv"));
    assert!(csv.starts_with("t,w_1,"));
    assert_eq!(csv.lines().count(), 12);
    assert!(read(&out.join("flow.svg")).contains("</svg>"));
}

fn error_json(o: &Output) -> Value {
    serde_json::from_slice(o.stderr.trim_ascii()).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn configuration_errors_exit_with_one() {
    let (_dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 10\nbogus_key = 3\n");
    let o = zapq(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = error_json(&o);
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 1);
    assert!(err["message"].as_str().unwrap().contains("bogus_key"));

    let (_dir, cfg) = setup("mdp = \"missing.toml\"\nn_steps = 10\n");
    assert_eq!(zapq(&["sweep", "--config", &cfg]).status.code(), Some(1));
    let (_dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 10\nrho = 0.4\n");
    assert_eq!(zapq(&["train", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(zapq(&["analyze", "--a-star", "[[1, 2]]", "--sigma-delta", "1", "--gain", "1"]).status.code(), Some(1));
    assert_eq!(zapq(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    // Newton-Raphson flow of an over-parameterized network: singular Jacobian.
    let (_dir, cfg) = setup("mdp = \"six.toml\"\nn_steps = 10\n[family]\nkind = \"mlp\"\nhidden = [4]\n[flow]\nkind = \"nr\"\n");
    let o = zapq(&["flow", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "runtime");

    // Regularization above the smallest eigenvalue of A*ᵀA*.
    let o = zapq(&["analyze", "--a-star", "-1", "--sigma-delta", "1", "--gain", "1", "--eps", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("5"));
}

#[test]
fn help_exits_zero() {
    let o = zapq(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep"));
}
