//! Implementations of the `train`, `sweep`, `eval`, `flow` and `analyze`
//! subcommands. Each writes its artifacts into an output directory; wall
//! clock measurements go to a separate `timing.json` so that CSV outputs are
//! byte-identical across re-runs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use super::aggregate::{write_run_csv, AggregateResult, Metric, RunRow};
use super::config::{ExperimentConfig, FlowKind};
use super::eval::evaluate_policy;
use super::plot::{emit_plot, PlotInput};
use super::CliError;
use crate::algorithms::{self, evaluation_policy, run_rng, TrainingRun};
use crate::analysis::{self, matrix_from_rows, matrix_rows, CovarianceReport, MeanField};
use crate::funcapprox::{Checkpoint, QFamily, Theta};
use crate::linalg::{self, Matrix, Vector};
use crate::mdp::{self, FiniteMdp};
use crate::odelab::{self, FlowOptions, FlowTrace, MeanFieldFlow};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

/// Mean over state-action pairs of `(Q^θ − Q*)²`.
pub fn mse_to_qstar(fam: &QFamily, theta: &Theta, q_star: &Matrix) -> f64 {
    (fam.q_table(theta) - q_star).map(|v| v * v).mean()
}

/// Everything a single seeded run produces.
pub struct RunOutput {
    pub run: TrainingRun,
    pub rows: Vec<RunRow>,
    pub wall_clock: Vec<f64>,
}

/// Trains one run and evaluates every metric at each checkpoint.
pub fn train_one(cfg: &ExperimentConfig, mdp: &FiniteMdp, fam: &QFamily, q_star: &Matrix, seed: u64, run_id: usize) -> Result<RunOutput, CliError> {
    let schedule = cfg.schedule().map_err(CliError::config)?;
    let run = algorithms::run_training(
        mdp,
        fam,
        cfg.algorithm,
        &cfg.behavior(mdp),
        &schedule,
        seed,
        cfg.n_steps,
        cfg.checkpoint_every,
        &cfg.train_options(),
    )
    .map_err(|e| match e {
        algorithms::AlgoError::NotLinearFamily | algorithms::AlgoError::Incompatible => CliError::config(e),
        other => CliError::runtime(other),
    })?;
    let mut rows = Vec::with_capacity(run.records.len() * Metric::ALL.len());
    for rec in &run.records {
        let reward = evaluate_policy(mdp, fam, &rec.theta, cfg.eval.num_rollouts, cfg.eval.horizon, cfg.eval.seed);
        let values = [
            (Metric::AvgReward, Some(reward.mean)),
            (Metric::FbarNorm, rec.fbar_norm),
            (Metric::BellmanError, Some(rec.bellman_error)),
            (Metric::MseToQstar, Some(mse_to_qstar(fam, &rec.theta, q_star))),
        ];
        for (metric, value) in values {
            if let Some(value) = value {
                rows.push(RunRow { run_id, n: rec.n, metric, value });
            }
        }
    }
    let wall_clock = run.records.iter().map(|r| r.wall_clock.as_secs_f64()).collect();
    Ok(RunOutput { run, rows, wall_clock })
}

fn setup(cfg: &ExperimentConfig) -> Result<(FiniteMdp, QFamily, Matrix), CliError> {
    let mdp = cfg.load_mdp()?;
    let fam = cfg.family.build(&mdp)?;
    let q_star = mdp::q_star(&mdp, 1e-12).map_err(CliError::runtime)?;
    Ok((mdp, fam, q_star))
}

fn theta_csv(records: &[algorithms::LearnRecord]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = records.first().map_or(0, |r| r.theta.len());
    let mut header = vec!["n".to_string()];
    header.extend((1..=d).map(|i| format!("theta_{i}")));
    w.write_record(&header).map_err(CliError::runtime)?;
    for r in records {
        let mut row = vec![r.n.to_string()];
        row.extend(r.theta.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(CliError::runtime)?;
    }
    String::from_utf8(w.into_inner().map_err(CliError::runtime)?).map_err(CliError::runtime)
}

/// `train`: one run; writes `train.csv`, `checkpoints.csv`,
/// `checkpoint.json` and `timing.json`.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (mdp, fam, q_star) = setup(cfg)?;
    let output = train_one(cfg, &mdp, &fam, &q_star, seed, 0)?;
    ensure_dir(out)?;
    let mut csv = Vec::new();
    write_run_csv(&output.rows, &mut csv)?;
    let paths = [out.join("train.csv"), out.join("checkpoints.csv"), out.join("checkpoint.json"), out.join("timing.json")];
    write(&paths[0], csv)?;
    write(&paths[1], theta_csv(&output.run.records)?)?;
    write(&paths[2], Checkpoint::new(fam.clone(), &output.run.final_theta).to_json())?;
    let timing = json!({
        "seed": seed,
        "checkpoint_n": output.run.records.iter().map(|r| r.n).collect::<Vec<_>>(),
        "wall_clock_seconds": output.wall_clock,
        "projections": output.run.projections,
    });
    write(&paths[3], serde_json::to_string_pretty(&timing).expect("json"))?;
    Ok(paths.to_vec())
}

/// `sweep`: `num_runs` runs with seeds `base_seed + i`; writes `runs.csv`,
/// one `aggregate_<metric>.csv` and `.svg` per metric, and `timing.json`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (mdp, fam, q_star) = setup(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(CliError::runtime)?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        (0..cfg.num_runs)
            .into_par_iter()
            .map(|i| train_one(cfg, &mdp, &fam, &q_star, cfg.base_seed + i as u64, i))
            .collect::<Result<_, _>>()
    })?;
    ensure_dir(out)?;
    let rows: Vec<RunRow> = outputs.iter().flat_map(|o| o.rows.iter().copied()).collect();
    let mut paths = vec![out.join("runs.csv")];
    let mut csv = Vec::new();
    write_run_csv(&rows, &mut csv)?;
    write(&paths[0], csv)?;
    for metric in Metric::ALL {
        let agg = AggregateResult::from_rows(&rows, metric);
        if agg.is_empty() {
            continue;
        }
        let csv_path = out.join(format!("aggregate_{}.csv", metric.name()));
        write(&csv_path, agg.to_csv_string())?;
        let svg_path = out.join(format!("aggregate_{}.svg", metric.name()));
        write(&svg_path, emit_plot(PlotInput::Aggregate(&agg)).map_err(CliError::runtime)?)?;
        paths.extend([csv_path, svg_path]);
    }
    let timing = json!({
        "wall_clock_seconds": outputs.iter().map(|o| o.wall_clock.last().copied().unwrap_or(0.0)).collect::<Vec<_>>(),
        "projections": outputs.iter().map(|o| o.run.projections).collect::<Vec<_>>(),
    });
    let timing_path = out.join("timing.json");
    write(&timing_path, serde_json::to_string_pretty(&timing).expect("json"))?;
    paths.push(timing_path);
    Ok(paths)
}

/// `eval`: greedy-policy evaluation of a checkpoint; writes `eval.csv`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mdp = cfg.load_mdp()?;
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::config(format!("{}: {e}", checkpoint.display())))?;
    if ck.family.num_states() != mdp.num_states() || ck.family.num_actions() != mdp.num_actions() {
        return Err(CliError::config("checkpoint family does not match the MDP"));
    }
    let e = cfg.eval.clone();
    let r = evaluate_policy(&mdp, &ck.family, &ck.theta(), e.num_rollouts, e.horizon, e.seed);
    ensure_dir(out)?;
    let path = out.join("eval.csv");
    let text = format!("num_rollouts,horizon,seed,mean,stderr\n{},{},{},{},{}\n", r.num_rollouts, e.horizon, e.seed, r.mean, r.stderr);
    write(&path, text)?;
    Ok(vec![path])
}

/// Initial flow state: explicit `w0`, else the training initialization.
fn flow_start(cfg: &ExperimentConfig, fam: &QFamily) -> Result<Theta, CliError> {
    match &cfg.flow.w0 {
        Some(w) if w.len() == fam.dim() => Ok(Vector::from_column_slice(w)),
        Some(w) => Err(CliError::config(format!("flow.w0 has length {}, family dimension is {}", w.len(), fam.dim()))),
        None => Ok(fam.initial_theta(&mut run_rng(cfg.base_seed, 1))),
    }
}

/// Integrates the configured flow of the exact mean field.
pub fn flow_trace(cfg: &ExperimentConfig) -> Result<FlowTrace, CliError> {
    let mdp = cfg.load_mdp()?;
    let fam = cfg.family.build(&mdp)?;
    let w0 = flow_start(cfg, &fam)?;
    let policy = evaluation_policy(&fam, &w0, &cfg.behavior(&mdp));
    let episodic = cfg.episodic.unwrap_or(mdp.is_episodic());
    let mf = MeanField::new(&mdp, &fam, &policy).map_err(CliError::runtime)?.with_episodic(episodic);
    let vf = MeanFieldFlow::new(mf);
    let f = &cfg.flow;
    let opts = FlowOptions::default();
    let trace = match f.kind {
        FlowKind::Gradient => {
            let m = Matrix::identity(fam.dim(), fam.dim());
            odelab::integrate_gradient_flow(&vf, &m, &w0, f.t_final, f.dt, &opts)
        }
        FlowKind::Nr => odelab::integrate_nr_flow(&vf, &w0, f.t_final, f.dt, &opts),
        FlowKind::Regularized => odelab::integrate_regularized_flow(&vf, f.eps, &w0, f.t_final, f.dt, &opts),
    };
    trace.map_err(CliError::runtime)
}

/// `flow`: writes `flow.csv` and `flow.svg`.
pub fn flow(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let trace = flow_trace(cfg)?;
    ensure_dir(out)?;
    let paths = vec![out.join("flow.csv"), out.join("flow.svg")];
    write(&paths[0], trace.to_csv_string())?;
    write(&paths[1], emit_plot(PlotInput::Flow(&trace)).map_err(CliError::runtime)?)?;
    Ok(paths)
}

/// Parses a matrix given as a JSON number (1×1) or nested row arrays.
pub fn parse_matrix(value: &Value) -> Result<Matrix, CliError> {
    if let Some(x) = value.as_f64() {
        return Ok(Matrix::from_element(1, 1, x));
    }
    let rows: Vec<Vec<f64>> = serde_json::from_value(value.clone()).map_err(|e| CliError::config(format!("matrix: {e}")))?;
    let m = matrix_from_rows(&rows).ok_or_else(|| CliError::config("matrix rows have different lengths"))?;
    if m.nrows() != m.ncols() {
        return Err(CliError::config(format!("matrix must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

/// Reads a matrix argument: inline JSON, or a path to a JSON file.
pub fn read_matrix_arg(arg: &str) -> Result<Matrix, CliError> {
    let value = match serde_json::from_str::<Value>(arg) {
        Ok(v) => v,
        Err(_) => {
            let text = fs::read_to_string(arg).map_err(|e| CliError::config(format!("{arg}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{arg}: {e}")))?
        }
    };
    parse_matrix(&value)
}

fn expansion_json(exp: &analysis::EpsilonExpansion) -> Value {
    json!({
        "Sigma_optimal": matrix_rows(&exp.sigma_optimal),
        "Sigma_second_order": matrix_rows(&exp.sigma_second),
        "fitted_order": exp.fitted_order,
        "levels": exp.reports.iter().map(|r| json!({
            "eps": r.eps,
            "Sigma_theta": matrix_rows(&r.sigma),
            "remainder_norm": r.remainder.norm(),
            "eig_real_parts": r.eig_real_parts,
            "max_imag": r.max_imag,
        })).collect::<Vec<_>>(),
    })
}

/// `analyze` from explicit matrices.
pub fn analyze_matrices(a_star: &Matrix, sigma_delta: &Matrix, gain: &Matrix, eps: &[f64]) -> Result<Value, CliError> {
    let report = analysis::asymptotic_covariance(a_star, sigma_delta, gain).map_err(CliError::runtime)?;
    let mut doc = report.to_json_value();
    if !eps.is_empty() {
        let exp = analysis::zap_epsilon_expansion(a_star, sigma_delta, eps).map_err(CliError::runtime)?;
        doc["epsilon_expansion"] = expansion_json(&exp);
    }
    Ok(doc)
}

fn report_json(r: &CovarianceReport) -> Value {
    r.to_json_value()
}

/// `analyze` for a tabular experiment: covariance of Zap (`G = −A*^{-1}`)
/// and of Watkins (`G = gI`) at `θ* = Q*`, the Watkins eigenvalue probe, the
/// GQ linearization and the regularization expansion.
pub fn analyze_config(cfg: &ExperimentConfig, eps: &[f64]) -> Result<Value, CliError> {
    let (mdp, fam, q_star) = setup(cfg)?;
    if !matches!(fam, QFamily::Tabular { .. }) {
        return Err(CliError::config("config-mode analyze requires the tabular family"));
    }
    let policy = match cfg.exploration {
        None => mdp::RandomizedPolicy::uniform(mdp.num_states(), mdp.num_actions()),
        Some(e) => mdp::RandomizedPolicy::epsilon_soft(&mdp::greedy_of_table(&q_star), mdp.num_actions(), e),
    };
    let theta_star = Vector::from_column_slice(q_star.transpose().as_slice());
    let episodic = cfg.episodic.unwrap_or(mdp.is_episodic());
    let mf = MeanField::new(&mdp, &fam, &policy).map_err(CliError::runtime)?.with_episodic(episodic);
    let a_star = mf.fbar_jacobian(&theta_star);
    let sigma_delta = mf.noise_covariance(&theta_star).map_err(CliError::runtime)?;
    let d = fam.dim();
    let newton = -linalg::inverse(&a_star).map_err(|_| CliError::runtime("A* is singular"))?;
    let zap = analysis::asymptotic_covariance(&a_star, &sigma_delta, &newton).map_err(CliError::runtime)?;
    let watkins = analysis::asymptotic_covariance(&a_star, &sigma_delta, &(Matrix::identity(d, d) * cfg.gain)).map_err(CliError::runtime)?;
    let probe = analysis::watkins_rate_probe(&mdp, mdp.gamma(), cfg.gain).map_err(CliError::runtime)?;
    let gq = analysis::gq_linearization(&mdp, &policy).map_err(CliError::runtime)?;
    let mut doc = json!({
        "zap": report_json(&zap),
        "watkins": report_json(&watkins),
        "watkins_probe": {
            "gain": cfg.gain,
            "eig_real_parts": probe.eig_real_parts,
            "clt_rate_holds": probe.clt_rate_holds,
        },
        "gq": {
            "lambda_max": gq.lambda_max,
            "bound": gq.bound,
            "bound_holds": gq.bound_holds,
        },
    });
    if !eps.is_empty() {
        let exp = analysis::zap_epsilon_expansion(&a_star, &sigma_delta, eps).map_err(CliError::runtime)?;
        doc["epsilon_expansion"] = expansion_json(&exp);
    }
    Ok(doc)
}
