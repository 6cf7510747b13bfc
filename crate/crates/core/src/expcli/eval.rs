use rand::Rng;
use serde::Serialize;

use crate::algorithms::run_rng;
use crate::funcapprox::{QFamily, Theta};
use crate::mdp::{sample_index, FiniteMdp};

/// Mean and standard error of the total reward of greedy rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub mean: f64,
    pub stderr: f64,
    pub num_rollouts: usize,
}

/// Averages `Σ_{n<τ} r(X_n, φ^θ(X_n))` over greedy rollouts started from the
/// initial distribution, with `τ = min(τ̄, τ_S)`.
///
/// Rollout `i` draws from its own RNG stream, so results for the first `k`
/// rollouts do not depend on `num_rollouts`.
pub fn evaluate_policy(mdp: &FiniteMdp, fam: &QFamily, theta: &Theta, num_rollouts: usize, horizon: u64, seed: u64) -> EvalResult {
    let policy = fam.greedy_policy(theta);
    let init = mdp.initial_distribution();
    let totals: Vec<f64> = (0..num_rollouts)
        .map(|i| {
            let mut rng = run_rng(seed, i as u64);
            let mut x = sample_index(init.iter().copied(), rng.random());
            let mut total = 0.0;
            for _ in 0..horizon {
                let u = policy[x];
                total += mdp.reward(x, u);
                x = sample_index(mdp.kernel(u).row(x).iter().copied(), rng.random());
                if mdp.is_terminal(x) {
                    break;
                }
            }
            total
        })
        .collect();
    let n = num_rollouts as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let stderr = if num_rollouts > 1 {
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    EvalResult { mean, stderr, num_rollouts }
}
