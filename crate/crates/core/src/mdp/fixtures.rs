//! Small built-in MDPs used by tests, the acceptance suite and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{stationary_pmf, FiniteMdp, RandomizedPolicy};
use crate::linalg::Matrix;

/// Seed of the six-state, two-action benchmark model.
pub const SIX_STATE_SEED: u64 = 2020;

/// One state, one action, reward `r`.
pub fn one_state(r: f64, gamma: f64) -> FiniteMdp {
    FiniteMdp::new(
        vec![Matrix::from_element(1, 1, 1.0)],
        Matrix::from_element(1, 1, r),
        gamma,
    )
    .expect("valid one-state MDP")
}

/// Two states; action 0 stays, action 1 switches. Reward 1 in state 1.
pub fn two_state(gamma: f64) -> FiniteMdp {
    let stay = Matrix::identity(2, 2);
    let switch = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let rewards = Matrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    FiniteMdp::new(vec![stay, switch], rewards, gamma).expect("valid two-state MDP")
}

/// Dense random MDP: transition rows are normalized uniform draws and
/// rewards are uniform on `[0, 1)`.
pub fn random_mdp(seed: u64, num_states: usize, num_actions: usize, gamma: f64) -> FiniteMdp {
    random_mdp_with_branching(seed, num_states, num_actions, gamma, num_states)
}

/// Random MDP whose transition rows each put mass on `branching` distinct
/// next states. Draws are repeated (deterministically in `seed`) until the
/// joint chain under the uniform policy has a strictly positive invariant pmf.
pub fn random_mdp_with_branching(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    branching: usize,
) -> FiniteMdp {
    let branching = branching.clamp(1, num_states);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let kernels: Vec<Matrix> = (0..num_actions)
            .map(|_| {
                let mut p = Matrix::zeros(num_states, num_states);
                for x in 0..num_states {
                    let mut targets: Vec<usize> = (0..num_states).collect();
                    // Partial Fisher-Yates for `branching` distinct targets.
                    for i in 0..branching {
                        let j = rng.random_range(i..num_states);
                        targets.swap(i, j);
                    }
                    let weights: Vec<f64> = (0..branching).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = weights.iter().sum();
                    for (t, w) in targets[..branching].iter().zip(&weights) {
                        p[(x, *t)] = w / total;
                    }
                    let row_sum: f64 = p.row(x).iter().sum();
                    // Push the rounding residue onto the first target.
                    p[(x, targets[0])] += 1.0 - row_sum;
                }
                p
            })
            .collect();
        let rewards = Matrix::from_fn(num_states, num_actions, |_, _| rng.random_range(0.0..1.0));
        let mdp = FiniteMdp::new(kernels, rewards, gamma).expect("generated MDP is valid");
        let uniform = RandomizedPolicy::uniform(num_states, num_actions);
        if let Ok(pi) = stationary_pmf(&mdp, &uniform) {
            if pi.iter().all(|p| *p > 1e-6) {
                return mdp;
            }
        }
    }
}

/// The six-state, two-action benchmark model used across the test suites:
/// dense random kernels and uniform rewards from a fixed seed.
pub fn six_state(gamma: f64) -> FiniteMdp {
    random_mdp(SIX_STATE_SEED, 6, 2, gamma)
}
