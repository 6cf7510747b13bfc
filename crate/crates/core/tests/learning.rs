//! Convergence of the recursions on problems with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use zapq::algorithms::{run_rng, run_training, Algorithm, GqState, StepSchedule, TrainOptions, ZapState};
use zapq::analysis::MeanField;
use zapq::linalg::{self, Matrix, Vector};
use zapq::mdp::{fixtures, q_star, ChainSimulator};
use zapq::{BehaviorPolicy, QFamily, RandomizedPolicy};

fn q_theta(q: &Matrix) -> Vector {
    Vector::from_column_slice(q.transpose().as_slice())
}

#[test]
fn watkins_converges_for_small_discount() {
    let mdp = fixtures::six_state(0.5);
    let fam = QFamily::tabular(6, 2);
    let qs = q_star(&mdp, 1e-12).unwrap();
    // Each pair moves at rate ϖ(x,u)(1 − γ)/n; the gain lifts the slowest
    // one to 2/n so the error decays like n^{-1/2}.
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(6, 2)).unwrap();
    let gain = 2.0 / (mf.pmf().min() * (1.0 - 0.5));
    let run = run_training(
        &mdp,
        &fam,
        Algorithm::Watkins,
        &BehaviorPolicy::uniform(&mdp),
        &StepSchedule::scaled(gain, gain.ceil() as u64, 0.85).unwrap(),
        0,
        200_000,
        0,
        &TrainOptions { track_fbar: false, ..TrainOptions::default() },
    )
    .unwrap();
    assert!((fam.q_table(&run.final_theta) - qs).amax() < 0.05);
}

#[test]
fn gq_fast_recursion_tracks_projected_mean_field() {
    // With θ frozen, φ solves E[ζζᵀ] φ = f̄(θ); in the tabular basis
    // E[ζζᵀ] = diag(ϖ), so φ = f̄(θ) / ϖ.
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let policy = BehaviorPolicy::uniform(&mdp);
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(6, 2)).unwrap();
    let theta = Vector::from_fn(12, |i, _| (i as f64 * 0.7).cos());
    let expected = mf.fbar(&theta).component_div(mf.pmf());
    let mut st = GqState::new(theta.clone());
    let schedule = StepSchedule::diminishing(10, 0.6).unwrap();
    let mut sim = ChainSimulator::new(&mdp, &policy, run_rng(1, 0), |_| 0);
    for _ in 0..400_000 {
        let s = sim.step();
        st.fast_step(&mdp, &fam, &s, &schedule, false);
    }
    assert_eq!(st.theta, theta);
    assert!((&st.phi - &expected).amax() < 0.05, "{} vs {}", st.phi, expected);
}

#[test]
fn gq_on_a_single_state() {
    // One state and action: Q* = r / (1 − γ). The slow mean flow has slope
    // −gain·(1 − γ)², so gain 4 puts it at −1.
    let mdp = fixtures::one_state(1.0, 0.5);
    let fam = QFamily::tabular(1, 1);
    let run = run_training(
        &mdp,
        &fam,
        Algorithm::Gq,
        &BehaviorPolicy::uniform(&mdp),
        &StepSchedule::scaled(4.0, 10, 0.85).unwrap(),
        0,
        50_000,
        0,
        &TrainOptions::default(),
    )
    .unwrap();
    assert!((run.final_theta[0] - 2.0).abs() < 1e-2, "{}", run.final_theta[0]);
}

#[test]
fn gq_rejects_nonlinear_families() {
    let mdp = fixtures::six_state(0.9);
    let err = run_training(
        &mdp,
        &QFamily::mlp(6, 2, vec![3]),
        Algorithm::Gq,
        &BehaviorPolicy::uniform(&mdp),
        &StepSchedule::diminishing(1, 0.85).unwrap(),
        0,
        10,
        0,
        &TrainOptions::default(),
    );
    assert!(err.is_err());
}

#[test]
fn zap_sa_finds_the_root_of_a_noisy_linear_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 4;
    let a = Matrix::from_fn(d, d, |i, j| if i == j { -1.0 - i as f64 } else { rng.random_range(-0.5..0.5) });
    let b = Vector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let root = -linalg::solve(&a, &b).unwrap();
    let schedule = StepSchedule::diminishing(10, 0.85).unwrap();
    let mut st = ZapState::new(Vector::zeros(d), -Matrix::identity(d, d), 1e-6, 1, 1);
    for _ in 0..100_000 {
        let noise_a = Matrix::from_fn(d, d, |_, _| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let noise_f = Vector::from_fn(d, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let a_n = &a + noise_a;
        let f = &a_n * &st.theta + &b + noise_f;
        st.zap_sa_step(&f, &a_n, &schedule);
    }
    assert!((&st.theta - &root).amax() < 0.05, "{} vs {root}", st.theta);
    assert!((&st.a_hat - &a).amax() < 0.05);
}

#[test]
fn zap_q_from_q_star_stays_close() {
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let qs = q_star(&mdp, 1e-12).unwrap();
    let run = run_training(
        &mdp,
        &fam,
        Algorithm::Zapq,
        &BehaviorPolicy::uniform(&mdp),
        &StepSchedule::diminishing(100, 0.85).unwrap(),
        5,
        50_000,
        10_000,
        &TrainOptions { theta0: Some(q_theta(&qs)), ..TrainOptions::default() },
    )
    .unwrap();
    assert_eq!(run.records.iter().map(|r| r.n).collect::<Vec<_>>(), vec![0, 10_000, 20_000, 30_000, 40_000, 50_000]);
    assert!(run.records[0].fbar_norm.unwrap() < 1e-10);
    assert!((fam.q_table(&run.final_theta) - qs).amax() < 0.05);
}

#[test]
fn epsilon_greedy_zap_q_runs_deterministically() {
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let policy = BehaviorPolicy::EpsilonGreedy { epsilon: 0.3 };
    let sched = StepSchedule::diminishing(100, 0.85).unwrap();
    let opts = TrainOptions::default();
    let a = run_training(&mdp, &fam, Algorithm::Zapq, &policy, &sched, 3, 5_000, 1_000, &opts).unwrap();
    let b = run_training(&mdp, &fam, Algorithm::Zapq, &policy, &sched, 3, 5_000, 1_000, &opts).unwrap();
    assert_eq!(a.final_theta, b.final_theta);
    assert!(a.final_theta.iter().all(|v| v.is_finite()));
}
