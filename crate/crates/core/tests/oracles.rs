//! Library results checked against independently computed references.

use approx::assert_relative_eq;
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zapq::algorithms::{a_sample, run_rng};
use zapq::analysis::{self, MeanField};
use zapq::funcapprox::LinearBasis;
use zapq::linalg::{self, Matrix, Vector};
use zapq::mdp::{fixtures, q_star, ChainSimulator};
use zapq::{BehaviorPolicy, QFamily, RandomizedPolicy};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn hurwitz(r: &mut ChaCha8Rng, d: usize) -> Matrix {
    let b = Matrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    let top = linalg::eig_real_parts(&b).unwrap()[0];
    b - Matrix::identity(d, d) * (top + 0.5)
}

/// `Σ = ∫₀^∞ e^{At} S e^{Aᵀt} dt`, by integrating `Σ' = AΣ + ΣAᵀ + S` from
/// zero with classical RK4 until the derivative is negligible.
fn lyapunov_by_quadrature(a: &Matrix, s: &Matrix) -> Matrix {
    let rhs = |x: &Matrix| a * x + x * a.transpose() + s;
    let h = 1e-3;
    let mut x = Matrix::zeros(a.nrows(), a.ncols());
    for _ in 0..200_000 {
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (h / 2.0)));
        let k3 = rhs(&(&x + &k2 * (h / 2.0)));
        let k4 = rhs(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if rhs(&x).amax() < 1e-13 {
            break;
        }
    }
    x
}

#[test]
fn lyapunov_matches_quadrature() {
    let mut r = rng(1);
    for d in [1, 2, 4] {
        let a = hurwitz(&mut r, d);
        let l = Matrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let s = &l * l.transpose();
        let direct = linalg::solve_lyapunov(&a, &s).unwrap();
        let integral = lyapunov_by_quadrature(&a, &s);
        assert_relative_eq!(direct, integral, epsilon = 1e-9, max_relative = 1e-8);
    }
}

/// In the eigenbasis of `M = (A Aᵀ)^{-1}` with eigenvalues `m_i`, the
/// regularized-gain covariance is `A^{-1} X A^{-T}` with
/// `X_ij = S_ij / (1 − ε² m_i m_j)`.
#[test]
fn epsilon_covariance_closed_form() {
    let mut r = rng(2);
    for _ in 0..4 {
        let a = hurwitz(&mut r, 3);
        let l = Matrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
        let s = &l * l.transpose();
        let m = linalg::inverse(&(&a * a.transpose())).unwrap();
        let eig = SymmetricEigen::new(m);
        let q = &eig.eigenvectors;
        let s_rot = q.transpose() * &s * q;
        let a_inv = linalg::inverse(&a).unwrap();
        for eps in [0.3, 0.05, 1e-3] {
            let x = Matrix::from_fn(3, 3, |i, j| {
                s_rot[(i, j)] / (1.0 - eps * eps * eig.eigenvalues[i] * eig.eigenvalues[j])
            });
            let expected = &a_inv * (q * x * q.transpose()) * a_inv.transpose();
            let limit = linalg::symmetric_eigenvalues(&(a.transpose() * &a)).unwrap()[0];
            if eps >= limit {
                continue;
            }
            let exp = analysis::zap_epsilon_expansion(&a, &s, &[eps]).unwrap();
            assert_relative_eq!(exp.reports[0].sigma, expected, epsilon = 1e-10, max_relative = 1e-8);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mdp = fixtures::random_mdp(3, 4, 2, 0.8);
    let policy = RandomizedPolicy::uniform(4, 2);
    let mut r = rng(3);
    let features: Vec<f64> = (0..8 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let families = [
        QFamily::tabular(4, 2),
        QFamily::Linear(LinearBasis::new(4, 2, 3, features).unwrap()),
        QFamily::mlp(4, 2, vec![5]),
    ];
    for fam in &families {
        let mf = MeanField::new(&mdp, fam, &policy).unwrap();
        let theta = fam.initial_theta(&mut r) + Vector::from_fn(fam.dim(), |_, _| r.random_range(-1.0..1.0));
        let jac = mf.fbar_jacobian(&theta);
        let h = 1e-6;
        let fd = Matrix::from_fn(fam.dim(), fam.dim(), |i, j| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h;
            down[j] -= h;
            (mf.fbar_with_anchor(&up, &theta)[i] - mf.fbar_with_anchor(&down, &theta)[i]) / (2.0 * h)
        });
        let same_policy = |t: &Vector| fam.greedy_policy(t);
        let theta_policy = same_policy(&theta);
        // The central difference is only exact when no perturbation flips
        // the greedy policy.
        let stable = (0..fam.dim()).all(|j| {
            let mut up = theta.clone();
            up[j] += h;
            let mut down = theta.clone();
            down[j] -= h;
            same_policy(&up) == theta_policy && same_policy(&down) == theta_policy
        });
        assert!(stable);
        // The eligibility is held at θ: A(θ) drops the 𝒟 ∂ζ term.
        assert_relative_eq!(jac, fd, epsilon = 1e-6, max_relative = 1e-5);
        if fam.is_linear() {
            let full = Matrix::from_fn(fam.dim(), fam.dim(), |i, j| {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                (mf.fbar(&up)[i] - mf.fbar(&down)[i]) / (2.0 * h)
            });
            assert_relative_eq!(jac, full, epsilon = 1e-6, max_relative = 1e-5);
        }
    }
}

#[test]
fn tabular_form_agrees_with_mean_field() {
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let mut r = rng(4);
    let probs = Matrix::from_fn(6, 2, |_, _| r.random_range(0.2..1.0));
    let probs = Matrix::from_fn(6, 2, |x, u| probs[(x, u)] / probs.row(x).sum());
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::new(probs).unwrap()).unwrap();
    let tab = mf.tabular_form().unwrap();
    for _ in 0..10 {
        let theta = Vector::from_fn(12, |_, _| r.random_range(-3.0..3.0));
        assert_relative_eq!(tab.fbar(&theta), mf.fbar(&theta), epsilon = 1e-12);
        assert_relative_eq!(tab.a(&fam.greedy_policy(&theta)), mf.fbar_jacobian(&theta), epsilon = 1e-12);
    }
}

#[test]
fn q_star_is_a_root_of_the_mean_field() {
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(6, 2)).unwrap();
    let q = q_star(&mdp, 1e-13).unwrap();
    let theta = Vector::from_column_slice(q.transpose().as_slice());
    assert!(mf.fbar(&theta).amax() < 1e-11);
}

#[test]
fn empirical_a_matches_matrix_form() {
    let mdp = fixtures::six_state(0.9);
    let fam = QFamily::tabular(6, 2);
    let policy = BehaviorPolicy::uniform(&mdp);
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(6, 2)).unwrap();
    let theta = Vector::from_fn(12, |i, _| (i as f64).sin());
    let mut sim = ChainSimulator::new(&mdp, &policy, run_rng(5, 0), |_| 0);
    let n = 400_000;
    let mut acc = Matrix::zeros(12, 12);
    for _ in 0..n {
        let s = sim.step();
        acc += a_sample(&mdp, &fam, &theta, &fam.eligibility(&theta, s.x, s.u), &s, false);
    }
    let empirical = acc / n as f64;
    // Entries are O(1/12); sampling error at this length is about 1e-3.
    assert!((empirical - mf.fbar_jacobian(&theta)).amax() < 5e-3);
}

#[test]
fn monte_carlo_mean_field_is_unbiased() {
    let mdp = fixtures::two_state(0.8);
    let fam = QFamily::tabular(2, 2);
    let mf = MeanField::new(&mdp, &fam, &RandomizedPolicy::uniform(2, 2)).unwrap();
    let theta = Vector::from_vec(vec![0.3, -0.2, 1.1, 0.4]);
    let (mean, se) = mf.fbar_monte_carlo(&theta, 400_000, 40, 9).unwrap();
    let exact = mf.fbar(&theta);
    for i in 0..4 {
        assert!((mean[i] - exact[i]).abs() <= 4.0 * se[i] + 1e-12, "{i}: {} vs {} ({})", mean[i], exact[i], se[i]);
    }
}
