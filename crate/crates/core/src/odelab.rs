//! Fixed-step RK4 integration of the flows shadowed by the learning
//! recursions, with descent diagnostics and CSV export.

use std::io::Write;

use thiserror::Error;

use crate::analysis::{AnalysisError, MeanField};
use crate::linalg::{self, LinalgError, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("state norm {norm} exceeded the blow-up bound at t = {t}")]
    Blowup { t: f64, norm: f64 },
    #[error("Jacobian condition number {condition} above limit at t = {t}")]
    SingularJacobian { t: f64, condition: f64 },
    #[error("field at infinity requires a tabular or linear family")]
    NotLinearFamily,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("CSV output failed: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, OdeError>;

/// A field `w ↦ (f̄(w), A(w))` with `A = ∂f̄` (or a representative
/// element at non-smooth points).
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, w: &Vector) -> (Vector, Matrix);

    fn fbar(&self, w: &Vector) -> Vector {
        self.eval(w).0
    }

    /// Label of the smooth piece containing `w`, used to flag steps that
    /// cross a policy switch.
    fn policy_signature(&self, _w: &Vector) -> Option<Vec<usize>> {
        None
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, w: &Vector) -> (Vector, Matrix) {
        (**self).eval(w)
    }
    fn fbar(&self, w: &Vector) -> Vector {
        (**self).fbar(w)
    }
    fn policy_signature(&self, w: &Vector) -> Option<Vec<usize>> {
        (**self).policy_signature(w)
    }
}

/// The exact mean field of an MDP/family/policy triple.
#[derive(Debug, Clone)]
pub struct MeanFieldFlow<'a> {
    pub mf: MeanField<'a>,
}

impl<'a> MeanFieldFlow<'a> {
    pub fn new(mf: MeanField<'a>) -> Self {
        MeanFieldFlow { mf }
    }
}

impl VectorField for MeanFieldFlow<'_> {
    fn dim(&self) -> usize {
        self.mf.family().dim()
    }
    fn eval(&self, w: &Vector) -> (Vector, Matrix) {
        (self.mf.fbar(w), self.mf.fbar_jacobian(w))
    }
    fn fbar(&self, w: &Vector) -> Vector {
        self.mf.fbar(w)
    }
    fn policy_signature(&self, w: &Vector) -> Option<Vec<usize>> {
        Some(self.mf.family().greedy_policy(w))
    }
}

/// A field supplied as a closure.
pub struct UserField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Vector) -> (Vector, Matrix)> UserField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        UserField { dim, f }
    }
}

impl<F: Fn(&Vector) -> (Vector, Matrix)> VectorField for UserField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, w: &Vector) -> (Vector, Matrix) {
        (self.f)(w)
    }
}

/// Reward-free field `f̄∞(θ) = lim m^{-1} f̄(mθ)` of a linear family.
#[derive(Debug, Clone)]
pub struct FieldAtInfinity<'a> {
    mf: MeanField<'a>,
}

pub fn field_at_infinity(mf: MeanField<'_>) -> Result<FieldAtInfinity<'_>> {
    if !mf.family().is_linear() {
        return Err(OdeError::NotLinearFamily);
    }
    Ok(FieldAtInfinity { mf })
}

impl VectorField for FieldAtInfinity<'_> {
    fn dim(&self) -> usize {
        self.mf.family().dim()
    }
    fn eval(&self, w: &Vector) -> (Vector, Matrix) {
        (self.fbar(w), self.mf.fbar_jacobian(w))
    }
    fn fbar(&self, w: &Vector) -> Vector {
        match self.mf.fbar_at_infinity(w) {
            Ok(v) => v,
            Err(AnalysisError::NotLinearFamily) => unreachable!("checked at construction"),
            Err(e) => panic!("{e}"),
        }
    }
    fn policy_signature(&self, w: &Vector) -> Option<Vec<usize>> {
        Some(self.mf.family().greedy_policy(w))
    }
}

/// Integration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    /// Abort once `‖w‖` exceeds this bound.
    pub blowup_bound: f64,
    /// Newton-Raphson flow aborts when `cond(A)` exceeds this.
    pub condition_limit: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { blowup_bound: 1e8, condition_limit: 1e12 }
    }
}

/// Sampled trajectory of a flow.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub f_norms: Vec<f64>,
    /// `V = ½‖f̄‖²`.
    pub lyapunov: Vec<f64>,
    /// Whether the policy signature changed over the step ending here.
    pub switch_flags: Vec<bool>,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trace holds the initial state")
    }

    pub fn final_f_norm(&self) -> f64 {
        *self.f_norms.last().expect("trace holds the initial state")
    }

    /// Largest one-step increase of `‖f̄‖` (negative if strictly
    /// decreasing throughout).
    pub fn max_norm_increase(&self) -> f64 {
        self.f_norms.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest one-step increase of `V`.
    pub fn max_lyapunov_increase(&self) -> f64 {
        self.lyapunov.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_t |‖f̄(w_t)‖ − ‖f̄(w_0)‖ e^{-t}|`.
    pub fn exponential_law_deviation(&self) -> f64 {
        let f0 = self.f_norms[0];
        self.times
            .iter()
            .zip(&self.f_norms)
            .map(|(t, f)| (f - f0 * (-t).exp()).abs())
            .fold(0.0, f64::max)
    }

    pub fn num_switches(&self) -> usize {
        self.switch_flags.iter().filter(|f| **f).count()
    }

    /// CSV with columns `t,w_1..w_d,f_norm,V,policy_switch_flag`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| OdeError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let d = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("w_{i}")));
        header.extend(["f_norm", "V", "policy_switch_flag"].map(String::from));
        w.write_record(&header).map_err(io)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.push(self.f_norms[k].to_string());
            row.push(self.lyapunov[k].to_string());
            row.push(u8::from(self.switch_flags[k]).to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| OdeError::Io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

fn check_args(vf: &dyn VectorField, w0: &Vector, t_final: f64, dt: f64) -> Result<usize> {
    if w0.len() != vf.dim() {
        return Err(OdeError::InvalidArgument(format!("w0 has length {}, field has dimension {}", w0.len(), vf.dim())));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(OdeError::InvalidArgument(format!("dt = {dt} must be positive")));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(OdeError::InvalidArgument(format!("T = {t_final} must be nonnegative")));
    }
    Ok((t_final / dt).round() as usize)
}

/// RK4 integration of `ẇ = rhs(w)` with `n` steps of size `dt`.
fn integrate(
    vf: &dyn VectorField,
    w0: &Vector,
    steps: usize,
    dt: f64,
    opts: &FlowOptions,
    rhs: &dyn Fn(&Vector, f64) -> Result<Vector>,
) -> Result<FlowTrace> {
    let mut trace = FlowTrace::default();
    let mut w = w0.clone();
    let mut signature = vf.policy_signature(&w);
    let push = |trace: &mut FlowTrace, t: f64, w: &Vector, switched: bool| {
        let f = vf.fbar(w).norm();
        trace.times.push(t);
        trace.states.push(w.clone());
        trace.f_norms.push(f);
        trace.lyapunov.push(0.5 * f * f);
        trace.switch_flags.push(switched);
    };
    push(&mut trace, 0.0, &w, false);
    for k in 0..steps {
        let t = k as f64 * dt;
        let k1 = rhs(&w, t)?;
        let k2 = rhs(&(&w + &k1 * (0.5 * dt)), t)?;
        let k3 = rhs(&(&w + &k2 * (0.5 * dt)), t)?;
        let k4 = rhs(&(&w + &k3 * dt), t)?;
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let t_next = (k + 1) as f64 * dt;
        let norm = w.norm();
        if !(norm <= opts.blowup_bound) {
            return Err(OdeError::Blowup { t: t_next, norm });
        }
        let next_signature = vf.policy_signature(&w);
        let switched = next_signature != signature;
        signature = next_signature;
        push(&mut trace, t_next, &w, switched);
    }
    Ok(trace)
}

/// `ẇ = −A(w)^T M f̄(w)`.
pub fn integrate_gradient_flow(
    vf: &dyn VectorField,
    m: &Matrix,
    w0: &Vector,
    t_final: f64,
    dt: f64,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    let steps = check_args(vf, w0, t_final, dt)?;
    if m.nrows() != vf.dim() || m.ncols() != vf.dim() {
        return Err(OdeError::InvalidArgument("M must be d x d".into()));
    }
    if linalg::asymmetry(m) > 1e-12 || m.clone().cholesky().is_none() {
        return Err(OdeError::InvalidArgument("M must be symmetric positive definite".into()));
    }
    let rhs = |w: &Vector, _t: f64| {
        let (f, a) = vf.eval(w);
        Ok(-(a.transpose() * (m * f)))
    };
    integrate(vf, w0, steps, dt, opts, &rhs)
}

/// Newton-Raphson flow `ẇ = −A(w)^{-1} f̄(w)`.
pub fn integrate_nr_flow(vf: &dyn VectorField, w0: &Vector, t_final: f64, dt: f64, opts: &FlowOptions) -> Result<FlowTrace> {
    let steps = check_args(vf, w0, t_final, dt)?;
    let limit = opts.condition_limit;
    let rhs = |w: &Vector, t: f64| {
        let (f, a) = vf.eval(w);
        let condition = linalg::condition_number(&a);
        if !(condition <= limit) {
            return Err(OdeError::SingularJacobian { t, condition });
        }
        let step = linalg::solve(&a, &f).map_err(|_| OdeError::SingularJacobian { t, condition })?;
        Ok(-step)
    };
    integrate(vf, w0, steps, dt, opts, &rhs)
}

/// Regularized flow `ẇ = −(εI + A^T A)^{-1} A^T f̄(w)`.
pub fn integrate_regularized_flow(
    vf: &dyn VectorField,
    eps: f64,
    w0: &Vector,
    t_final: f64,
    dt: f64,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    let steps = check_args(vf, w0, t_final, dt)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(OdeError::InvalidArgument(format!("eps = {eps} must be positive")));
    }
    let rhs = |w: &Vector, _t: f64| {
        let (f, a) = vf.eval(w);
        Ok(linalg::zap_gain(&a, eps) * f)
    };
    integrate(vf, w0, steps, dt, opts, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcapprox::QFamily;
    use crate::mdp::{fixtures, RandomizedPolicy};
    use approx::assert_abs_diff_eq;

    fn linear(a: Matrix, b: Vector) -> UserField<impl Fn(&Vector) -> (Vector, Matrix)> {
        let d = b.len();
        UserField::new(d, move |w: &Vector| (&b + &a * w, a.clone()))
    }

    fn scalar(f: impl Fn(f64) -> (f64, f64)) -> UserField<impl Fn(&Vector) -> (Vector, Matrix)> {
        UserField::new(1, move |w: &Vector| {
            let (v, d) = f(w[0]);
            (Vector::from_element(1, v), Matrix::from_element(1, 1, d))
        })
    }

    #[test]
    fn gradient_flow_on_linear_decay() {
        let vf = linear(-Matrix::identity(1, 1), Vector::zeros(1));
        let w0 = Vector::from_element(1, 2.0);
        let tr = integrate_gradient_flow(&vf, &Matrix::identity(1, 1), &w0, 1.0, 1e-3, &FlowOptions::default()).unwrap();
        assert_abs_diff_eq!(tr.final_state()[0], 2.0 * (-1.0f64).exp(), epsilon = 1e-12);
        assert!(tr.times.windows(2).all(|t| t[1] > t[0]));
    }

    #[test]
    fn root_is_stationary_for_all_flows() {
        let vf = linear(-Matrix::identity(2, 2), Vector::from_vec(vec![1.0, -2.0]));
        let root = Vector::from_vec(vec![1.0, -2.0]);
        let o = FlowOptions::default();
        for tr in [
            integrate_gradient_flow(&vf, &Matrix::identity(2, 2), &root, 1.0, 0.01, &o).unwrap(),
            integrate_nr_flow(&vf, &root, 1.0, 0.01, &o).unwrap(),
            integrate_regularized_flow(&vf, 1e-3, &root, 1.0, 0.01, &o).unwrap(),
        ] {
            assert!(tr.states.iter().all(|s| *s == root));
        }
    }

    #[test]
    fn nr_flow_scalar_identity() {
        let vf = scalar(|w| (w, 1.0));
        let tr = integrate_nr_flow(&vf, &Vector::from_element(1, 1.0), 5.0, 1e-3, &FlowOptions::default()).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert_abs_diff_eq!(s[0], (-t).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn nr_flow_cubic_root_solve() {
        let vf = scalar(|w| (w * w * w + w, 3.0 * w * w + 1.0));
        let w0 = 1.5f64;
        let f0 = w0.powi(3) + w0;
        let tr = integrate_nr_flow(&vf, &Vector::from_element(1, w0), 5.0, 1e-3, &FlowOptions::default()).unwrap();
        assert!(tr.exponential_law_deviation() <= 1e-6 * f0);
        // Recover w_t from the cubic w^3 + w = f0 e^{-t} by Newton's method.
        for (t, s) in tr.times.iter().zip(&tr.states).step_by(250) {
            let target = f0 * (-t).exp();
            let mut w = target;
            for _ in 0..60 {
                w -= (w * w * w + w - target) / (3.0 * w * w + 1.0);
            }
            assert_abs_diff_eq!(s[0], w, epsilon = 1e-8);
        }
    }

    #[test]
    fn nr_flow_detects_singular_jacobian() {
        let vf = scalar(|w| (w * w, 2.0 * w));
        let err = integrate_nr_flow(&vf, &Vector::from_element(1, 0.0), 1.0, 0.1, &FlowOptions::default());
        assert!(matches!(err, Err(OdeError::SingularJacobian { .. })));
    }

    #[test]
    fn regularized_scalar_closed_form() {
        let vf = scalar(|w| (w, 1.0));
        for eps in [0.5, 1e-2] {
            let tr = integrate_regularized_flow(&vf, eps, &Vector::from_element(1, 3.0), 2.0, 1e-3, &FlowOptions::default()).unwrap();
            for (t, s) in tr.times.iter().zip(&tr.states) {
                assert_abs_diff_eq!(s[0], 3.0 * (-t / (1.0 + eps)).exp(), epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn regularized_approaches_nr_as_eps_shrinks() {
        let a = Matrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.3, -1.0]);
        let vf = linear(a, Vector::from_vec(vec![1.0, 1.0]));
        let w0 = Vector::from_vec(vec![3.0, -1.0]);
        let o = FlowOptions::default();
        let nr = integrate_nr_flow(&vf, &w0, 3.0, 1e-2, &o).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4] {
            let rg = integrate_regularized_flow(&vf, eps, &w0, 3.0, 1e-2, &o).unwrap();
            let gap = nr.states.iter().zip(&rg.states).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
            assert!(gap <= 10.0 * eps * (1.0 + w0.amax()));
            assert!(gap < prev);
            prev = gap;
        }
    }

    #[test]
    fn blowup_reported() {
        let vf = scalar(|w| (w, -1.0));
        let o = FlowOptions { blowup_bound: 10.0, ..FlowOptions::default() };
        let err = integrate_nr_flow(&vf, &Vector::from_element(1, 1.0), 5.0, 1e-2, &o);
        assert!(matches!(err, Err(OdeError::Blowup { .. })));
    }

    #[test]
    fn rk4_order() {
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -0.5]);
        let vf = UserField::new(2, move |w: &Vector| {
            let f = &a * w + w.map(|v| 0.1 * v.sin());
            let j = &a + Matrix::from_diagonal(&w.map(|v| 0.1 * v.cos()));
            (f, j)
        });
        let w0 = Vector::from_vec(vec![1.0, 0.5]);
        let m = Matrix::identity(2, 2);
        let o = FlowOptions::default();
        let run = |dt| integrate_gradient_flow(&vf, &m, &w0, 1.0, dt, &o).unwrap().final_state().clone();
        let (c, f, ff) = (run(0.1), run(0.05), run(0.025));
        let ratio = (&c - &f).norm() / (&f - &ff).norm();
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn field_at_infinity_properties() {
        let mdp = fixtures::random_mdp(31, 3, 2, 0.9);
        let fam = QFamily::tabular(3, 2);
        let pol = RandomizedPolicy::uniform(3, 2);
        let inf = field_at_infinity(MeanField::new(&mdp, &fam, &pol).unwrap()).unwrap();
        assert_eq!(inf.fbar(&Vector::zeros(6)), Vector::zeros(6));

        let zero_r = crate::mdp::FiniteMdp::new(mdp.kernels().to_vec(), Matrix::zeros(3, 2), 0.9).unwrap();
        let mf0 = MeanField::new(&zero_r, &fam, &pol).unwrap();
        let inf0 = field_at_infinity(mf0.clone()).unwrap();
        let theta = Vector::from_fn(6, |i, _| (i as f64).cos());
        assert_abs_diff_eq!(inf0.fbar(&theta), mf0.fbar(&theta), epsilon = 1e-14);

        let net = QFamily::mlp(3, 2, vec![2]);
        assert!(matches!(field_at_infinity(MeanField::new(&mdp, &net, &pol).unwrap()), Err(OdeError::NotLinearFamily)));
    }

    #[test]
    fn csv_layout() {
        let vf = linear(-Matrix::identity(2, 2), Vector::zeros(2));
        let tr = integrate_nr_flow(&vf, &Vector::from_vec(vec![1.0, 2.0]), 0.02, 0.01, &FlowOptions::default()).unwrap();
        let csv = tr.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,w_1,w_2,f_norm,V,policy_switch_flag"));
        assert_eq!(csv.lines().count(), 4);
        assert!(lines.next().unwrap().starts_with("0,1,2,"));
    }

    #[test]
    fn mean_field_flow_flags_switches() {
        let mdp = fixtures::six_state(0.9);
        let fam = QFamily::tabular(6, 2);
        let pol = RandomizedPolicy::uniform(6, 2);
        let vf = MeanFieldFlow::new(MeanField::new(&mdp, &fam, &pol).unwrap());
        let tr = integrate_regularized_flow(&vf, 1e-6, &Vector::zeros(12), 10.0, 1e-2, &FlowOptions::default()).unwrap();
        assert!(tr.max_norm_increase() <= 1e-8);
        assert!(tr.final_f_norm() <= 1e-3 * tr.f_norms[0]);
        assert_eq!(tr.switch_flags.len(), tr.len());
    }
}
