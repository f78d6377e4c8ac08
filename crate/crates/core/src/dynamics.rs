//! Gradient flow `dω/dt = −g(ω)` and linear stability of its equilibria.
//!
//! The flow Jacobian at a point is `−H`, so for a symmetric Hessian its
//! eigenvalues are the negated Hessian eigenvalues. An equilibrium is
//! classified stable when every eigenvalue of `−H` lies below `−tol`,
//! unstable when any lies above `+tol`, and marginal otherwise, with
//! `tol = 1e-6·max(1, max|λ(H)|)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Objective;
use crate::error::{Error, Result};
use crate::estimators::{assemble_hessian, OracleGuard};
use crate::params::FlatVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

impl std::str::FromStr for Integrator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            other => Err(format!("unknown integrator '{other}' (euler | rk4)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub params: FlatVector,
    /// Flow time; equals the summed learning rates of the matching descent run.
    pub time: f64,
    pub grad_norm: f64,
}

impl FlowState {
    pub fn at<O: Objective + ?Sized>(obj: &O, params: FlatVector) -> Result<Self> {
        let g = obj.gradient(&params)?;
        Ok(Self { grad_norm: g.norm(), params, time: 0.0 })
    }
}

fn checked_gradient<O: Objective + ?Sized>(obj: &O, params: &FlatVector, time: f64) -> Result<FlatVector> {
    let non_finite = || Error::NonFiniteFlow(Box::new(FlowState { params: params.clone(), time, grad_norm: f64::NAN }));
    let g = obj.gradient(params).map_err(|e| match e {
        Error::NonFinite { .. } => non_finite(),
        other => other,
    })?;
    if !g.is_finite() {
        return Err(non_finite());
    }
    Ok(g)
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> FlatVector {
    FlatVector(x.iter().zip(d).map(|(x, d)| x - a * d).collect())
}

/// Advance `params` by `dt` given the gradient already evaluated there.
fn advance<O: Objective + ?Sized>(obj: &O, params: &FlatVector, g0: &FlatVector, time: f64, dt: f64, method: Integrator) -> Result<FlatVector> {
    match method {
        Integrator::Euler => Ok(axpy(params, dt, g0)),
        Integrator::Rk4 => {
            let g1 = g0;
            let g2 = checked_gradient(obj, &axpy(params, 0.5 * dt, g1), time + 0.5 * dt)?;
            let g3 = checked_gradient(obj, &axpy(params, 0.5 * dt, &g2), time + 0.5 * dt)?;
            let g4 = checked_gradient(obj, &axpy(params, dt, &g3), time + dt)?;
            Ok(FlatVector(
                params
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w - dt / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]))
                    .collect(),
            ))
        }
    }
}

/// One integration step. With [`Integrator::Euler`] this is exactly one
/// gradient-descent update with learning rate `dt`.
pub fn flow_step<O: Objective + ?Sized>(obj: &O, state: &FlowState, dt: f64, method: Integrator) -> Result<FlowState> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Precondition(format!("dt must be > 0, got {dt}")));
    }
    let g = checked_gradient(obj, &state.params, state.time)?;
    let params = advance(obj, &state.params, &g, state.time, dt, method)?;
    let time = state.time + dt;
    let g_new = checked_gradient(obj, &params, time)?;
    Ok(FlowState { grad_norm: g_new.norm(), params, time })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient norm fell below the equilibrium tolerance.
    Converged,
    /// Parameter norm exceeded the escape radius.
    Escaped,
    /// A gradient or parameter became non-finite.
    Diverged,
    /// Reached `t_end`.
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub t_end: f64,
    pub dt: f64,
    pub method: Integrator,
    /// Keep every `stride`-th state (first and last are always kept).
    pub stride: usize,
    pub equilibrium_tol: f64,
    pub escape_radius: f64,
}

impl FlowOptions {
    pub fn new(t_end: f64, dt: f64, method: Integrator) -> Self {
        Self { t_end, dt, method, stride: 10, equilibrium_tol: 1e-10, escape_radius: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    pub stop: StopReason,
    pub steps: usize,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

pub fn simulate_flow<O: Objective + ?Sized>(obj: &O, init: FlatVector, opts: &FlowOptions) -> Result<Trajectory> {
    if !(opts.t_end > 0.0 && opts.dt > 0.0) {
        return Err(Error::Precondition("t_end and dt must be > 0".into()));
    }
    let stride = opts.stride.max(1);
    let mut g = checked_gradient(obj, &init, 0.0)?;
    let mut state = FlowState { grad_norm: g.norm(), params: init, time: 0.0 };
    let mut states = vec![state.clone()];
    let n_steps = (opts.t_end / opts.dt - 1e-9).ceil().max(1.0) as usize;
    let mut stop = StopReason::Completed;
    let mut steps = 0;

    for k in 1..=n_steps {
        if state.grad_norm < opts.equilibrium_tol {
            stop = StopReason::Converged;
            break;
        }
        // Full steps use `dt` exactly; only a genuinely short final step differs.
        let h = if k < n_steps {
            opts.dt
        } else {
            let rem = opts.t_end - (n_steps - 1) as f64 * opts.dt;
            if (rem - opts.dt).abs() <= 1e-9 * opts.dt { opts.dt } else { rem.clamp(f64::MIN_POSITIVE, opts.dt) }
        };
        let next = advance(obj, &state.params, &g, state.time, h, opts.method).and_then(|p| {
            let t = state.time + h;
            checked_gradient(obj, &p, t).map(|g| (p, g, t))
        });
        let (params, g_next, time) = match next {
            Ok(v) => v,
            Err(Error::NonFiniteFlow(_)) => {
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        steps = k;
        if !params.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        g = g_next;
        state = FlowState { grad_norm: g.norm(), params, time };
        let escaped = state.params.norm() > opts.escape_radius;
        if k % stride == 0 || k == n_steps || escaped {
            states.push(state.clone());
        }
        if escaped {
            stop = StopReason::Escaped;
            break;
        }
    }
    if stop == StopReason::Converged && states.last().map(|s| s.time) != Some(state.time) {
        states.push(state);
    }
    Ok(Trajectory { states, stop, steps })
}

/// `(‖g‖₂ < tol, ‖g‖₂)`.
pub fn equilibrium_check<O: Objective + ?Sized>(obj: &O, params: &[f64], tol: f64) -> Result<(bool, f64)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Precondition(format!("tolerance must be > 0, got {tol}")));
    }
    let norm = obj.gradient(params)?.norm();
    Ok((norm < tol, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Stable,
    Unstable,
    Marginal,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stable => "stable",
            Self::Unstable => "unstable",
            Self::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Real parts of the eigenvalues of `J = −H`, ascending.
    pub eigenvalues_real: Vec<f64>,
    pub eigenvalues_imag: Vec<f64>,
    pub grad_norm: f64,
    pub classification: Classification,
    /// `tr(H)`.
    pub flatness: f64,
    /// Largest `|λ(H)|`.
    pub max_abs_eig: f64,
}

pub fn classify(jacobian_real: &[f64], max_abs_eig: f64) -> Classification {
    let tol = 1e-6 * max_abs_eig.max(1.0);
    if jacobian_real.iter().any(|&l| l > tol) {
        Classification::Unstable
    } else if jacobian_real.iter().all(|&l| l < -tol) {
        Classification::Stable
    } else {
        Classification::Marginal
    }
}

/// Assemble `H` from basis HVPs, symmetrize, and classify the equilibrium.
pub fn stability_report<O: Objective + ?Sized>(obj: &O, params: &[f64], guard: OracleGuard) -> Result<StabilityReport> {
    let h = assemble_hessian(obj, params, guard)?;
    let n = h.nrows();
    let sym = DMatrix::from_fn(n, n, |r, c| 0.5 * (h[[r, c]] + h[[c, r]]));
    let flatness: f64 = (0..n).map(|i| sym[(i, i)]).sum();
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut jac: Vec<f64> = eig.eigenvalues.iter().map(|l| -l).collect();
    jac.sort_by(f64::total_cmp);
    let max_abs_eig = jac.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let grad_norm = obj.gradient(params)?.norm();
    Ok(StabilityReport {
        eigenvalues_imag: vec![0.0; jac.len()],
        classification: classify(&jac, max_abs_eig),
        eigenvalues_real: jac,
        grad_norm,
        flatness,
        max_abs_eig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{Constant, Quadratic};

    #[test]
    fn euler_step_on_scalar_quadratic() {
        let q = Quadratic::diagonal(&[1.0]);
        let s = FlowState::at(&q, FlatVector(vec![1.0])).unwrap();
        let next = flow_step(&q, &s, 0.1, Integrator::Euler).unwrap();
        assert!((next.params[0] - 0.9).abs() < 1e-15);
        assert!((next.time - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let q = Quadratic::diagonal(&[1.0]);
        let traj = simulate_flow(&q, FlatVector(vec![1.0]), &FlowOptions::new(1.0, 0.01, Integrator::Rk4)).unwrap();
        assert_eq!(traj.stop, StopReason::Completed);
        assert!((traj.last().params[0] - (-1f64).exp()).abs() < 1e-6);
        assert!((traj.last().time - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_stationary() {
        let c = Constant::new(2.0, 3);
        let s = FlowState::at(&c, FlatVector(vec![0.1, 0.2, 0.3])).unwrap();
        let next = flow_step(&c, &s, 0.5, Integrator::Rk4).unwrap();
        assert_eq!(next.params, s.params);
    }

    #[test]
    fn non_positive_dt_is_rejected() {
        let q = Quadratic::diagonal(&[1.0]);
        let s = FlowState::at(&q, FlatVector(vec![1.0])).unwrap();
        assert!(matches!(flow_step(&q, &s, 0.0, Integrator::Euler), Err(Error::Precondition(_))));
    }

    #[test]
    fn bowl_gradient_norm_never_increases() {
        let q = Quadratic::diagonal(&[2.0, 3.0]);
        let mut opts = FlowOptions::new(3.0, 0.01, Integrator::Euler);
        opts.stride = 1;
        let traj = simulate_flow(&q, FlatVector(vec![1.0, -2.0]), &opts).unwrap();
        for w in traj.states.windows(2) {
            assert!(w[1].grad_norm <= w[0].grad_norm);
        }
    }

    #[test]
    fn saddle_stable_manifold_converges() {
        let q = Quadratic::saddle();
        let mut opts = FlowOptions::new(100.0, 0.05, Integrator::Rk4);
        opts.equilibrium_tol = 1e-8;
        let traj = simulate_flow(&q, FlatVector(vec![1.0, 0.0]), &opts).unwrap();
        assert_eq!(traj.stop, StopReason::Converged);
        assert!(traj.last().params.norm() < 1e-8);
    }

    #[test]
    fn saddle_unstable_direction_escapes() {
        let q = Quadratic::saddle();
        let mut opts = FlowOptions::new(50.0, 0.01, Integrator::Rk4);
        opts.escape_radius = 10.0;
        let traj = simulate_flow(&q, FlatVector(vec![1.0, 1e-3]), &opts).unwrap();
        assert_eq!(traj.stop, StopReason::Escaped);
        let end = traj.last();
        assert!(end.params[1].abs() > 10.0 - 1e-9);
        // ω₂(t) = ω₂(0)·eᵗ
        let expected = 1e-3 * end.time.exp();
        assert!((end.params[1] - expected).abs() / expected < 1e-6);
    }

    #[test]
    fn equilibrium_fixtures() {
        let q = Quadratic::diagonal(&[2.0, 3.0]);
        assert_eq!(equilibrium_check(&q, &[0.0, 0.0], 1e-9).unwrap(), (true, 0.0));
        assert!(!equilibrium_check(&q, &[1.0, 0.0], 1e-3).unwrap().0);
        assert!(equilibrium_check(&q, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn stability_of_fixtures() {
        let bowl = stability_report(&Quadratic::diagonal(&[2.0, 3.0]), &[0.0, 0.0], OracleGuard::default()).unwrap();
        assert_eq!(bowl.eigenvalues_real, vec![-3.0, -2.0]);
        assert_eq!(bowl.classification, Classification::Stable);
        assert_eq!(bowl.flatness, 5.0);
        assert_eq!(bowl.max_abs_eig, 3.0);

        let saddle = stability_report(&Quadratic::saddle(), &[0.0, 0.0], OracleGuard::default()).unwrap();
        assert_eq!(saddle.eigenvalues_real, vec![-1.0, 1.0]);
        assert_eq!(saddle.classification, Classification::Unstable);
        assert_eq!(saddle.flatness, 0.0);

        let flat = stability_report(&Quadratic::diagonal(&[1.0, 0.0]), &[0.0, 0.0], OracleGuard::default()).unwrap();
        assert_eq!(flat.classification, Classification::Marginal);
    }

    #[test]
    fn report_serializes_with_documented_keys() {
        let r = stability_report(&Quadratic::diagonal(&[2.0, 3.0]), &[0.0, 0.0], OracleGuard::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["classification", "eigenvalues_imag", "eigenvalues_real", "flatness", "grad_norm", "max_abs_eig"]);
        assert_eq!(v["classification"], "stable");
    }

    #[test]
    fn size_guard_refuses() {
        let guard = OracleGuard { limit: 1, override_limit: false };
        assert!(matches!(stability_report(&Quadratic::diagonal(&[2.0, 3.0]), &[0.0, 0.0], guard), Err(Error::SizeGuard { .. })));
    }
}
