//! Adaptive Dormand–Prince solving, dense output, adjoint gradients and the
//! higher-derivative smoothness penalty.

mod adjoint;
mod dynamics;
mod solver;
mod tableau;

pub use adjoint::{adjoint_gradient, discrete_gradient, solution_gradient, GradientMode, OdeGradient};
pub(crate) use adjoint::accumulate_gradient;
pub use dynamics::{DynamicsSpec, MAX_TAYLOR_ORDER};
pub use solver::{integrate_fixed, solver_call_count, Propagation, Step};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_engine::{EngineError, ParameterSet};

/// Intervals longer than this are split into [`SUB_SPAN`] pieces.
pub const LONG_INTERVAL: f64 = 260.0;
pub const SUB_SPAN: f64 = 52.0;

const GAUSS_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("solver diverged after {steps} steps at t={t}")]
    Divergence { steps: usize, t: f64, state: Vec<f64> },
    #[error("non-finite state at t={t}")]
    NonFinite { t: f64 },
    #[error("invalid interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("time {t} outside [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("derivative order {0} outside 1..=3")]
    InvalidOrder(usize),
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// First trial step; `0` picks one automatically.
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-4, max_steps: 10_000, initial_step: 0.0 }
    }
}

impl SolverConfig {
    pub const ORDER: usize = 4;

    pub fn tight() -> Self {
        Self { rtol: 1e-6, atol: 1e-8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(OdeError::Config("rtol and atol must be positive".into()));
        }
        if self.max_steps < 1 {
            return Err(OdeError::Config("max_steps must be at least 1".into()));
        }
        if !(self.initial_step >= 0.0) {
            return Err(OdeError::Config("initial_step must be non-negative".into()));
        }
        Ok(())
    }
}

/// A piece of the interval integrated with its own step controller.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub end_state: Vec<f64>,
    pub steps: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
pub struct TrajectorySolution {
    pub t0: f64,
    pub t1: f64,
    pub h0: Vec<f64>,
    pub final_state: Vec<f64>,
    pub steps: Vec<Step>,
    pub segments: Vec<Segment>,
    /// `(order, ∫‖d^K h/dt^K‖² dt)` when requested.
    pub penalty: Option<(usize, f64)>,
}

impl TrajectorySolution {
    /// Accepted mesh including both endpoints (just `[t0]` for an empty interval).
    pub fn mesh(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.steps.len() + 1);
        m.push(self.t0);
        m.extend(self.steps.iter().map(|s| s.t_end()));
        m
    }

    pub fn penalty_value(&self) -> f64 {
        self.penalty.map_or(0.0, |p| p.1)
    }
}

fn segment_bounds(t0: f64, t1: f64) -> Vec<(f64, f64)> {
    if t1 - t0 <= LONG_INTERVAL {
        return vec![(t0, t1)];
    }
    let mut out = Vec::new();
    let mut a = t0;
    while t1 - a > SUB_SPAN {
        out.push((a, a + SUB_SPAN));
        a += SUB_SPAN;
    }
    out.push((a, t1));
    out
}

/// Solves `dh/dt = f(h)` from `t0` to `t1`, optionally accumulating the
/// order-`penalty_order` smoothness integral.
pub fn ivp_solve(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    h0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    penalty_order: Option<usize>,
) -> Result<TrajectorySolution, OdeError> {
    cfg.validate()?;
    if h0.len() != dynamics.dim() {
        return Err(OdeError::Shape(format!("initial state has {} values, dynamics expects {}", h0.len(), dynamics.dim())));
    }
    if !(t1 >= t0) {
        return Err(OdeError::InvalidInterval { t0, t1 });
    }
    if let Some(k) = penalty_order {
        dynamics::check_order(k)?;
    }
    let mut steps = Vec::new();
    let mut segments = Vec::new();
    let mut y = h0.to_vec();
    if t1 > t0 {
        for (a, b) in segment_bounds(t0, t1) {
            let raw = solver::integrate(
                |_, x, out| dynamics.eval_field(params, x, out),
                &y,
                a,
                b,
                cfg,
                true,
            )?;
            let start = steps.len();
            steps.extend(raw.steps);
            y = raw.final_state;
            segments.push(Segment { t0: a, t1: b, end_state: y.clone(), steps: start..steps.len() });
        }
    }
    let mut sol = TrajectorySolution { t0, t1, h0: h0.to_vec(), final_state: y, steps, segments, penalty: None };
    if let Some(k) = penalty_order {
        let r = regularization_integral(dynamics, params, &sol, k)?;
        sol.penalty = Some((k, r));
    }
    Ok(sol)
}

/// Dense-output samples; exact stored states at mesh nodes.
pub fn dense_sample(solution: &TrajectorySolution, times: &[f64]) -> Result<Vec<Vec<f64>>, OdeError> {
    times.iter().map(|&t| dense_at(solution, t)).collect()
}

pub fn dense_at(sol: &TrajectorySolution, t: f64) -> Result<Vec<f64>, OdeError> {
    if !(t >= sol.t0 && t <= sol.t1) {
        return Err(OdeError::OutOfRange { t, t0: sol.t0, t1: sol.t1 });
    }
    if t == sol.t0 {
        return Ok(sol.h0.clone());
    }
    if t == sol.t1 {
        return Ok(sol.final_state.clone());
    }
    // First step whose end is >= t.
    let i = sol.steps.partition_point(|s| s.t_end() < t);
    let s = &sol.steps[i.min(sol.steps.len() - 1)];
    if t == s.t_end() {
        return Ok(s.y1.clone());
    }
    let theta = ((t - s.t) / s.h).clamp(0.0, 1.0);
    Ok(s.interpolate(theta))
}

/// `d^K h/dt^K` at state `h` by nested forward mode.
pub fn taylor_derivative(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    h: &[f64],
    order: usize,
) -> Result<Vec<f64>, OdeError> {
    let p = dynamics.taylor_program(order)?;
    Ok(p.evaluate(params, h)?)
}

/// `∫ ‖d^K h/dt^K‖² dt` by 3-point Gauss–Legendre on each accepted step.
pub fn regularization_integral(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    solution: &TrajectorySolution,
    order: usize,
) -> Result<f64, OdeError> {
    let prog = dynamics.penalty_program(order)?;
    let mut total = 0.0;
    for s in &solution.steps {
        let mut acc = 0.0;
        for (x, w) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
            let y = s.interpolate(0.5 * (1.0 + x));
            acc += w * prog.evaluate(params, &y)?[0];
        }
        total += 0.5 * s.h * acc;
    }
    Ok(total)
}

pub(crate) fn gauss_rule() -> impl Iterator<Item = (f64, f64)> {
    GAUSS_NODES.into_iter().map(|x| 0.5 * (1.0 + x)).zip(GAUSS_WEIGHTS)
}
