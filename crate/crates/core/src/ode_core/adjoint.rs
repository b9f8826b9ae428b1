//! Gradients of `L = Φ(h(t1)) + w ∫ ‖d^K h/dt^K‖² dt` with respect to the
//! dynamics parameters and the initial state.

use serde::{Deserialize, Serialize};

use crate::diff_engine::{ParamSubset, ParameterSet};

use super::solver::{integrate, Step};
use super::tableau::{dense_weights, A, B, STAGES};
use super::{gauss_rule, DynamicsSpec, OdeError, SolverConfig, TrajectorySolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Backward augmented IVP (state, adjoint, parameter accumulator).
    #[default]
    Adjoint,
    /// Exact reverse pass through the stored Runge–Kutta stages.
    Discrete,
}

#[derive(Debug, Clone)]
pub struct OdeGradient {
    pub params: ParameterSet,
    pub h0: Vec<f64>,
}

/// Adjoint-method gradient. `penalty` is `(order, weight)` of the running cost.
pub fn adjoint_gradient(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    solution: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
    cfg: &SolverConfig,
) -> Result<OdeGradient, OdeError> {
    solution_gradient(GradientMode::Adjoint, dynamics, params, solution, cotangent, penalty, cfg)
}

pub fn discrete_gradient(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    solution: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
) -> Result<OdeGradient, OdeError> {
    solution_gradient(
        GradientMode::Discrete,
        dynamics,
        params,
        solution,
        cotangent,
        penalty,
        &SolverConfig::default(),
    )
}

pub fn solution_gradient(
    mode: GradientMode,
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    solution: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
    cfg: &SolverConfig,
) -> Result<OdeGradient, OdeError> {
    let subset = ParamSubset::all(params);
    let mut grads = params.zeros_like();
    let h0 = accumulate_gradient(mode, dynamics, params, solution, cotangent, penalty, cfg, &subset, grads.data_mut())?;
    Ok(OdeGradient { params: grads, h0 })
}

/// Adds parameter gradients into `sink` (laid out by `subset`, which must
/// cover the dynamics parameters) and returns `∂L/∂h0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_gradient(
    mode: GradientMode,
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    solution: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
    cfg: &SolverConfig,
    subset: &ParamSubset,
    sink: &mut [f64],
) -> Result<Vec<f64>, OdeError> {
    let d = dynamics.dim();
    if cotangent.len() != d {
        return Err(OdeError::Shape(format!("cotangent has {} values, state has {d}", cotangent.len())));
    }
    let penalty = match penalty {
        Some((k, w)) if w != 0.0 => {
            super::dynamics::check_order(k)?;
            Some((k, w))
        }
        _ => None,
    };
    let dsub = dynamics.param_subset(params);
    let mut g = vec![0.0; dsub.len()];
    let h0 = match mode {
        GradientMode::Adjoint => adjoint_pass(dynamics, params, solution, cotangent, penalty, cfg, &dsub, &mut g)?,
        GradientMode::Discrete => discrete_pass(dynamics, params, solution, cotangent, penalty, &dsub, &mut g)?,
    };
    for &id in dsub.ids() {
        let src = dsub.offset_of(id).expect("own id");
        let dst = subset
            .offset_of(id)
            .ok_or_else(|| OdeError::Shape(format!("gradient sink lacks parameter {}", params.entry(id).name)))?;
        let n = params.entry(id).len;
        for (s, v) in sink[dst..dst + n].iter_mut().zip(&g[src..src + n]) {
            *s += v;
        }
    }
    Ok(h0)
}

#[allow(clippy::too_many_arguments)]
fn adjoint_pass(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    sol: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
    cfg: &SolverConfig,
    dsub: &ParamSubset,
    g: &mut [f64],
) -> Result<Vec<f64>, OdeError> {
    let d = dynamics.dim();
    let p = dsub.len();
    let field = dynamics.field();
    let pen = match penalty {
        Some((k, w)) => Some((dynamics.penalty_program(k)?, w)),
        None => None,
    };
    let mut a = cotangent.to_vec();
    for seg in sol.segments.iter().rev() {
        let mut z = Vec::with_capacity(2 * d + p);
        z.extend_from_slice(&seg.end_state);
        z.extend_from_slice(&a);
        z.resize(2 * d + p, 0.0);
        let rhs = |_: f64, z: &[f64], dz: &mut [f64]| -> Result<(), OdeError> {
            let (h, adj) = z[..2 * d].split_at(d);
            let (dh, rest) = dz.split_at_mut(d);
            let (da, dg) = rest.split_at_mut(d);
            dg.fill(0.0);
            let (f, hbar) = field.vjp_accumulate(params, h, adj, dsub, dg)?;
            for (o, v) in dh.iter_mut().zip(&f) {
                *o = -v;
            }
            da.copy_from_slice(&hbar);
            if let Some((prog, w)) = pen {
                let (_, rbar) = prog.vjp_accumulate(params, h, &[w], dsub, dg)?;
                for (o, v) in da.iter_mut().zip(&rbar) {
                    *o += v;
                }
            }
            Ok(())
        };
        let raw = integrate(rhs, &z, 0.0, seg.t1 - seg.t0, cfg, false)?;
        let zf = raw.final_state;
        a.copy_from_slice(&zf[d..2 * d]);
        for (gi, v) in g.iter_mut().zip(&zf[2 * d..]) {
            *gi += v;
        }
    }
    Ok(a)
}

fn discrete_pass(
    dynamics: &DynamicsSpec,
    params: &ParameterSet,
    sol: &TrajectorySolution,
    cotangent: &[f64],
    penalty: Option<(usize, f64)>,
    dsub: &ParamSubset,
    g: &mut [f64],
) -> Result<Vec<f64>, OdeError> {
    let field = dynamics.field();
    let pen = match penalty {
        Some((k, w)) => Some((dynamics.penalty_program(k)?, w)),
        None => None,
    };
    let mut ybar = cotangent.to_vec();
    for step in sol.steps.iter().rev() {
        ybar = reverse_step(field, pen, params, step, &ybar, dsub, g)?;
    }
    Ok(ybar)
}

fn reverse_step(
    field: &crate::diff_engine::Program,
    pen: Option<(&crate::diff_engine::Program, f64)>,
    params: &ParameterSet,
    s: &Step,
    ybar1: &[f64],
    dsub: &ParamSubset,
    g: &mut [f64],
) -> Result<Vec<f64>, OdeError> {
    let n = ybar1.len();
    let h = s.h;
    let mut y0bar = ybar1.to_vec();
    let mut kbar: [Vec<f64>; STAGES] = std::array::from_fn(|i| ybar1.iter().map(|v| h * B[i] * v).collect());
    if let Some((prog, w)) = pen {
        for (theta, wq) in gauss_rule() {
            let y = s.interpolate(theta);
            let (_, gy) = prog.vjp_accumulate(params, &y, &[w * 0.5 * h * wq], dsub, g)?;
            let beta = dense_weights(theta);
            for (o, v) in y0bar.iter_mut().zip(&gy) {
                *o += v;
            }
            for i in 0..STAGES {
                if beta[i] != 0.0 {
                    for (o, v) in kbar[i].iter_mut().zip(&gy) {
                        *o += h * beta[i] * v;
                    }
                }
            }
        }
    }
    let mut yi = vec![0.0; n];
    for i in (0..STAGES).rev() {
        yi.copy_from_slice(&s.y0);
        for j in 0..i {
            let c = h * A[i][j];
            if c != 0.0 {
                for (y, kj) in yi.iter_mut().zip(&s.k[j]) {
                    *y += c * kj;
                }
            }
        }
        let kb = std::mem::take(&mut kbar[i]);
        let (_, gy) = field.vjp_accumulate(params, &yi, &kb, dsub, g)?;
        for (o, v) in y0bar.iter_mut().zip(&gy) {
            *o += v;
        }
        for j in 0..i {
            let c = h * A[i][j];
            if c != 0.0 {
                for (o, v) in kbar[j].iter_mut().zip(&gy) {
                    *o += c * v;
                }
            }
        }
    }
    Ok(y0bar)
}
