//! Generic Dormand–Prince 5(4) integrator over a closure right-hand side.

use std::cell::Cell;

use super::tableau::{dense_weights, A, B, B_HAT, C, STAGES};
use super::{OdeError, SolverConfig};

thread_local! {
    static SOLVER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of integrations started on this thread.
pub fn solver_call_count() -> u64 {
    SOLVER_CALLS.with(|c| c.get())
}

fn count_call() {
    SOLVER_CALLS.with(|c| c.set(c.get() + 1));
}

/// One accepted step with everything needed for dense output.
#[derive(Debug, Clone)]
pub struct Step {
    pub t: f64,
    pub h: f64,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub k: [Vec<f64>; STAGES],
}

impl Step {
    pub fn t_end(&self) -> f64 {
        self.t + self.h
    }

    /// Continuous extension at `theta ∈ [0, 1]`.
    pub fn interpolate(&self, theta: f64) -> Vec<f64> {
        if theta == 0.0 {
            return self.y0.clone();
        }
        if theta == 1.0 {
            return self.y1.clone();
        }
        let w = dense_weights(theta);
        let mut y = self.y0.clone();
        for (i, ki) in self.k.iter().enumerate() {
            let c = self.h * w[i];
            if c != 0.0 {
                for (yj, kj) in y.iter_mut().zip(ki) {
                    *yj += c * kj;
                }
            }
        }
        y
    }
}

pub(crate) struct RawSolution {
    pub steps: Vec<Step>,
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    Fifth,
    Fourth,
}

fn err_norm(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / err.len() as f64).sqrt()
}

fn rms_scaled(v: &[f64], y: &[f64], rtol: f64, atol: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(x, yi)| (x / (atol + rtol * yi.abs())).powi(2))
        .sum();
    (s / v.len() as f64).sqrt()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs stages 2..7 given `k[0] = f(t, y0)`; returns the 5th-order state.
fn stages<F>(rhs: &mut F, t: f64, h: f64, y0: &[f64], k: &mut [Vec<f64>; STAGES]) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let n = y0.len();
    let mut yi = vec![0.0; n];
    for i in 1..STAGES {
        yi.copy_from_slice(y0);
        for j in 0..i {
            let c = h * A[i][j];
            if c != 0.0 {
                for (y, kj) in yi.iter_mut().zip(&k[j]) {
                    *y += c * kj;
                }
            }
        }
        let (done, rest) = k.split_at_mut(i);
        let _ = done;
        rhs(t + C[i] * h, &yi, &mut rest[0])?;
    }
    // Stage 7 is evaluated at the 5th-order solution (FSAL).
    Ok(yi)
}

fn initial_step<F>(rhs: &mut F, t0: f64, y0: &[f64], f0: &[f64], span: f64, cfg: &SolverConfig) -> Result<f64, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let d0 = rms_scaled(y0, y0, cfg.rtol, cfg.atol);
    let d1 = rms_scaled(f0, y0, cfg.rtol, cfg.atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    rhs(t0 + h0, &y1, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, y0, cfg.rtol, cfg.atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Adaptive integration from `t0` to `t1 ≥ t0`, landing exactly on `t1`.
pub(crate) fn integrate<F>(
    mut rhs: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    keep_steps: bool,
) -> Result<RawSolution, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    count_call();
    if !(t1 >= t0) {
        return Err(OdeError::InvalidInterval { t0, t1 });
    }
    if !all_finite(y0) {
        return Err(OdeError::NonFinite { t: t0 });
    }
    let mut steps = Vec::new();
    if t1 == t0 {
        return Ok(RawSolution { steps, final_state: y0.to_vec() });
    }
    let n = y0.len();
    let span = t1 - t0;
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut f = vec![0.0; n];
    rhs(t, &y, &mut f)?;
    if !all_finite(&f) {
        return Err(OdeError::NonFinite { t });
    }
    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step.min(span)
    } else {
        initial_step(&mut rhs, t, &y, &f, span, cfg)?
    };
    let mut attempts = 0usize;
    let mut rejected_last = false;
    let mut err = vec![0.0; n];
    loop {
        if attempts >= cfg.max_steps {
            return Err(OdeError::Divergence { steps: attempts, t, state: y });
        }
        attempts += 1;
        let last = t + h >= t1 || (t1 - (t + h)) <= 1e-12 * span;
        let h_try = if last { t1 - t } else { h };
        if h_try <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(OdeError::Divergence { steps: attempts, t, state: y });
        }
        let mut k: [Vec<f64>; STAGES] = std::array::from_fn(|_| vec![0.0; n]);
        k[0].copy_from_slice(&f);
        let y_new = stages(&mut rhs, t, h_try, &y, &mut k)?;
        for (j, e) in err.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..STAGES {
                s += (B[i] - B_HAT[i]) * k[i][j];
            }
            *e = h_try * s;
        }
        let finite = all_finite(&y_new) && all_finite(&k[STAGES - 1]);
        let e = if finite { err_norm(&err, &y, &y_new, cfg.rtol, cfg.atol) } else { f64::INFINITY };
        if e <= 1.0 {
            let t_new = if last { t1 } else { t + h_try };
            let fac = if e == 0.0 { 10.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 10.0) };
            let fac = if rejected_last { fac.min(1.0) } else { fac };
            rejected_last = false;
            f.copy_from_slice(&k[STAGES - 1]);
            if keep_steps {
                steps.push(Step { t, h: h_try, y0: y.clone(), y1: y_new.clone(), k });
            }
            y = y_new;
            t = t_new;
            if last {
                return Ok(RawSolution { steps, final_state: y });
            }
            h = h_try * fac;
        } else {
            if !finite && !all_finite(&y) {
                return Err(OdeError::NonFinite { t });
            }
            rejected_last = true;
            let fac = if e.is_finite() { (0.9 * e.powf(-0.2)).clamp(0.2, 1.0) } else { 0.2 };
            h = h_try * fac;
        }
    }
}

/// Fixed-step integration with `n` equal steps.
pub fn integrate_fixed<F>(
    mut rhs: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    n: usize,
    propagation: Propagation,
) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    count_call();
    if n == 0 {
        return Ok(y0.to_vec());
    }
    let h = (t1 - t0) / n as f64;
    let dim = y0.len();
    let mut y = y0.to_vec();
    for s in 0..n {
        let t = t0 + s as f64 * h;
        let mut k: [Vec<f64>; STAGES] = std::array::from_fn(|_| vec![0.0; dim]);
        rhs(t, &y, &mut k[0])?;
        let y5 = stages(&mut rhs, t, h, &y, &mut k)?;
        y = match propagation {
            Propagation::Fifth => y5,
            Propagation::Fourth => {
                let mut y4 = y.clone();
                for (j, v) in y4.iter_mut().enumerate() {
                    for i in 0..STAGES {
                        *v += h * B_HAT[i] * k[i][j];
                    }
                }
                y4
            }
        };
        if !all_finite(&y) {
            return Err(OdeError::NonFinite { t: t + h });
        }
    }
    Ok(y)
}
