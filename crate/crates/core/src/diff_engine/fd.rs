use super::params::ParameterSet;
use super::program::Program;
use super::EngineError;

/// Central-difference gradient of `⟨cotangent, f(params, input)⟩` with
/// respect to every parameter scalar and every input coordinate.
///
/// Test oracle only: costs two program evaluations per coordinate.
pub fn finite_difference_gradient(
    program: &Program,
    params: &ParameterSet,
    input: &[f64],
    cotangent: &[f64],
    step: f64,
) -> Result<(ParameterSet, Vec<f64>), EngineError> {
    if step <= 0.0 {
        return Err(EngineError::Unsupported(format!("finite-difference step must be positive, got {step}")));
    }
    let scalar = |p: &ParameterSet, x: &[f64]| -> Result<f64, EngineError> {
        let y = program.evaluate(p, x)?;
        Ok(y.iter().zip(cotangent).map(|(a, b)| a * b).sum())
    };

    let mut work = params.clone();
    let mut grads = params.zeros_like();
    for k in 0..params.len() {
        let orig = work.data()[k];
        work.data_mut()[k] = orig + step;
        let up = scalar(&work, input)?;
        work.data_mut()[k] = orig - step;
        let down = scalar(&work, input)?;
        work.data_mut()[k] = orig;
        grads.data_mut()[k] = (up - down) / (2.0 * step);
    }

    let mut x = input.to_vec();
    let mut gx = vec![0.0; input.len()];
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let up = scalar(params, &x)?;
        x[k] = orig - step;
        let down = scalar(params, &x)?;
        x[k] = orig;
        gx[k] = (up - down) / (2.0 * step);
    }
    Ok((grads, gx))
}

/// Largest relative error between two gradient vectors, measured against
/// `max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Normwise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
