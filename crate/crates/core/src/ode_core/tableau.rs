//! Dormand–Prince 5(4) coefficients with the 4th-order continuous extension.

pub const STAGES: usize = 7;

pub const C: [f64; STAGES] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

pub const A: [[f64; STAGES]; STAGES] = [
    [0.0; STAGES],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0],
];

/// 5th-order weights (propagated solution).
pub const B: [f64; STAGES] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

/// Embedded 4th-order weights.
pub const B_HAT: [f64; STAGES] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Dense-output correction weights (Hairer's `d` coefficients).
pub const D: [f64; STAGES] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Weights `β(θ)` with `y(t0 + θh) = y0 + h Σ β_i(θ) k_i`.
///
/// Expanded from `y0 + θ(r2 + (1-θ)(r3 + θ(r4 + (1-θ) r5)))` with
/// `r2 = hΣb k`, `r3 = h k1 - r2`, `r4 = r2 - h k7 - r3`, `r5 = hΣd k`.
pub fn dense_weights(theta: f64) -> [f64; STAGES] {
    let s = 1.0 - theta;
    let mut w = [0.0; STAGES];
    for i in 0..STAGES {
        let e1 = if i == 0 { 1.0 } else { 0.0 };
        let e7 = if i == 6 { 1.0 } else { 0.0 };
        let r3 = e1 - B[i];
        let r4 = 2.0 * B[i] - e1 - e7;
        w[i] = theta * (B[i] + s * (r3 + theta * (r4 + s * D[i])));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_nodes() {
        for i in 0..STAGES {
            let s: f64 = A[i].iter().sum();
            assert!((s - C[i]).abs() < 1e-14, "row {i}");
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((B_HAT.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dense_weights_hit_the_endpoints() {
        assert_eq!(dense_weights(0.0), [0.0; STAGES]);
        for (w, b) in dense_weights(1.0).iter().zip(B) {
            assert!((w - b).abs() < 1e-15);
        }
    }
}
