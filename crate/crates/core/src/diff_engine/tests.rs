use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn affine_identity_is_passthrough() {
    let mut p = ParameterSet::new();
    let w = p.add("w", Group::Other, &[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let bias = p.add_zeros("b", Group::Other, &[3]).unwrap();
    let mut b = ProgramBuilder::new(3);
    let (wn, bn) = (b.param(&p, w), b.param(&p, bias));
    let y = b.affine(wn, b.input(), Some(bn)).unwrap();
    let prog = b.finish(y);
    assert_eq!(prog.evaluate(&p, &[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let p = ParameterSet::new();
    let mut b = ProgramBuilder::new(5);
    let y = b.softmax(b.input());
    let prog = b.finish(y);
    for v in prog.evaluate(&p, &[3.0; 5]).unwrap() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn tanh_of_zero_is_zero() {
    let p = ParameterSet::new();
    let mut b = ProgramBuilder::new(4);
    let y = b.tanh(b.input());
    let prog = b.finish(y);
    assert_eq!(prog.evaluate(&p, &[0.0; 4]).unwrap(), vec![0.0; 4]);
}

#[test]
fn scalar_product_gradient_is_input() {
    let mut p = ParameterSet::new();
    let pid = p.add("p", Group::Other, &[1], vec![2.5]).unwrap();
    let mut b = ProgramBuilder::new(1);
    let pn = b.param(&p, pid);
    let y = b.mul(pn, b.input()).unwrap();
    let prog = b.finish(y);
    let (g, gx) = prog.gradient(&p, &[-1.75], &[1.0]).unwrap();
    assert_eq!(g.get(pid), &[-1.75]);
    assert_eq!(gx, vec![2.5]);
}

fn sum_tanh_wx(p: &mut ParameterSet, rng: &mut ChaCha8Rng, n: usize) -> Program {
    let w = p.add("w", Group::Dynamics, &[n, n], rand_vec(rng, n * n, 1.0)).unwrap();
    let mut b = ProgramBuilder::new(n);
    let wn = b.param(p, w);
    let z = b.affine(wn, b.input(), None).unwrap();
    let t = b.tanh(z);
    let s = b.sum(t);
    b.finish(s)
}

#[test]
fn sum_tanh_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParameterSet::new();
    let prog = sum_tanh_wx(&mut p, &mut rng, 4);
    let x = rand_vec(&mut rng, 4, 1.0);
    let (g, gx) = prog.gradient(&p, &x, &[1.0]).unwrap();
    let (fg, fgx) = finite_difference_gradient(&prog, &p, &x, &[1.0], 1e-6).unwrap();
    assert!(max_relative_error(g.data(), fg.data(), 1e-6) < 1e-6);
    assert!(max_relative_error(&gx, &fgx, 1e-6) < 1e-6);
}

#[test]
fn zero_cotangent_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParameterSet::new();
    let prog = sum_tanh_wx(&mut p, &mut rng, 3);
    let (g, gx) = prog.gradient(&p, &[0.1, 0.2, 0.3], &[0.0]).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
    assert!(gx.iter().all(|v| *v == 0.0));
}

fn linear(p: &mut ParameterSet, a: Vec<f64>, n: usize) -> Program {
    let w = p.add("a", Group::Dynamics, &[n, n], a).unwrap();
    let mut b = ProgramBuilder::new(n);
    let wn = b.param(p, w);
    let y = b.affine(wn, b.input(), None).unwrap();
    b.finish(y)
}

#[test]
fn jvp_of_linear_map_is_the_map() {
    let mut p = ParameterSet::new();
    let a = vec![1.0, 2.0, -1.0, 0.5];
    let prog = linear(&mut p, a, 2);
    let out = prog.jvp(&p, &[9.0, -3.0], &[1.0, 1.0]).unwrap();
    assert_eq!(out, vec![3.0, -0.5]);
    assert_eq!(prog.jvp(&p, &[9.0, -3.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn jvp_matches_central_difference_to_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParameterSet::new();
    let prog = mlp(&mut p, &mut rng, &[4, 5, 4, 3]);
    let x = rand_vec(&mut rng, 4, 1.0);
    let u = rand_vec(&mut rng, 4, 1.0);
    let exact = prog.jvp(&p, &x, &u).unwrap();
    let mut errs = Vec::new();
    for eps in [1e-2, 5e-3] {
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - eps * b).collect();
        let (fp, fm) = (prog.evaluate(&p, &xp).unwrap(), prog.evaluate(&p, &xm).unwrap());
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        errs.push(exact.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    // Halving ε should cut the error by about 4.
    assert!(errs[0] < 1e-3);
    assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
}

#[test]
fn finite_difference_of_half_squared_norm() {
    let p = ParameterSet::new();
    let mut b = ProgramBuilder::new(2);
    let x = b.input();
    let sq = b.dot(x, x).unwrap();
    let y = b.scale(sq, 0.5, 0.0);
    let prog = b.finish(y);
    let (_, g) = finite_difference_gradient(&prog, &p, &[1.0, 2.0], &[1.0], 1e-4).unwrap();
    assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
}

#[test]
fn finite_difference_of_constant_is_zero() {
    let p = ParameterSet::new();
    let mut b = ProgramBuilder::new(3);
    let c = b.constant(vec![4.0]);
    let prog = b.finish(c);
    let (_, g) = finite_difference_gradient(&prog, &p, &[1.0, 2.0, 3.0], &[1.0], 1e-6).unwrap();
    assert_eq!(g, vec![0.0; 3]);
}

#[test]
fn nonpositive_step_is_rejected() {
    let p = ParameterSet::new();
    let b = ProgramBuilder::new(1);
    let x = b.input();
    let prog = b.finish(x);
    assert!(finite_difference_gradient(&prog, &p, &[1.0], &[1.0], 0.0).is_err());
}

fn mlp(p: &mut ParameterSet, rng: &mut ChaCha8Rng, widths: &[usize]) -> Program {
    let mut b = ProgramBuilder::new(widths[0]);
    let mut h = b.input();
    for (k, win) in widths.windows(2).enumerate() {
        let w = p
            .add(format!("w{k}"), Group::Other, &[win[1], win[0]], rand_vec(rng, win[0] * win[1], 0.8))
            .unwrap();
        let bias = p.add(format!("b{k}"), Group::Other, &[win[1]], rand_vec(rng, win[1], 0.3)).unwrap();
        let (wn, bn) = (b.param(p, w), b.param(p, bias));
        let z = b.affine(wn, h, Some(bn)).unwrap();
        h = if k + 2 < widths.len() { b.tanh(z) } else { b.sigmoid(z) };
    }
    b.finish(h)
}

#[test]
fn three_layer_perceptron_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParameterSet::new();
    let prog = mlp(&mut p, &mut rng, &[5, 6, 6, 3]);
    let x = rand_vec(&mut rng, 5, 1.0);
    let cot = rand_vec(&mut rng, 3, 1.0);
    let (g, gx) = prog.gradient(&p, &x, &cot).unwrap();
    let (fg, fgx) = finite_difference_gradient(&prog, &p, &x, &cot, 1e-6).unwrap();
    assert!(relative_error(g.data(), fg.data()) < 1e-5);
    assert!(relative_error(&gx, &fgx) < 1e-5);
}

#[test]
fn log_at_zero_is_not_differentiable() {
    let p = ParameterSet::new();
    let mut b = ProgramBuilder::new(2);
    let y = b.log(b.input());
    let s = b.sum(y);
    let prog = b.finish(s);
    let err = prog.gradient(&p, &[1.0, 0.0], &[1.0]).unwrap_err();
    assert!(matches!(err, EngineError::NonDifferentiable { primitive: "log" }));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut p = ParameterSet::new();
    let w = p.add_zeros("w", Group::Other, &[2, 3]).unwrap();
    let mut b = ProgramBuilder::new(2);
    let wn = b.param(&p, w);
    let err = b.affine(wn, b.input(), None).unwrap_err();
    assert!(err.to_string().contains("affine"));

    let prog = {
        let b = ProgramBuilder::new(2);
        let x = b.input();
        b.finish(x)
    };
    let err = prog.evaluate(&p, &[1.0]).unwrap_err();
    assert!(err.to_string().contains("input"));

    let mut b = ProgramBuilder::new(3);
    let wn = b.param(&p, w);
    let y = b.affine(wn, b.input(), None).unwrap();
    let prog = b.finish(y);
    let mut other = ParameterSet::new();
    other.add_zeros("w", Group::Other, &[2, 2]).unwrap();
    let err = prog.evaluate(&other, &[1.0, 2.0, 3.0]).unwrap_err();
    assert!(err.to_string().contains("param"));
}

#[test]
fn nested_forward_mode_gives_higher_derivatives_of_tanh() {
    // f(x) = tanh(x); f'' = -2 t (1 - t^2), f''' = (6 t^2 - 2)(1 - t^2).
    let p = ParameterSet::new();
    let f = {
        let mut b = ProgramBuilder::new(1);
        let y = b.tanh(b.input());
        b.finish(y)
    };
    let mut b = ProgramBuilder::new(1);
    let x = b.input();
    let one = b.constant(vec![1.0]);
    let (_, d1) = b.inline_jvp(&f, x, Some(one)).unwrap();
    let d1 = d1.unwrap();
    let first = b.finish(d1);
    let mut b = ProgramBuilder::new(1);
    let x = b.input();
    let one = b.constant(vec![1.0]);
    let (_, d2) = b.inline_jvp(&first, x, Some(one)).unwrap();
    let second = b.finish(d2.unwrap());
    let mut b = ProgramBuilder::new(1);
    let x = b.input();
    let one = b.constant(vec![1.0]);
    let (_, d3) = b.inline_jvp(&second, x, Some(one)).unwrap();
    let third = b.finish(d3.unwrap());

    let x0 = 0.37_f64;
    let t = x0.tanh();
    let s = 1.0 - t * t;
    assert!((first.evaluate(&p, &[x0]).unwrap()[0] - s).abs() < 1e-15);
    assert!((second.evaluate(&p, &[x0]).unwrap()[0] + 2.0 * t * s).abs() < 1e-15);
    assert!((third.evaluate(&p, &[x0]).unwrap()[0] - (6.0 * t * t - 2.0) * s).abs() < 1e-14);
}

#[test]
fn injected_fault_breaks_tanh_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParameterSet::new();
    let prog = sum_tanh_wx(&mut p, &mut rng, 3);
    let x = [0.3, -0.2, 0.5];
    set_injected_fault(Some(InjectedFault::TanhReverseSign));
    let (g, _) = prog.gradient(&p, &x, &[1.0]).unwrap();
    set_injected_fault(None);
    let (fg, _) = finite_difference_gradient(&prog, &p, &x, &[1.0], 1e-6).unwrap();
    assert!(max_relative_error(g.data(), fg.data(), 1e-6) > 0.5);
}

/// Single-primitive programs over an input of length `n`, with strictly
/// positive arguments where the primitive needs them.
fn primitive_programs(p: &mut ParameterSet, rng: &mut ChaCha8Rng, n: usize) -> Vec<(&'static str, Program)> {
    let w = p.add("pw", Group::Other, &[n, n], rand_vec(rng, n * n, 1.0)).unwrap();
    let bias = p.add("pb", Group::Other, &[n], rand_vec(rng, n, 1.0)).unwrap();
    let c = p.add("pc", Group::Other, &[n], rand_vec(rng, n, 1.0)).unwrap();
    let mut out = Vec::new();
    let mut build = |name: &'static str, f: &dyn Fn(&mut ProgramBuilder, NodeId) -> NodeId| {
        let mut b = ProgramBuilder::new(n);
        let x = b.input();
        let y = f(&mut b, x);
        out.push((name, b.finish(y)));
    };
    build("affine", &|b, x| {
        let (wn, bn) = (b.param(p, w), b.param(p, bias));
        b.affine(wn, x, Some(bn)).unwrap()
    });
    build("add", &|b, x| {
        let cn = b.param(p, c);
        b.add(x, cn).unwrap()
    });
    build("sub", &|b, x| {
        let cn = b.param(p, c);
        b.sub(cn, x).unwrap()
    });
    build("mul", &|b, x| {
        let cn = b.param(p, c);
        b.mul(x, cn).unwrap()
    });
    build("mul_self", &|b, x| b.mul(x, x).unwrap());
    build("scale", &|b, x| b.scale(x, -1.7, 0.4));
    build("tanh", &|b, x| b.tanh(x));
    build("sigmoid", &|b, x| b.sigmoid(x));
    build("leaky_relu", &|b, x| b.leaky_relu(x, 0.01));
    build("exp", &|b, x| b.exp(x));
    build("log", &|b, x| {
        let e = b.exp(x);
        b.log(e)
    });
    build("recip", &|b, x| {
        let e = b.exp(x);
        b.recip(e)
    });
    build("softmax", &|b, x| b.softmax(x));
    build("concat_slice", &|b, x| {
        let head = b.slice(x, 0, 1).unwrap();
        b.concat(&[x, head]).unwrap()
    });
    build("sum_broadcast", &|b, x| {
        let s = b.sum(x);
        b.mul(s, x).unwrap()
    });
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_consistency_for_every_primitive(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let mut p = ParameterSet::new();
        for (name, prog) in primitive_programs(&mut p, &mut rng, n) {
            let x = rand_vec(&mut rng, n, 1.5);
            let u = rand_vec(&mut rng, n, 1.0);
            let cot = rand_vec(&mut rng, prog.output_dim(), 1.0);
            let (_, gx) = prog.gradient(&p, &x, &cot).unwrap();
            let ju = prog.jvp(&p, &x, &u).unwrap();
            let lhs = dot(&gx, &u);
            let rhs = dot(&cot, &ju);
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            prop_assert!((lhs - rhs).abs() / scale < 1e-10 || (lhs - rhs).abs() < 1e-14,
                "{name}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn jvp_is_linear_in_tangent(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let prog = mlp(&mut p, &mut rng, &[3, 4, 2]);
        let x = rand_vec(&mut rng, 3, 1.0);
        let u = rand_vec(&mut rng, 3, 1.0);
        let v = rand_vec(&mut rng, 3, 1.0);
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let (ju, jv, jw) = (prog.jvp(&p, &x, &u).unwrap(), prog.jvp(&p, &x, &v).unwrap(), prog.jvp(&p, &x, &w).unwrap());
        for k in 0..2 {
            let comb = alpha * ju[k] + beta * jv[k];
            prop_assert!((comb - jw[k]).abs() <= 1e-12 * (1.0 + comb.abs()));
        }
    }

    #[test]
    fn random_compositions_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prog, p, n) = random_composition(&mut rng);
        let x = rand_vec(&mut rng, n, 1.0);
        let cot = rand_vec(&mut rng, prog.output_dim(), 1.0);
        let (g, gx) = prog.gradient(&p, &x, &cot).unwrap();
        let (fg, fgx) = finite_difference_gradient(&prog, &p, &x, &cot, 1e-6).unwrap();
        prop_assert!(relative_error(g.data(), fg.data()) < 1e-5);
        prop_assert!(relative_error(&gx, &fgx) < 1e-5);
    }
}

/// A random smooth program of depth ≤ 5 mixing every differentiable family.
fn random_composition(rng: &mut ChaCha8Rng) -> (Program, ParameterSet, usize) {
    let n = rng.random_range(2..5);
    let depth = rng.random_range(1..=5);
    let mut p = ParameterSet::new();
    let mut b = ProgramBuilder::new(n);
    let mut nodes = vec![b.input()];
    let mut h = b.input();
    for k in 0..depth {
        let w = p.add(format!("w{k}"), Group::Other, &[n, n], rand_vec(rng, n * n, 0.8)).unwrap();
        let wn = b.param(&p, w);
        let z = b.affine(wn, h, None).unwrap();
        h = match rng.random_range(0..8) {
            0 => b.tanh(z),
            1 => b.sigmoid(z),
            2 => b.softmax(z),
            3 => {
                let s = b.sigmoid(z);
                let sh = b.scale(s, 1.0, 0.5);
                b.log(sh)
            }
            4 => {
                let other = nodes[rng.random_range(0..nodes.len())];
                let t = b.tanh(other);
                b.mul(z, t).unwrap()
            }
            5 => {
                let e = b.scale(z, 0.5, 0.0);
                b.exp(e)
            }
            6 => {
                let s = b.sigmoid(z);
                let sh = b.scale(s, 1.0, 1.0);
                b.recip(sh)
            }
            _ => {
                let head = b.slice(z, 0, 1).unwrap();
                let s = b.sum(z);
                let t = b.tanh(s);
                let m = b.mul(t, z).unwrap();
                b.add(m, head).unwrap()
            }
        };
        nodes.push(h);
    }
    (b.finish(h), p, n)
}

