//! Gradient and solver oracle checks behind `icenode gradcheck`.

use std::fmt;

use icenode::diff_engine::{
    finite_difference_gradient, relative_error, set_injected_fault, Group, InjectedFault, ParamSubset, ParameterSet,
    Program, ProgramBuilder,
};
use icenode::ehr_data::{Admission, AncestryIndex, Ontology, PatientRecord, Vocabulary};
use icenode::embeddings::{AttentionKind, Embedding, GramEmbedding, MatrixEmbedding};
use icenode::model::{batch_gradient, batch_loss, IceNode, ModelConfig};
use icenode::ode_core::{
    integrate_fixed, ivp_solve, solution_gradient, DynamicsSpec, GradientMode, OdeError, Propagation, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst observed error (or, for `solver_order`, the smallest ratio).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<28} {:>12.3e}  (tolerance {:.1e})", self.name, self.value, self.tolerance)
    }
}

fn below(name: &'static str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult { name, value, tolerance, passed: value.is_finite() && value < tolerance }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    TanhSign,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random programs per engine check.
    pub trials: usize,
    pub fault: Fault,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 20, fault: Fault::None }
    }
}

pub type Check = fn(&VerifyConfig) -> Result<CheckResult, String>;

pub const CHECKS: &[(&str, Check)] = &[
    ("program_reverse", program_reverse),
    ("program_jvp", program_jvp),
    ("solver_exp_decay", solver_exp_decay),
    ("solver_order", solver_order),
    ("adjoint_vs_fd", adjoint_vs_fd),
    ("adjoint_vs_discrete", adjoint_vs_discrete),
    ("penalty_closed_form", penalty_closed_form),
    ("penalty_constant_zero", penalty_constant_zero),
    ("embedding_gradients", embedding_gradients),
    ("icenode_end_to_end", icenode_end_to_end),
];

/// Runs every check on the current thread; a failing setup counts as a failed check.
pub fn run_all(cfg: &VerifyConfig) -> Vec<CheckResult> {
    let _guard = FaultGuard::install(cfg.fault);
    CHECKS
        .iter()
        .map(|(name, check)| {
            check(cfg).unwrap_or_else(|e| {
                log::error!("{name}: {e}");
                CheckResult { name, value: f64::NAN, tolerance: 0.0, passed: false }
            })
        })
        .collect()
}

struct FaultGuard;

impl FaultGuard {
    fn install(fault: Fault) -> Self {
        set_injected_fault(match fault {
            Fault::None => None,
            Fault::TanhSign => Some(InjectedFault::TanhReverseSign),
        });
        FaultGuard
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        set_injected_fault(None);
    }
}

fn s<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random smooth program of depth 1..=5 drawn from every differentiable primitive family.
fn random_program(rng: &mut ChaCha8Rng) -> Result<(Program, ParameterSet, usize), String> {
    let n = rng.random_range(2..5);
    let depth = rng.random_range(1..=5);
    let mut p = ParameterSet::new();
    let mut b = ProgramBuilder::new(n);
    let mut nodes = vec![b.input()];
    let mut h = b.input();
    for k in 0..depth {
        let w = p.add(format!("w{k}"), Group::Other, &[n, n], uniform(rng, n * n, 0.8)).map_err(s)?;
        let wn = b.param(&p, w);
        let z = b.affine(wn, h, None).map_err(s)?;
        // first layer always tanh
        let family = if k == 0 { 0 } else { rng.random_range(0..8) };
        h = match family {
            0 => b.tanh(z),
            1 => b.sigmoid(z),
            2 => b.softmax(z),
            3 => {
                let sg = b.sigmoid(z);
                let sh = b.scale(sg, 1.0, 0.5);
                b.log(sh)
            }
            4 => {
                let other = nodes[rng.random_range(0..nodes.len())];
                let t = b.tanh(other);
                b.mul(z, t).map_err(s)?
            }
            5 => {
                let e = b.scale(z, 0.5, 0.0);
                b.exp(e)
            }
            6 => {
                let sg = b.sigmoid(z);
                let sh = b.scale(sg, 1.0, 1.0);
                b.recip(sh)
            }
            _ => {
                let head = b.slice(z, 0, 1).map_err(s)?;
                let sum = b.sum(z);
                let t = b.tanh(sum);
                let m = b.mul(t, z).map_err(s)?;
                b.add(m, head).map_err(s)?
            }
        };
        nodes.push(h);
    }
    Ok((b.finish(h), p, n))
}

pub fn program_reverse(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials {
        let (prog, p, n) = random_program(&mut rng)?;
        let x = uniform(&mut rng, n, 1.0);
        let cot = uniform(&mut rng, prog.output_dim(), 1.0);
        let (g, gx) = prog.gradient(&p, &x, &cot).map_err(s)?;
        let (fg, fgx) = finite_difference_gradient(&prog, &p, &x, &cot, 1e-6).map_err(s)?;
        worst = worst.max(relative_error(g.data(), fg.data())).max(relative_error(&gx, &fgx));
    }
    Ok(below("program_reverse", worst, 1e-5))
}

pub fn program_jvp(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut worst = 0.0f64;
    let eps = 1e-5;
    for _ in 0..cfg.trials {
        let (prog, p, n) = random_program(&mut rng)?;
        let x = uniform(&mut rng, n, 1.0);
        let v = uniform(&mut rng, n, 1.0);
        let got = prog.jvp(&p, &x, &v).map_err(s)?;
        let shift = |sign: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect() };
        let up = prog.evaluate(&p, &shift(1.0)).map_err(s)?;
        let dn = prog.evaluate(&p, &shift(-1.0)).map_err(s)?;
        let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        worst = worst.max(relative_error(&got, &fd));
    }
    Ok(below("program_jvp", worst, 1e-5))
}

fn linear_field(a: f64) -> Result<(DynamicsSpec, ParameterSet), String> {
    let mut p = ParameterSet::new();
    let id = p.add("a", Group::Dynamics, &[1, 1], vec![a]).map_err(s)?;
    let mut b = ProgramBuilder::new(1);
    let w = b.param(&p, id);
    let y = b.affine(w, b.input(), None).map_err(s)?;
    Ok((DynamicsSpec::new(b.finish(y)).map_err(s)?, p))
}

fn tol(rtol: f64, atol: f64) -> SolverConfig {
    SolverConfig { rtol, atol, ..SolverConfig::default() }
}

pub fn solver_exp_decay(_: &VerifyConfig) -> Result<CheckResult, String> {
    let (dy, p) = linear_field(-1.0)?;
    let sol = ivp_solve(&dy, &p, &[1.0], 0.0, 1.0, &tol(1e-6, 1e-9), None).map_err(s)?;
    Ok(below("solver_exp_decay", (sol.final_state[0] - (-1.0f64).exp()).abs(), 1e-5))
}

/// Error reduction of the embedded fourth-order solution when the step is halved.
pub fn solver_order(_: &VerifyConfig) -> Result<CheckResult, String> {
    let rhs = |_: f64, y: &[f64], out: &mut [f64]| -> Result<(), OdeError> {
        out[0] = -y[0];
        Ok(())
    };
    let exact = (-1.0f64).exp();
    let err = |n| -> Result<f64, String> {
        Ok((integrate_fixed(rhs, &[1.0], 0.0, 1.0, n, Propagation::Fourth).map_err(s)?[0] - exact).abs())
    };
    let mut ratio = f64::INFINITY;
    for n in [2, 4, 8] {
        ratio = ratio.min(err(n)? / err(2 * n)?);
    }
    Ok(CheckResult { name: "solver_order", value: ratio, tolerance: 16.0, passed: ratio >= 16.0 })
}

/// Three `d × d` tanh layers without bias, the shape used for patient dynamics.
fn mlp3(rng: &mut ChaCha8Rng, d: usize) -> Result<(DynamicsSpec, ParameterSet), String> {
    let mut p = ParameterSet::new();
    let mut b = ProgramBuilder::new(d);
    let mut x = b.input();
    let scale = (1.0 / d as f64).sqrt() * 1.5;
    for l in 0..3 {
        let id = p.add(format!("w{l}"), Group::Dynamics, &[d, d], uniform(rng, d * d, scale)).map_err(s)?;
        let w = b.param(&p, id);
        let z = b.affine(w, x, None).map_err(s)?;
        x = b.tanh(z);
    }
    Ok((DynamicsSpec::new(b.finish(x)).map_err(s)?, p))
}

struct OdeProblem {
    dynamics: DynamicsSpec,
    params: ParameterSet,
    h0: Vec<f64>,
    cotangent: Vec<f64>,
    cfg: SolverConfig,
}

impl OdeProblem {
    fn new(seed: u64) -> Result<Self, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dynamics, params) = mlp3(&mut rng, 8)?;
        let h0 = uniform(&mut rng, 8, 1.0);
        let cotangent = uniform(&mut rng, 8, 1.0);
        Ok(Self { dynamics, params, h0, cotangent, cfg: tol(1e-9, 1e-11) })
    }

    fn loss(&self, params: &ParameterSet, h0: &[f64]) -> Result<f64, String> {
        let sol = ivp_solve(&self.dynamics, params, h0, 0.0, 1.0, &self.cfg, None).map_err(s)?;
        Ok(dot(&sol.final_state, &self.cotangent))
    }

    /// Parameter gradient followed by the initial-state gradient.
    fn gradient(&self, mode: GradientMode) -> Result<Vec<f64>, String> {
        let sol = ivp_solve(&self.dynamics, &self.params, &self.h0, 0.0, 1.0, &self.cfg, None).map_err(s)?;
        let g = solution_gradient(mode, &self.dynamics, &self.params, &sol, &self.cotangent, None, &self.cfg)
            .map_err(s)?;
        Ok(g.params.data().iter().chain(&g.h0).copied().collect())
    }

    fn finite_differences(&self) -> Result<Vec<f64>, String> {
        let eps = 1e-5;
        let mut out = Vec::with_capacity(self.params.len() + self.h0.len());
        let mut p = self.params.clone();
        for i in 0..p.len() {
            let x = p.data()[i];
            p.data_mut()[i] = x + eps;
            let up = self.loss(&p, &self.h0)?;
            p.data_mut()[i] = x - eps;
            let dn = self.loss(&p, &self.h0)?;
            p.data_mut()[i] = x;
            out.push((up - dn) / (2.0 * eps));
        }
        let mut h = self.h0.clone();
        for i in 0..h.len() {
            let x = h[i];
            h[i] = x + eps;
            let up = self.loss(&self.params, &h)?;
            h[i] = x - eps;
            let dn = self.loss(&self.params, &h)?;
            h[i] = x;
            out.push((up - dn) / (2.0 * eps));
        }
        Ok(out)
    }
}

pub fn adjoint_vs_fd(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let prob = OdeProblem::new(cfg.seed)?;
    let err = relative_error(&prob.gradient(GradientMode::Adjoint)?, &prob.finite_differences()?);
    Ok(below("adjoint_vs_fd", err, 1e-3))
}

pub fn adjoint_vs_discrete(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let prob = OdeProblem::new(cfg.seed)?;
    let err = relative_error(&prob.gradient(GradientMode::Adjoint)?, &prob.gradient(GradientMode::Discrete)?);
    Ok(below("adjoint_vs_discrete", err, 1e-4))
}

/// Third-derivative penalty of `dh/dt = -h` on `[0, 1]` against its closed form.
pub fn penalty_closed_form(_: &VerifyConfig) -> Result<CheckResult, String> {
    let a = -1.0f64;
    let (dy, p) = linear_field(a)?;
    let sol = ivp_solve(&dy, &p, &[1.0], 0.0, 1.0, &tol(1e-8, 1e-10), Some(3)).map_err(s)?;
    let exact = a.powi(6) * ((2.0 * a).exp() - 1.0) / (2.0 * a);
    Ok(below("penalty_closed_form", ((sol.penalty_value() - exact) / exact).abs(), 1e-4))
}

pub fn penalty_constant_zero(_: &VerifyConfig) -> Result<CheckResult, String> {
    let mut p = ParameterSet::new();
    let id = p.add("c", Group::Dynamics, &[2], vec![0.3, -1.0]).map_err(s)?;
    let mut b = ProgramBuilder::new(2);
    let c = b.param(&p, id);
    let zero = b.scale(b.input(), 0.0, 0.0);
    let y = b.add(zero, c).map_err(s)?;
    let dy = DynamicsSpec::new(b.finish(y)).map_err(s)?;
    let sol = ivp_solve(&dy, &p, &[0.0, 0.0], 0.0, 5.0, &SolverConfig::default(), Some(3)).map_err(s)?;
    let r = sol.penalty_value();
    Ok(CheckResult { name: "penalty_constant_zero", value: r.abs(), tolerance: 0.0, passed: r == 0.0 })
}

/// A random DAG over `n_codes` leaves and `n_internal` ancestors.
pub fn random_ancestry(rng: &mut impl Rng, n_codes: usize, n_internal: usize) -> Result<AncestryIndex, String> {
    let labels: Vec<String> = (0..n_codes).map(|i| format!("c{i}")).collect();
    let vocab = Vocabulary::new(labels.clone()).map_err(s)?;
    let internal: Vec<String> = (0..n_internal).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for (k, n) in internal.iter().enumerate() {
        edges.push((labels[k % n_codes].clone(), n.clone()));
    }
    for l in &labels {
        for _ in 0..rng.random_range(0..3) {
            edges.push((l.clone(), internal[rng.random_range(0..n_internal)].clone()));
        }
    }
    for a in 0..n_internal {
        for b in a + 1..n_internal {
            if rng.random::<f64>() < 0.2 {
                edges.push((internal[a].clone(), internal[b].clone()));
            }
        }
    }
    Ok(Ontology::from_edges(&vocab, &edges).map_err(s)?.ancestry_index())
}

fn embedding_loss(e: &Embedding, p: &ParameterSet, sets: &[Vec<usize>], cots: &[Vec<f64>]) -> Result<f64, String> {
    let t = e.table(p).map_err(s)?;
    let mut total = 0.0;
    for (set, c) in sets.iter().zip(cots) {
        total += dot(&e.embed(&t, set).map_err(s)?, c);
    }
    Ok(total)
}

/// Relative error of the embedding parameter gradient against central differences.
pub fn embedding_fd_error(e: &Embedding, p: &ParameterSet, rng: &mut impl Rng) -> Result<f64, String> {
    let c = e.n_codes();
    let sets: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let set: Vec<usize> = (0..c).filter(|_| rng.random::<f64>() < 0.4).collect();
            if set.is_empty() {
                vec![0]
            } else {
                set
            }
        })
        .collect();
    let cots: Vec<Vec<f64>> = (0..4).map(|_| (0..e.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let t = e.table(p).map_err(s)?;
    let mut acc = e.zero_grad();
    for (set, cot) in sets.iter().zip(&cots) {
        let g = e.embed(&t, set).map_err(s)?;
        e.embed_vjp(set, &g, cot, &mut acc);
    }
    let subset = ParamSubset::all(p);
    let mut grad = vec![0.0; subset.len()];
    e.finish_grad(p, &acc, &subset, &mut grad).map_err(s)?;
    let h = 1e-6;
    let mut fd = Vec::with_capacity(p.len());
    let mut q = p.clone();
    for i in 0..p.len() {
        let x = q.data()[i];
        q.data_mut()[i] = x + h;
        let up = embedding_loss(e, &q, &sets, &cots)?;
        q.data_mut()[i] = x - h;
        let dn = embedding_loss(e, &q, &sets, &cots)?;
        q.data_mut()[i] = x;
        fd.push((up - dn) / (2.0 * h));
    }
    Ok(relative_error(&grad, &fd))
}

pub fn embedding_gradients(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe4b);
    let mut p = ParameterSet::new();
    let m = MatrixEmbedding::init(&mut p, "m", 3, 5, &mut rng).map_err(s)?;
    let mut worst = embedding_fd_error(&Embedding::Matrix(m), &p, &mut rng)?;
    for kind in [AttentionKind::Tanh, AttentionKind::L2] {
        let index = random_ancestry(&mut rng, 5, 3)?;
        let mut p = ParameterSet::new();
        let g = GramEmbedding::init(&mut p, "emb", 3, 4, kind, index, &mut rng).map_err(s)?;
        p.data_mut().iter_mut().for_each(|x| *x *= 8.0);
        worst = worst.max(embedding_fd_error(&Embedding::Gram(g), &p, &mut rng)?);
    }
    Ok(below("embedding_gradients", worst, 1e-5))
}

/// Three-admission patient over six codes.
pub fn toy_patient() -> PatientRecord {
    let adm = |time: f64, codes: &[usize]| Admission { time, codes: codes.to_vec(), stay_days: 1.0 };
    PatientRecord { subject_id: "toy".into(), admissions: vec![adm(0.0, &[0, 2]), adm(1.5, &[1, 2, 5]), adm(4.0, &[3])] }
}

/// Full-loss gradient of a small model (`d_e = 4`, `d_m = 3`, six codes,
/// third-order penalty weighted 1000) against central differences.
pub fn icenode_end_to_end(cfg: &VerifyConfig) -> Result<CheckResult, String> {
    let mc = ModelConfig {
        embed_dim: 4,
        memory_dim: 3,
        embedding: icenode::embeddings::EmbeddingKind::Matrix,
        taylor_order: 3,
        penalty_weight: 1000.0,
        solver: tol(1e-9, 1e-11),
        ..ModelConfig::default()
    };
    let (m, p) = IceNode::new(mc, 6, None, cfg.seed.wrapping_add(11)).map_err(s)?;
    let rec = toy_patient();
    let got = batch_gradient(&m, &p, &[&rec], None).map_err(s)?;
    let eps = 1e-5;
    let mut q = p.clone();
    let mut fd = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let x = q.data()[i];
        q.data_mut()[i] = x + eps;
        let up = batch_loss(&m, &q, &[&rec]).map_err(s)?;
        q.data_mut()[i] = x - eps;
        let dn = batch_loss(&m, &q, &[&rec]).map_err(s)?;
        q.data_mut()[i] = x;
        fd.push((up - dn) / (2.0 * eps));
    }
    Ok(below("icenode_end_to_end", relative_error(got.grad.data(), &fd), 1e-3))
}
