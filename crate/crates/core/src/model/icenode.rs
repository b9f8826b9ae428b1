use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{decoder_program, GruParams, Init, ParamFactory};
use super::{bce_from_logits, sigmoid, DynamicsArch, GradientModel, ModelConfig, ModelError, PatientOutput};
use crate::diff_engine::{Group, ParamSubset, ParameterSet, Program, ProgramBuilder};
use crate::ehr_data::{AncestryIndex, PatientRecord};
use crate::embeddings::{Embedding, EmbeddingGrad, EmbeddingTable};
use crate::ode_core::{accumulate_gradient, ivp_solve, DynamicsSpec, TrajectorySolution};

/// `h(t0) = [0; g(t0)]`.
pub fn init_state(g: &[f64], memory_dim: usize) -> Vec<f64> {
    let mut h = vec![0.0; memory_dim];
    h.extend_from_slice(g);
    h
}

#[derive(Debug, Clone)]
pub struct IceNode {
    pub config: ModelConfig,
    pub n_codes: usize,
    embedding: Embedding,
    dynamics: DynamicsSpec,
    decoder: Program,
    update: Program,
}

/// Everything computed by one forward pass over a patient.
#[derive(Debug, Clone)]
pub struct PatientRun {
    pub embeddings: Vec<Vec<f64>>,
    /// `starts[k-1]` is the state just after admission `k-1`.
    pub starts: Vec<Vec<f64>>,
    /// `solutions[k-1]` integrates from admission `k-1` to `k` in local time.
    pub solutions: Vec<TrajectorySolution>,
    /// State just after the last admission.
    pub last_state: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    pub output: PatientOutput,
}

fn dynamics_program<R: rand::Rng>(
    cfg: &ModelConfig,
    f: &mut ParamFactory<'_, R>,
) -> Result<Program, ModelError> {
    let d = cfg.state_dim();
    let mut b;
    let out = match cfg.dynamics {
        DynamicsArch::Mlp2 | DynamicsArch::Mlp3 => {
            let layers = if cfg.dynamics == DynamicsArch::Mlp2 { 2 } else { 3 };
            let ids: Vec<_> = (0..layers)
                .map(|l| f.get(&format!("dyn.w{l}"), Group::Dynamics, &[d, d], Init::FanIn))
                .collect::<Result<_, _>>()?;
            b = ProgramBuilder::new(d);
            let mut x = b.input();
            for id in ids {
                let w = b.param(f.params, id);
                x = b.affine(w, x, None)?;
                x = b.tanh(x);
            }
            x
        }
        DynamicsArch::Gru => {
            // dh/dt = (1 - z) ⊙ (a - h), gates computed from h alone.
            let zr = f.get("dyn.h_zr", Group::Dynamics, &[2 * d, d], Init::FanIn)?;
            let bzr = f.get("dyn.b_zr", Group::Dynamics, &[2 * d], Init::Zeros)?;
            let ha = f.get("dyn.h_a", Group::Dynamics, &[d, d], Init::FanIn)?;
            let ba = f.get("dyn.b_a", Group::Dynamics, &[d], Init::Zeros)?;
            b = ProgramBuilder::new(d);
            let h = b.input();
            let (zr, bzr, ha, ba) = (b.param(f.params, zr), b.param(f.params, bzr), b.param(f.params, ha), b.param(f.params, ba));
            let g = b.affine(zr, h, Some(bzr))?;
            let g = b.sigmoid(g);
            let z = b.slice(g, 0, d)?;
            let r = b.slice(g, d, d)?;
            let rh = b.mul(r, h)?;
            let a = b.affine(ha, rh, Some(ba))?;
            let a = b.tanh(a);
            let keep = b.scale(z, -1.0, 1.0);
            let diff = b.sub(a, h)?;
            b.mul(keep, diff)?
        }
    };
    Ok(b.finish(out))
}

impl IceNode {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        seed: u64,
    ) -> Result<(Self, ParameterSet), ModelError> {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Self::build(config, n_codes, ancestry, &mut params, true, &mut rng)?;
        Ok((m, params))
    }

    /// Rebuilds the programs around existing parameters.
    pub fn attach(
        config: ModelConfig,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        params: &ParameterSet,
    ) -> Result<Self, ModelError> {
        let mut p = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self::build(config, n_codes, ancestry, &mut p, false, &mut rng)
    }

    fn build(
        config: ModelConfig,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        params: &mut ParameterSet,
        fresh: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if n_codes == 0 {
            return Err(ModelError::Config("empty vocabulary".into()));
        }
        let embedding = config.build_embedding(params, fresh, n_codes, ancestry, rng)?;
        let mut f = ParamFactory { params, rng, fresh };
        let field = dynamics_program(&config, &mut f)?;
        let dynamics = DynamicsSpec::new(field).map_err(|e| ModelError::Config(e.to_string()))?;
        let decoder = decoder_program(&mut f, config.embed_dim, n_codes, config.decoder_depth, config.leaky_slope)?;
        let (dm, de) = (config.memory_dim, config.embed_dim);
        let wu = f.get("upd.w", Group::Other, &[de, dm + de], Init::FanIn)?;
        let bu = f.get("upd.b", Group::Other, &[de], Init::Zeros)?;
        let cell = GruParams::create(&mut f, "upd.gru", Group::Other, de, dm)?;
        let mut b = ProgramBuilder::new(dm + de);
        let x = b.input();
        let (wn, bn) = (b.param(f.params, wu), b.param(f.params, bu));
        let u = b.affine(wn, x, Some(bn))?;
        let hm = b.slice(x, 0, dm)?;
        let out = cell.cell(&mut b, f.params, u, hm)?;
        let update = b.finish(out);
        Ok(Self { config, n_codes, embedding, dynamics, decoder, update })
    }

    pub fn dynamics(&self) -> &DynamicsSpec {
        &self.dynamics
    }

    pub fn decoder(&self) -> &Program {
        &self.decoder
    }

    pub fn update_program(&self) -> &Program {
        &self.update
    }

    /// Integration length used for a real gap `[t_prev, t_next]`.
    pub fn interval(&self, t_prev: f64, t_next: f64) -> f64 {
        if self.config.uniform_time {
            if t_next > t_prev {
                1.0
            } else {
                0.0
            }
        } else {
            t_next - t_prev
        }
    }

    fn penalty_order(&self) -> Option<usize> {
        (self.config.penalty_weight > 0.0).then_some(self.config.taylor_order)
    }

    /// Integrates `state` across the real gap `[t_prev, t_next]`.
    pub fn integrate_state(
        &self,
        params: &ParameterSet,
        state: &[f64],
        t_prev: f64,
        t_next: f64,
        subject: &str,
    ) -> Result<TrajectorySolution, ModelError> {
        if !(t_next >= t_prev) {
            return Err(ModelError::Data(format!("patient {subject}: interval [{t_prev}, {t_next}] runs backwards")));
        }
        let span = self.interval(t_prev, t_next);
        ivp_solve(&self.dynamics, params, state, 0.0, span, &self.config.solver, self.penalty_order()).map_err(|source| {
            ModelError::Solver { subject: subject.to_owned(), t0: t_prev, t1: t_next, source }
        })
    }

    pub fn decode_logits(&self, params: &ParameterSet, h_e: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.decoder.evaluate(params, h_e)?)
    }

    /// Per-code risks in (0, 1) from the embedding part of the state.
    pub fn decode_risks(&self, params: &ParameterSet, h_e: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.decode_logits(params, h_e)?.into_iter().map(sigmoid).collect())
    }

    /// State just after an admission with embedding `g`.
    pub fn update_state(&self, params: &ParameterSet, state: &[f64], g: &[f64]) -> Result<Vec<f64>, ModelError> {
        let dm = self.config.memory_dim;
        let mut x = state[..dm].to_vec();
        x.extend_from_slice(g);
        let mut out = self.update.evaluate(params, &x)?;
        if self.config.keep_integrated_embedding {
            out.extend_from_slice(&state[dm..]);
        } else {
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    pub fn run(&self, params: &ParameterSet, table: &EmbeddingTable, record: &PatientRecord) -> Result<PatientRun, ModelError> {
        let n = record.admissions.len();
        if n < 2 {
            return Err(ModelError::Data(format!("patient {} has {n} admissions, need at least 2", record.subject_id)));
        }
        let dm = self.config.memory_dim;
        let embeddings = record
            .admissions
            .iter()
            .map(|a| self.embedding.embed(table, &a.codes))
            .collect::<Result<Vec<_>, _>>()?;
        let mut h = init_state(&embeddings[0], dm);
        let mut run = PatientRun {
            starts: Vec::with_capacity(n - 1),
            solutions: Vec::with_capacity(n - 1),
            logits: Vec::with_capacity(n - 1),
            last_state: Vec::new(),
            output: PatientOutput::default(),
            embeddings: Vec::new(),
        };
        let (mut bce_sum, mut pen_sum) = (0.0, 0.0);
        for k in 1..n {
            let (a, b) = (&record.admissions[k - 1], &record.admissions[k]);
            let sol = self.integrate_state(params, &h, a.time, b.time, &record.subject_id)?;
            let logits = self.decode_logits(params, &sol.final_state[dm..])?;
            let (bce, probs, _) = bce_from_logits(&logits, &b.codes);
            bce_sum += bce;
            pen_sum += sol.penalty_value();
            let next = self.update_state(params, &sol.final_state, &embeddings[k])?;
            run.starts.push(std::mem::replace(&mut h, next));
            run.solutions.push(sol);
            run.logits.push(logits);
            run.output.predictions.push(probs);
        }
        let m = (n - 1) as f64;
        run.output.bce = bce_sum / m;
        run.output.penalty = pen_sum;
        run.output.loss = (bce_sum + self.config.penalty_weight * pen_sum) / m;
        run.last_state = h;
        run.embeddings = embeddings;
        Ok(run)
    }

    /// Risks at `t_f ≥ t_last` after consuming the whole record.
    pub fn predict_future(&self, params: &ParameterSet, record: &PatientRecord, t_f: f64) -> Result<Vec<f64>, ModelError> {
        let table = self.embedding.table(params)?;
        let dm = self.config.memory_dim;
        let state = if record.admissions.len() >= 2 {
            self.run(params, &table, record)?.last_state
        } else if let Some(a) = record.admissions.first() {
            init_state(&self.embedding.embed(&table, &a.codes)?, dm)
        } else {
            return Err(ModelError::Data(format!("patient {} has no admissions", record.subject_id)));
        };
        let t_last = record.admissions.last().expect("non-empty").time;
        if t_f < t_last {
            return Err(ModelError::Data(format!("future time {t_f} precedes last admission {t_last}")));
        }
        let sol = self.integrate_state(params, &state, t_last, t_f, &record.subject_id)?;
        self.decode_risks(params, &sol.final_state[dm..])
    }
}

impl GradientModel for IceNode {
    fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    fn forward(&self, params: &ParameterSet, table: &EmbeddingTable, record: &PatientRecord) -> Result<PatientOutput, ModelError> {
        Ok(self.run(params, table, record)?.output)
    }

    fn backward(
        &self,
        params: &ParameterSet,
        table: &EmbeddingTable,
        record: &PatientRecord,
        scale: f64,
        subset: &ParamSubset,
        sink: &mut [f64],
        emb: &mut EmbeddingGrad,
    ) -> Result<PatientOutput, ModelError> {
        let run = self.run(params, table, record)?;
        let n = record.admissions.len();
        let (dm, dh) = (self.config.memory_dim, self.config.state_dim());
        let w = scale / (n - 1) as f64;
        let penalty = self.penalty_order().map(|k| (k, self.config.penalty_weight * w));
        let mut gbar = vec![vec![0.0; self.config.embed_dim]; n];
        let mut hbar_plus = vec![0.0; dh];
        for k in (1..n).rev() {
            let sol = &run.solutions[k - 1];
            let hm = &sol.final_state;
            let mut hbar_minus = vec![0.0; dh];
            if k < n - 1 {
                let mut x = hm[..dm].to_vec();
                x.extend_from_slice(&run.embeddings[k]);
                let (_, gin) = self.update.vjp_accumulate(params, &x, &hbar_plus[..dm], subset, sink)?;
                hbar_minus[..dm].copy_from_slice(&gin[..dm]);
                for (g, v) in gbar[k].iter_mut().zip(&gin[dm..]) {
                    *g += v;
                }
                let target = if self.config.keep_integrated_embedding { &mut hbar_minus[dm..] } else { &mut gbar[k][..] };
                for (g, v) in target.iter_mut().zip(&hbar_plus[dm..]) {
                    *g += v;
                }
            }
            let (_, _, dlogits) = bce_from_logits(&run.logits[k - 1], &record.admissions[k].codes);
            let cot: Vec<f64> = dlogits.iter().map(|v| v * w).collect();
            let (_, gin) = self.decoder.vjp_accumulate(params, &hm[dm..], &cot, subset, sink)?;
            for (h, v) in hbar_minus[dm..].iter_mut().zip(&gin) {
                *h += v;
            }
            let (a, b) = (&record.admissions[k - 1], &record.admissions[k]);
            hbar_plus = accumulate_gradient(
                self.config.gradient_mode,
                &self.dynamics,
                params,
                sol,
                &hbar_minus,
                penalty,
                &self.config.solver,
                subset,
                sink,
            )
            .map_err(|source| ModelError::Solver { subject: record.subject_id.clone(), t0: a.time, t1: b.time, source })?;
        }
        for (g, v) in gbar[0].iter_mut().zip(&hbar_plus[dm..]) {
            *g += v;
        }
        for (k, a) in record.admissions.iter().enumerate() {
            self.embedding.embed_vjp(&a.codes, &run.embeddings[k], &gbar[k], emb);
        }
        Ok(run.output)
    }
}
