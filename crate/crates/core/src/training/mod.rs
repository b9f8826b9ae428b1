//! Mini-batch Adam training with separate learning rates for the dynamics
//! and everything else, early stopping on validation visit-AUC, and
//! checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA, VERSION};
pub use config::RunConfig;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_engine::{Group, ParameterSet};
use crate::ehr_data::{AncestryIndex, PatientRecord};
use crate::evaluation::{score_records, visit_auc, EvalError};
use crate::model::{
    batch_gradient, GradientModel, GruBaseline, IceNode, LogReg, ModelConfig, ModelError, ModelKind,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config key {key:?}: {msg}")]
    Config { key: String, msg: String },
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl TrainError {
    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        TrainError::Config { key: key.to_owned(), msg: msg.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_dynamics: f64,
    pub lr_other: f64,
    /// Learning rates reach `decay_rate · η` by the final epoch.
    pub decay_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation period in iterations; 0 means once per epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr_dynamics: 7.15e-5, lr_other: 1.14e-3, decay_rate: 0.3, batch_size: 256, epochs: 60, seed: 0, eval_every: 0 }
    }
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        Self { batch_size: 16, epochs: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_dynamics >= 0.0 && self.lr_dynamics.is_finite()) {
            return Err(TrainError::config("lr_dynamics", "must be finite and non-negative"));
        }
        if !(self.lr_other >= 0.0 && self.lr_other.is_finite()) {
            return Err(TrainError::config("lr_other", "must be finite and non-negative"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(TrainError::config("decay_rate", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(TrainError::config("epochs", "must be at least 1"));
        }
        Ok(())
    }

    /// `(η_dynamics, η_other)` during `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let f = self.decay_rate.powf(epoch as f64 / self.epochs as f64);
        (self.lr_dynamics * f, self.lr_other * f)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self { m: vec![0.0; params.len()], v: vec![0.0; params.len()], step: 0 }
    }
}

/// One Adam update; arrays tagged `Dynamics` move with `lr_dynamics`.
pub fn adam_step(
    params: &mut ParameterSet,
    grad: &ParameterSet,
    state: &mut AdamState,
    lr_dynamics: f64,
    lr_other: f64,
) -> Result<(), TrainError> {
    for e in grad.entries() {
        if grad.data()[e.offset..e.offset + e.len].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite(e.name.clone()));
        }
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let entries = params.entries().to_vec();
    let (data, g) = (params.data_mut(), grad.data());
    for e in entries {
        let lr = if e.group == Group::Dynamics { lr_dynamics } else { lr_other };
        for i in e.offset..e.offset + e.len {
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = state.m[i] / c1;
            let vhat = state.v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// The generator `train_model` draws its batches from.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// `b` indices drawn uniformly with replacement from `0..n`.
pub fn sample_batch<R: Rng>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    assert!(n > 0, "cannot sample from an empty split");
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

/// A model of any kind, ready to predict.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    IceNode(IceNode),
    Gru(GruBaseline),
    LogReg(LogReg),
}

impl TrainedModel {
    pub fn new(
        kind: ModelKind,
        cfg: &ModelConfig,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        seed: u64,
    ) -> Result<(Self, ParameterSet), ModelError> {
        Ok(match kind {
            ModelKind::IceNode | ModelKind::IceNodeUniform => {
                let (m, p) = IceNode::new(Self::resolved(kind, cfg), n_codes, ancestry, seed)?;
                (TrainedModel::IceNode(m), p)
            }
            ModelKind::Gru => {
                let (m, p) = GruBaseline::new(cfg.clone(), n_codes, ancestry, seed)?;
                (TrainedModel::Gru(m), p)
            }
            ModelKind::LogReg => {
                let m = LogReg::new(n_codes);
                let p = m.zero_params();
                (TrainedModel::LogReg(m), p)
            }
        })
    }

    pub fn attach(
        kind: ModelKind,
        cfg: &ModelConfig,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        params: &ParameterSet,
    ) -> Result<Self, ModelError> {
        Ok(match kind {
            ModelKind::IceNode | ModelKind::IceNodeUniform => {
                TrainedModel::IceNode(IceNode::attach(Self::resolved(kind, cfg), n_codes, ancestry, params)?)
            }
            ModelKind::Gru => TrainedModel::Gru(GruBaseline::attach(cfg.clone(), n_codes, ancestry, params)?),
            ModelKind::LogReg => {
                let m = LogReg::new(n_codes);
                if !m.zero_params().same_layout(params) {
                    return Err(ModelError::Config(format!("parameters do not fit a logistic regression over {n_codes} codes")));
                }
                TrainedModel::LogReg(m)
            }
        })
    }

    /// The model config actually used for `kind`.
    pub fn resolved(kind: ModelKind, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match kind {
            ModelKind::IceNodeUniform => c.uniform_time = true,
            ModelKind::IceNode => c.uniform_time = false,
            _ => {}
        }
        c
    }

    pub fn predict(&self, params: &ParameterSet, record: &PatientRecord) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            TrainedModel::IceNode(m) => m.predict(params, record),
            TrainedModel::Gru(m) => m.predict(params, record),
            TrainedModel::LogReg(m) => m.predict(params, record),
        }
    }

    pub fn as_gradient(&self) -> Option<&dyn GradientModel> {
        match self {
            TrainedModel::IceNode(m) => Some(m),
            TrainedModel::Gru(m) => Some(m),
            TrainedModel::LogReg(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// `(iteration, mean batch loss)` for every completed iteration.
    pub loss_trace: Vec<(usize, f64)>,
    /// `(iteration, validation visit-AUC)`.
    pub valid_auc: Vec<(usize, f64)>,
    pub skipped_batches: Vec<usize>,
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_valid_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Parameters with the best validation visit-AUC.
    pub params: ParameterSet,
    pub final_params: ParameterSet,
    pub history: TrainHistory,
}

/// Visit-AUC of `model` over `records`.
pub fn validation_auc(
    model: &TrainedModel,
    params: &ParameterSet,
    records: &[&PatientRecord],
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64, EvalError> {
    let visits = score_records(records, |r| model.predict(params, r), pool)?;
    Ok(visit_auc(&visits)?.mean)
}

fn is_solver_failure(e: &ModelError) -> bool {
    matches!(e, ModelError::Solver { .. })
}

#[allow(clippy::too_many_arguments)]
pub fn train_model(
    kind: ModelKind,
    cfg: &RunConfig,
    n_codes: usize,
    ancestry: Option<&AncestryIndex>,
    train: &[&PatientRecord],
    valid: &[&PatientRecord],
    pool: Option<&rayon::ThreadPool>,
) -> Result<TrainOutcome, TrainError> {
    cfg.train.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::config("data", "training and validation splits must be non-empty"));
    }
    let (model, mut params) = TrainedModel::new(kind, &cfg.model, n_codes, ancestry, cfg.train.seed)?;
    let mut history = TrainHistory::default();

    if let TrainedModel::LogReg(lr) = &model {
        let fit = lr.fit(train, &cfg.logreg)?;
        let auc = validation_auc(&model, &fit.params, valid, pool)?;
        history.loss_trace.push((0, fit.objective));
        history.valid_auc.push((fit.iterations, auc));
        history.iterations = fit.iterations;
        history.best_iteration = Some(fit.iterations);
        history.best_valid_auc = Some(auc);
        return Ok(TrainOutcome { model, params: fit.params.clone(), final_params: fit.params, history });
    }
    let grad_model = model.as_gradient().expect("gradient model");

    let t = &cfg.train;
    let per_epoch = train.len().div_ceil(t.batch_size);
    let total = t.epochs * per_epoch;
    let eval_every = if t.eval_every == 0 { per_epoch } else { t.eval_every };
    let mut rng = batch_rng(t.seed);
    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    for it in 0..total {
        let (lr_dyn, lr_other) = t.learning_rates(it / per_epoch);
        let batch: Vec<&PatientRecord> = sample_batch(train.len(), t.batch_size, &mut rng).into_iter().map(|i| train[i]).collect();
        match batch_gradient(grad_model, &params, &batch, pool) {
            Ok(g) => {
                adam_step(&mut params, &g.grad, &mut adam, lr_dyn, lr_other)?;
                history.loss_trace.push((it, g.loss));
            }
            Err(e) if is_solver_failure(&e) => {
                log::warn!("iteration {it}: skipping batch: {e}");
                history.skipped_batches.push(it);
            }
            Err(e) => return Err(e.into()),
        }
        if (it + 1) % eval_every == 0 || it + 1 == total {
            match validation_auc(&model, &params, valid, pool) {
                Ok(auc) => {
                    log::info!("iteration {}: validation visit-AUC {auc:.4}", it + 1);
                    history.valid_auc.push((it + 1, auc));
                    if history.best_valid_auc.is_none_or(|b| auc > b) {
                        history.best_valid_auc = Some(auc);
                        history.best_iteration = Some(it + 1);
                        best = params.clone();
                    }
                }
                Err(EvalError::Model(e)) if is_solver_failure(&e) => {
                    log::warn!("iteration {}: validation skipped: {e}", it + 1);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    history.iterations = total;
    Ok(TrainOutcome { model, params: best, final_params: params, history })
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source: std::io::Error::other(e) }
}

/// Writes `iteration,<column>` rows with full precision.
pub fn write_trace_csv(path: &Path, column: &str, rows: &[(usize, f64)]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", column]).map_err(|e| csv_err(path, e))?;
    for (i, v) in rows {
        w.write_record([i.to_string(), format!("{v:.17e}")]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<(usize, f64)>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = || TrainError::Checkpoint(format!("{}: malformed trace row", path.display()));
        let i = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let v = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push((i, v));
    }
    Ok(out)
}
