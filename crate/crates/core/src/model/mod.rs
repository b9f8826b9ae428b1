//! ICE-NODE (integrate → decode → update over a neural ODE), its uniform-time
//! ablation, and the GRU and logistic-regression baselines.

mod gru;
mod icenode;
mod layers;
mod logreg;

pub use gru::GruBaseline;
pub use icenode::{init_state, IceNode, PatientRun};
pub use logreg::{history_features, LogReg, LogRegConfig, LogRegFit};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_engine::{EngineError, ParamSubset, ParameterSet};
use crate::ehr_data::{AncestryIndex, PatientRecord};
use crate::embeddings::{AttentionKind, Embedding, EmbeddingGrad, EmbeddingKind, EmbeddingTable, GramEmbedding, MatrixEmbedding};
use crate::ode_core::{GradientMode, OdeError, SolverConfig};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("patient {subject}, interval [{t0}, {t1}]: {source}")]
    Solver { subject: String, t0: f64, t1: f64, source: OdeError },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsArch {
    Mlp2,
    Mlp3,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "icenode")]
    IceNode,
    #[serde(rename = "icenode_uniform")]
    IceNodeUniform,
    Gru,
    #[serde(rename = "logreg")]
    LogReg,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::IceNode => "icenode",
            ModelKind::IceNodeUniform => "icenode_uniform",
            ModelKind::Gru => "gru",
            ModelKind::LogReg => "logreg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ModelKind::IceNode, ModelKind::IceNodeUniform, ModelKind::Gru, ModelKind::LogReg]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub memory_dim: usize,
    pub dynamics: DynamicsArch,
    pub decoder_depth: usize,
    pub embedding: EmbeddingKind,
    pub attention: AttentionKind,
    pub attention_hidden: usize,
    pub taylor_order: usize,
    pub penalty_weight: f64,
    pub uniform_time: bool,
    /// Keep the integrated `h_e` after an admission instead of resetting it
    /// to the observed embedding.
    pub keep_integrated_embedding: bool,
    pub leaky_slope: f64,
    pub solver: SolverConfig,
    pub gradient_mode: GradientMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            memory_dim: 30,
            dynamics: DynamicsArch::Mlp3,
            decoder_depth: 2,
            embedding: EmbeddingKind::Gram,
            attention: AttentionKind::Tanh,
            attention_hidden: 200,
            taylor_order: 3,
            penalty_weight: 1000.0,
            uniform_time: false,
            keep_integrated_embedding: false,
            leaky_slope: 0.01,
            solver: SolverConfig::default(),
            gradient_mode: GradientMode::Adjoint,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for laptop-scale runs and tests.
    pub fn desk_scale() -> Self {
        Self { embed_dim: 16, memory_dim: 8, attention_hidden: 16, ..Self::default() }
    }

    pub fn state_dim(&self) -> usize {
        self.memory_dim + self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.memory_dim == 0 {
            return bad("embed_dim and memory_dim must be positive".into());
        }
        if !(1..=SolverConfig::ORDER.min(crate::ode_core::MAX_TAYLOR_ORDER)).contains(&self.taylor_order) {
            return bad(format!("taylor_order {} outside 1..=3", self.taylor_order));
        }
        if !(2..=3).contains(&self.decoder_depth) {
            return bad(format!("decoder_depth {} must be 2 or 3", self.decoder_depth));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return bad("penalty_weight must be finite and non-negative".into());
        }
        if self.attention_hidden == 0 {
            return bad("attention_hidden must be positive".into());
        }
        self.solver.validate().map_err(|e| ModelError::Config(e.to_string()))
    }

    pub(crate) fn build_embedding<R: rand::Rng>(
        &self,
        params: &mut ParameterSet,
        fresh: bool,
        n_codes: usize,
        ancestry: Option<&AncestryIndex>,
        rng: &mut R,
    ) -> Result<Embedding, ModelError> {
        let d = self.embed_dim;
        Ok(match self.embedding {
            EmbeddingKind::Matrix => Embedding::Matrix(if fresh {
                MatrixEmbedding::init(params, "emb", d, n_codes, rng)?
            } else {
                MatrixEmbedding::attach(params, "emb", d, n_codes)?
            }),
            EmbeddingKind::Gram => {
                let index = ancestry.cloned().unwrap_or_else(|| AncestryIndex::flat(n_codes));
                if index.n_codes() != n_codes {
                    return Err(ModelError::Config(format!(
                        "ancestry covers {} codes, vocabulary has {n_codes}",
                        index.n_codes()
                    )));
                }
                Embedding::Gram(if fresh {
                    GramEmbedding::init(params, "emb", d, self.attention_hidden, self.attention, index, rng)?
                } else {
                    GramEmbedding::attach(params, "emb", d, self.attention_hidden, self.attention, index)?
                })
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatientOutput {
    /// Risk vectors for admissions `1..n`.
    pub predictions: Vec<Vec<f64>>,
    pub loss: f64,
    pub bce: f64,
    pub penalty: f64,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy over codes, probabilities, and `∂bce/∂logits`.
pub(crate) fn bce_from_logits(logits: &[f64], codes: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
    let c = logits.len();
    let mut target = vec![0.0; c];
    for &i in codes {
        target[i] = 1.0;
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(c);
    let mut grad = Vec::with_capacity(c);
    for (z, v) in logits.iter().zip(&target) {
        let p = sigmoid(*z);
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= v * pc.ln() + (1.0 - v) * (1.0 - pc).ln();
        grad.push(if pc == p { (p - v) / c as f64 } else { 0.0 });
        probs.push(p);
    }
    (loss / c as f64, probs, grad)
}

/// Models trained by gradient descent on per-patient losses.
pub trait GradientModel: Sync {
    fn embedding(&self) -> &Embedding;

    fn forward(&self, params: &ParameterSet, table: &EmbeddingTable, record: &PatientRecord)
        -> Result<PatientOutput, ModelError>;

    /// Adds `scale · ∂loss/∂θ` into `sink` (laid out by `subset`) and the
    /// embedding cotangents into `emb`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &ParameterSet,
        table: &EmbeddingTable,
        record: &PatientRecord,
        scale: f64,
        subset: &ParamSubset,
        sink: &mut [f64],
        emb: &mut EmbeddingGrad,
    ) -> Result<PatientOutput, ModelError>;

    fn predict(&self, params: &ParameterSet, record: &PatientRecord) -> Result<Vec<Vec<f64>>, ModelError> {
        let table = self.embedding().table(params)?;
        Ok(self.forward(params, &table, record)?.predictions)
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean loss over the batch.
    pub loss: f64,
    pub grad: ParameterSet,
}

/// Mean loss and gradient over `records`. With a thread pool, patients are
/// processed in parallel and reduced in input order.
pub fn batch_gradient<M: GradientModel + ?Sized>(
    model: &M,
    params: &ParameterSet,
    records: &[&PatientRecord],
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchGradient, ModelError> {
    let table = model.embedding().table(params)?;
    let subset = ParamSubset::all(params);
    let scale = 1.0 / records.len().max(1) as f64;
    let emb = model.embedding();
    let mut grad = params.zeros_like();
    let mut acc = emb.zero_grad();
    let mut loss = 0.0;
    match pool {
        Some(pool) if records.len() > 1 => {
            let parts: Vec<Result<(f64, Vec<f64>, EmbeddingGrad), ModelError>> = pool.install(|| {
                records
                    .par_iter()
                    .map(|r| {
                        let mut sink = vec![0.0; subset.len()];
                        let mut e = emb.zero_grad();
                        let out = model.backward(params, &table, r, scale, &subset, &mut sink, &mut e)?;
                        Ok((out.loss, sink, e))
                    })
                    .collect()
            });
            for part in parts {
                let (l, sink, e) = part?;
                loss += l;
                for (g, v) in grad.data_mut().iter_mut().zip(&sink) {
                    *g += v;
                }
                for (a, v) in acc.rows.iter_mut().zip(&e.rows) {
                    *a += v;
                }
                for (a, v) in acc.offset.iter_mut().zip(&e.offset) {
                    *a += v;
                }
            }
        }
        _ => {
            for r in records {
                let out = model.backward(params, &table, r, scale, &subset, grad.data_mut(), &mut acc)?;
                loss += out.loss;
            }
        }
    }
    emb.finish_grad(params, &acc, &subset, grad.data_mut())?;
    Ok(BatchGradient { loss: loss * scale, grad })
}

/// Mean loss over `records` without gradients.
pub fn batch_loss<M: GradientModel + ?Sized>(model: &M, params: &ParameterSet, records: &[&PatientRecord]) -> Result<f64, ModelError> {
    let table = model.embedding().table(params)?;
    let mut total = 0.0;
    for r in records {
        total += model.forward(params, &table, r)?.loss;
    }
    Ok(total / records.len().max(1) as f64)
}
