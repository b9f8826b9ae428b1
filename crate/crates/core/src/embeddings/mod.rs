//! Code-set embeddings: a learned affine map, or GRAM ontology attention.
//!
//! Both paths reduce to `g = act(Σ_{i ∈ codes} G[i] + offset)` where `G` is a
//! `C × d_e` table computed once per parameter value. For the affine map
//! `G = W_Mᵀ`, `offset = b_M` and `act` is the identity; for GRAM `G` is the
//! attention-weighted ancestor combination, there is no offset and `act = tanh`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff_engine::{EngineError, Group, ParamId, ParamSubset, ParameterSet, Program, ProgramBuilder};
use crate::ehr_data::{AncestryIndex, CodeId, MultiHotVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Tanh,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Matrix,
    Gram,
}

pub const INIT_RANGE: f64 = 0.1;

fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()
}

#[derive(Debug, Clone)]
pub struct MatrixEmbedding {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
    pub n_codes: usize,
}

impl MatrixEmbedding {
    pub fn init(
        params: &mut ParameterSet,
        prefix: &str,
        dim: usize,
        n_codes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, EngineError> {
        let w = params.add(format!("{prefix}.w"), Group::Other, &[dim, n_codes], uniform(rng, dim * n_codes))?;
        let b = params.add(format!("{prefix}.b"), Group::Other, &[dim], uniform(rng, dim))?;
        Ok(Self { w, b, dim, n_codes })
    }

    /// Reattaches to parameters created by [`MatrixEmbedding::init`].
    pub fn attach(params: &ParameterSet, prefix: &str, dim: usize, n_codes: usize) -> Result<Self, EngineError> {
        Ok(Self { w: lookup(params, &format!("{prefix}.w"))?, b: lookup(params, &format!("{prefix}.b"))?, dim, n_codes })
    }
}

pub(crate) fn lookup(params: &ParameterSet, name: &str) -> Result<ParamId, EngineError> {
    params.id(name).ok_or_else(|| EngineError::Unsupported(format!("missing parameter {name:?}")))
}

#[derive(Debug, Clone)]
pub struct GramEmbedding {
    pub basic: ParamId,
    pub attention: AttentionKind,
    pub hidden: usize,
    pub dim: usize,
    pub index: AncestryIndex,
    table: Program,
    weights: Program,
}

impl GramEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParameterSet,
        prefix: &str,
        dim: usize,
        hidden: usize,
        attention: AttentionKind,
        index: AncestryIndex,
        rng: &mut impl Rng,
    ) -> Result<Self, EngineError> {
        if hidden == 0 {
            return Err(EngineError::Unsupported("attention hidden size must be at least 1".into()));
        }
        let n = index.n_nodes;
        params.add(format!("{prefix}.basic"), Group::Other, &[n, dim], uniform(rng, n * dim))?;
        match attention {
            AttentionKind::Tanh => {
                params.add(format!("{prefix}.att_w"), Group::Other, &[hidden, 2 * dim], uniform(rng, hidden * 2 * dim))?;
                params.add(format!("{prefix}.att_b"), Group::Other, &[hidden], uniform(rng, hidden))?;
                params.add(format!("{prefix}.att_u"), Group::Other, &[hidden], uniform(rng, hidden))?;
            }
            AttentionKind::L2 => {
                params.add(format!("{prefix}.att_theta"), Group::Other, &[hidden, dim], uniform(rng, hidden * dim))?;
            }
        }
        Self::attach(params, prefix, dim, hidden, attention, index)
    }

    pub fn attach(
        params: &ParameterSet,
        prefix: &str,
        dim: usize,
        hidden: usize,
        attention: AttentionKind,
        index: AncestryIndex,
    ) -> Result<Self, EngineError> {
        let basic = lookup(params, &format!("{prefix}.basic"))?;
        if params.entry(basic).shape != [index.n_nodes, dim] {
            return Err(EngineError::ShapeMismatch {
                primitive: "gram",
                detail: format!("basic embeddings have shape {:?}", params.entry(basic).shape),
            });
        }
        let (table, weights) = build_programs(params, prefix, dim, hidden, attention, &index)?;
        Ok(Self { basic, attention, hidden, dim, index, table, weights })
    }

    pub fn n_codes(&self) -> usize {
        self.index.n_codes()
    }

    /// Program with no input whose output is `G` flattened row-major.
    pub fn table_program(&self) -> &Program {
        &self.table
    }
}

fn build_programs(
    params: &ParameterSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    attention: AttentionKind,
    index: &AncestryIndex,
) -> Result<(Program, Program), EngineError> {
    let build = |want_weights: bool| -> Result<Program, EngineError> {
        let mut b = ProgramBuilder::new(0);
        let basic = b.param(params, lookup(params, &format!("{prefix}.basic"))?);
        let mut emb_nodes = std::collections::HashMap::new();
        let mut row = |b: &mut ProgramBuilder, j: usize| -> Result<_, EngineError> {
            if let Some(&n) = emb_nodes.get(&j) {
                return Ok(n);
            }
            let n = b.slice(basic, j * dim, dim)?;
            emb_nodes.insert(j, n);
            Ok(n)
        };
        let att = match attention {
            AttentionKind::Tanh => [
                Some(b.param(params, lookup(params, &format!("{prefix}.att_w"))?)),
                Some(b.param(params, lookup(params, &format!("{prefix}.att_b"))?)),
                Some(b.param(params, lookup(params, &format!("{prefix}.att_u"))?)),
            ],
            AttentionKind::L2 => [Some(b.param(params, lookup(params, &format!("{prefix}.att_theta"))?)), None, None],
        };
        let mut outs = Vec::with_capacity(index.n_codes());
        for (i, anc) in index.ancestors.iter().enumerate() {
            if anc.is_empty() {
                return Err(EngineError::Unsupported(format!("code {i} has an empty ancestor set")));
            }
            let ei = row(&mut b, i)?;
            let mut scores = Vec::with_capacity(anc.len());
            for &j in anc {
                let ej = row(&mut b, j)?;
                let s = match attention {
                    AttentionKind::Tanh => {
                        let [w, bias, u] = att.map(|x| x.expect("tanh params"));
                        let cat = b.concat(&[ei, ej])?;
                        let z = b.affine(w, cat, Some(bias))?;
                        let z = b.tanh(z);
                        b.dot(u, z)?
                    }
                    AttentionKind::L2 => {
                        let theta = att[0].expect("l2 param");
                        let diff = b.sub(ei, ej)?;
                        let z = b.affine(theta, diff, None)?;
                        let sq = b.dot(z, z)?;
                        let s = b.scale(sq, -1.0 / (hidden as f64).sqrt(), 0.0);
                        b.exp(s)
                    }
                };
                scores.push(s);
            }
            let scores = b.concat(&scores)?;
            let alpha = b.softmax(scores);
            if want_weights {
                outs.push(alpha);
                continue;
            }
            let mut acc = None;
            for (k, &j) in anc.iter().enumerate() {
                let a = b.slice(alpha, k, 1)?;
                let ej = row(&mut b, j)?;
                let term = b.mul(a, ej)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => b.add(prev, term)?,
                });
            }
            outs.push(acc.expect("non-empty ancestors"));
        }
        let out = b.concat(&outs)?;
        Ok(b.finish(out))
    };
    Ok((build(false)?, build(true)?))
}

/// Attention weights of code `i` over its ancestors (same order as the index).
pub fn attention_weights(gram: &GramEmbedding, params: &ParameterSet, i: CodeId) -> Result<Vec<f64>, EngineError> {
    if i >= gram.n_codes() {
        return Err(EngineError::ShapeMismatch { primitive: "attention", detail: format!("code {i} out of range") });
    }
    let all = gram.weights.evaluate(params, &[])?;
    let start: usize = gram.index.ancestors[..i].iter().map(Vec::len).sum();
    Ok(all[start..start + gram.index.ancestors[i].len()].to_vec())
}

/// `G` as `C` rows of length `d_e`.
pub fn gram_embedding_matrix(gram: &GramEmbedding, params: &ParameterSet) -> Result<Vec<Vec<f64>>, EngineError> {
    let flat = gram.table.evaluate(params, &[])?;
    Ok(flat.chunks(gram.dim).map(<[f64]>::to_vec).collect())
}

pub fn gram_embed(gram: &GramEmbedding, params: &ParameterSet, v: &MultiHotVector) -> Result<Vec<f64>, EngineError> {
    let e = Embedding::Gram(gram.clone());
    let t = e.table(params)?;
    e.embed(&t, &checked_codes(v, gram.n_codes())?)
}

pub fn matrix_embed(emb: &MatrixEmbedding, params: &ParameterSet, v: &MultiHotVector) -> Result<Vec<f64>, EngineError> {
    let e = Embedding::Matrix(emb.clone());
    let t = e.table(params)?;
    e.embed(&t, &checked_codes(v, emb.n_codes)?)
}

fn checked_codes(v: &MultiHotVector, n: usize) -> Result<Vec<CodeId>, EngineError> {
    if v.len() != n {
        return Err(EngineError::ShapeMismatch {
            primitive: "embed",
            detail: format!("multi-hot vector of length {} for {n} codes", v.len()),
        });
    }
    Ok(crate::ehr_data::decode_multi_hot(v))
}

#[derive(Debug, Clone)]
pub enum Embedding {
    Matrix(MatrixEmbedding),
    Gram(GramEmbedding),
}

/// Per-parameter-value precomputation shared by all patients in a batch.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub rows: Vec<f64>,
    pub offset: Option<Vec<f64>>,
    pub dim: usize,
}

/// Accumulated cotangents of the table rows (and offset).
#[derive(Debug, Clone)]
pub struct EmbeddingGrad {
    pub rows: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        match self {
            Embedding::Matrix(m) => m.dim,
            Embedding::Gram(g) => g.dim,
        }
    }

    pub fn n_codes(&self) -> usize {
        match self {
            Embedding::Matrix(m) => m.n_codes,
            Embedding::Gram(g) => g.n_codes(),
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Embedding::Matrix(_) => EmbeddingKind::Matrix,
            Embedding::Gram(_) => EmbeddingKind::Gram,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Embedding::Matrix(m) => vec![m.w, m.b],
            Embedding::Gram(g) => g.table.param_ids().to_vec(),
        }
    }

    pub fn table(&self, params: &ParameterSet) -> Result<EmbeddingTable, EngineError> {
        match self {
            Embedding::Matrix(m) => {
                let w = params.get(m.w);
                let (d, c) = (m.dim, m.n_codes);
                let mut rows = vec![0.0; c * d];
                for r in 0..d {
                    for col in 0..c {
                        rows[col * d + r] = w[r * c + col];
                    }
                }
                Ok(EmbeddingTable { rows, offset: Some(params.get(m.b).to_vec()), dim: d })
            }
            Embedding::Gram(g) => {
                Ok(EmbeddingTable { rows: g.table.evaluate(params, &[])?, offset: None, dim: g.dim })
            }
        }
    }

    fn pre_activation(&self, t: &EmbeddingTable, codes: &[CodeId]) -> Result<Vec<f64>, EngineError> {
        let d = t.dim;
        let mut pre = t.offset.clone().unwrap_or_else(|| vec![0.0; d]);
        let c = t.rows.len() / d;
        for &i in codes {
            if i >= c {
                return Err(EngineError::ShapeMismatch { primitive: "embed", detail: format!("code {i} out of range") });
            }
            for (p, v) in pre.iter_mut().zip(&t.rows[i * d..(i + 1) * d]) {
                *p += v;
            }
        }
        Ok(pre)
    }

    /// Embedding of the code set `codes` (ids, no duplicates).
    pub fn embed(&self, t: &EmbeddingTable, codes: &[CodeId]) -> Result<Vec<f64>, EngineError> {
        let mut g = self.pre_activation(t, codes)?;
        if let Embedding::Gram(_) = self {
            g.iter_mut().for_each(|x| *x = x.tanh());
        }
        Ok(g)
    }

    pub fn zero_grad(&self) -> EmbeddingGrad {
        EmbeddingGrad { rows: vec![0.0; self.n_codes() * self.dim()], offset: vec![0.0; self.dim()] }
    }

    /// Accumulates the cotangent `gbar` of `g = embed(codes)`; `g` is the
    /// forward output.
    pub fn embed_vjp(&self, codes: &[CodeId], g: &[f64], gbar: &[f64], acc: &mut EmbeddingGrad) {
        let d = self.dim();
        let pbar: Vec<f64> = match self {
            Embedding::Gram(_) => g.iter().zip(gbar).map(|(y, gb)| gb * (1.0 - y * y)).collect(),
            Embedding::Matrix(_) => gbar.to_vec(),
        };
        for &i in codes {
            for (r, v) in acc.rows[i * d..(i + 1) * d].iter_mut().zip(&pbar) {
                *r += v;
            }
        }
        for (o, v) in acc.offset.iter_mut().zip(&pbar) {
            *o += v;
        }
    }

    /// Pushes accumulated table cotangents into parameter gradients.
    pub fn finish_grad(
        &self,
        params: &ParameterSet,
        acc: &EmbeddingGrad,
        subset: &ParamSubset,
        sink: &mut [f64],
    ) -> Result<(), EngineError> {
        match self {
            Embedding::Matrix(m) => {
                let (d, c) = (m.dim, m.n_codes);
                let wo = subset.offset_of(m.w).ok_or_else(|| missing(params, m.w))?;
                let bo = subset.offset_of(m.b).ok_or_else(|| missing(params, m.b))?;
                for r in 0..d {
                    for col in 0..c {
                        sink[wo + r * c + col] += acc.rows[col * d + r];
                    }
                }
                for (s, v) in sink[bo..bo + d].iter_mut().zip(&acc.offset) {
                    *s += v;
                }
                Ok(())
            }
            Embedding::Gram(g) => {
                g.table.vjp_accumulate(params, &[], &acc.rows, subset, sink)?;
                Ok(())
            }
        }
    }
}

fn missing(params: &ParameterSet, id: ParamId) -> EngineError {
    EngineError::Unsupported(format!("gradient sink lacks parameter {}", params.entry(id).name))
}
