use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{decoder_program, GruParams, ParamFactory};
use super::{bce_from_logits, GradientModel, ModelConfig, ModelError, PatientOutput};
use crate::diff_engine::{Group, ParamSubset, ParameterSet, Program, ProgramBuilder};
use crate::ehr_data::{AncestryIndex, PatientRecord};
use crate::embeddings::{Embedding, EmbeddingGrad, EmbeddingTable};

/// Sequence GRU over visit embeddings. Timestamps are never read.
#[derive(Debug, Clone)]
pub struct GruBaseline {
    pub config: ModelConfig,
    pub n_codes: usize,
    embedding: Embedding,
    /// `[g; h] -> h'`
    cell: Program,
    decoder: Program,
}

impl GruBaseline {
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
        let d = config.embed_dim;
        let embedding = config.build_embedding(params, fresh, n_codes, ancestry, rng)?;
        let mut f = ParamFactory { params, rng, fresh };
        let gru = GruParams::create(&mut f, "gru", Group::Other, d, d)?;
        let decoder = decoder_program(&mut f, d, n_codes, config.decoder_depth, config.leaky_slope)?;
        let mut b = ProgramBuilder::new(2 * d);
        let x = b.input();
        let g = b.slice(x, 0, d)?;
        let h = b.slice(x, d, d)?;
        let out = gru.cell(&mut b, f.params, g, h)?;
        let cell = b.finish(out);
        Ok(Self { config, n_codes, embedding, cell, decoder })
    }

    /// Hidden states after each of the first `n - 1` visits, with the cell inputs.
    fn states(
        &self,
        params: &ParameterSet,
        table: &EmbeddingTable,
        record: &PatientRecord,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
        let n = record.admissions.len();
        if n < 2 {
            return Err(ModelError::Data(format!("patient {} has {n} admissions, need at least 2", record.subject_id)));
        }
        let d = self.config.embed_dim;
        let mut h = vec![0.0; d];
        let (mut embeds, mut inputs, mut states) = (Vec::new(), Vec::new(), Vec::new());
        for a in &record.admissions[..n - 1] {
            let g = self.embedding.embed(table, &a.codes)?;
            let mut x = g.clone();
            x.extend_from_slice(&h);
            h = self.cell.evaluate(params, &x)?;
            embeds.push(g);
            inputs.push(x);
            states.push(h.clone());
        }
        Ok((embeds, inputs, states))
    }
}

impl GradientModel for GruBaseline {
    fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    fn forward(&self, params: &ParameterSet, table: &EmbeddingTable, record: &PatientRecord) -> Result<PatientOutput, ModelError> {
        let (_, _, states) = self.states(params, table, record)?;
        let mut out = PatientOutput::default();
        for (h, a) in states.iter().zip(&record.admissions[1..]) {
            let logits = self.decoder.evaluate(params, h)?;
            let (bce, probs, _) = bce_from_logits(&logits, &a.codes);
            out.bce += bce;
            out.predictions.push(probs);
        }
        out.bce /= states.len() as f64;
        out.loss = out.bce;
        Ok(out)
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
        let (embeds, inputs, states) = self.states(params, table, record)?;
        let d = self.config.embed_dim;
        let m = states.len();
        let w = scale / m as f64;
        let mut out = PatientOutput::default();
        let mut hbar = vec![0.0; d];
        let mut gbars = vec![Vec::new(); m];
        for k in (0..m).rev() {
            let logits = self.decoder.evaluate(params, &states[k])?;
            let (bce, probs, dlogits) = bce_from_logits(&logits, &record.admissions[k + 1].codes);
            out.bce += bce;
            out.predictions.push(probs);
            let cot: Vec<f64> = dlogits.iter().map(|v| v * w).collect();
            let (_, gin) = self.decoder.vjp_accumulate(params, &states[k], &cot, subset, sink)?;
            for (h, v) in hbar.iter_mut().zip(&gin) {
                *h += v;
            }
            let (_, xin) = self.cell.vjp_accumulate(params, &inputs[k], &hbar, subset, sink)?;
            gbars[k] = xin[..d].to_vec();
            hbar = xin[d..].to_vec();
        }
        for (k, a) in record.admissions[..m].iter().enumerate() {
            self.embedding.embed_vjp(&a.codes, &embeds[k], &gbars[k], emb);
        }
        out.predictions.reverse();
        out.bce /= m as f64;
        out.loss = out.bce;
        Ok(out)
    }
}
