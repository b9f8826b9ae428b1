use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, TrainedModel};
use crate::diff_engine::{read_archive, write_archive, ParameterSet};
use crate::ehr_data::{AncestryIndex, Vocabulary};
use crate::model::{LogRegConfig, ModelConfig, ModelKind};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: u32,
    pub version: String,
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub logreg: Option<LogRegConfig>,
    pub vocabulary: Vocabulary,
    pub ancestry: Option<AncestryIndex>,
    /// Per-code occurrence counts in the training split.
    pub code_frequency: Vec<u64>,
    pub best_iteration: Option<usize>,
    pub best_valid_auc: Option<f64>,
    /// Seed of the train/validation/test split the model was fitted on.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
}

impl Checkpoint {
    /// Rebuilds the model over the checkpoint's own vocabulary.
    pub fn model(&self) -> Result<TrainedModel, TrainError> {
        self.model_for(self.meta.vocabulary.len())
    }

    pub fn model_for(&self, n_codes: usize) -> Result<TrainedModel, TrainError> {
        let m = &self.meta;
        Ok(TrainedModel::attach(m.model_kind, &m.model, n_codes, m.ancestry.as_ref(), &self.params)?)
    }
}

fn io(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let meta = serde_json::to_value(&ckpt.meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let f = File::create(path).map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    write_archive(&mut w, &ckpt.params, &meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    std::io::Write::flush(&mut w).map_err(|e| io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let f = File::open(path).map_err(|e| io(path, e))?;
    let (params, meta) = read_archive(BufReader::new(f)).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let schema = meta.get("schema").and_then(|s| s.as_u64());
    if schema != Some(CHECKPOINT_SCHEMA as u64) {
        return Err(TrainError::Checkpoint(format!(
            "{}: checkpoint schema {schema:?}, this build reads {CHECKPOINT_SCHEMA}",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint { meta, params })
}
