//! Timestamped clinical-code sequences: ingestion, validation, filtering,
//! splitting, encoding and a seeded synthetic generator.

mod cohort;
mod ontology;
mod records;
mod synthetic;

pub use cohort::{filter_cohort, split_cohort, Cohort, DatasetSplit, FilterReport, MAX_STAY_DAYS, MIN_ADMISSIONS};
pub use ontology::{load_ontology, parse_ontology, AncestryIndex, Ontology};
pub use records::{
    apply_code_mapping, load_code_mapping, parse_code_mapping, parse_patient_records, parse_patient_records_mapped,
    read_raw_records, read_records_file, resolve_records, write_patient_records, CodeMapping, ParseOptions,
    RawAdmission, RawPatient, RecordsFile, TimeAnchor, RECORDS_HEADER,
};
pub use synthetic::{generate_synthetic_cohort, synthetic_ontology, SyntheticConfig};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown code {code:?}")]
    UnknownCode { line: usize, code: String },
    #[error("unmapped source codes: {}", .0.join(", "))]
    Unmapped(Vec<String>),
    #[error("ontology cycle through edge {child} -> {parent}")]
    Cycle { child: String, parent: String },
    #[error("{0}")]
    Validation(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

pub type CodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalCode {
    pub id: CodeId,
    pub label: String,
}

/// Dense code index `0..C`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, CodeId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = DataError;
    fn try_from(labels: Vec<String>) -> Result<Self, DataError> {
        Self::new(labels)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.labels
    }
}

impl Vocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains(['\t', '\n']) {
                return Err(DataError::Validation(format!("invalid code label {l:?}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(DataError::Validation(format!("duplicate code label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<CodeId> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: CodeId) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn codes(&self) -> impl Iterator<Item = ClinicalCode> + '_ {
        self.labels.iter().enumerate().map(|(id, l)| ClinicalCode { id, label: l.clone() })
    }
}

/// One admission. `time` is in weeks since the patient's first admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub time: f64,
    pub codes: Vec<CodeId>,
    pub stay_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub subject_id: String,
    pub admissions: Vec<Admission>,
}

impl PatientRecord {
    pub fn times(&self) -> Vec<f64> {
        self.admissions.iter().map(|a| a.time).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHotVector {
    bits: Vec<bool>,
}

impl MultiHotVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn contains(&self, id: CodeId) -> bool {
        self.bits.get(id).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

pub fn encode_multi_hot(codes: &[CodeId], n_codes: usize) -> Result<MultiHotVector, DataError> {
    let mut bits = vec![false; n_codes];
    for &c in codes {
        if c >= n_codes {
            return Err(DataError::Validation(format!("code id {c} out of range for {n_codes} codes")));
        }
        bits[c] = true;
    }
    Ok(MultiHotVector { bits })
}

pub fn decode_multi_hot(v: &MultiHotVector) -> Vec<CodeId> {
    v.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
}
