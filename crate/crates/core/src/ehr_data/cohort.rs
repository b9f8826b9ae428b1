use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, PatientRecord, Vocabulary};

pub const MIN_ADMISSIONS: usize = 2;
pub const MAX_STAY_DAYS: f64 = 14.0;

/// A set of patients over a vocabulary, with per-code admission counts
/// computed from exactly these patients.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub vocabulary: Vocabulary,
    pub code_frequency: Vec<u64>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>, vocabulary: Vocabulary) -> Result<Self, DataError> {
        let c = vocabulary.len();
        let mut code_frequency = vec![0u64; c];
        for p in &patients {
            for a in &p.admissions {
                for &code in &a.codes {
                    if code >= c {
                        return Err(DataError::Validation(format!(
                            "patient {} references code {code} outside vocabulary of {c}",
                            p.subject_id
                        )));
                    }
                    code_frequency[code] += 1;
                }
            }
        }
        Ok(Self { patients, vocabulary, code_frequency })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_codes(&self) -> usize {
        self.vocabulary.len()
    }

    /// Admissions after the first one, summed over patients.
    pub fn n_predicted_admissions(&self) -> usize {
        self.patients.iter().map(|p| p.admissions.len().saturating_sub(1)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub too_few_admissions: usize,
    pub long_stay: usize,
}

/// Keeps patients with at least two admissions, all at most two weeks long.
pub fn filter_cohort(records: Vec<PatientRecord>, vocabulary: Vocabulary) -> Result<(Cohort, FilterReport), DataError> {
    let mut report = FilterReport { input: records.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let few = r.admissions.len() < MIN_ADMISSIONS;
        let long = r.admissions.iter().any(|a| a.stay_days > MAX_STAY_DAYS);
        report.too_few_admissions += few as usize;
        report.long_stay += long as usize;
        if !few && !long {
            kept.push(r);
        }
    }
    report.kept = kept.len();
    Ok((Cohort::new(kept, vocabulary)?, report))
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Cohort,
    pub valid: Cohort,
    pub test: Cohort,
}

/// Seeded 70/15/15 partition: `⌊0.7N⌋`, `⌊0.15N⌋`, remainder.
pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<DatasetSplit, DataError> {
    let n = cohort.len();
    if n < 3 {
        return Err(DataError::Validation(format!("cannot split a cohort of {n} patients (need at least 3)")));
    }
    let n_train = n * 70 / 100;
    let n_valid = n * 15 / 100;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let patients = idx.iter().map(|&i| cohort.patients[i].clone()).collect();
        Cohort::new(patients, cohort.vocabulary.clone())
    };
    Ok(DatasetSplit {
        train: take(&order[..n_train])?,
        valid: take(&order[n_train..n_train + n_valid])?,
        test: take(&order[n_train + n_valid..])?,
    })
}
