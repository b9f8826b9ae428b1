//! Ranking metrics over scored visits: visit- and code-level AUC, top-k
//! accuracy by training-frequency quantile, DeLong tests and the
//! relative-competency report.

mod delong;
mod report;

pub use delong::{delong_test, relative_competency, CodeAssignment, CompetencyReport, DeLongResult};
pub use report::{
    check_vocabulary, evaluate_visits, read_code_auc_csv, read_quantile_csv, write_code_auc_csv,
    write_competency_csv, write_quantile_csv, MetricReport,
};

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::ehr_data::{CodeId, PatientRecord};
use crate::model::ModelError;

pub const DEFAULT_TOP_K: usize = 15;
pub const N_QUANTILES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no visit has both positive and negative codes")]
    NoQualifyingVisits,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Scores for one admission after the first, with its observed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVisit {
    pub subject_id: String,
    pub time: f64,
    /// Sorted observed code ids.
    pub truth: Vec<CodeId>,
    pub scores: Vec<f64>,
}

impl ScoredVisit {
    pub fn labels(&self) -> Vec<bool> {
        let mut v = vec![false; self.scores.len()];
        for &c in &self.truth {
            v[c] = true;
        }
        v
    }
}

/// Runs `predict` over every record (in parallel when a pool is given) and
/// pairs each prediction with the admission it targets.
pub fn score_records<F>(
    records: &[&PatientRecord],
    predict: F,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<ScoredVisit>, EvalError>
where
    F: Fn(&PatientRecord) -> Result<Vec<Vec<f64>>, ModelError> + Sync,
{
    let one = |r: &PatientRecord| -> Result<Vec<ScoredVisit>, EvalError> {
        let preds = predict(r)?;
        if preds.len() + 1 != r.admissions.len() {
            return Err(EvalError::Dimension(format!(
                "patient {}: {} predictions for {} admissions",
                r.subject_id,
                preds.len(),
                r.admissions.len()
            )));
        }
        Ok(preds
            .into_iter()
            .zip(&r.admissions[1..])
            .map(|(scores, a)| ScoredVisit { subject_id: r.subject_id.clone(), time: a.time, truth: a.codes.clone(), scores })
            .collect())
    };
    let parts: Vec<Result<Vec<ScoredVisit>, EvalError>> = match pool {
        Some(pool) => pool.install(|| records.par_iter().map(|r| one(r)).collect()),
        None => records.iter().map(|r| one(r)).collect(),
    };
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Midranks (1-based, ties share the mean rank) of `x`.
pub(crate) fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC with half credit for ties, or `None` if a class is empty.
pub fn auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitAuc {
    pub mean: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Mean over visits of the AUC ranking the visit's codes against its truth.
pub fn visit_auc(visits: &[ScoredVisit]) -> Result<VisitAuc, EvalError> {
    let (mut sum, mut scored, mut skipped) = (0.0, 0, 0);
    for v in visits {
        match auc(&v.labels(), &v.scores) {
            Some(a) => {
                sum += a;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(EvalError::NoQualifyingVisits);
    }
    Ok(VisitAuc { mean: sum / scored as f64, scored, skipped })
}

pub(crate) fn code_column(visits: &[ScoredVisit], code: CodeId) -> (Vec<bool>, Vec<f64>) {
    visits.iter().map(|v| (v.truth.binary_search(&code).is_ok(), v.scores[code])).unzip()
}

/// AUC of one code's scores across visits; `None` when the code is single-class.
pub fn code_auc(visits: &[ScoredVisit], code: CodeId) -> Option<f64> {
    let (labels, scores) = code_column(visits, code);
    auc(&labels, &scores)
}

/// Codes with non-zero training frequency split into five groups of
/// ascending frequency whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePartition {
    pub groups: Vec<Vec<CodeId>>,
}

impl QuantilePartition {
    pub fn from_frequencies(freq: &[u64]) -> Self {
        let mut codes: Vec<CodeId> = (0..freq.len()).filter(|&c| freq[c] > 0).collect();
        codes.sort_by_key(|&c| (freq[c], c));
        let n = codes.len();
        let (base, extra) = (n / N_QUANTILES, n % N_QUANTILES);
        let mut groups = Vec::with_capacity(N_QUANTILES);
        let mut start = 0;
        for g in 0..N_QUANTILES {
            let len = base + usize::from(g < extra);
            groups.push(codes[start..start + len].to_vec());
            start += len;
        }
        Self { groups }
    }

    pub fn label(g: usize) -> String {
        format!("{}-{}", g * 100 / N_QUANTILES, (g + 1) * 100 / N_QUANTILES)
    }
}

/// The `k` highest-scored codes, ties broken by lower code id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<CodeId> {
    let mut idx: Vec<CodeId> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(k);
    idx
}

/// Fraction of true code occurrences found in the visit's top-k, per group.
/// With `macro_average`, each code's own hit rate is averaged instead.
pub fn top_k_accuracy(
    visits: &[ScoredVisit],
    partition: &QuantilePartition,
    k: usize,
    macro_average: bool,
) -> Result<Vec<Option<f64>>, EvalError> {
    let c = visits.first().map_or(0, |v| v.scores.len());
    if k == 0 || k > c {
        return Err(EvalError::Invalid(format!("k = {k} outside 1..={c}")));
    }
    let mut hits = vec![0usize; c];
    let mut occurrences = vec![0usize; c];
    for v in visits {
        if v.scores.len() != c {
            return Err(EvalError::Dimension(format!("visit with {} scores among visits with {c}", v.scores.len())));
        }
        let top = top_k(&v.scores, k);
        let mut in_top = vec![false; c];
        top.iter().for_each(|&i| in_top[i] = true);
        for &t in &v.truth {
            occurrences[t] += 1;
            hits[t] += usize::from(in_top[t]);
        }
    }
    Ok(partition
        .groups
        .iter()
        .map(|g| {
            if macro_average {
                let rates: Vec<f64> =
                    g.iter().filter(|&&i| occurrences[i] > 0).map(|&i| hits[i] as f64 / occurrences[i] as f64).collect();
                (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
            } else {
                let occ: usize = g.iter().map(|&i| occurrences[i]).sum();
                let hit: usize = g.iter().map(|&i| hits[i]).sum();
                (occ > 0).then(|| hit as f64 / occ as f64)
            }
        })
        .collect())
}
