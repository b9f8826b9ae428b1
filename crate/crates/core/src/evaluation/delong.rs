use std::collections::BTreeMap;

use statrs::function::erf::erfc;

use super::{code_column, midranks, EvalError, ScoredVisit};
use crate::ehr_data::CodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    /// Variance estimate of `auc_a - auc_b`.
    pub variance: f64,
    pub z: f64,
    /// Two-sided.
    pub p: f64,
}

struct Components {
    auc: f64,
    v10: Vec<f64>,
    v01: Vec<f64>,
}

fn components(pos: &[f64], neg: &[f64]) -> Components {
    let (m, n) = (pos.len(), neg.len());
    let tx = midranks(pos);
    let ty = midranks(neg);
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let tz = midranks(&all);
    let rank_sum: f64 = tz[..m].iter().sum();
    let auc = (rank_sum - (m * (m + 1)) as f64 / 2.0) / (m * n) as f64;
    let v10 = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    Components { auc, v10, v01 }
}

/// Variance of `a - b` from paired samples.
fn diff_variance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64
}

/// Paired comparison of two score vectors against the same binary truth.
pub fn delong_test(truth: &[bool], scores_a: &[f64], scores_b: &[f64]) -> Result<DeLongResult, EvalError> {
    if truth.len() != scores_a.len() || truth.len() != scores_b.len() {
        return Err(EvalError::Dimension("truth and score vectors differ in length".into()));
    }
    let split = |s: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pos = s.iter().zip(truth).filter(|(_, &t)| t).map(|(x, _)| *x).collect();
        let neg = s.iter().zip(truth).filter(|(_, &t)| !t).map(|(x, _)| *x).collect();
        (pos, neg)
    };
    let (pa, na) = split(scores_a);
    let (pb, nb) = split(scores_b);
    if pa.is_empty() || na.is_empty() {
        return Err(EvalError::Invalid("DeLong test needs both classes".into()));
    }
    let (a, b) = (components(&pa, &na), components(&pb, &nb));
    let variance = diff_variance(&a.v10, &b.v10) / pa.len() as f64 + diff_variance(&a.v01, &b.v01) / na.len() as f64;
    let delta = a.auc - b.auc;
    let (z, p) = if variance > 0.0 {
        let z = delta / variance.sqrt();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    } else if delta == 0.0 {
        (0.0, 1.0)
    } else {
        (delta.signum() * f64::INFINITY, 0.0)
    };
    Ok(DeLongResult { auc_a: a.auc, auc_b: b.auc, variance, z, p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeAssignment {
    pub code: CodeId,
    pub aucs: Vec<f64>,
    pub best: usize,
    /// Model indices sharing the code, ascending.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompetencyReport {
    pub models: Vec<String>,
    pub assignments: Vec<CodeAssignment>,
    /// Number of codes held by each model subset.
    pub subset_counts: BTreeMap<Vec<usize>, usize>,
}

impl CompetencyReport {
    pub fn subset_name(&self, subset: &[usize]) -> String {
        subset.iter().map(|&i| self.models[i].as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn assignment(&self, code: CodeId) -> Option<&CodeAssignment> {
        self.assignments.iter().find(|a| a.code == code)
    }
}

/// Assigns each code whose best AUC exceeds `auc_threshold` to the best
/// model and to every model the DeLong test cannot separate from it at
/// `p_threshold`.
pub fn relative_competency(
    models: &[(String, Vec<ScoredVisit>)],
    p_threshold: f64,
    auc_threshold: f64,
) -> Result<CompetencyReport, EvalError> {
    let first = &models.first().ok_or_else(|| EvalError::Invalid("no models to compare".into()))?.1;
    for (name, visits) in models {
        let same = visits.len() == first.len()
            && visits.iter().zip(first).all(|(a, b)| a.subject_id == b.subject_id && a.time == b.time && a.truth == b.truth);
        if !same {
            return Err(EvalError::Invalid(format!("model {name} was scored on different visits")));
        }
    }
    let n_codes = first.first().map_or(0, |v| v.scores.len());
    let mut report = CompetencyReport {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        assignments: Vec::new(),
        subset_counts: BTreeMap::new(),
    };
    for code in 0..n_codes {
        let columns: Vec<(Vec<bool>, Vec<f64>)> = models.iter().map(|(_, v)| code_column(v, code)).collect();
        let truth = &columns[0].0;
        let Some(aucs) = columns.iter().map(|(l, s)| super::auc(l, s)).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        let best = (0..aucs.len()).fold(0, |b, i| if aucs[i] > aucs[b] { i } else { b });
        if aucs[best] <= auc_threshold {
            continue;
        }
        let mut members = vec![best];
        for i in (0..models.len()).filter(|&i| i != best) {
            if delong_test(truth, &columns[best].1, &columns[i].1)?.p > p_threshold {
                members.push(i);
            }
        }
        members.sort_unstable();
        *report.subset_counts.entry(members.clone()).or_insert(0) += 1;
        report.assignments.push(CodeAssignment { code, aucs, best, members });
    }
    Ok(report)
}
