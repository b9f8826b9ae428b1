use std::collections::BTreeSet;
use std::path::Path;

use super::{code_auc, top_k_accuracy, visit_auc, CompetencyReport, EvalError, QuantilePartition, ScoredVisit, VisitAuc};
use crate::ehr_data::Vocabulary;

/// Fails unless both vocabularies list the same codes in the same order.
pub fn check_vocabulary(expected: &Vocabulary, found: &Vocabulary) -> Result<(), EvalError> {
    if expected.labels() == found.labels() {
        return Ok(());
    }
    let a: BTreeSet<&String> = expected.labels().iter().collect();
    let b: BTreeSet<&String> = found.labels().iter().collect();
    let missing: Vec<&str> = a.difference(&b).map(|s| s.as_str()).collect();
    let extra: Vec<&str> = b.difference(&a).map(|s| s.as_str()).collect();
    let detail = if missing.is_empty() && extra.is_empty() {
        "same codes in a different order".to_owned()
    } else {
        format!("missing {missing:?}, unexpected {extra:?}")
    };
    Err(EvalError::VocabularyMismatch(format!("{} vs {} codes: {detail}", expected.len(), found.len())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub visit_auc: VisitAuc,
    pub code_aucs: Vec<Option<f64>>,
    pub quantile_accuracy: Vec<Option<f64>>,
    pub k: usize,
}

pub fn evaluate_visits(
    visits: &[ScoredVisit],
    partition: &QuantilePartition,
    k: usize,
    macro_average: bool,
) -> Result<MetricReport, EvalError> {
    let n_codes = visits.first().map_or(0, |v| v.scores.len());
    Ok(MetricReport {
        visit_auc: visit_auc(visits)?,
        code_aucs: (0..n_codes).map(|c| code_auc(visits, c)).collect(),
        quantile_accuracy: top_k_accuracy(visits, partition, k, macro_average)?,
        k,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.17e}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>, EvalError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| EvalError::Invalid(format!("not a number: {s:?}")))
}

/// Header `model,0-20,20-40,40-60,60-80,80-100`; empty cells mark absent groups.
pub fn write_quantile_csv(path: &Path, rows: &[(String, Vec<Option<f64>>)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    let n = rows.first().map_or(super::N_QUANTILES, |r| r.1.len());
    let mut header = vec!["model".to_owned()];
    header.extend((0..n).map(QuantilePartition::label));
    w.write_record(&header)?;
    for (name, acc) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(acc.iter().map(|a| cell(*a)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

pub fn read_quantile_csv(path: &Path) -> Result<Vec<(String, Vec<Option<f64>>)>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("model") {
        return Err(EvalError::Invalid("quantile table must start with a model column".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec.iter().skip(1).map(parse_cell).collect::<Result<_, _>>()?;
        out.push((rec[0].to_owned(), vals));
    }
    Ok(out)
}

/// Header `code_id,code,train_frequency,auc`; empty `auc` for single-class codes.
pub fn write_code_auc_csv(path: &Path, vocab: &Vocabulary, freq: &[u64], aucs: &[Option<f64>]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["code_id", "code", "train_frequency", "auc"])?;
    for (i, a) in aucs.iter().enumerate() {
        let f = freq.get(i).copied().unwrap_or(0);
        w.write_record([i.to_string(), vocab.label(i).to_owned(), f.to_string(), cell(*a)])?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Rows of `(code_id, code, train_frequency, auc)`.
pub fn read_code_auc_csv(path: &Path) -> Result<Vec<(usize, String, u64, Option<f64>)>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(EvalError::Invalid(format!("expected 4 columns, found {}", rec.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| EvalError::Invalid(format!("not an integer: {s:?}")));
        out.push((int(&rec[0])?, rec[1].to_owned(), int(&rec[2])? as u64, parse_cell(&rec[3])?));
    }
    Ok(out)
}

/// Writes `subset,n_codes` counts to `counts` and one row per assigned code
/// (`code_id,code,models,best,auc_<model>...`) to `codes`.
pub fn write_competency_csv(counts: &Path, codes: &Path, report: &CompetencyReport, vocab: &Vocabulary) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(counts)?;
    w.write_record(["subset", "n_codes"])?;
    for (subset, n) in &report.subset_counts {
        w.write_record([report.subset_name(subset), n.to_string()])?;
    }
    w.flush().map_err(|source| EvalError::Io { path: counts.display().to_string(), source })?;

    let mut w = csv::Writer::from_path(codes)?;
    let mut header: Vec<String> = ["code_id", "code", "models", "best"].map(String::from).to_vec();
    header.extend(report.models.iter().map(|m| format!("auc_{m}")));
    w.write_record(&header)?;
    for a in &report.assignments {
        let mut rec = vec![
            a.code.to_string(),
            vocab.label(a.code).to_owned(),
            report.subset_name(&a.members),
            report.models[a.best].clone(),
        ];
        rec.extend(a.aucs.iter().map(|x| cell(Some(*x))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: codes.display().to_string(), source })
}
