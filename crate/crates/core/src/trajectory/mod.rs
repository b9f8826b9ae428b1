//! Dense per-code risk curves between admissions, with CSV export.
//!
//! Rows are ordered by time. At every admission after the first the time
//! appears twice: first the risk just before the update, then just after.

use std::path::Path;

use thiserror::Error;

use crate::ehr_data::{CodeId, PatientRecord};
use crate::model::{IceNode, ModelError};
use crate::ode_core::dense_sample;

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub time: f64,
    pub risks: Vec<f64>,
    /// Per selected code, whether the admission at this time recorded it.
    /// `None` away from admissions.
    pub observed: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskTrajectory {
    pub subject_id: String,
    pub codes: Vec<CodeId>,
    /// Column names for the codes.
    pub labels: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

/// Samples `resolution + 1` evenly spaced points across every
/// inter-admission interval, endpoints included.
pub fn sample_risk_trajectory(
    model: &IceNode,
    params: &crate::diff_engine::ParameterSet,
    record: &PatientRecord,
    codes: &[CodeId],
    labels: &[String],
    resolution: usize,
) -> Result<RiskTrajectory, TrajectoryError> {
    if resolution == 0 {
        return Err(TrajectoryError::Invalid("resolution must be at least 1".into()));
    }
    if codes.len() != labels.len() {
        return Err(TrajectoryError::Invalid("one label per code required".into()));
    }
    if let Some(&c) = codes.iter().find(|&&c| c >= model.n_codes) {
        return Err(TrajectoryError::Invalid(format!("code {c} outside vocabulary of {}", model.n_codes)));
    }
    let table = crate::model::GradientModel::embedding(model).table(params).map_err(ModelError::from)?;
    let run = model.run(params, &table, record)?;
    let dm = model.config.memory_dim;
    let pick = |risks: Vec<f64>| codes.iter().map(|&c| risks[c]).collect::<Vec<_>>();
    let flags = |k: usize| Some(codes.iter().map(|c| record.admissions[k].codes.binary_search(c).is_ok()).collect());

    let mut rows = Vec::with_capacity(record.admissions.len() * (resolution + 2));
    for (i, sol) in run.solutions.iter().enumerate() {
        let (a, b) = (&record.admissions[i], &record.admissions[i + 1]);
        let local: Vec<f64> = (0..=resolution).map(|j| sol.t1 * j as f64 / resolution as f64).collect();
        let states = dense_sample(sol, &local).map_err(|source| ModelError::Solver {
            subject: record.subject_id.clone(),
            t0: a.time,
            t1: b.time,
            source,
        })?;
        for (j, h) in states.iter().enumerate() {
            let time = if j == resolution { b.time } else { a.time + (b.time - a.time) * j as f64 / resolution as f64 };
            let observed = if j == 0 { flags(i) } else if j == resolution { flags(i + 1) } else { None };
            rows.push(TrajectoryRow { time, risks: pick(model.decode_risks(params, &h[dm..])?), observed });
        }
    }
    Ok(RiskTrajectory { subject_id: record.subject_id.clone(), codes: codes.to_vec(), labels: labels.to_vec(), rows })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Columns: `time_weeks`, `risk_<label>` per code, `observed_<label>` per
/// code (`1`/`0` at admission rows, empty elsewhere).
pub fn export_trajectory_csv(traj: &RiskTrajectory, path: &Path) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_weeks".to_owned()];
    header.extend(traj.labels.iter().map(|l| format!("risk_{l}")));
    header.extend(traj.labels.iter().map(|l| format!("observed_{l}")));
    w.write_record(&header)?;
    for r in &traj.rows {
        let mut rec = vec![num(r.time)];
        rec.extend(r.risks.iter().map(|&x| num(x)));
        match &r.observed {
            Some(o) => rec.extend(o.iter().map(|&b| if b { "1" } else { "0" }.to_owned())),
            None => rec.extend(std::iter::repeat_n(String::new(), traj.labels.len())),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| TrajectoryError::Io { path: path.display().to_string(), source })
}

/// Reads a file written by [`export_trajectory_csv`]; code ids are not
/// stored, so `codes` is left empty.
pub fn read_trajectory_csv(path: &Path, subject_id: &str) -> Result<RiskTrajectory, TrajectoryError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("time_weeks") || header.len() % 2 != 1 {
        return Err(TrajectoryError::Invalid("unexpected trajectory header".into()));
    }
    let n = (header.len() - 1) / 2;
    let labels: Vec<String> = header.iter().skip(1).take(n).map(|h| h.trim_start_matches("risk_").to_owned()).collect();
    let parse = |s: &str| s.parse::<f64>().map_err(|_| TrajectoryError::Invalid(format!("not a number: {s:?}")));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let time = parse(&rec[0])?;
        let risks = (1..=n).map(|i| parse(&rec[i])).collect::<Result<_, _>>()?;
        let flags: Vec<&str> = (n + 1..=2 * n).map(|i| &rec[i]).collect();
        let observed = if n > 0 && flags.iter().all(|f| !f.is_empty()) { Some(flags.iter().map(|&f| f == "1").collect()) } else { None };
        rows.push(TrajectoryRow { time, risks, observed });
    }
    Ok(RiskTrajectory { subject_id: subject_id.to_owned(), codes: Vec::new(), labels, rows })
}
