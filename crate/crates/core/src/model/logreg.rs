use serde::{Deserialize, Serialize};

use super::{sigmoid, ModelError};
use crate::diff_engine::{Group, ParameterSet};
use crate::ehr_data::PatientRecord;

/// Sorted union of the codes in admissions `0..k`.
pub fn history_features(record: &PatientRecord, k: usize) -> Vec<usize> {
    let mut x: Vec<usize> = record.admissions[..k].iter().flat_map(|a| a.codes.iter().copied()).collect();
    x.sort_unstable();
    x.dedup();
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub l1: f64,
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the largest parameter change in one step falls below this.
    pub tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { l1: 1e-4, l2: 1e-4, max_iter: 500, tol: 1e-6 }
    }
}

/// One independent elastic-net logistic regression per code, on the
/// multi-hot union of all previous admissions.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg {
    pub n_codes: usize,
}

#[derive(Debug, Clone)]
pub struct LogRegFit {
    pub params: ParameterSet,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective of the returned iterate.
    pub objective: f64,
}

struct Sample {
    x: Vec<usize>,
    y: Vec<usize>,
}

impl LogReg {
    pub fn new(n_codes: usize) -> Self {
        Self { n_codes }
    }

    pub fn zero_params(&self) -> ParameterSet {
        let c = self.n_codes;
        let mut p = ParameterSet::new();
        p.add_zeros("lr.w", Group::Other, &[c, c]).expect("fresh set");
        p.add_zeros("lr.b", Group::Other, &[c]).expect("fresh set");
        p
    }

    fn split<'a>(&self, params: &'a ParameterSet) -> Result<(&'a [f64], &'a [f64]), ModelError> {
        let c = self.n_codes;
        match (params.by_name("lr.w"), params.by_name("lr.b")) {
            (Some(w), Some(b)) if w.len() == c * c && b.len() == c => Ok((w, b)),
            _ => Err(ModelError::Config("parameters do not hold a logistic regression of this size".into())),
        }
    }

    fn logits(w: &[f64], b: &[f64], x: &[usize]) -> Vec<f64> {
        let c = b.len();
        (0..c).map(|i| b[i] + x.iter().map(|&j| w[i * c + j]).sum::<f64>()).collect()
    }

    /// Risk vector `sigmoid(W x + b)` for a feature set.
    pub fn forward(&self, params: &ParameterSet, x: &[usize]) -> Result<Vec<f64>, ModelError> {
        let (w, b) = self.split(params)?;
        if let Some(&j) = x.iter().find(|&&j| j >= self.n_codes) {
            return Err(ModelError::Data(format!("feature {j} outside vocabulary of {}", self.n_codes)));
        }
        Ok(Self::logits(w, b, x).into_iter().map(sigmoid).collect())
    }

    /// Predictions for admissions `1..n` of a record.
    pub fn predict(&self, params: &ParameterSet, record: &PatientRecord) -> Result<Vec<Vec<f64>>, ModelError> {
        (1..record.admissions.len()).map(|k| self.forward(params, &history_features(record, k))).collect()
    }

    fn objective(&self, cfg: &LogRegConfig, w: &[f64], b: &[f64], data: &[Sample]) -> f64 {
        let c = self.n_codes;
        let mut loss = 0.0;
        let mut target = vec![0.0; c];
        for s in data {
            s.y.iter().for_each(|&i| target[i] = 1.0);
            for (z, v) in Self::logits(w, b, &s.x).iter().zip(&target) {
                // log(1 + e^z) - v z, stable for both signs
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - v * z;
            }
            s.y.iter().for_each(|&i| target[i] = 0.0);
        }
        let reg: f64 = w.iter().map(|x| cfg.l1 * x.abs() + 0.5 * cfg.l2 * x * x).sum();
        loss / data.len() as f64 + reg
    }

    /// Proximal gradient descent on the mean log-loss (summed over codes)
    /// plus `l1 |W|_1 + l2/2 |W|^2`. The bias is not penalized.
    pub fn fit(&self, records: &[&PatientRecord], cfg: &LogRegConfig) -> Result<LogRegFit, ModelError> {
        if !(cfg.l1 >= 0.0 && cfg.l2 >= 0.0 && cfg.tol > 0.0) || cfg.max_iter == 0 {
            return Err(ModelError::Config("logistic regression needs l1, l2 >= 0, tol > 0, max_iter >= 1".into()));
        }
        let c = self.n_codes;
        let mut data = Vec::new();
        for r in records {
            for k in 1..r.admissions.len() {
                data.push(Sample { x: history_features(r, k), y: r.admissions[k].codes.clone() });
            }
        }
        if data.is_empty() {
            return Err(ModelError::Data("no training pairs for logistic regression".into()));
        }
        if data.iter().flat_map(|s| s.x.iter().chain(&s.y)).any(|&j| j >= c) {
            return Err(ModelError::Data(format!("code outside vocabulary of {c}")));
        }
        let n = data.len() as f64;
        // Lipschitz bound of the smooth part, per code: 0.25 * max ||[x; 1]||^2 + l2.
        let max_norm = data.iter().map(|s| s.x.len() + 1).max().unwrap_or(1) as f64;
        let step = 1.0 / (0.25 * max_norm + cfg.l2);

        let mut w = vec![0.0; c * c];
        let mut b = vec![0.0; c];
        let mut best = (self.objective(cfg, &w, &b, &data), w.clone(), b.clone());
        let mut converged = false;
        let mut iterations = 0;
        let mut target = vec![0.0; c];
        for it in 1..=cfg.max_iter {
            iterations = it;
            let mut gw = vec![0.0; c * c];
            let mut gb = vec![0.0; c];
            for s in &data {
                s.y.iter().for_each(|&i| target[i] = 1.0);
                for (i, z) in Self::logits(&w, &b, &s.x).into_iter().enumerate() {
                    let r = (sigmoid(z) - target[i]) / n;
                    gb[i] += r;
                    for &j in &s.x {
                        gw[i * c + j] += r;
                    }
                }
                s.y.iter().for_each(|&i| target[i] = 0.0);
            }
            let mut change: f64 = 0.0;
            for (wi, g) in w.iter_mut().zip(&gw) {
                let v = *wi - step * (g + cfg.l2 * *wi);
                let shrunk = v.signum() * (v.abs() - step * cfg.l1).max(0.0);
                change = change.max((shrunk - *wi).abs());
                *wi = shrunk;
            }
            for (bi, g) in b.iter_mut().zip(&gb) {
                change = change.max((step * g).abs());
                *bi -= step * g;
            }
            let obj = self.objective(cfg, &w, &b, &data);
            if obj < best.0 {
                best = (obj, w.clone(), b.clone());
            }
            if change < cfg.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("logistic regression did not converge in {} iterations; returning best iterate", cfg.max_iter);
        }
        let mut params = self.zero_params();
        let (wid, bid) = (params.id("lr.w").expect("present"), params.id("lr.b").expect("present"));
        params.get_mut(wid).copy_from_slice(&best.1);
        params.get_mut(bid).copy_from_slice(&best.2);
        Ok(LogRegFit { params, iterations, converged, objective: best.0 })
    }
}
