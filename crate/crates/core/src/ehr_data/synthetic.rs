//! Seeded synthetic cohorts with a planted time-gap rule.
//!
//! Code 0 is the "cause" code and code 1 the "effect" code. The effect code is
//! present at an admission exactly when the cause code was present at some
//! earlier admission more than `threshold_weeks` ago. Other codes follow a
//! two-state latent Markov chain.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal};
use serde::{Deserialize, Serialize};

use super::{Admission, Cohort, DataError, Ontology, PatientRecord, Vocabulary};

pub const CAUSE_CODE: usize = 0;
pub const EFFECT_CODE: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub n_codes: usize,
    pub threshold_weeks: f64,
    pub gap_median_days: f64,
    pub gap_sigma: f64,
    /// Success probability of the geometric admission-count draw.
    pub admissions_p: f64,
    pub min_admissions: usize,
    pub max_admissions: usize,
    /// Probability of the cause code in latent state 0 and 1.
    pub cause_rate: [f64; 2],
    /// Probability that the latent state carries over to the next admission.
    pub state_persistence: f64,
    pub max_background_codes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            seed: 0,
            n_codes: 24,
            threshold_weeks: 8.0,
            gap_median_days: 30.0,
            gap_sigma: 1.0,
            admissions_p: 0.6,
            min_admissions: 2,
            max_admissions: 8,
            cause_rate: [0.3, 0.7],
            state_persistence: 0.8,
            max_background_codes: 3,
        }
    }
}

impl SyntheticConfig {
    pub const CAUSE_CODE: usize = CAUSE_CODE;
    pub const EFFECT_CODE: usize = EFFECT_CODE;

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_owned()));
        if self.n_codes < 8 {
            return bad("n_codes must be at least 8");
        }
        if self.n_patients < 1 {
            return bad("n_patients must be at least 1");
        }
        if self.threshold_weeks.is_nan() || self.threshold_weeks < 0.0 {
            return bad("threshold_weeks must be non-negative");
        }
        if !(self.gap_median_days > 0.0 && self.gap_median_days.is_finite()) {
            return bad("gap_median_days must be positive");
        }
        if !(self.gap_sigma >= 0.0 && self.gap_sigma.is_finite()) {
            return bad("gap_sigma must be non-negative");
        }
        if !(self.admissions_p > 0.0 && self.admissions_p <= 1.0) {
            return bad("admissions_p must lie in (0, 1]");
        }
        if self.min_admissions < 1 || self.max_admissions < self.min_admissions {
            return bad("need 1 <= min_admissions <= max_admissions");
        }
        if self.cause_rate.iter().chain([&self.state_persistence]).any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.max_background_codes < 1 {
            return bad("max_background_codes must be at least 1");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let labels = (0..self.n_codes)
            .map(|i| match i {
                CAUSE_CODE => "cause".to_owned(),
                EFFECT_CODE => "effect".to_owned(),
                _ => format!("dx{i:03}"),
            })
            .collect();
        Vocabulary::new(labels).expect("generated labels are unique")
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, pool: &[usize]) -> usize {
    // Zipf-like weights 1/(rank+1) so code frequencies spread out.
    let total: f64 = (0..pool.len()).map(|r| 1.0 / (r as f64 + 1.0)).sum();
    let mut u = rng.random::<f64>() * total;
    for (r, &c) in pool.iter().enumerate() {
        u -= 1.0 / (r as f64 + 1.0);
        if u <= 0.0 {
            return c;
        }
    }
    *pool.last().expect("non-empty pool")
}

pub fn generate_synthetic_cohort(cfg: &SyntheticConfig) -> Result<Cohort, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geo = Geometric::new(cfg.admissions_p).map_err(|e| DataError::Config(e.to_string()))?;
    let gaps = LogNormal::new(cfg.gap_median_days.ln(), cfg.gap_sigma).map_err(|e| DataError::Config(e.to_string()))?;
    let others: Vec<usize> = (2..cfg.n_codes).collect();
    let pools: [Vec<usize>; 2] = [
        others.iter().copied().filter(|c| c % 2 == 0).collect(),
        others.iter().copied().filter(|c| c % 2 == 1).collect(),
    ];
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let n_adm = loop {
            let k = cfg.min_admissions as u64 + geo.sample(&mut rng);
            if k <= cfg.max_admissions as u64 {
                break k as usize;
            }
        };
        let mut state = usize::from(rng.random::<bool>());
        let mut day = 0.0f64;
        let mut first_cause: Option<f64> = None;
        let mut admissions = Vec::with_capacity(n_adm);
        for j in 0..n_adm {
            if j > 0 {
                day += gaps.sample(&mut rng);
                if rng.random::<f64>() >= cfg.state_persistence {
                    state = 1 - state;
                }
            }
            let t = day / 7.0;
            let mut codes = BTreeSet::new();
            let n_bg = rng.random_range(1..=cfg.max_background_codes);
            for _ in 0..n_bg {
                let s = if rng.random::<f64>() < 0.85 { state } else { 1 - state };
                codes.insert(pick_weighted(&mut rng, &pools[s]));
            }
            if let Some(tc) = first_cause {
                if t - tc > cfg.threshold_weeks {
                    codes.insert(EFFECT_CODE);
                }
            }
            if rng.random::<f64>() < cfg.cause_rate[state] {
                codes.insert(CAUSE_CODE);
                first_cause.get_or_insert(t);
            }
            let stay_days = rng.random_range(1..=7) as f64;
            admissions.push(Admission { time: t, codes: codes.into_iter().collect(), stay_days });
        }
        patients.push(PatientRecord { subject_id: format!("syn{p:06}"), admissions });
    }
    Cohort::new(patients, cfg.vocabulary())
}

/// Two-level hierarchy: groups of four codes, groups of three groups, one root.
pub fn synthetic_ontology(vocab: &Vocabulary) -> Ontology {
    let mut edges = Vec::new();
    let n_groups = vocab.len().div_ceil(4);
    for (i, l) in vocab.labels().iter().enumerate() {
        edges.push((l.clone(), format!("grp{}", i / 4)));
    }
    for g in 0..n_groups {
        edges.push((format!("grp{g}"), format!("sup{}", g / 3)));
    }
    for s in 0..n_groups.div_ceil(3) {
        edges.push((format!("sup{s}"), "root".to_owned()));
    }
    Ontology::from_edges(vocab, &edges).expect("synthetic hierarchy is a tree")
}
