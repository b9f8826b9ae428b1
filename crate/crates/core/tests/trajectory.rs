use icenode::diff_engine::ParameterSet;
use icenode::ehr_data::{Admission, PatientRecord};
use icenode::embeddings::EmbeddingKind;
use icenode::model::{GradientModel, IceNode, ModelConfig};
use icenode::ode_core::ivp_solve;
use icenode::trajectory::*;

fn record() -> PatientRecord {
    let adm = |t: f64, c: &[usize]| Admission { time: t, codes: c.to_vec(), stay_days: 2.0 };
    PatientRecord {
        subject_id: "syn000007".into(),
        admissions: vec![adm(0.0, &[0, 3]), adm(2.5, &[1]), adm(9.0, &[0, 1, 4]), adm(10.0, &[2])],
    }
}

fn model(seed: u64) -> (IceNode, ParameterSet) {
    let cfg = ModelConfig { embed_dim: 4, memory_dim: 3, embedding: EmbeddingKind::Matrix, ..ModelConfig::desk_scale() };
    IceNode::new(cfg, 6, None, seed).unwrap()
}

fn labels(codes: &[usize]) -> Vec<String> {
    codes.iter().map(|c| format!("c{c}")).collect()
}

#[test]
fn endpoints_match_training_predictions() {
    let (m, p) = model(1);
    let rec = record();
    let codes = [0, 1, 2, 3, 4, 5];
    let preds = m.predict(&p, &rec).unwrap();
    for res in [1, 7, 64] {
        let t = sample_risk_trajectory(&m, &p, &rec, &codes, &labels(&codes), res).unwrap();
        assert_eq!(t.rows.len(), 3 * (res + 1));
        for k in 0..3 {
            let end = &t.rows[k * (res + 1) + res];
            assert_eq!(end.time, rec.admissions[k + 1].time);
            assert_eq!(end.risks, preds[k]);
        }
    }
}

#[test]
fn times_ordered_with_duplicates_at_updates() {
    let (m, p) = model(2);
    let rec = record();
    let t = sample_risk_trajectory(&m, &p, &rec, &[1], &labels(&[1]), 16).unwrap();
    let times: Vec<f64> = t.rows.iter().map(|r| r.time).collect();
    for w in times.windows(2) {
        assert!(w[0] < w[1] || (w[0] == w[1] && rec.admissions.iter().any(|a| a.time == w[0])));
    }
    let dups = times.windows(2).filter(|w| w[0] == w[1]).count();
    assert_eq!(dups, rec.admissions.len() - 2);
    for r in &t.rows {
        assert!(r.risks.iter().all(|&x| x > 0.0 && x < 1.0));
        if let Some(o) = &r.observed {
            let a = rec.admissions.iter().find(|a| a.time == r.time).expect("flag at admission time");
            assert_eq!(o[0], a.codes.contains(&1));
        }
    }
    assert_eq!(t.rows.iter().filter(|r| r.observed.is_some()).count(), 2 * (rec.admissions.len() - 1));
}

#[test]
fn zero_dynamics_give_flat_intervals() {
    let (m, mut p) = model(3);
    for id in p.ids().collect::<Vec<_>>() {
        if p.entry(id).name.starts_with("dyn.") {
            p.get_mut(id).fill(0.0);
        }
    }
    let t = sample_risk_trajectory(&m, &p, &record(), &[0, 2], &labels(&[0, 2]), 8).unwrap();
    for chunk in t.rows.chunks(9) {
        assert!(chunk.iter().all(|r| r.risks == chunk[0].risks));
    }
}

#[test]
fn midpoint_matches_reintegration() {
    let (m, p) = model(4);
    let rec = record();
    let codes = [0, 1, 2, 3, 4, 5];
    let t = sample_risk_trajectory(&m, &p, &rec, &codes, &labels(&codes), 64).unwrap();
    let table = m.embedding().table(&p).unwrap();
    let run = m.run(&p, &table, &rec).unwrap();
    let tol = 10.0 * m.config.solver.rtol;
    for k in 0..3 {
        let span = rec.admissions[k + 1].time - rec.admissions[k].time;
        let mut tight = m.config.solver;
        tight.rtol = 1e-10;
        tight.atol = 1e-12;
        let sol = ivp_solve(m.dynamics(), &p, &run.starts[k], 0.0, span / 2.0, &tight, None).unwrap();
        let want = m.decode_risks(&p, &sol.final_state[3..]).unwrap();
        let row = &t.rows[k * 65 + 32];
        assert_eq!(row.time, rec.admissions[k].time + span / 2.0);
        for (a, b) in row.risks.iter().zip(&want) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
    }
}

#[test]
fn second_differences_shrink_with_resolution() {
    let (m, p) = model(5);
    let rec = record();
    let curv = |res: usize| {
        let t = sample_risk_trajectory(&m, &p, &rec, &[0, 1, 2], &labels(&[0, 1, 2]), res).unwrap();
        let mut worst: f64 = 0.0;
        for chunk in t.rows.chunks(res + 1) {
            for w in chunk.windows(3) {
                for c in 0..3 {
                    worst = worst.max((w[0].risks[c] - 2.0 * w[1].risks[c] + w[2].risks[c]).abs());
                }
            }
        }
        worst
    };
    let (a, b, c) = (curv(16), curv(32), curv(64));
    assert!(b < a && c < b, "{a} {b} {c}");
    assert!(c < 1e-2);
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = model(6);
    let rec = record();
    let t = sample_risk_trajectory(&m, &p, &rec, &[4, 0], &labels(&[4, 0]), 5).unwrap();
    let path = dir.path().join("t.csv");
    export_trajectory_csv(&t, &path).unwrap();
    let back = read_trajectory_csv(&path, &t.subject_id).unwrap();
    assert_eq!(back.labels, t.labels);
    assert_eq!(back.rows, t.rows);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("time_weeks,risk_c4,risk_c0,observed_c4,observed_c0\n"));

    let empty = sample_risk_trajectory(&m, &p, &rec, &[], &[], 3).unwrap();
    export_trajectory_csv(&empty, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("time_weeks"));
    let back = read_trajectory_csv(&path, "x").unwrap();
    assert_eq!(back.rows.iter().map(|r| r.time).collect::<Vec<_>>(), empty.rows.iter().map(|r| r.time).collect::<Vec<_>>());
}

#[test]
fn rejects_bad_requests() {
    let (m, p) = model(7);
    assert!(sample_risk_trajectory(&m, &p, &record(), &[6], &labels(&[6]), 4).is_err());
    assert!(sample_risk_trajectory(&m, &p, &record(), &[0], &labels(&[0]), 0).is_err());
}
