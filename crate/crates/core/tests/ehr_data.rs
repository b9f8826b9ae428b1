use std::collections::BTreeSet;
use std::io::Write;

use icenode::ehr_data::*;
use proptest::prelude::*;

fn vocab(labels: &[&str]) -> Vocabulary {
    Vocabulary::new(labels.iter().map(|s| s.to_string()).collect()).unwrap()
}

fn file_with(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

fn adm(time: f64, stay: f64, codes: &[usize]) -> Admission {
    Admission { time, codes: codes.to_vec(), stay_days: stay }
}

fn patient(id: &str, adms: Vec<Admission>) -> PatientRecord {
    PatientRecord { subject_id: id.into(), admissions: adms }
}

#[test]
fn days_are_converted_to_weeks_from_first_admission() {
    let v = vocab(&["a", "b"]);
    let f = file_with("#icenode-records v1\n{\"subject_id\":\"p\",\"admissions\":[[0,2,[\"a\"]],[70,1,[\"b\",\"a\",\"a\"]]]}\n");
    let r = parse_patient_records(f.path(), &v).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].times(), vec![0.0, 10.0]);
    assert_eq!(r[0].admissions[1].codes, vec![0, 1]);
}

#[test]
fn empty_file_gives_no_records() {
    let f = file_with("");
    assert!(parse_patient_records(f.path(), &vocab(&["a"])).unwrap().is_empty());
}

#[test]
fn unsorted_admissions_are_reordered() {
    let v = vocab(&["a", "b", "c"]);
    let f = file_with(
        "#icenode-records v1\n{\"subject_id\":\"p\",\"admissions\":[[21,1,[\"c\"]],[7,1,[\"a\"]],[14,1,[\"b\"]]]}\n",
    );
    let r = parse_patient_records(f.path(), &v).unwrap();
    assert_eq!(r[0].times(), vec![0.0, 1.0, 2.0]);
    let codes: Vec<_> = r[0].admissions.iter().map(|a| a.codes[0]).collect();
    assert_eq!(codes, vec![0, 1, 2]);
}

#[test]
fn malformed_line_reports_line_number() {
    let f = file_with("#icenode-records v1\n\n{\"subject_id\":\"p\",\"admissions\":[[0,1,[\"a\"]]]}\n{not json\n");
    match parse_patient_records(f.path(), &vocab(&["a"])) {
        Err(DataError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_code_is_a_validation_error() {
    let f = file_with("#icenode-records v1\n{\"subject_id\":\"p\",\"admissions\":[[0,1,[\"zz\"]]]}\n");
    match parse_patient_records(f.path(), &vocab(&["a"])) {
        Err(DataError::UnknownCode { line, code }) => {
            assert_eq!(line, 2);
            assert_eq!(code, "zz");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn admission_anchor_is_selectable() {
    let f = file_with("#icenode-records v1\n#vocabulary\ta\n{\"subject_id\":\"p\",\"admissions\":[[10,3,[\"a\"]],[24,10,[\"a\"]]]}\n");
    let (_, r) = read_records_file(f.path(), ParseOptions::default()).unwrap();
    assert_eq!(r[0].times(), vec![0.0, 2.0]);
    let (_, r) = read_records_file(f.path(), ParseOptions { anchor: TimeAnchor::Admission }).unwrap();
    assert_eq!(r[0].times(), vec![0.0, 1.0]);
}

#[test]
fn filter_rules() {
    let v = vocab(&["a"]);
    let one = patient("one", vec![adm(0.0, 1.0, &[0])]);
    let long = patient("long", vec![adm(0.0, 1.0, &[0]), adm(1.0, 15.0, &[0]), adm(2.0, 2.0, &[0])]);
    let edge = patient("edge", vec![adm(0.0, 14.0, &[0]), adm(1.0, 14.0, &[0])]);
    let (c, rep) = filter_cohort(vec![one, long, edge], v).unwrap();
    assert_eq!(c.patients.iter().map(|p| p.subject_id.as_str()).collect::<Vec<_>>(), vec!["edge"]);
    assert_eq!(rep, FilterReport { input: 3, kept: 1, too_few_admissions: 1, long_stay: 1 });
}

#[test]
fn ten_patients_four_violating() {
    let v = vocab(&["a", "b"]);
    let mut recs = Vec::new();
    for i in 0..10 {
        let adms = match i {
            0 | 1 => vec![adm(0.0, 1.0, &[0])],
            2 => vec![adm(0.0, 20.0, &[0]), adm(3.0, 1.0, &[1])],
            3 => vec![adm(0.0, 1.0, &[0]), adm(3.0, 1.0, &[1]), adm(4.0, 30.0, &[1])],
            _ => vec![adm(0.0, 1.0, &[0]), adm(5.0, 1.0, &[1])],
        };
        recs.push(patient(&format!("p{i}"), adms));
    }
    let (c, _) = filter_cohort(recs, v).unwrap();
    assert_eq!(c.len(), 6);
}

#[test]
fn split_sizes_and_determinism() {
    let cohort = generate_synthetic_cohort(&SyntheticConfig { n_patients: 100, ..Default::default() }).unwrap();
    let s = split_cohort(&cohort, 7).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (70, 15, 15));
    let t = split_cohort(&cohort, 7).unwrap();
    assert_eq!(s.train, t.train);
    assert_eq!(s.test, t.test);
    let small = Cohort::new(cohort.patients[..2].to_vec(), cohort.vocabulary.clone()).unwrap();
    assert!(split_cohort(&small, 0).is_err());
}

#[test]
fn training_frequencies_come_from_training_patients() {
    let cohort = generate_synthetic_cohort(&SyntheticConfig { n_patients: 50, ..Default::default() }).unwrap();
    let s = split_cohort(&cohort, 3).unwrap();
    let mut freq = vec![0u64; cohort.n_codes()];
    for p in &s.train.patients {
        for a in &p.admissions {
            for &c in &a.codes {
                freq[c] += 1;
            }
        }
    }
    assert_eq!(s.train.code_frequency, freq);
    assert_ne!(s.train.code_frequency, cohort.code_frequency);
}

#[test]
fn multi_hot_examples() {
    let v = encode_multi_hot(&[2, 5], 8).unwrap();
    assert_eq!(v.to_f64(), vec![0., 0., 1., 0., 0., 1., 0., 0.]);
    assert_eq!(encode_multi_hot(&[], 4).unwrap().to_f64(), vec![0.0; 4]);
    assert_eq!(encode_multi_hot(&[0, 1, 2], 3).unwrap().to_f64(), vec![1.0; 3]);
    assert!(encode_multi_hot(&[4], 4).is_err());
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SyntheticConfig { n_patients: 60, seed: 9, ..Default::default() };
    let a = generate_synthetic_cohort(&cfg).unwrap();
    let b = generate_synthetic_cohort(&cfg).unwrap();
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    write_patient_records(&mut sa, &a.vocabulary, &a.patients).unwrap();
    write_patient_records(&mut sb, &b.vocabulary, &b.patients).unwrap();
    assert_eq!(sa, sb);
    let c = generate_synthetic_cohort(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synthetic_cohort_shape() {
    let cfg = SyntheticConfig { n_patients: 500, ..Default::default() };
    let c = generate_synthetic_cohort(&cfg).unwrap();
    assert_eq!(c.len(), 500);
    for p in &c.patients {
        assert!((2..=8).contains(&p.admissions.len()));
        assert_eq!(p.admissions[0].time, 0.0);
        assert!(p.admissions.windows(2).all(|w| w[1].time > w[0].time));
        assert!(p.admissions.iter().all(|a| !a.codes.is_empty() && a.stay_days <= 14.0));
    }
    let (f, rep) = filter_cohort(c.patients.clone(), c.vocabulary.clone()).unwrap();
    assert_eq!(rep.kept, 500);
    assert_eq!(f, c);
    assert!(c.code_frequency[SyntheticConfig::EFFECT_CODE] > 0);
}

fn effect_follows_rule(c: &Cohort, threshold: f64) -> bool {
    c.patients.iter().all(|p| {
        p.admissions.iter().enumerate().all(|(j, a)| {
            let expect = p.admissions[..j]
                .iter()
                .any(|b| b.codes.contains(&SyntheticConfig::CAUSE_CODE) && a.time - b.time > threshold);
            a.codes.contains(&SyntheticConfig::EFFECT_CODE) == expect
        })
    })
}

#[test]
fn planted_rule_holds() {
    for thr in [0.0, 8.0, f64::INFINITY] {
        let c = generate_synthetic_cohort(&SyntheticConfig { n_patients: 300, threshold_weeks: thr, ..Default::default() })
            .unwrap();
        assert!(effect_follows_rule(&c, thr), "threshold {thr}");
        if thr.is_infinite() {
            assert_eq!(c.code_frequency[SyntheticConfig::EFFECT_CODE], 0);
        }
    }
}

#[test]
fn invalid_synthetic_config_is_rejected() {
    assert!(generate_synthetic_cohort(&SyntheticConfig { n_codes: 7, ..Default::default() }).is_err());
    assert!(generate_synthetic_cohort(&SyntheticConfig { n_patients: 0, ..Default::default() }).is_err());
    assert!(generate_synthetic_cohort(&SyntheticConfig { threshold_weeks: -1.0, ..Default::default() }).is_err());
}

#[test]
fn records_round_trip_through_file() {
    let c = generate_synthetic_cohort(&SyntheticConfig { n_patients: 40, ..Default::default() }).unwrap();
    let mut buf = Vec::new();
    write_patient_records(&mut buf, &c.vocabulary, &c.patients).unwrap();
    let f = file_with(std::str::from_utf8(&buf).unwrap());
    let (v, r) = read_records_file(f.path(), ParseOptions::default()).unwrap();
    assert_eq!(v, c.vocabulary);
    for (a, b) in r.iter().zip(&c.patients) {
        assert_eq!(a.subject_id, b.subject_id);
        for (x, y) in a.admissions.iter().zip(&b.admissions) {
            assert_eq!(x.codes, y.codes);
            assert!((x.time - y.time).abs() < 1e-12);
        }
    }
}

#[test]
fn ontology_ancestors() {
    let v = vocab(&["a", "e"]);
    let chain = parse_ontology("a\tb\nb\tc\n".as_bytes(), &v).unwrap();
    let labels = |o: &Ontology, xs: Vec<usize>| xs.into_iter().map(|i| o.labels[i].clone()).collect::<BTreeSet<_>>();
    assert_eq!(labels(&chain, chain.ancestors(0)), ["a", "b", "c"].iter().map(|s| s.to_string()).collect());
    let diamond = parse_ontology("a\tb\na\tc\nb\td\nc\td\n".as_bytes(), &v).unwrap();
    assert_eq!(labels(&diamond, diamond.ancestors(0)), ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect());
    let idx = diamond.ancestry_index();
    assert_eq!(idx.ancestors[1], vec![1]);
    assert_eq!(idx.n_nodes, 5);
}

#[test]
fn ontology_cycle_names_an_edge() {
    let v = vocab(&["a"]);
    match parse_ontology("a\tb\nb\tc\nc\tb\n".as_bytes(), &v) {
        Err(DataError::Cycle { child, parent }) => {
            assert!(["b", "c"].contains(&child.as_str()) && ["b", "c"].contains(&parent.as_str()));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_ontology("x\ta\n".as_bytes(), &v), Err(DataError::Validation(_))));
}

#[test]
fn code_mapping_dedups_and_reports_unmapped() {
    let v = vocab(&["ccs1", "ccs2"]);
    let m = parse_code_mapping("icd1\tccs1\nicd2\tccs1\nicd3\tccs2\n".as_bytes(), &v).unwrap();
    let raw = read_raw_records(
        "#icenode-records v1\n{\"subject_id\":\"p\",\"admissions\":[[0,1,[\"icd1\",\"icd2\"]],[7,1,[\"icd3\"]]]}\n".as_bytes(),
    )
    .unwrap();
    let r = apply_code_mapping(&raw.patients, &m, ParseOptions::default()).unwrap();
    assert_eq!(r[0].admissions[0].codes, vec![0]);
    let raw = read_raw_records(
        "#icenode-records v1\n{\"subject_id\":\"p\",\"admissions\":[[0,1,[\"icd9\",\"icd1\"]],[7,1,[\"icd8\"]]]}\n".as_bytes(),
    )
    .unwrap();
    match apply_code_mapping(&raw.patients, &m, ParseOptions::default()) {
        Err(DataError::Unmapped(codes)) => assert_eq!(codes, vec!["icd8".to_string(), "icd9".to_string()]),
        other => panic!("{other:?}"),
    }
    assert!(parse_code_mapping("x\tnope\n".as_bytes(), &v).is_err());
}

#[test]
fn synthetic_ontology_is_two_level() {
    let v = SyntheticConfig::default().vocabulary();
    let o = synthetic_ontology(&v);
    let idx = o.ancestry_index();
    assert!(idx.ancestors.iter().all(|a| a.len() == 4));
}

fn brute_reach(o: &Ontology, v: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::from([v]);
    for &p in &o.parents[v] {
        out.extend(brute_reach(o, p));
    }
    out
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 3usize..80, seed in any::<u64>()) {
        let cohort = generate_synthetic_cohort(&SyntheticConfig { n_patients: n, seed: 1, ..Default::default() }).unwrap();
        let s = split_cohort(&cohort, seed).unwrap();
        let mut ids: Vec<String> = s.train.patients.iter().chain(&s.valid.patients).chain(&s.test.patients)
            .map(|p| p.subject_id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(s.train.len(), n * 70 / 100);
        prop_assert_eq!(s.valid.len(), n * 15 / 100);
    }

    #[test]
    fn filter_is_idempotent(stays in proptest::collection::vec((1usize..5, 0.0f64..20.0), 0..30)) {
        let v = vocab(&["a"]);
        let recs: Vec<_> = stays.iter().enumerate().map(|(i, &(k, s))| {
            patient(&i.to_string(), (0..k).map(|j| adm(j as f64, if j == 0 { s } else { 1.0 }, &[0])).collect())
        }).collect();
        let (once, _) = filter_cohort(recs, v.clone()).unwrap();
        let (twice, _) = filter_cohort(once.patients.clone(), v).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn multi_hot_round_trip(codes in proptest::collection::btree_set(0usize..40, 0..40)) {
        let codes: Vec<usize> = codes.into_iter().collect();
        let v = encode_multi_hot(&codes, 40).unwrap();
        prop_assert_eq!(v.count(), codes.len());
        prop_assert_eq!(decode_multi_hot(&v), codes);
    }

    #[test]
    fn ancestry_matches_brute_force(edges in proptest::collection::vec((0usize..12, 0usize..12), 0..30)) {
        // Orient edges from lower to higher index so the graph is a DAG.
        let labels: Vec<String> = (0..12).map(|i| format!("n{i}")).collect();
        let v = Vocabulary::new(labels[..6].to_vec()).unwrap();
        let mut es: Vec<(String, String)> = edges.iter().filter(|(a, b)| a < b)
            .map(|&(a, b)| (labels[a].clone(), labels[b].clone())).collect();
        // internal nodes must have a child
        for i in 6..12 { es.push((labels[i - 6].clone(), labels[i].clone())); }
        let o = Ontology::from_edges(&v, &es).unwrap();
        for node in 0..o.n_nodes() {
            let got: BTreeSet<usize> = o.ancestors(node).into_iter().collect();
            prop_assert_eq!(got, brute_reach(&o, node));
        }
    }
}
