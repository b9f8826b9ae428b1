use icenode::diff_engine::{write_archive, Group, ParameterSet};
use icenode::ehr_data::{generate_synthetic_cohort, split_cohort, Cohort, PatientRecord, SyntheticConfig};
use icenode::embeddings::EmbeddingKind;
use icenode::model::{batch_loss, ModelConfig, ModelKind};
use icenode::ode_core::solver_call_count;
use icenode::training::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, seed: u64) -> Cohort {
    generate_synthetic_cohort(&SyntheticConfig { n_patients: n, seed, n_codes: 10, ..SyntheticConfig::default() }).unwrap()
}

fn refs(c: &Cohort) -> Vec<&PatientRecord> {
    c.patients.iter().collect()
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.model = ModelConfig {
        embed_dim: 4,
        memory_dim: 3,
        embedding: EmbeddingKind::Matrix,
        ..ModelConfig::desk_scale()
    };
    cfg.train = TrainConfig { batch_size: 8, epochs: 2, lr_dynamics: 1e-3, lr_other: 1e-2, ..TrainConfig::desk_scale() };
    cfg
}

#[test]
fn batch_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_batch(1, 1, &mut rng), vec![0]);
    assert_eq!(sample_batch(50, 20, &mut batch_rng(3)), sample_batch(50, 20, &mut batch_rng(3)));
    assert_ne!(sample_batch(50, 20, &mut batch_rng(3)), sample_batch(50, 20, &mut batch_rng(4)));

    let draws = sample_batch(10, 100_000, &mut rng);
    let mut counts = [0f64; 10];
    draws.iter().for_each(|&i| counts[i] += 1.0);
    let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!((c - 10_000.0).abs() < 3.0 * sigma, "{counts:?}");
    }
}

fn two_groups() -> ParameterSet {
    let mut p = ParameterSet::new();
    p.add("dyn", Group::Dynamics, &[2], vec![1.0, -1.0]).unwrap();
    p.add("other", Group::Other, &[1], vec![0.5]).unwrap();
    p
}

#[test]
fn adam_examples() {
    let mut p = two_groups();
    let before = p.clone();
    let mut st = AdamState::new(&p);
    let zero = p.zeros_like();
    adam_step(&mut p, &zero, &mut st, 0.1, 0.1).unwrap();
    assert_eq!(p, before);

    let mut one = ParameterSet::new();
    one.add("x", Group::Other, &[1], vec![0.0]).unwrap();
    let mut g = one.zeros_like();
    g.data_mut()[0] = 1.0;
    let mut st = AdamState::new(&one);
    adam_step(&mut one, &g, &mut st, 0.5, 0.01).unwrap();
    assert!((one.data()[0] + 0.01).abs() < 1e-9);

    let mut g = p.zeros_like();
    g.fill(1.0);
    let mut a = p.clone();
    adam_step(&mut a, &g, &mut AdamState::new(&p), 0.1, 0.001).unwrap();
    let mut b = p.clone();
    adam_step(&mut b, &g, &mut AdamState::new(&p), 0.001, 0.1).unwrap();
    assert!((a.data()[0] - (1.0 - 0.1)).abs() < 1e-6 && (a.data()[2] - (0.5 - 0.001)).abs() < 1e-6);
    assert!((b.data()[0] - (1.0 - 0.001)).abs() < 1e-6 && (b.data()[2] - (0.5 - 0.1)).abs() < 1e-6);

    g.data_mut()[2] = f64::NAN;
    assert!(matches!(adam_step(&mut a, &g, &mut AdamState::new(&p), 0.1, 0.1), Err(TrainError::NonFinite(n)) if n == "other"));
}

#[test]
fn learning_rate_decay() {
    let t = TrainConfig { epochs: 10, decay_rate: 0.3, lr_dynamics: 2.0, lr_other: 4.0, ..TrainConfig::default() };
    assert_eq!(t.learning_rates(0), (2.0, 4.0));
    let (a, b) = t.learning_rates(10);
    assert!((a - 0.6).abs() < 1e-15 && (b - 1.2).abs() < 1e-15);
    let (a5, _) = t.learning_rates(5);
    assert!((a5 - 2.0 * 0.3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn iteration_accounting() {
    let c = cohort(300, 1);
    let train: Vec<&PatientRecord> = c.patients[..256].iter().collect();
    let valid: Vec<&PatientRecord> = c.patients[256..].iter().collect();
    let mut cfg = tiny();
    cfg.train = TrainConfig { epochs: 60, batch_size: 256, lr_other: 1e-2, ..cfg.train };
    let out = train_model(ModelKind::Gru, &cfg, c.n_codes(), None, &train, &valid, None).unwrap();
    assert_eq!(out.history.iterations, 60);
    assert_eq!(out.history.loss_trace.len(), 60);
    assert_eq!(out.history.valid_auc.len(), 60);
}

#[test]
fn training_reduces_first_batch_loss() {
    let c = cohort(160, 2);
    let split = split_cohort(&c, 0).unwrap();
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 10;
    let out = train_model(ModelKind::IceNode, &cfg, c.n_codes(), None, &refs(&split.train), &refs(&split.valid), None).unwrap();
    assert_eq!(out.history.iterations, split.train.len().div_ceil(10));
    assert!(out.history.iterations >= 10);
    let first: Vec<&PatientRecord> =
        sample_batch(split.train.len(), 10, &mut batch_rng(cfg.train.seed)).into_iter().map(|i| &split.train.patients[i]).collect();
    let (fresh, init) = TrainedModel::new(ModelKind::IceNode, &cfg.model, c.n_codes(), None, cfg.train.seed).unwrap();
    let TrainedModel::IceNode(m) = fresh else { panic!() };
    let before = batch_loss(&m, &init, &first).unwrap();
    assert_eq!(before, out.history.loss_trace[0].1);
    let after = batch_loss(&m, &out.final_params, &first).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn early_stopping_keeps_best() {
    let c = cohort(200, 3);
    let split = split_cohort(&c, 1).unwrap();
    let mut cfg = tiny();
    cfg.train.eval_every = 5;
    cfg.train.epochs = 3;
    let (tr, va) = (refs(&split.train), refs(&split.valid));
    let out = train_model(ModelKind::IceNode, &cfg, c.n_codes(), None, &tr, &va, None).unwrap();
    let h = &out.history;
    let max = h.valid_auc.iter().map(|x| x.1).fold(f64::MIN, f64::max);
    assert_eq!(h.best_valid_auc, Some(max));
    let best_auc = validation_auc(&out.model, &out.params, &va, None).unwrap();
    let final_auc = validation_auc(&out.model, &out.final_params, &va, None).unwrap();
    assert_eq!(best_auc, max);
    assert!(best_auc >= final_auc);
}

#[test]
fn deterministic_and_group_isolated() {
    let c = cohort(120, 4);
    let split = split_cohort(&c, 2).unwrap();
    let (tr, va) = (refs(&split.train), refs(&split.valid));
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let a = train_model(ModelKind::IceNode, &cfg, c.n_codes(), None, &tr, &va, None).unwrap();
    let b = train_model(ModelKind::IceNode, &cfg, c.n_codes(), None, &tr, &va, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_params, b.final_params);

    cfg.train.lr_dynamics = 0.0;
    let frozen = train_model(ModelKind::IceNode, &cfg, c.n_codes(), None, &tr, &va, None).unwrap();
    let (_, init) = TrainedModel::new(ModelKind::IceNode, &cfg.model, c.n_codes(), None, cfg.train.seed).unwrap();
    for e in init.entries() {
        let id = init.id(&e.name).unwrap();
        if e.group == Group::Dynamics {
            assert_eq!(init.get(id), frozen.final_params.get(id), "{}", e.name);
        } else {
            assert_ne!(init.get(id), frozen.final_params.get(id), "{}", e.name);
        }
    }
}

#[test]
fn logreg_training_skips_solver() {
    let c = cohort(100, 5);
    let split = split_cohort(&c, 3).unwrap();
    let calls = solver_call_count();
    let out = train_model(ModelKind::LogReg, &tiny(), c.n_codes(), None, &refs(&split.train), &refs(&split.valid), None).unwrap();
    assert_eq!(solver_call_count(), calls);
    assert!(out.history.best_valid_auc.unwrap() > 0.5);
}

fn meta(kind: ModelKind, cfg: &RunConfig, c: &Cohort) -> CheckpointMeta {
    CheckpointMeta {
        schema: CHECKPOINT_SCHEMA,
        version: VERSION.to_owned(),
        model_kind: kind,
        model: cfg.model.clone(),
        train: Some(cfg.train.clone()),
        logreg: None,
        vocabulary: c.vocabulary.clone(),
        ancestry: None,
        code_frequency: c.code_frequency.clone(),
        best_iteration: None,
        best_valid_auc: None,
        split_seed: Some(0),
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort(20, 6);
    let cfg = tiny();
    let (_, params) = TrainedModel::new(ModelKind::IceNode, &cfg.model, c.n_codes(), None, 9).unwrap();
    let ck = Checkpoint { meta: meta(ModelKind::IceNode, &cfg, &c), params };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert!(back.params.data().iter().zip(ck.params.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(back.meta.version.starts_with('v'));
    let model = back.model().unwrap();
    let rec = &c.patients[0];
    assert_eq!(model.predict(&back.params, rec).unwrap(), ck.model().unwrap().predict(&ck.params, rec).unwrap());
    assert!(back.model_for(c.n_codes() + 1).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut m = serde_json::to_value(&ck.meta).unwrap();
    m["schema"] = 99.into();
    write_archive(std::fs::File::create(&path).unwrap(), &ck.params, &m).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Checkpoint(msg)) if msg.contains("schema")));
}

#[test]
fn flat_config_file() {
    let cfg = RunConfig::from_toml_str("preset = \"desk\"\nembedding = \"matrix\"\nrtol = 1e-5\nepochs = 3\nlr_dynamics = 1\n").unwrap();
    assert_eq!(cfg.model.embed_dim, 16);
    assert_eq!(cfg.model.embedding, EmbeddingKind::Matrix);
    assert_eq!(cfg.model.solver.rtol, 1e-5);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.lr_dynamics, 1.0);
    assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(cfg.to_toml().lines().count(), RunConfig::KEYS.len());

    let err = |s: &str| match RunConfig::from_toml_str(s) {
        Err(TrainError::Config { key, .. }) => key,
        other => panic!("{other:?}"),
    };
    assert_eq!(err("bogus = 1"), "bogus");
    assert_eq!(err("epochs = \"many\""), "epochs");
    assert_eq!(err("epochs = 0"), "epochs");
    assert_eq!(err("dynamics = \"lstm\""), "dynamics");
    assert_eq!(err("preset = \"huge\""), "preset");

    let mut c = RunConfig::default();
    c.set_str("dynamics", "gru").unwrap();
    c.set_str("batch_size", "32").unwrap();
    c.set_str("uniform_time", "true").unwrap();
    assert_eq!(c.train.batch_size, 32);
    assert!(c.model.uniform_time);
    assert!(c.set_str("nope", "1").is_err());
}
