use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use icenode::ehr_data::{
    filter_cohort, generate_synthetic_cohort, load_ontology, read_records_file, split_cohort, synthetic_ontology, Cohort,
    Ontology, ParseOptions, PatientRecord, SyntheticConfig, Vocabulary,
};
use icenode::embeddings::EmbeddingKind;
use icenode::evaluation::{
    check_vocabulary, delong_test, evaluate_visits, relative_competency, score_records, write_code_auc_csv,
    write_competency_csv, write_quantile_csv, QuantilePartition, ScoredVisit, N_QUANTILES,
};
use icenode::model::ModelKind;
use icenode::training::{
    load_checkpoint, save_checkpoint, train_model, write_trace_csv, Checkpoint, CheckpointMeta, RunConfig, TrainedModel,
    CHECKPOINT_SCHEMA, VERSION,
};
use icenode::trajectory::{export_trajectory_csv, sample_risk_trajectory};
use rayon::ThreadPool;
use serde_json::json;

use crate::manifest::ManifestBuilder;
use crate::verify::{self, Fault, VerifyConfig};
use crate::*;

fn refs(c: &Cohort) -> Vec<&PatientRecord> {
    c.patients.iter().collect()
}

/// `out.csv` → `out.csv.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn synth_config(path: &Path) -> Result<SyntheticConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    let defaults = match toml::Value::try_from(SyntheticConfig::default()) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("synthetic config serializes to a table"),
    };
    let mut merged = defaults.clone();
    for (k, v) in &table {
        if !defaults.contains_key(k) {
            return Err(CliError::Config(format!("synthetic config key {k:?}: unknown key")));
        }
        let mut probe = defaults.clone();
        probe.insert(k.clone(), v.clone());
        toml::Value::Table(probe)
            .try_into::<SyntheticConfig>()
            .map_err(|e| CliError::Config(format!("synthetic config key {k:?}: {}", e.message())))?;
        merged.insert(k.clone(), v.clone());
    }
    toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))
}

fn write_ontology(path: &Path, ont: &Ontology) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (child, parents) in ont.parents.iter().enumerate() {
        for &p in parents {
            writeln!(w, "{}\t{}", ont.labels[child], ont.labels[p]).map_err(|e| CliError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub(crate) fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("synth");
    let mut cfg = match &a.config {
        Some(p) => {
            m.input(p);
            synth_config(p)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_patients {
        cfg.n_patients = n;
    }
    cfg.validate()?;
    let cohort = generate_synthetic_cohort(&cfg)?;
    create_parent(&a.out)?;
    let f = File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut w = BufWriter::new(f);
    icenode::ehr_data::write_patient_records(&mut w, &cohort.vocabulary, &cohort.patients)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&a.out, e))?;
    m.output(&a.out);
    if let Some(o) = &a.ontology_out {
        create_parent(o)?;
        write_ontology(o, &synthetic_ontology(&cohort.vocabulary))?;
        m.output(o);
    }
    m.config(&cfg).seed(cfg.seed).summary(json!({ "patients": cohort.len(), "codes": cohort.n_codes() }));
    m.write(&sidecar(&a.out))?;
    log::info!("wrote {} patients to {}", cohort.len(), a.out.display());
    Ok(())
}

pub(crate) fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    ModelKind::parse(&s.replace('-', "_"))
        .ok_or_else(|| CliError::Config(format!("unknown model {s:?} (expected icenode, icenode-uniform, gru or logreg)")))
}

fn load_cohort(path: &Path) -> Result<Cohort, CliError> {
    let (vocab, records) = read_records_file(path, ParseOptions::default())?;
    let (cohort, report) = filter_cohort(records, vocab)?;
    log::info!(
        "{}: kept {} of {} patients ({} with too few admissions, {} with long stays)",
        path.display(),
        report.kept,
        report.input,
        report.too_few_admissions,
        report.long_stay
    );
    if cohort.is_empty() {
        return Err(CliError::Data(format!("{}: no patient passes the cohort filter", path.display())));
    }
    Ok(cohort)
}

fn select_split(cohort: &Cohort, split: SplitArg, seed: u64) -> Result<Cohort, CliError> {
    if split == SplitArg::All {
        return Ok(cohort.clone());
    }
    let s = split_cohort(cohort, seed)?;
    Ok(match split {
        SplitArg::Train => s.train,
        SplitArg::Valid => s.valid,
        _ => s.test,
    })
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

pub(crate) fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give --config or --preset, not both; a config file may set `preset`".into()))
        }
        (Some(p), None) => RunConfig::load(p)?,
        (None, p) => RunConfig::preset(p.as_deref().unwrap_or("full"))?,
    };
    if let Some(e) = a.embedding {
        cfg.model.embedding = match e {
            EmbeddingArg::Matrix => EmbeddingKind::Matrix,
            EmbeddingArg::Gram => EmbeddingKind::Gram,
        };
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set_str(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn train(a: &TrainArgs, pool: Option<&ThreadPool>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("train");
    let kind = parse_kind(&a.model)?;
    let cfg = resolve_run_config(a)?;
    if let Some(p) = &a.config {
        m.input(p);
    }
    let needs_ontology = kind != ModelKind::LogReg && cfg.model.embedding == EmbeddingKind::Gram;
    let ontology = match (&a.ontology, needs_ontology) {
        (None, true) => return Err(CliError::Config("embedding gram requires --ontology".into())),
        (Some(p), true) => Some(p),
        _ => None,
    };
    let cohort = load_cohort(&a.data.data)?;
    m.input(&a.data.data);
    let ancestry = match ontology {
        Some(p) => {
            m.input(p);
            Some(load_ontology(p, &cohort.vocabulary)?.ancestry_index())
        }
        None => None,
    };
    let split_seed = a.data.split_seed.unwrap_or(0);
    let split = split_cohort(&cohort, split_seed)?;
    log::info!(
        "training {} on {} patients ({} validation, {} test held out)",
        kind.name(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let out = train_model(kind, &cfg, cohort.n_codes(), ancestry.as_ref(), &refs(&split.train), &refs(&split.valid), pool)?;
    let h = &out.history;
    if !h.skipped_batches.is_empty() {
        log::warn!("{} batches skipped after solver failures", h.skipped_batches.len());
    }

    create_dir(&a.out_dir)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            schema: CHECKPOINT_SCHEMA,
            version: VERSION.to_owned(),
            model_kind: kind,
            model: TrainedModel::resolved(kind, &cfg.model),
            train: Some(cfg.train.clone()),
            logreg: (kind == ModelKind::LogReg).then(|| cfg.logreg.clone()),
            vocabulary: cohort.vocabulary.clone(),
            ancestry,
            code_frequency: split.train.code_frequency.clone(),
            best_iteration: h.best_iteration,
            best_valid_auc: h.best_valid_auc,
            split_seed: Some(split_seed),
        },
        params: out.params.clone(),
    };
    let ckpt_path = a.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &ckpt)?;
    let loss_path = a.out_dir.join(LOSS_TRACE_FILE);
    write_trace_csv(&loss_path, "loss", &h.loss_trace)?;
    let auc_path = a.out_dir.join(VALID_AUC_FILE);
    write_trace_csv(&auc_path, "valid_auc", &h.valid_auc)?;
    let cfg_path = a.out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;

    m.config(json!({ "model": kind.name(), "split_seed": split_seed, "run": &cfg }))
        .seed(cfg.train.seed)
        .output(&ckpt_path)
        .output(&loss_path)
        .output(&auc_path)
        .output(&cfg_path)
        .summary(json!({
            "train_patients": split.train.len(),
            "valid_patients": split.valid.len(),
            "test_patients": split.test.len(),
            "iterations": h.iterations,
            "best_iteration": h.best_iteration,
            "best_valid_auc": h.best_valid_auc,
            "skipped_batches": h.skipped_batches,
        }));
    m.write(&a.out_dir.join(MANIFEST_FILE))?;
    log::info!(
        "best validation visit-AUC {:?} at iteration {:?}; checkpoint {}",
        h.best_valid_auc,
        h.best_iteration,
        ckpt_path.display()
    );
    Ok(())
}

struct Scored {
    name: String,
    ckpt: Checkpoint,
    visits: Vec<ScoredVisit>,
}

fn score_checkpoint(ckpt: Checkpoint, name: String, records: &Cohort, pool: Option<&ThreadPool>) -> Result<Scored, CliError> {
    check_vocabulary(&ckpt.meta.vocabulary, &records.vocabulary)?;
    let model = ckpt.model()?;
    let visits = score_records(&refs(records), |r| model.predict(&ckpt.params, r), pool)?;
    Ok(Scored { name, ckpt, visits })
}

fn check_k(k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Config("--k must be at least 1".into()));
    }
    Ok(())
}

pub(crate) fn evaluate(a: &EvaluateArgs, pool: Option<&ThreadPool>) -> Result<(), CliError> {
    check_k(a.k)?;
    let mut m = ManifestBuilder::new("evaluate");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    m.input(&a.checkpoint).input(&a.data.data);
    let cohort = load_cohort(&a.data.data)?;
    check_vocabulary(&ckpt.meta.vocabulary, &cohort.vocabulary)?;
    let split_seed = a.data.split_seed.or(ckpt.meta.split_seed).unwrap_or(0);
    let records = select_split(&cohort, a.split, split_seed)?;
    let name = ckpt.meta.model_kind.name().to_owned();
    let s = score_checkpoint(ckpt, name, &records, pool)?;
    let partition = QuantilePartition::from_frequencies(&s.ckpt.meta.code_frequency);
    let report = evaluate_visits(&s.visits, &partition, a.k, a.macro_average)?;

    create_dir(&a.out_dir)?;
    let q_path = a.out_dir.join(QUANTILE_FILE);
    write_quantile_csv(&q_path, &[(s.name.clone(), report.quantile_accuracy.clone())])?;
    let c_path = a.out_dir.join(CODE_AUC_FILE);
    write_code_auc_csv(&c_path, &s.ckpt.meta.vocabulary, &s.ckpt.meta.code_frequency, &report.code_aucs)?;
    let metrics = json!({
        "model": s.name,
        "split": split_name(a.split),
        "split_seed": split_seed,
        "patients": records.len(),
        "visit_auc": report.visit_auc.mean,
        "scored_visits": report.visit_auc.scored,
        "skipped_visits": report.visit_auc.skipped,
        "k": a.k,
        "macro_average": a.macro_average,
        "quantile_groups": (0..N_QUANTILES).map(QuantilePartition::label).collect::<Vec<_>>(),
        "quantile_accuracy": report.quantile_accuracy,
    });
    let m_path = a.out_dir.join(METRICS_FILE);
    write_json(&m_path, &metrics)?;
    m.config(json!({ "split": split_name(a.split), "split_seed": split_seed, "k": a.k, "macro_average": a.macro_average }))
        .seed(split_seed)
        .output(&q_path)
        .output(&c_path)
        .output(&m_path)
        .summary(json!({ "visit_auc": report.visit_auc.mean }));
    m.write(&a.out_dir.join(MANIFEST_FILE))?;
    println!("{}: visit-AUC {:.4} over {} visits", s.name, report.visit_auc.mean, report.visit_auc.scored);
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn unique_names(kinds: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(kinds.len());
    for k in kinds {
        let mut name = (*k).to_owned();
        let mut n = 2;
        while out.contains(&name) {
            name = format!("{k}_{n}");
            n += 1;
        }
        out.push(name);
    }
    out
}

fn write_delong_csv(path: &Path, vocab: &Vocabulary, models: &[Scored]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let err = |e: csv::Error| CliError::io(path, e);
    w.write_record(["code_id", "code", "model_a", "model_b", "auc_a", "auc_b", "z", "p_value"]).map_err(err)?;
    let visits = &models[0].visits;
    for c in 0..vocab.len() {
        let truth: Vec<bool> = visits.iter().map(|v| v.truth.binary_search(&c).is_ok()).collect();
        if truth.iter().all(|&t| t) || !truth.iter().any(|&t| t) {
            continue;
        }
        let cols: Vec<Vec<f64>> = models.iter().map(|s| s.visits.iter().map(|v| v.scores[c]).collect()).collect();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let Ok(r) = delong_test(&truth, &cols[i], &cols[j]) else { continue };
                w.write_record([
                    c.to_string(),
                    vocab.label(c).to_owned(),
                    models[i].name.clone(),
                    models[j].name.clone(),
                    format!("{:.17e}", r.auc_a),
                    format!("{:.17e}", r.auc_b),
                    format!("{:.17e}", r.z),
                    format!("{:.17e}", r.p),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub(crate) fn compare(a: &CompareArgs, pool: Option<&ThreadPool>) -> Result<(), CliError> {
    if a.checkpoints.len() < 2 {
        return Err(CliError::Config("compare needs at least two --checkpoint arguments".into()));
    }
    check_k(a.k)?;
    if !(a.p_threshold > 0.0 && a.p_threshold < 1.0) {
        return Err(CliError::Config("--p-threshold must lie in (0, 1)".into()));
    }
    let mut m = ManifestBuilder::new("compare");
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| {
            m.input(p);
            load_checkpoint(p).map_err(CliError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    m.input(&a.data.data);
    let cohort = load_cohort(&a.data.data)?;
    let split_seed = a.data.split_seed.or(ckpts[0].meta.split_seed).unwrap_or(0);
    if a.data.split_seed.is_none() && ckpts.iter().any(|c| c.meta.split_seed != ckpts[0].meta.split_seed) {
        log::warn!("checkpoints were trained on different splits; using split seed {split_seed}");
    }
    let records = select_split(&cohort, a.split, split_seed)?;
    let names = unique_names(&ckpts.iter().map(|c| c.meta.model_kind.name()).collect::<Vec<_>>());
    let scored = ckpts
        .into_iter()
        .zip(names)
        .map(|(c, n)| score_checkpoint(c, n, &records, pool))
        .collect::<Result<Vec<_>, _>>()?;

    let pairs: Vec<(String, Vec<ScoredVisit>)> = scored.iter().map(|s| (s.name.clone(), s.visits.clone())).collect();
    let report = relative_competency(&pairs, a.p_threshold, a.auc_threshold)?;
    create_dir(&a.out_dir)?;
    let counts = a.out_dir.join(COMPETENCY_COUNTS_FILE);
    let codes = a.out_dir.join(COMPETENCY_CODES_FILE);
    write_competency_csv(&counts, &codes, &report, &cohort.vocabulary)?;
    let delong = a.out_dir.join(DELONG_FILE);
    write_delong_csv(&delong, &cohort.vocabulary, &scored)?;
    let mut rows = Vec::with_capacity(scored.len());
    let mut visit_aucs = serde_json::Map::new();
    for s in &scored {
        let partition = QuantilePartition::from_frequencies(&s.ckpt.meta.code_frequency);
        let r = evaluate_visits(&s.visits, &partition, a.k, false)?;
        visit_aucs.insert(s.name.clone(), json!(r.visit_auc.mean));
        rows.push((s.name.clone(), r.quantile_accuracy));
    }
    let quant = a.out_dir.join(QUANTILE_FILE);
    write_quantile_csv(&quant, &rows)?;

    let subsets: serde_json::Map<String, serde_json::Value> =
        report.subset_counts.iter().map(|(k, v)| (report.subset_name(k), json!(v))).collect();
    m.config(json!({
        "split": split_name(a.split),
        "split_seed": split_seed,
        "p_threshold": a.p_threshold,
        "auc_threshold": a.auc_threshold,
        "k": a.k,
    }))
    .seed(split_seed)
    .output(&counts)
    .output(&codes)
    .output(&delong)
    .output(&quant)
    .summary(json!({ "visit_auc": visit_aucs, "subset_counts": subsets }));
    m.write(&a.out_dir.join(MANIFEST_FILE))?;
    for (subset, n) in &report.subset_counts {
        println!("{:<40} {n}", report.subset_name(subset));
    }
    Ok(())
}

pub(crate) fn trajectory(a: &TrajectoryArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("trajectory");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    m.input(&a.checkpoint).input(&a.data);
    let TrainedModel::IceNode(model) = ckpt.model()? else {
        return Err(CliError::Config(format!(
            "trajectories need an icenode checkpoint, got {}",
            ckpt.meta.model_kind.name()
        )));
    };
    let cohort = load_cohort(&a.data)?;
    check_vocabulary(&ckpt.meta.vocabulary, &cohort.vocabulary)?;
    let record = cohort.patients.iter().find(|p| p.subject_id == a.subject).ok_or_else(|| {
        const SHOWN: usize = 20;
        let ids: Vec<&str> = cohort.patients.iter().take(SHOWN).map(|p| p.subject_id.as_str()).collect();
        let more = cohort.len().saturating_sub(SHOWN);
        let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
        CliError::Data(format!("unknown subject {:?}; available: {}{tail}", a.subject, ids.join(", ")))
    })?;
    let ids = a
        .codes
        .iter()
        .map(|l| cohort.vocabulary.id(l).ok_or_else(|| CliError::Config(format!("unknown code {l:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let traj = sample_risk_trajectory(&model, &ckpt.params, record, &ids, &a.codes, a.resolution)?;
    create_parent(&a.out)?;
    export_trajectory_csv(&traj, &a.out)?;
    m.config(json!({ "subject": a.subject, "codes": a.codes, "resolution": a.resolution }))
        .output(&a.out)
        .summary(json!({ "rows": traj.rows.len() }));
    m.write(&sidecar(&a.out))?;
    log::info!("wrote {} rows to {}", traj.rows.len(), a.out.display());
    Ok(())
}

pub(crate) fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let mut m = ManifestBuilder::new("gradcheck");
    let cfg = VerifyConfig {
        seed: a.seed,
        trials: a.trials,
        fault: match a.inject_fault {
            Some(FaultArg::TanhSign) => Fault::TanhSign,
            None => Fault::None,
        },
    };
    let results = verify::run_all(&cfg);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        let path = dir.join(GRADCHECK_FILE);
        let fault = a.inject_fault.map(|_| "tanh-sign");
        write_json(&path, &json!({ "fault": fault, "failed": failed, "checks": results }))?;
        m.config(json!({ "trials": a.trials, "fault": fault }))
            .seed(a.seed)
            .output(&path)
            .summary(json!({ "failed": failed }));
        m.write(&dir.join(MANIFEST_FILE))?;
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
