//! Line-delimited patient record files.
//!
//! ```text
//! #icenode-records v1
//! #vocabulary<TAB>code_a<TAB>code_b ...        (optional)
//! {"subject_id": "p1", "admissions": [[0.0, 3.0, ["code_a"]], [70.0, 2.0, ["code_b", "code_a"]]]}
//! ```
//!
//! Each admission is `[time_days, stay_days, [codes...]]` where `time_days`
//! is the discharge timestamp in days on any per-patient origin.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Admission, DataError, PatientRecord, Vocabulary};

pub const RECORDS_HEADER: &str = "#icenode-records v1";
const VOCAB_PREFIX: &str = "#vocabulary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeAnchor {
    /// Times are the recorded discharge timestamps.
    #[default]
    Discharge,
    /// Times are moved back to admission start (`time_days - stay_days`).
    Admission,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub anchor: TimeAnchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAdmission(pub f64, pub f64, pub Vec<String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPatient {
    pub subject_id: String,
    pub admissions: Vec<RawAdmission>,
    #[serde(skip)]
    pub line: usize,
}

pub struct RecordsFile {
    pub vocabulary: Option<Vocabulary>,
    pub patients: Vec<RawPatient>,
}

pub fn read_raw_records<R: std::io::Read>(reader: R) -> Result<RecordsFile, DataError> {
    let mut vocabulary = None;
    let mut patients = Vec::new();
    let mut seen_header = false;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: n, msg: e.to_string() })?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if trimmed.trim() != RECORDS_HEADER {
                return Err(DataError::Parse { line: n, msg: format!("expected header {RECORDS_HEADER:?}") });
            }
            seen_header = true;
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix(VOCAB_PREFIX) {
            let labels: Vec<String> = rest.split('\t').filter(|s| !s.is_empty()).map(str::to_owned).collect();
            vocabulary =
                Some(Vocabulary::new(labels).map_err(|e| DataError::Parse { line: n, msg: e.to_string() })?);
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let mut p: RawPatient =
            serde_json::from_str(trimmed).map_err(|e| DataError::Parse { line: n, msg: e.to_string() })?;
        p.line = n;
        validate_raw(&p)?;
        patients.push(p);
    }
    Ok(RecordsFile { vocabulary, patients })
}

fn validate_raw(p: &RawPatient) -> Result<(), DataError> {
    let err = |msg: String| DataError::Parse { line: p.line, msg };
    if p.subject_id.is_empty() {
        return Err(err("empty subject_id".into()));
    }
    for RawAdmission(t, stay, codes) in &p.admissions {
        if !t.is_finite() || !stay.is_finite() || *stay < 0.0 {
            return Err(err(format!("invalid time {t} or stay {stay}")));
        }
        if codes.is_empty() {
            return Err(err("admission without codes".into()));
        }
    }
    Ok(())
}

fn build_patient(
    p: &RawPatient,
    opts: ParseOptions,
    mut resolve: impl FnMut(&str) -> Option<Vec<usize>>,
    unknown: &mut Vec<String>,
) -> Result<Option<PatientRecord>, DataError> {
    let mut adms: Vec<(f64, f64, Vec<usize>)> = Vec::with_capacity(p.admissions.len());
    let mut missing = false;
    for RawAdmission(t, stay, codes) in &p.admissions {
        let mut ids = BTreeSet::new();
        for c in codes {
            match resolve(c) {
                Some(v) => ids.extend(v),
                None => {
                    unknown.push(c.clone());
                    missing = true;
                }
            }
        }
        let t = match opts.anchor {
            TimeAnchor::Discharge => *t,
            TimeAnchor::Admission => t - stay,
        };
        adms.push((t, *stay, ids.into_iter().collect()));
    }
    if missing {
        return Ok(None);
    }
    adms.sort_by(|a, b| a.0.total_cmp(&b.0));
    if adms.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(DataError::Parse { line: p.line, msg: "two admissions share a timestamp".into() });
    }
    let origin = adms.first().map_or(0.0, |a| a.0);
    let admissions = adms
        .into_iter()
        .map(|(t, stay_days, codes)| Admission { time: (t - origin) / 7.0, codes, stay_days })
        .collect();
    Ok(Some(PatientRecord { subject_id: p.subject_id.clone(), admissions }))
}

/// Resolves code strings against `vocab`; the first unknown code is reported
/// with its line number.
pub fn resolve_records(raw: &[RawPatient], vocab: &Vocabulary, opts: ParseOptions) -> Result<Vec<PatientRecord>, DataError> {
    let mut out = Vec::with_capacity(raw.len());
    for p in raw {
        let mut unknown = Vec::new();
        match build_patient(p, opts, |c| vocab.id(c).map(|i| vec![i]), &mut unknown)? {
            Some(r) => out.push(r),
            None => return Err(DataError::UnknownCode { line: p.line, code: unknown.swap_remove(0) }),
        }
    }
    Ok(out)
}

/// Many-to-one map from source code strings to vocabulary ids.
#[derive(Debug, Clone, Default)]
pub struct CodeMapping {
    pub entries: HashMap<String, usize>,
}

pub fn parse_code_mapping<R: std::io::Read>(reader: R, vocab: &Vocabulary) -> Result<CodeMapping, DataError> {
    let mut entries = HashMap::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| DataError::Parse { line: n, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (src, dst) = line
            .split_once('\t')
            .ok_or_else(|| DataError::Parse { line: n, msg: "expected source<TAB>target".into() })?;
        let id = vocab.id(dst.trim()).ok_or_else(|| DataError::UnknownCode { line: n, code: dst.trim().to_owned() })?;
        if let Some(prev) = entries.insert(src.trim().to_owned(), id) {
            if prev != id {
                return Err(DataError::Parse { line: n, msg: format!("source code {src:?} mapped twice") });
            }
        }
    }
    Ok(CodeMapping { entries })
}

pub fn load_code_mapping(path: &Path, vocab: &Vocabulary) -> Result<CodeMapping, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_code_mapping(f, vocab)
}

/// Maps source codes to vocabulary ids, merging duplicate targets within an
/// admission. Every unmapped source code is listed in the error.
pub fn apply_code_mapping(
    raw: &[RawPatient],
    mapping: &CodeMapping,
    opts: ParseOptions,
) -> Result<Vec<PatientRecord>, DataError> {
    let mut unknown = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for p in raw {
        if let Some(r) = build_patient(p, opts, |c| mapping.entries.get(c).map(|&i| vec![i]), &mut unknown)? {
            out.push(r);
        }
    }
    if !unknown.is_empty() {
        let set: BTreeSet<String> = unknown.into_iter().collect();
        return Err(DataError::Unmapped(set.into_iter().collect()));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File, DataError> {
    std::fs::File::open(path).map_err(|e| DataError::io(path, e))
}

pub fn parse_patient_records(path: &Path, vocab: &Vocabulary) -> Result<Vec<PatientRecord>, DataError> {
    let file = read_raw_records(open(path)?)?;
    resolve_records(&file.patients, vocab, ParseOptions::default())
}

pub fn parse_patient_records_mapped(
    path: &Path,
    mapping: &CodeMapping,
    opts: ParseOptions,
) -> Result<Vec<PatientRecord>, DataError> {
    let file = read_raw_records(open(path)?)?;
    apply_code_mapping(&file.patients, mapping, opts)
}

/// Reads a file that carries its own `#vocabulary` line.
pub fn read_records_file(path: &Path, opts: ParseOptions) -> Result<(Vocabulary, Vec<PatientRecord>), DataError> {
    let file = read_raw_records(open(path)?)?;
    let vocab = file
        .vocabulary
        .ok_or_else(|| DataError::Validation(format!("{}: no #vocabulary line", path.display())))?;
    let records = resolve_records(&file.patients, &vocab, opts)?;
    Ok((vocab, records))
}

pub fn write_patient_records<W: Write>(mut w: W, vocab: &Vocabulary, patients: &[PatientRecord]) -> std::io::Result<()> {
    writeln!(w, "{RECORDS_HEADER}")?;
    write!(w, "{VOCAB_PREFIX}")?;
    for l in vocab.labels() {
        write!(w, "\t{l}")?;
    }
    writeln!(w)?;
    for p in patients {
        let raw = RawPatient {
            subject_id: p.subject_id.clone(),
            admissions: p
                .admissions
                .iter()
                .map(|a| RawAdmission(a.time * 7.0, a.stay_days, a.codes.iter().map(|&c| vocab.label(c).to_owned()).collect()))
                .collect(),
            line: 0,
        };
        let line = serde_json::to_string(&raw).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
