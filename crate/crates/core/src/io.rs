//! Session manifests and per-trial CSV files.
//!
//! A session directory holds one `manifest.toml` plus, for every trial, an
//! EEG CSV (`sample_index,ch_1..ch_N`) and a kinematics CSV
//! (`sample_index,x,y,z`). Paths in the manifest are relative to the
//! manifest's directory. See `docs/formats.md` for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema violation in field `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("inconsistent timing in trial `{trial_id}`: {reason}")]
    InconsistentTiming { trial_id: String, reason: String },
    #[error("unknown trial `{0}`")]
    UnknownTrial(String),
    #[error("corrupt data in {}: {reason}", .path.display())]
    CorruptData { path: PathBuf, reason: String },
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile(path.to_path_buf())
        } else {
            IngestError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        IngestError::CorruptData {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub trial_id: String,
    pub eeg_path: PathBuf,
    pub kin_path: PathBuf,
    pub led_onset_sample: i64,
    pub movement_start_sample: i64,
    pub movement_stop_sample: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    #[serde(default)]
    pub trials: Vec<TrialEntry>,
    /// Directory the relative trial paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SessionManifest {
    pub fn trial(&self, trial_id: &str) -> Option<&TrialEntry> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }

    pub fn trial_ids(&self) -> impl Iterator<Item = &str> {
        self.trials.iter().map(|t| t.trial_id.as_str())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks every structural invariant. File existence is checked only
    /// when `check_files` is set.
    pub fn validate(&self, check_files: bool) -> Result<(), IngestError> {
        let schema = |field: &str, reason: &str| IngestError::SchemaViolation {
            field: field.to_string(),
            reason: reason.to_string(),
        };
        if self.subject_id.trim().is_empty() {
            return Err(schema("subject_id", "must not be empty"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(schema("sample_rate_hz", "must be a positive number"));
        }
        if self.n_channels == 0 {
            return Err(schema("n_channels", "must be at least 1"));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.trials {
            if t.trial_id.is_empty() {
                return Err(schema("trials.trial_id", "must not be empty"));
            }
            if !seen.insert(t.trial_id.as_str()) {
                return Err(schema(
                    "trials.trial_id",
                    &format!("duplicate trial id `{}`", t.trial_id),
                ));
            }
            let timing = |reason: String| IngestError::InconsistentTiming {
                trial_id: t.trial_id.clone(),
                reason,
            };
            if t.led_onset_sample < 0 {
                return Err(timing("led_onset_sample is negative".into()));
            }
            if t.movement_start_sample < t.led_onset_sample {
                return Err(timing(format!(
                    "movement_start_sample {} precedes led_onset_sample {}",
                    t.movement_start_sample, t.led_onset_sample
                )));
            }
            if t.movement_stop_sample <= t.movement_start_sample {
                return Err(timing(format!(
                    "movement_stop_sample {} is not after movement_start_sample {}",
                    t.movement_stop_sample, t.movement_start_sample
                )));
            }
            if check_files {
                for p in [&t.eeg_path, &t.kin_path] {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(IngestError::MissingFile(full));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

/// One trial: raw EEG, kinematics and timing on a shared sample clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub sample_rate_hz: f64,
    /// N x T_raw, microvolts.
    pub eeg: Matrix,
    /// 3 x T_kin, position units.
    pub kin: Matrix,
    pub led_onset_sample: usize,
    pub movement_start_sample: usize,
    pub movement_stop_sample: usize,
    pub response_time_s: f64,
}

impl TrialRecord {
    pub fn new(
        trial_id: impl Into<String>,
        sample_rate_hz: f64,
        eeg: Matrix,
        kin: Matrix,
        led_onset_sample: usize,
        movement_start_sample: usize,
        movement_stop_sample: usize,
    ) -> Self {
        let response_time_s =
            (movement_start_sample as f64 - led_onset_sample as f64) / sample_rate_hz;
        Self {
            trial_id: trial_id.into(),
            sample_rate_hz,
            eeg,
            kin,
            led_onset_sample,
            movement_start_sample,
            movement_stop_sample,
            response_time_s,
        }
    }

    pub fn entry(&self) -> TrialEntry {
        TrialEntry {
            trial_id: self.trial_id.clone(),
            eeg_path: PathBuf::from(format!("{}_eeg.csv", self.trial_id)),
            kin_path: PathBuf::from(format!("{}_kin.csv", self.trial_id)),
            led_onset_sample: self.led_onset_sample as i64,
            movement_start_sample: self.movement_start_sample as i64,
            movement_stop_sample: self.movement_stop_sample as i64,
        }
    }
}

/// Reads and validates `path`, which may be the manifest file itself or the
/// session directory containing `manifest.toml`.
pub fn load_manifest(path: &Path) -> Result<SessionManifest, IngestError> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| IngestError::io(&file, e))?;
    let mut manifest: SessionManifest =
        toml::from_str(&text).map_err(|e| IngestError::SchemaViolation {
            field: e
                .span()
                .map(|s| text[s].chars().take(40).collect())
                .unwrap_or_else(|| "<document>".into()),
            reason: e.message().to_string(),
        })?;
    manifest.base_dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(true)?;
    Ok(manifest)
}

pub fn load_trial(manifest: &SessionManifest, trial_id: &str) -> Result<TrialRecord, IngestError> {
    let entry = manifest
        .trial(trial_id)
        .ok_or_else(|| IngestError::UnknownTrial(trial_id.to_string()))?;

    let eeg_path = manifest.resolve(&entry.eeg_path);
    let kin_path = manifest.resolve(&entry.kin_path);
    let eeg = read_signal_csv(&eeg_path, manifest.n_channels)?;
    let kin = read_signal_csv(&kin_path, 3)?;

    let stop = entry.movement_stop_sample as usize;
    if eeg.cols() < stop {
        return Err(IngestError::corrupt(
            &eeg_path,
            format!("{} samples but movement stops at sample {stop}", eeg.cols()),
        ));
    }
    if kin.cols() < stop {
        return Err(IngestError::corrupt(
            &kin_path,
            format!("{} samples but movement stops at sample {stop}", kin.cols()),
        ));
    }

    Ok(TrialRecord::new(
        entry.trial_id.clone(),
        manifest.sample_rate_hz,
        eeg,
        kin,
        entry.led_onset_sample as usize,
        entry.movement_start_sample as usize,
        stop,
    ))
}

/// Loads every trial in manifest order.
pub fn load_all_trials(manifest: &SessionManifest) -> Result<Vec<TrialRecord>, IngestError> {
    manifest
        .trials
        .iter()
        .map(|t| load_trial(manifest, &t.trial_id))
        .collect()
}

/// Reads a `sample_index, <signal columns>` CSV as a signals x samples
/// matrix, checking the column count and sample sequence.
pub fn read_signal_csv(path: &Path, expected_rows: usize) -> Result<Matrix, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::corrupt(path, e.to_string()))?
        .clone();
    if headers.get(0) != Some("sample_index") {
        return Err(IngestError::corrupt(path, "first column must be `sample_index`"));
    }
    let channels = headers.len() - 1;
    if channels != expected_rows {
        return Err(IngestError::corrupt(
            path,
            format!("shape mismatch: {channels} signal columns, expected {expected_rows}"),
        ));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IngestError::corrupt(path, e.to_string()))?;
        if record.len() != channels + 1 {
            return Err(IngestError::corrupt(
                path,
                format!("row {i} has {} fields, expected {}", record.len(), channels + 1),
            ));
        }
        let idx: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| IngestError::corrupt(path, format!("row {i}: bad sample_index")))?;
        if idx != i {
            return Err(IngestError::corrupt(
                path,
                format!("row {i}: sample_index {idx} out of sequence"),
            ));
        }
        for (c, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                IngestError::corrupt(path, format!("row {i}, column {}: not a number", c + 1))
            })?;
            if !v.is_finite() {
                return Err(IngestError::corrupt(
                    path,
                    format!("row {i}, column {}: non-finite value", c + 1),
                ));
            }
            columns[c].push(v);
        }
    }
    Ok(Matrix::from_rows(&columns).expect("columns have equal length"))
}

/// Writes `m` (signals x samples) with one row per sample.
pub fn write_signal_csv(path: &Path, m: &Matrix, names: &[String]) -> Result<(), IngestError> {
    let file = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io_err = |e: csv::Error| IngestError::corrupt(path, e.to_string());
    let mut header = vec!["sample_index".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(io_err)?;
    let mut row = Vec::with_capacity(m.rows() + 1);
    for t in 0..m.cols() {
        row.clear();
        row.push(t.to_string());
        // `Display` for f64 is the shortest representation that round-trips.
        row.extend((0..m.rows()).map(|r| m.get(r, t).to_string()));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| IngestError::io(path, e))?;
    Ok(())
}

pub fn channel_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("ch_{i}")).collect()
}

/// Writes a trial's EEG and kinematics CSVs into `dir` using the file names
/// from [`TrialRecord::entry`], returning that entry.
pub fn write_trial(dir: &Path, trial: &TrialRecord) -> Result<TrialEntry, IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    let entry = trial.entry();
    write_signal_csv(
        &dir.join(&entry.eeg_path),
        &trial.eeg,
        &channel_names(trial.eeg.rows()),
    )?;
    write_signal_csv(
        &dir.join(&entry.kin_path),
        &trial.kin,
        &["x".to_string(), "y".to_string(), "z".to_string()],
    )?;
    Ok(entry)
}

/// Writes a complete session (manifest plus trial files) into `dir`.
pub fn write_session(
    dir: &Path,
    subject_id: &str,
    trials: &[TrialRecord],
) -> Result<SessionManifest, IngestError> {
    let first = trials.first().ok_or_else(|| IngestError::SchemaViolation {
        field: "trials".into(),
        reason: "a session needs at least one trial".into(),
    })?;
    let mut entries = Vec::with_capacity(trials.len());
    for t in trials {
        entries.push(write_trial(dir, t)?);
    }
    let manifest = SessionManifest {
        subject_id: subject_id.to_string(),
        sample_rate_hz: first.sample_rate_hz,
        n_channels: first.eeg.rows(),
        trials: entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.validate(true)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| IngestError::io(&path, e))?;
    Ok(manifest)
}
