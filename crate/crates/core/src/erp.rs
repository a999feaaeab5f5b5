//! Event-related potentials: epochs around the LED onset, baseline
//! correction, per-subject and grand averages and the channel-summed trace.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{channel_names, TrialRecord};
use crate::matrix::Matrix;
use crate::pipeline::{Conditioner, PreprocessConfig};
use crate::preprocess::fir::FirFilter;
use crate::preprocess::{FilterMode, FilterSpec, PreprocessError};

#[derive(Debug, Error)]
pub enum ErpError {
    #[error("trial `{0}` lacks the samples needed before or after the LED onset")]
    InsufficientPrePost(String),
    #[error("no subject with at least one trial to average")]
    EmptyInput,
    #[error("epochs disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("unknown bad channel `{0}`")]
    UnknownChannel(String),
    #[error("invalid ERP config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErpConfig {
    pub pre_ms: f64,
    pub post_ms: f64,
    pub baseline_ms: f64,
    pub pass_band: [f64; 2],
    pub stop_atten_db: f64,
    /// Rate the epochs are cut at; `None` keeps the source rate.
    pub fs_hz: Option<f64>,
    /// Subjects keeping fewer than this fraction of their trials are left
    /// out of the grand average.
    pub min_kept_fraction: f64,
    /// Channel names (`ch_1` ...) dropped before averaging.
    pub bad_channels: Vec<String>,
}

impl Default for ErpConfig {
    fn default() -> Self {
        Self {
            pre_ms: 1000.0,
            post_ms: 6000.0,
            baseline_ms: 1000.0,
            pass_band: [0.5, 12.0],
            stop_atten_db: 60.0,
            fs_hz: None,
            min_kept_fraction: 0.6,
            bad_channels: Vec::new(),
        }
    }
}

impl ErpConfig {
    pub fn validate(&self) -> Result<(), ErpError> {
        let bad = |m: &str| Err(ErpError::InvalidConfig(m.into()));
        if !(self.pre_ms >= 0.0 && self.post_ms > 0.0) {
            return bad("pre_ms must be >= 0 and post_ms > 0");
        }
        if !(self.baseline_ms > 0.0 && self.baseline_ms <= self.pre_ms + self.post_ms) {
            return bad("baseline_ms must lie within the epoch");
        }
        if !(0.0..=1.0).contains(&self.min_kept_fraction) {
            return bad("min_kept_fraction must be in [0, 1]");
        }
        Ok(())
    }

    fn samples(ms: f64, fs: f64) -> usize {
        (ms / 1000.0 * fs).round() as usize
    }

    pub fn pre_samples(&self, fs: f64) -> usize {
        Self::samples(self.pre_ms, fs)
    }

    pub fn epoch_len(&self, fs: f64) -> usize {
        Self::samples(self.pre_ms + self.post_ms, fs)
    }

    pub fn baseline_len(&self, fs: f64) -> usize {
        Self::samples(self.baseline_ms, fs)
    }
}

/// Cut epochs of one subject, each `N x T_epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Epochs {
    pub fs: f64,
    pub pre_ms: f64,
    pub channels: Vec<String>,
    pub trial_ids: Vec<String>,
    pub data: Vec<Matrix>,
}

impl Epochs {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn epoch_len(&self) -> usize {
        self.data.first().map_or(0, Matrix::cols)
    }

    /// Epoch time axis in ms relative to the LED onset.
    pub fn time_ms(&self) -> Vec<f64> {
        time_axis(self.epoch_len(), self.fs, self.pre_ms)
    }

    /// Drops the named channels from every epoch.
    pub fn without_channels(&self, bad: &[String]) -> Result<Epochs, ErpError> {
        if let Some(b) = bad.iter().find(|b| !self.channels.contains(b)) {
            return Err(ErpError::UnknownChannel(b.clone()));
        }
        let keep: Vec<usize> = (0..self.channels.len())
            .filter(|&c| !bad.contains(&self.channels[c]))
            .collect();
        let data = self
            .data
            .iter()
            .map(|m| {
                let rows: Vec<&[f64]> = keep.iter().map(|&c| m.row(c)).collect();
                Matrix::from_rows(&rows).expect("equal rows")
            })
            .collect();
        Ok(Epochs {
            channels: keep.iter().map(|&c| self.channels[c].clone()).collect(),
            data,
            ..self.clone()
        })
    }
}

fn time_axis(len: usize, fs: f64, pre_ms: f64) -> Vec<f64> {
    (0..len).map(|k| k as f64 * 1000.0 / fs - pre_ms).collect()
}

enum Band {
    /// Decimating conditioner: decimation, DC removal and band-pass.
    Conditioner(Conditioner),
    Filter(FirFilter),
}

/// Band-passes each trial over its full length, then cuts
/// `[led - pre, led - pre + T_epoch)`.
pub fn epoch_trials(trials: &[TrialRecord], cfg: &ErpConfig) -> Result<Epochs, ErpError> {
    cfg.validate()?;
    let Some(first) = trials.first() else {
        return Err(ErpError::EmptyInput);
    };
    let fs_in = first.sample_rate_hz;
    let spec = FilterSpec {
        pass_lo_hz: cfg.pass_band[0],
        pass_hi_hz: cfg.pass_band[1],
        stop_atten_db: cfg.stop_atten_db,
        mode: FilterMode::ZeroPhase,
    };
    let band = match cfg.fs_hz {
        Some(fs_out) if (fs_out - fs_in).abs() > 1e-9 * fs_in => {
            let pre = PreprocessConfig {
                fs_out_hz: fs_out,
                pass_band: cfg.pass_band,
                stop_atten_db: cfg.stop_atten_db,
                filter_mode: FilterMode::ZeroPhase,
                ..PreprocessConfig::default()
            };
            Band::Conditioner(Conditioner::new(&pre, fs_in)?)
        }
        _ => Band::Filter(spec.design(fs_in)?),
    };
    let n_channels = first.eeg.rows();
    let mut out = Epochs {
        fs: fs_in,
        pre_ms: cfg.pre_ms,
        channels: channel_names(n_channels),
        trial_ids: Vec::with_capacity(trials.len()),
        data: Vec::with_capacity(trials.len()),
    };
    for tr in trials {
        if tr.eeg.rows() != n_channels || tr.sample_rate_hz != fs_in {
            return Err(ErpError::ShapeMismatch(format!(
                "trial `{}` differs in channels or rate from the first trial",
                tr.trial_id
            )));
        }
        let (eeg, led, fs) = match &band {
            Band::Conditioner(c) => {
                let ct = c.condition(tr)?;
                (ct.eeg, ct.led_onset, ct.fs)
            }
            Band::Filter(f) => (
                f.apply_rows(&tr.eeg, spec.mode.application()),
                tr.led_onset_sample,
                fs_in,
            ),
        };
        let pre = cfg.pre_samples(fs);
        let len = cfg.epoch_len(fs);
        if led < pre || led - pre + len > eeg.cols() {
            return Err(ErpError::InsufficientPrePost(tr.trial_id.clone()));
        }
        out.fs = fs;
        out.trial_ids.push(tr.trial_id.clone());
        out.data.push(eeg.columns(led - pre..led - pre + len));
    }
    Ok(out)
}

/// Subtracts, per epoch and channel, the mean of the first `baseline_len`
/// samples.
pub fn baseline_correct(mut ep: Epochs, baseline_len: usize) -> Epochs {
    for m in &mut ep.data {
        let n = baseline_len.min(m.cols());
        if n == 0 {
            continue;
        }
        for c in 0..m.rows() {
            let mean = m.row(c)[..n].iter().sum::<f64>() / n as f64;
            for t in 0..m.cols() {
                m.set(c, t, m.get(c, t) - mean);
            }
        }
    }
    ep
}

/// One subject's epochs together with the fraction of its trials that QC kept.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEpochs {
    pub subject_id: String,
    pub epochs: Epochs,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErpResult {
    pub fs: f64,
    pub channels: Vec<String>,
    pub time_ms: Vec<f64>,
    /// Trial mean per included subject, in input order.
    pub subject_averages: Vec<(String, Matrix)>,
    /// Mean of the subject averages.
    pub grand_average: Matrix,
    /// Channel sum of the grand average.
    pub erp_trace: Vec<f64>,
    pub excluded_subjects: Vec<String>,
}

fn mean_of(ms: &[&Matrix]) -> Matrix {
    let (r, c) = ms[0].shape();
    let mut out = Matrix::zeros(r, c);
    for m in ms {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o += v;
        }
    }
    let k = 1.0 / ms.len() as f64;
    out.as_mut_slice().iter_mut().for_each(|v| *v *= k);
    out
}

/// Two-stage average: trials within each subject, then subjects with equal
/// weight. Subjects below `min_kept_fraction` or without epochs are skipped.
pub fn averages(subjects: &[SubjectEpochs], min_kept_fraction: f64) -> Result<ErpResult, ErpError> {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for s in subjects {
        if s.epochs.is_empty() || s.kept_fraction < min_kept_fraction {
            excluded.push(s.subject_id.clone());
        } else {
            included.push(s);
        }
    }
    let Some(first) = included.first() else {
        return Err(ErpError::EmptyInput);
    };
    let shape = first.epochs.data[0].shape();
    let mut subject_averages = Vec::with_capacity(included.len());
    for s in &included {
        if s.epochs.data.iter().any(|m| m.shape() != shape) || s.epochs.channels != first.epochs.channels {
            return Err(ErpError::ShapeMismatch(format!(
                "subject `{}` epochs differ from {:?}",
                s.subject_id, shape
            )));
        }
        let refs: Vec<&Matrix> = s.epochs.data.iter().collect();
        subject_averages.push((s.subject_id.clone(), mean_of(&refs)));
    }
    let grand_average = mean_of(&subject_averages.iter().map(|(_, m)| m).collect::<Vec<_>>());
    let erp_trace = (0..grand_average.cols())
        .map(|t| (0..grand_average.rows()).map(|c| grand_average.get(c, t)).sum())
        .collect();
    Ok(ErpResult {
        fs: first.epochs.fs,
        channels: first.epochs.channels.clone(),
        time_ms: time_axis(shape.1, first.epochs.fs, first.epochs.pre_ms),
        subject_averages,
        grand_average,
        erp_trace,
        excluded_subjects: excluded,
    })
}

impl ErpResult {
    /// `time_ms, ch_1..ch_N, erp_trace`, one row per epoch sample.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["time_ms".to_string()];
        header.extend(self.channels.iter().cloned());
        header.push("erp_trace".into());
        out.write_record(&header)?;
        for (t, time) in self.time_ms.iter().enumerate() {
            let mut rec = vec![time.to_string()];
            rec.extend((0..self.grand_average.rows()).map(|c| self.grand_average.get(c, t).to_string()));
            rec.push(self.erp_trace[t].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Epochs, baseline-corrects and drops bad channels for one subject.
pub fn subject_epochs(
    subject_id: &str,
    trials: &[TrialRecord],
    kept_fraction: f64,
    cfg: &ErpConfig,
) -> Result<SubjectEpochs, ErpError> {
    let ep = epoch_trials(trials, cfg)?;
    let n = cfg.baseline_len(ep.fs);
    let ep = baseline_correct(ep, n).without_channels(&cfg.bad_channels)?;
    Ok(SubjectEpochs {
        subject_id: subject_id.to_string(),
        epochs: ep,
        kept_fraction,
    })
}
