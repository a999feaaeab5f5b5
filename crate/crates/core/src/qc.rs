//! Bad-trial rejection.
//!
//! A trial is rejected when its response time exceeds the limit, or when its
//! per-channel signature (the maximum of a short moving average of |EEG| over
//! the span after the LED cue) is too far, in RMSE, from a reference built
//! from the first trials of the session.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Threshold preset: the stricter RMSE limit.
pub const RMSE_PRESET_STRICT: f64 = 100.0;
/// Threshold preset: the more lenient RMSE limit.
pub const RMSE_PRESET_LENIENT: f64 = 150.0;

#[derive(Debug, Error, PartialEq)]
pub enum QcError {
    #[error("span after LED onset has {got} samples, moving-average window needs {window}")]
    SpanTooShort { got: usize, window: usize },
    #[error("reference needs {needed} trials with a signature, only {got} available")]
    NotEnoughTrials { needed: usize, got: usize },
    #[error("invalid QC configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed QC report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcConfig {
    pub ma_window: usize,
    pub post_led_span_ms: f64,
    pub rt_limit_s: f64,
    pub rmse_threshold: f64,
    pub reference_trials: usize,
}

impl QcConfig {
    /// The RMSE threshold has no default; pick it explicitly or use one of
    /// the presets.
    pub fn new(rmse_threshold: f64) -> Self {
        Self {
            ma_window: 5,
            post_led_span_ms: 1500.0,
            rt_limit_s: 0.5,
            rmse_threshold,
            reference_trials: 10,
        }
    }

    pub fn strict() -> Self {
        Self::new(RMSE_PRESET_STRICT)
    }

    pub fn lenient() -> Self {
        Self::new(RMSE_PRESET_LENIENT)
    }

    /// Only the response-time gate can reject.
    pub fn rt_only() -> Self {
        Self::new(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<(), QcError> {
        if self.ma_window < 1 {
            return Err(QcError::InvalidConfig("ma_window must be >= 1".into()));
        }
        if !(self.rt_limit_s > 0.0) {
            return Err(QcError::InvalidConfig("rt_limit_s must be > 0".into()));
        }
        if !(self.rmse_threshold > 0.0) {
            return Err(QcError::InvalidConfig("rmse_threshold must be > 0".into()));
        }
        if !(self.post_led_span_ms > 0.0) {
            return Err(QcError::InvalidConfig("post_led_span_ms must be > 0".into()));
        }
        if self.reference_trials < 1 {
            return Err(QcError::InvalidConfig("reference_trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// What QC needs from a trial. `eeg` is at `fs` and `led_onset` indexes it.
#[derive(Debug, Clone, Copy)]
pub struct QcTrial<'a> {
    pub trial_id: &'a str,
    pub eeg: &'a Matrix,
    pub fs: f64,
    pub led_onset: usize,
    pub response_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    RejectedRt,
    RejectedRmse,
    /// Signature could not be computed (span shorter than the window).
    RejectedSpan,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Kept => "kept",
            Verdict::RejectedRt => "rejected_rt",
            Verdict::RejectedRmse => "rejected_rmse",
            Verdict::RejectedSpan => "rejected_span",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "kept" => Verdict::Kept,
            "rejected_rt" => Verdict::RejectedRt,
            "rejected_rmse" => Verdict::RejectedRmse,
            "rejected_span" => Verdict::RejectedSpan,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcEntry {
    pub trial_id: String,
    pub verdict: Verdict,
    pub response_time_s: f64,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcReport {
    pub entries: Vec<QcEntry>,
    pub reference_signature: Vec<f64>,
}

impl QcReport {
    pub fn kept_ids(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| e.verdict == Verdict::Kept)
            .map(|e| e.trial_id.as_str())
    }

    pub fn count(&self, v: Verdict) -> usize {
        self.entries.iter().filter(|e| e.verdict == v).count()
    }

    pub fn verdict_of(&self, trial_id: &str) -> Option<Verdict> {
        self.entries
            .iter()
            .find(|e| e.trial_id == trial_id)
            .map(|e| e.verdict)
    }

    /// CSV with columns `trial_id,verdict,response_time_s,rmse`; `rmse` is
    /// empty when no signature exists.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["trial_id", "verdict", "response_time_s", "rmse"])?;
        for e in &self.entries {
            out.write_record([
                e.trial_id.clone(),
                e.verdict.as_str().to_string(),
                e.response_time_s.to_string(),
                e.rmse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`QcReport::write_csv`]. The reference
    /// signature is not part of the CSV and comes back empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, QcError> {
        let bad = |m: String| QcError::MalformedReport(m);
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["trial_id", "verdict", "response_time_s", "rmse"] {
            return Err(bad(format!("unexpected header {headers:?}")));
        }
        let mut entries = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let verdict =
                Verdict::parse(&rec[1]).ok_or_else(|| bad(format!("unknown verdict `{}`", &rec[1])))?;
            let response_time_s = rec[2].parse().map_err(|_| bad("bad response_time_s".into()))?;
            let rmse = if rec[3].is_empty() {
                None
            } else {
                Some(rec[3].parse().map_err(|_| bad("bad rmse".into()))?)
            };
            entries.push(QcEntry {
                trial_id: rec[0].to_string(),
                verdict,
                response_time_s,
                rmse,
            });
        }
        Ok(Self {
            entries,
            reference_signature: Vec::new(),
        })
    }
}

/// Per channel, the maximum over the post-LED span of the `ma_window`-point
/// moving average of |EEG|.
pub fn max_moving_average(
    eeg: &Matrix,
    fs: f64,
    led_onset: usize,
    cfg: &QcConfig,
) -> Result<Vec<f64>, QcError> {
    let span = (cfg.post_led_span_ms / 1000.0 * fs).round() as usize;
    let end = (led_onset + span).min(eeg.cols());
    let got = end.saturating_sub(led_onset);
    let w = cfg.ma_window;
    if got < w || w == 0 {
        return Err(QcError::SpanTooShort { got, window: w });
    }
    Ok(eeg
        .iter_rows()
        .map(|row| {
            let seg = &row[led_onset..end];
            let mut sum: f64 = seg[..w].iter().map(|v| v.abs()).sum();
            let mut best = sum;
            for i in w..seg.len() {
                sum += seg[i].abs() - seg[i - w].abs();
                best = best.max(sum);
            }
            best / w as f64
        })
        .collect())
}

/// Element-wise mean of the first `cfg.reference_trials` signatures.
pub fn build_reference(signatures: &[Vec<f64>], cfg: &QcConfig) -> Result<Vec<f64>, QcError> {
    let k = cfg.reference_trials;
    if signatures.len() < k || k == 0 {
        return Err(QcError::NotEnoughTrials {
            needed: k,
            got: signatures.len(),
        });
    }
    let n = signatures[0].len();
    let mut reference = vec![0.0; n];
    for s in &signatures[..k] {
        for (r, v) in reference.iter_mut().zip(s) {
            *r += v;
        }
    }
    reference.iter_mut().for_each(|r| *r /= k as f64);
    Ok(reference)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

/// Runs the full rejection procedure over a session in session order.
///
/// The reference uses the first `reference_trials` trials that have a
/// signature, whatever their own verdict.
pub fn flag_bad_trials(trials: &[QcTrial<'_>], cfg: &QcConfig) -> Result<QcReport, QcError> {
    cfg.validate()?;
    let signatures: Vec<Result<Vec<f64>, QcError>> = trials
        .iter()
        .map(|t| max_moving_average(t.eeg, t.fs, t.led_onset, cfg))
        .collect();
    let available: Vec<Vec<f64>> = signatures
        .iter()
        .filter_map(|s| s.as_ref().ok().cloned())
        .take(cfg.reference_trials)
        .collect();
    let reference = build_reference(&available, cfg)?;

    let entries = trials
        .iter()
        .zip(&signatures)
        .map(|(t, sig)| {
            let rmse = sig.as_ref().ok().map(|s| rmse(s, &reference));
            let verdict = if t.response_time_s > cfg.rt_limit_s {
                Verdict::RejectedRt
            } else {
                match rmse {
                    None => Verdict::RejectedSpan,
                    Some(r) if r > cfg.rmse_threshold => Verdict::RejectedRmse,
                    Some(_) => Verdict::Kept,
                }
            };
            QcEntry {
                trial_id: t.trial_id.to_string(),
                verdict,
                response_time_s: t.response_time_s,
                rmse,
            }
        })
        .collect();
    Ok(QcReport {
        entries,
        reference_signature: reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_fs1() -> (QcConfig, f64) {
        // fs = 1 Hz so the 1500 ms span is ~2 samples; use a long span instead.
        let mut cfg = QcConfig::strict();
        cfg.post_led_span_ms = 1_000_000.0;
        (cfg, 1.0)
    }

    #[test]
    fn alternating_signs_have_unit_signature() {
        let (cfg, fs) = cfg_fs1();
        let eeg = Matrix::from_rows(&[[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0]]).unwrap();
        assert_eq!(max_moving_average(&eeg, fs, 0, &cfg).unwrap(), vec![1.0]);
    }

    #[test]
    fn single_spike_signature() {
        let (cfg, fs) = cfg_fs1();
        let eeg = Matrix::from_rows(&[[0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(max_moving_average(&eeg, fs, 0, &cfg).unwrap(), vec![2.0]);
    }

    #[test]
    fn span_shorter_than_window() {
        let (cfg, fs) = cfg_fs1();
        let eeg = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(
            max_moving_average(&eeg, fs, 0, &cfg).unwrap_err(),
            QcError::SpanTooShort { got: 3, window: 5 }
        );
    }

    #[test]
    fn span_is_limited_to_post_led_window() {
        // At 25 Hz, 1500 ms is 38 samples (37.5 rounded); a spike after that
        // span is ignored.
        let cfg = QcConfig::strict();
        let mut row = vec![0.0; 200];
        row[10 + 60] = 100.0;
        let eeg = Matrix::from_rows(&[row]).unwrap();
        assert_eq!(max_moving_average(&eeg, 25.0, 10, &cfg).unwrap(), vec![0.0]);
    }

    #[test]
    fn reference_examples() {
        let cfg = QcConfig::strict();
        let v = vec![1.0, 2.0, 3.0];
        assert_eq!(build_reference(&vec![v.clone(); 10], &cfg).unwrap(), v);
        let alternating: Vec<Vec<f64>> = (0..10)
            .map(|i| if i % 2 == 0 { vec![0.0; 3] } else { vec![2.0; 3] })
            .collect();
        assert_eq!(build_reference(&alternating, &cfg).unwrap(), vec![1.0; 3]);
        assert_eq!(
            build_reference(&vec![v; 9], &cfg).unwrap_err(),
            QcError::NotEnoughTrials { needed: 10, got: 9 }
        );
    }

    /// Ten reference trials with signature 0 on two channels, then a probe
    /// trial whose constant level sets its RMSE against the reference.
    fn session_with_probe(level: f64, rt: f64) -> Vec<(String, Matrix, f64)> {
        let mut out: Vec<(String, Matrix, f64)> = (0..10)
            .map(|i| (format!("r{i}"), Matrix::zeros(2, 60), 0.3))
            .collect();
        out.push(("probe".into(), Matrix::from_vec(2, 60, vec![level; 120]).unwrap(), rt));
        out
    }

    fn run(session: &[(String, Matrix, f64)], cfg: &QcConfig) -> QcReport {
        let trials: Vec<QcTrial> = session
            .iter()
            .map(|(id, eeg, rt)| QcTrial {
                trial_id: id,
                eeg,
                fs: 25.0,
                led_onset: 0,
                response_time_s: *rt,
            })
            .collect();
        flag_bad_trials(&trials, cfg).unwrap()
    }

    #[test]
    fn verdict_rules() {
        let s = session_with_probe(120.0, 0.3);
        let strict = run(&s, &QcConfig::strict());
        assert_eq!(strict.verdict_of("probe"), Some(Verdict::RejectedRmse));
        assert_eq!(strict.entries[10].rmse, Some(120.0));
        assert_eq!(run(&s, &QcConfig::lenient()).verdict_of("probe"), Some(Verdict::Kept));
        assert_eq!(strict.verdict_of("r0"), Some(Verdict::Kept));

        let slow = session_with_probe(0.0, 0.6);
        assert_eq!(
            run(&slow, &QcConfig::strict()).verdict_of("probe"),
            Some(Verdict::RejectedRt)
        );
        let boundary = session_with_probe(0.0, 0.5);
        assert_eq!(
            run(&boundary, &QcConfig::strict()).verdict_of("probe"),
            Some(Verdict::Kept)
        );
    }

    #[test]
    fn short_trial_recorded_as_rejected() {
        let mut s = session_with_probe(0.0, 0.3);
        s.push(("tiny".into(), Matrix::zeros(2, 3), 0.3));
        let r = run(&s, &QcConfig::strict());
        assert_eq!(r.verdict_of("tiny"), Some(Verdict::RejectedSpan));
        assert_eq!(r.entries.len(), 12);
    }

    #[test]
    fn csv_round_trip() {
        let r = run(&session_with_probe(120.0, 0.7), &QcConfig::strict());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = QcReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.entries, r.entries);
    }

    #[test]
    fn config_validation() {
        let mut c = QcConfig::strict();
        c.ma_window = 0;
        assert!(c.validate().is_err());
        assert!(QcConfig::new(-1.0).validate().is_err());
        assert!(QcConfig::rt_only().validate().is_ok());
    }
}
