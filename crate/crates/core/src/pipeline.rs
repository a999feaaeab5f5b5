//! Per-trial conditioning that chains the preprocessing steps.
//!
//! [`Conditioner::condition`] produces the full-length conditioned trial at
//! the output rate (decimated, DC removed, band-passed), which is what QC
//! inspects. [`Conditioner::prepare`] then cuts the movement segment, aligns
//! lengths, standardizes EEG and scales the kinematics.

use serde::{Deserialize, Serialize};

use crate::io::TrialRecord;
use crate::matrix::Matrix;
use crate::preprocess::fir::{Application, FirFilter};
use crate::preprocess::{
    align_lengths, antialias_filter, pick_every, remove_dc, scale_kinematics, standardize,
    Antialias, ChannelStats, FilterMode, FilterSpec, PreprocessError, ScalerParams,
};
use crate::error::Error;
use crate::qc::{flag_bad_trials, QcConfig, QcReport, QcTrial, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub fs_out_hz: f64,
    pub pass_band: [f64; 2],
    pub stop_atten_db: f64,
    pub filter_mode: FilterMode,
    pub antialias: Antialias,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let spec = FilterSpec::default();
        Self {
            fs_out_hz: 25.0,
            pass_band: [spec.pass_lo_hz, spec.pass_hi_hz],
            stop_atten_db: spec.stop_atten_db,
            filter_mode: spec.mode,
            antialias: Antialias::On,
        }
    }
}

impl PreprocessConfig {
    pub fn filter_spec(&self) -> FilterSpec {
        FilterSpec {
            pass_lo_hz: self.pass_band[0],
            pass_hi_hz: self.pass_band[1],
            stop_atten_db: self.stop_atten_db,
            mode: self.filter_mode,
        }
    }

    /// Integer decimation factor from `fs_in` to `fs_out_hz`.
    pub fn factor(&self, fs_in: f64) -> Result<usize, PreprocessError> {
        let ratio = fs_in / self.fs_out_hz;
        let factor = ratio.round();
        if !(factor >= 1.0) || (ratio - factor).abs() > 1e-9 * ratio {
            return Err(PreprocessError::UnrealizableSpec {
                fs: fs_in,
                reason: format!(
                    "output rate {} Hz is not an integer fraction of the input rate",
                    self.fs_out_hz
                ),
            });
        }
        Ok(factor as usize)
    }
}

/// Rescales a sample index to the decimated clock, rounding to nearest.
pub fn rescale_index(sample: usize, factor: usize) -> usize {
    (sample + factor / 2) / factor
}

/// A whole trial at the output rate after decimation, DC removal and
/// band-pass. Event indices are on the output clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedTrial {
    pub trial_id: String,
    pub fs: f64,
    pub eeg: Matrix,
    /// Kinematics decimated by plain sample picking.
    pub kin: Matrix,
    pub led_onset: usize,
    pub movement_start: usize,
    pub movement_stop: usize,
    pub response_time_s: f64,
}

impl ConditionedTrial {
    pub fn qc_view(&self) -> QcTrial<'_> {
        QcTrial {
            trial_id: &self.trial_id,
            eeg: &self.eeg,
            fs: self.fs,
            led_onset: self.led_onset,
            response_time_s: self.response_time_s,
        }
    }
}

/// Movement segment ready for windowing: EEG from the LED cue, kinematics
/// from movement start, both `T` samples long.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrial {
    pub trial_id: String,
    /// N x T, standardized.
    pub eeg: Matrix,
    /// 3 x T, scaled to [0, 1].
    pub kin: Matrix,
    pub scaler: ScalerParams,
    pub stats: ChannelStats,
}

/// Holds filter designs for one input rate so they are built once per
/// session.
#[derive(Debug, Clone)]
pub struct Conditioner {
    fs_in: f64,
    factor: usize,
    fs_out: f64,
    antialias: Option<FirFilter>,
    bandpass: FirFilter,
    band_mode: Application,
}

impl Conditioner {
    pub fn new(cfg: &PreprocessConfig, fs_in: f64) -> Result<Self, PreprocessError> {
        let factor = cfg.factor(fs_in)?;
        let fs_out = fs_in / factor as f64;
        let antialias = (factor > 1 && cfg.antialias == Antialias::On).then(|| antialias_filter(factor));
        let bandpass = cfg.filter_spec().design(fs_out)?;
        let band_mode = cfg.filter_mode.application();
        Ok(Self {
            fs_in,
            factor,
            fs_out,
            antialias,
            bandpass,
            band_mode,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn fs_out(&self) -> f64 {
        self.fs_out
    }

    pub fn bandpass_filter(&self) -> &FirFilter {
        &self.bandpass
    }

    fn decimate(&self, eeg: &Matrix) -> Result<Matrix, PreprocessError> {
        let len = eeg.cols() / self.factor;
        if len < 2 {
            return Err(PreprocessError::FactorTooLarge {
                len: eeg.cols(),
                factor: self.factor,
            });
        }
        Ok(match &self.antialias {
            Some(f) => pick_every(&f.apply_rows(eeg, Application::Centered), self.factor),
            None => pick_every(eeg, self.factor),
        })
    }

    pub fn condition(&self, trial: &TrialRecord) -> Result<ConditionedTrial, PreprocessError> {
        if (trial.sample_rate_hz - self.fs_in).abs() > 1e-9 * self.fs_in {
            return Err(PreprocessError::UnrealizableSpec {
                fs: trial.sample_rate_hz,
                reason: format!("conditioner was built for {} Hz", self.fs_in),
            });
        }
        let eeg = self.decimate(&trial.eeg)?;
        let eeg = self.bandpass.apply_rows(&remove_dc(&eeg), self.band_mode);
        let kin = pick_every(&trial.kin, self.factor);
        Ok(ConditionedTrial {
            trial_id: trial.trial_id.clone(),
            fs: self.fs_out,
            eeg,
            kin,
            led_onset: rescale_index(trial.led_onset_sample, self.factor),
            movement_start: rescale_index(trial.movement_start_sample, self.factor),
            movement_stop: rescale_index(trial.movement_stop_sample, self.factor),
            response_time_s: trial.response_time_s,
        })
    }

    /// Cuts EEG over [led, stop) and kinematics over [start, stop), truncates
    /// the EEG end to the kinematics length, then standardizes and scales.
    pub fn prepare(&self, c: &ConditionedTrial) -> Result<PreparedTrial, PreprocessError> {
        prepare(c)
    }
}

/// See [`Conditioner::prepare`].
pub fn prepare(c: &ConditionedTrial) -> Result<PreparedTrial, PreprocessError> {
    let stop_eeg = c.movement_stop.min(c.eeg.cols());
    let stop_kin = c.movement_stop.min(c.kin.cols());
    if c.led_onset + 2 > stop_eeg || c.movement_start + 2 > stop_kin {
        return Err(PreprocessError::TooShort {
            needed: 2,
            got: stop_kin.saturating_sub(c.movement_start),
        });
    }
    let eeg = c.eeg.columns(c.led_onset..stop_eeg);
    let kin = c.kin.columns(c.movement_start..stop_kin);
    let (eeg, kin) = align_lengths(&eeg, &kin)?;
    let (eeg, stats) = standardize(&eeg)?;
    let (kin, scaler) = scale_kinematics(&kin)?;
    Ok(PreparedTrial {
        trial_id: c.trial_id.clone(),
        eeg,
        kin,
        scaler,
        stats,
    })
}

/// Output of [`process_session`].
#[derive(Debug, Clone)]
pub struct ProcessedSession {
    pub conditioned: Vec<ConditionedTrial>,
    /// Present when QC ran.
    pub qc: Option<QcReport>,
    /// Movement segments of the trials QC kept (all trials without QC), in
    /// session order.
    pub prepared: Vec<PreparedTrial>,
}

/// Conditions every trial, runs QC when configured and prepares the kept
/// trials.
pub fn process_session(
    trials: &[TrialRecord],
    cfg: &PreprocessConfig,
    qc: Option<&QcConfig>,
) -> Result<ProcessedSession, Error> {
    let Some(first) = trials.first() else {
        return Err(Error::Config("session has no trials".into()));
    };
    let cond = Conditioner::new(cfg, first.sample_rate_hz)?;
    let with_id = |t: &str| {
        let id = t.to_string();
        move |source| Error::Trial { trial_id: id, source }
    };
    let conditioned = trials
        .iter()
        .map(|t| cond.condition(t).map_err(with_id(&t.trial_id)))
        .collect::<Result<Vec<_>, _>>()?;
    let report = match qc {
        Some(q) => {
            let views: Vec<_> = conditioned.iter().map(ConditionedTrial::qc_view).collect();
            Some(flag_bad_trials(&views, q)?)
        }
        None => None,
    };
    let prepared = conditioned
        .iter()
        .filter(|c| {
            report
                .as_ref()
                .is_none_or(|r| r.verdict_of(&c.trial_id) == Some(Verdict::Kept))
        })
        .map(|c| prepare(c).map_err(with_id(&c.trial_id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProcessedSession {
        conditioned,
        qc: report,
        prepared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(fs: f64, t: usize, led: usize, start: usize, stop: usize) -> TrialRecord {
        let eeg: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                (0..t)
                    .map(|i| ((i as f64) * 0.37 + c as f64).sin() * 10.0 + 3.0)
                    .collect()
            })
            .collect();
        let kin: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..t).map(|i| ((i as f64) / fs * (1.0 + a as f64)).sin()).collect())
            .collect();
        TrialRecord::new(
            "t0",
            fs,
            Matrix::from_rows(&eeg).unwrap(),
            Matrix::from_rows(&kin).unwrap(),
            led,
            start,
            stop,
        )
    }

    #[test]
    fn factor_and_index_rescaling() {
        let cfg = PreprocessConfig::default();
        assert_eq!(cfg.factor(500.0).unwrap(), 20);
        assert!(cfg.factor(510.0).is_err());
        assert_eq!(rescale_index(500, 20), 25);
        assert_eq!(rescale_index(509, 20), 25);
        assert_eq!(rescale_index(510, 20), 26);
    }

    #[test]
    fn condition_and_prepare_shapes() {
        let cfg = PreprocessConfig::default();
        let cond = Conditioner::new(&cfg, 500.0).unwrap();
        let c = cond.condition(&trial(500.0, 3500, 500, 680, 2500)).unwrap();
        assert_eq!(c.eeg.shape(), (2, 175));
        assert_eq!(c.kin.shape(), (3, 175));
        assert_eq!((c.led_onset, c.movement_start, c.movement_stop), (25, 34, 125));
        let p = cond.prepare(&c).unwrap();
        assert_eq!(p.eeg.cols(), 125 - 34);
        assert_eq!(p.kin.cols(), 125 - 34);
        for row in p.kin.iter_rows() {
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        for row in p.eeg.iter_rows() {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn rate_mismatch_rejected() {
        let cond = Conditioner::new(&PreprocessConfig::default(), 500.0).unwrap();
        assert!(cond.condition(&trial(250.0, 2000, 250, 340, 1200)).is_err());
    }
}
