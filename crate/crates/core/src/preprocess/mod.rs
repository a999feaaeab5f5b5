//! Signal conditioning: kinematic min-max scaling, EEG decimation, DC
//! removal, band-pass filtering, standardization and length alignment.
//!
//! The decoding pipeline applies these in the order
//! decimate -> remove_dc -> bandpass -> (segment) -> align -> standardize.

pub mod fir;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use fir::{Application, BandEdges, FirFilter};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("axis {axis} has zero range (constant trajectory)")]
    DegenerateAxis { axis: usize },
    #[error("decimating {len} samples by {factor} leaves fewer than 2 samples")]
    FactorTooLarge { len: usize, factor: usize },
    #[error("decimation factor must be at least 1")]
    ZeroFactor,
    #[error("filter specification not realizable at {fs} Hz: {reason}")]
    UnrealizableSpec { fs: f64, reason: String },
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },
    #[error("kinematics ({kin} samples) longer than EEG ({eeg} samples)")]
    KinLongerThanEeg { eeg: usize, kin: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("expected {expected} rows, got {got}")]
    RowCount { expected: usize, got: usize },
}

/// Per-axis bounds recorded by [`scale_kinematics`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub ax_min: [f64; 3],
    pub ax_max: [f64; 3],
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Single causal pass; delays the signal by the filter's group delay.
    Causal,
    /// Forward-backward pass; no delay, squared magnitude response.
    #[default]
    ZeroPhase,
}

impl FilterMode {
    pub fn application(self) -> Application {
        match self {
            FilterMode::Causal => Application::Causal,
            FilterMode::ZeroPhase => Application::ForwardBackward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Antialias {
    /// Low-pass at 0.8 x the new Nyquist frequency before picking samples.
    #[default]
    On,
    /// Plain sample dropping.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub pass_lo_hz: f64,
    pub pass_hi_hz: f64,
    pub stop_atten_db: f64,
    pub mode: FilterMode,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            pass_lo_hz: 0.5,
            pass_hi_hz: 12.0,
            stop_atten_db: 60.0,
            mode: FilterMode::default(),
        }
    }
}

impl FilterSpec {
    /// Band edges in Hz at sample rate `fs`.
    ///
    /// Lower transition: stop at 0.2 x `pass_lo_hz`, pass at 1.8 x `pass_lo_hz`
    /// (0.1 / 0.9 Hz for the default 0.5 Hz edge). Upper transition: pass at
    /// 11/12 x `pass_hi_hz`, stop at 13/12 x `pass_hi_hz` (11 / 13 Hz for
    /// 12 Hz). When the upper stop edge reaches Nyquist the low-pass side is
    /// dropped and the design is a high-pass; at 25 Hz this is the case and
    /// the only stopband is 0..0.1 Hz.
    pub fn edges_hz(&self, fs: f64) -> Result<BandEdges, PreprocessError> {
        let nyq = fs / 2.0;
        let bad = |reason: String| PreprocessError::UnrealizableSpec { fs, reason };
        if !(self.pass_lo_hz > 0.0 && self.pass_lo_hz < self.pass_hi_hz) {
            return Err(bad(format!(
                "need 0 < pass_lo_hz ({}) < pass_hi_hz ({})",
                self.pass_lo_hz, self.pass_hi_hz
            )));
        }
        if self.pass_hi_hz >= nyq {
            return Err(bad(format!(
                "pass_hi_hz {} is not below Nyquist {nyq}",
                self.pass_hi_hz
            )));
        }
        if self.stop_atten_db <= 0.0 {
            return Err(bad("stop_atten_db must be positive".into()));
        }
        let lower = (0.2 * self.pass_lo_hz, 1.8 * self.pass_lo_hz);
        let upper_stop = self.pass_hi_hz * 13.0 / 12.0;
        let upper_pass = self.pass_hi_hz * 11.0 / 12.0;
        if lower.1 >= upper_pass {
            return Err(bad("pass band too narrow for the transition widths".into()));
        }
        let upper = (upper_stop < nyq).then_some((upper_pass, upper_stop));
        Ok(BandEdges {
            lower: Some(lower),
            upper,
        })
    }

    /// Designs the band-pass for sample rate `fs`.
    pub fn design(&self, fs: f64) -> Result<FirFilter, PreprocessError> {
        let e = self.edges_hz(fs)?;
        let norm = BandEdges {
            lower: e.lower.map(|(s, p)| (s / fs, p / fs)),
            upper: e.upper.map(|(p, s)| (p / fs, s / fs)),
        };
        Ok(FirFilter::kaiser(norm, self.stop_atten_db))
    }
}

/// Maps each axis to [0, 1] with (v - min) / (max - min).
pub fn scale_kinematics(kin: &Matrix) -> Result<(Matrix, ScalerParams), PreprocessError> {
    if kin.rows() != 3 {
        return Err(PreprocessError::RowCount {
            expected: 3,
            got: kin.rows(),
        });
    }
    if kin.cols() < 2 {
        return Err(PreprocessError::TooShort {
            needed: 2,
            got: kin.cols(),
        });
    }
    let mut params = ScalerParams {
        ax_min: [0.0; 3],
        ax_max: [0.0; 3],
    };
    let mut out = kin.clone();
    for axis in 0..3 {
        let row = kin.row(axis);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Err(PreprocessError::DegenerateAxis { axis });
        }
        params.ax_min[axis] = lo;
        params.ax_max[axis] = hi;
        let range = hi - lo;
        for v in out.row_mut(axis) {
            *v = (*v - lo) / range;
        }
    }
    Ok((out, params))
}

/// Inverse of [`scale_kinematics`]: v * (max - min) + min.
pub fn inverse_scale(scaled: &Matrix, params: &ScalerParams) -> Matrix {
    let mut out = scaled.clone();
    for axis in 0..3.min(out.rows()) {
        let (lo, hi) = (params.ax_min[axis], params.ax_max[axis]);
        for v in out.row_mut(axis) {
            *v = *v * (hi - lo) + lo;
        }
    }
    out
}

/// Anti-alias low-pass for decimation by `factor`: pass edge at 0.8 x the new
/// Nyquist, stop edge at the new Nyquist, 60 dB.
pub fn antialias_filter(factor: usize) -> FirFilter {
    let nyq = 0.5 / factor as f64;
    FirFilter::kaiser(
        BandEdges {
            lower: None,
            upper: Some((0.8 * nyq, nyq)),
        },
        60.0,
    )
}

/// Keeps every `factor`-th sample, optionally after a delay-compensated
/// anti-alias low-pass. Output sample k is (filtered) input sample k * factor.
pub fn decimate(eeg: &Matrix, factor: usize, antialias: Antialias) -> Result<Matrix, PreprocessError> {
    if factor == 0 {
        return Err(PreprocessError::ZeroFactor);
    }
    let len = eeg.cols() / factor;
    if len < 2 {
        return Err(PreprocessError::FactorTooLarge {
            len: eeg.cols(),
            factor,
        });
    }
    if factor == 1 {
        return Ok(eeg.clone());
    }
    let source = match antialias {
        Antialias::On => antialias_filter(factor).apply_rows(eeg, Application::Centered),
        Antialias::Off => eeg.clone(),
    };
    Ok(pick_every(&source, factor))
}

/// Plain sample picking: output k = input k * factor, length floor(T / factor).
pub fn pick_every(m: &Matrix, factor: usize) -> Matrix {
    let len = m.cols() / factor;
    m.map_rows(|row| (0..len).map(|k| row[k * factor]).collect())
}

pub fn remove_dc(eeg: &Matrix) -> Matrix {
    eeg.map_rows(|row| {
        let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
        row.iter().map(|v| v - mean).collect()
    })
}

pub fn bandpass(eeg: &Matrix, spec: &FilterSpec, fs: f64) -> Result<Matrix, PreprocessError> {
    let filter = spec.design(fs)?;
    Ok(filter.apply_rows(eeg, spec.mode.application()))
}

/// Per-channel z-scoring with the population standard deviation.
pub fn standardize(eeg: &Matrix) -> Result<(Matrix, ChannelStats), PreprocessError> {
    let mut mu = Vec::with_capacity(eeg.rows());
    let mut sigma = Vec::with_capacity(eeg.rows());
    for (channel, row) in eeg.iter_rows().enumerate() {
        let n = row.len() as f64;
        let m = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        if !(s > 0.0) || s <= m.abs() * 1e-14 {
            return Err(PreprocessError::ZeroVariance { channel });
        }
        mu.push(m);
        sigma.push(s);
    }
    let mut out = eeg.clone();
    for r in 0..out.rows() {
        let (m, s) = (mu[r], sigma[r]);
        for v in out.row_mut(r) {
            *v = (*v - m) / s;
        }
    }
    Ok((out, ChannelStats { mu, sigma }))
}

/// Truncates EEG at the end to the kinematics length.
pub fn align_lengths(eeg: &Matrix, kin: &Matrix) -> Result<(Matrix, Matrix), PreprocessError> {
    if kin.cols() > eeg.cols() {
        return Err(PreprocessError::KinLongerThanEeg {
            eeg: eeg.cols(),
            kin: kin.cols(),
        });
    }
    Ok((eeg.columns(0..kin.cols()), kin.clone()))
}
