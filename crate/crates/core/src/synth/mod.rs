//! Synthetic sessions with a known lagged EEG-to-kinematics coupling, and a
//! least-squares oracle that bounds what a linear readout can achieve.
//!
//! Randomness comes from ChaCha8 seeded with `seed`. Stream 0 draws
//! session-wide structure (which channels are informative and how they mix
//! the three axes); trial `i` draws from stream `i + 1`, so trials can be
//! generated independently.
//!
//! Timeline of one trial: the LED fires at 1.0 s, the movement starts one
//! response time later and lasts most of the remaining recording. Hand
//! position on each axis is a sum of two slow sinusoids (1.0 to 2.5 Hz)
//! around 0.5. Informative channel `i` carries axis `i % 3` with a fixed
//! sign and gain, as it will be `true_lag_samples` output-rate samples after
//! the matching point of the EEG movement segment, with the LED and movement
//! onsets taken on the output-rate grid the pipeline snaps them to. Every channel also
//! carries band-limited background activity (sum of sinusoids between 0.7
//! and 11.5 Hz) and a small LED-locked evoked wave. All of it lies inside
//! 0.5 to 12 Hz.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LaggedDataset};
use crate::io::{write_session, IngestError, SessionManifest, TrialRecord};
use crate::matrix::Matrix;
use crate::pipeline::rescale_index;
use crate::train::{metrics_3d, MetricsReport, TrainError};

pub const LED_ONSET_S: f64 = 1.0;
pub const RT_MEAN_S: f64 = 0.36;
pub const RT_SD_S: f64 = 0.06;
/// Output rate the lag is expressed in.
pub const LAG_RATE_HZ: f64 = 25.0;
const RT_MIN_S: f64 = 0.15;
const RT_MAX_S: f64 = 0.7;
/// Shortest recording kept after the movement starts.
const MIN_MOVEMENT_S: f64 = 1.0;
const BACKGROUND_RMS_UV: f64 = 20.0;
const INFORMATIVE_GAIN_UV: f64 = 100.0;
const N_SINES: usize = 24;
// Quantization steps per unit.
const EEG_STEPS: f64 = 1e4;
const KIN_STEPS: f64 = 1e6;
/// Ridge strength used when the normal equations are singular.
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subject_id: String,
    pub n_channels: usize,
    pub fs: f64,
    pub n_trials: usize,
    pub trial_len_s: f64,
    pub informative_channels: usize,
    /// Lag at the 25 Hz output rate.
    pub true_lag_samples: usize,
    /// `inf` switches the additive noise off.
    pub noise_snr_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_id: "synth".into(),
            n_channels: 32,
            fs: 500.0,
            n_trials: 50,
            trial_len_s: 7.0,
            informative_channels: 4,
            true_lag_samples: 9,
            noise_snr_db: 10.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_channels == 0 {
            return bad("n_channels must be at least 1".into());
        }
        if self.informative_channels > self.n_channels {
            return bad(format!(
                "informative_channels ({}) exceeds n_channels ({})",
                self.informative_channels, self.n_channels
            ));
        }
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if !(self.fs.is_finite() && self.fs >= 2.0 * 12.0) {
            return bad(format!("fs must be at least 24 Hz, got {}", self.fs));
        }
        let min_len = LED_ONSET_S + RT_MAX_S + MIN_MOVEMENT_S;
        if !(self.trial_len_s.is_finite() && self.trial_len_s >= min_len) {
            return bad(format!("trial_len_s must be at least {min_len}, got {}", self.trial_len_s));
        }
        if self.noise_snr_db.is_nan() || self.noise_snr_db == f64::NEG_INFINITY {
            return bad(format!("noise_snr_db must be a number or inf, got {}", self.noise_snr_db));
        }
        if self.subject_id.is_empty() {
            return bad("subject_id must not be empty".into());
        }
        Ok(())
    }
}

struct SessionPlan {
    informative: Vec<usize>,
    /// One row per informative channel; channel `i` carries axis `i % 3`.
    mixing: Vec<[f64; 3]>,
}

fn plan(cfg: &SynthConfig) -> SessionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let mut channels: Vec<usize> = (0..cfg.n_channels).collect();
    channels.shuffle(&mut rng);
    let mut informative = channels[..cfg.informative_channels].to_vec();
    informative.sort_unstable();
    let mixing = (0..informative.len())
        .map(|i| {
            let mut row = [0.0; 3];
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            row[i % 3] = sign * rng.random_range(0.7..1.3);
            row
        })
        .collect();
    SessionPlan { informative, mixing }
}

/// A sum of sinusoids with random frequencies in `[lo, hi]` Hz, scaled to
/// unit RMS in expectation.
struct Multisine {
    comps: Vec<(f64, f64, f64)>,
}

impl Multisine {
    fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Self {
        let mut comps: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0.5..1.5),
                    2.0 * PI * rng.random_range(lo..hi),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let power: f64 = comps.iter().map(|c| c.0 * c.0 / 2.0).sum();
        let k = 1.0 / power.sqrt();
        comps.iter_mut().for_each(|c| c.0 *= k);
        Self { comps }
    }

    fn at(&self, t: f64) -> f64 {
        self.comps.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum()
    }
}

struct Trajectory {
    /// Per axis: (amplitude, angular frequency, phase) for two components.
    axes: [[(f64, f64, f64); 2]; 3],
}

impl Trajectory {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut axes = [[(0.0, 0.0, 0.0); 2]; 3];
        for axis in &mut axes {
            let slow = 2.0 * PI * rng.random_range(1.0..1.5);
            let fast = 2.0 * PI * rng.random_range(1.5..2.5);
            let a2 = rng.random_range(0.15..0.35);
            let a1 = 0.45 / (1.0 + a2);
            axis[0] = (a1, slow, rng.random_range(0.0..2.0 * PI));
            axis[1] = (a1 * a2, fast, rng.random_range(0.0..2.0 * PI));
        }
        Self { axes }
    }

    fn at(&self, axis: usize, t: f64) -> f64 {
        0.5 + self.axes[axis].iter().map(|(a, w, p)| a * (w * t + p).sin()).sum::<f64>()
    }
}

fn quantize(x: f64, steps: f64) -> f64 {
    (x * steps).round() / steps
}

/// Response time as seen after decimation to the output rate, where the
/// LED and movement-start events snap to the output grid. Falls back to the
/// exact value when `fs` is not a multiple of the output rate.
fn grid_response_time(led: usize, start: usize, fs: f64) -> f64 {
    let factor = (fs / LAG_RATE_HZ).round();
    if factor < 1.0 || (fs - factor * LAG_RATE_HZ).abs() > 1e-9 * fs {
        return (start - led) as f64 / fs;
    }
    let f = factor as usize;
    (rescale_index(start, f) as f64 - rescale_index(led, f) as f64) / LAG_RATE_HZ
}

fn draw_response_time(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(RT_MEAN_S, RT_SD_S)
        .unwrap()
        .sample(rng)
        .clamp(RT_MIN_S, RT_MAX_S)
}

fn gen_trial(
    cfg: &SynthConfig,
    plan: &SessionPlan,
    index: usize,
    response_time_s: Option<f64>,
) -> TrialRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let fs = cfg.fs;
    let n_samples = (cfg.trial_len_s * fs).round() as usize;
    let led = (LED_ONSET_S * fs).round() as usize;
    let rt = response_time_s.unwrap_or_else(|| draw_response_time(&mut rng));
    let start = led + (rt * fs).round() as usize;
    let available = n_samples.saturating_sub(start) as f64;
    let stop = (start + (available * rng.random_range(0.7..0.95)) as usize).min(n_samples);

    let traj = Trajectory::random(&mut rng);
    let lead_s = grid_response_time(led, start, fs) + cfg.true_lag_samples as f64 / LAG_RATE_HZ;
    let backgrounds: Vec<Multisine> = (0..cfg.n_channels)
        .map(|_| Multisine::random(&mut rng, N_SINES, 0.7, 11.5))
        .collect();
    let noises: Vec<Multisine> = (0..cfg.n_channels)
        .map(|_| Multisine::random(&mut rng, N_SINES, 0.7, 11.5))
        .collect();
    let erp_gain: Vec<f64> = (0..cfg.n_channels).map(|_| rng.random_range(1.0..4.0)).collect();

    let times: Vec<f64> = (0..n_samples).map(|k| k as f64 / fs).collect();
    let mut kin = Matrix::zeros(3, n_samples);
    for a in 0..3 {
        for (k, &t) in times.iter().enumerate() {
            kin.set(a, k, quantize(traj.at(a, t), KIN_STEPS));
        }
    }

    let noise_scale = if cfg.noise_snr_db.is_finite() {
        10f64.powf(-cfg.noise_snr_db / 20.0)
    } else {
        0.0
    };
    let mut eeg = Matrix::zeros(cfg.n_channels, n_samples);
    let mut clean = vec![0.0; n_samples];
    for c in 0..cfg.n_channels {
        let row = plan.informative.iter().position(|&i| i == c);
        for (k, &t) in times.iter().enumerate() {
            let since_led = t - LED_ONSET_S - 0.35;
            let evoked = erp_gain[c]
                * (-since_led * since_led / (2.0 * 0.1 * 0.1)).exp()
                * (2.0 * PI * 4.0 * since_led).cos();
            clean[k] = evoked
                + match row {
                    Some(r) => {
                        let m = plan.mixing[r];
                        INFORMATIVE_GAIN_UV
                            * (0..3).map(|a| m[a] * (traj.at(a, t + lead_s) - 0.5)).sum::<f64>()
                    }
                    None => BACKGROUND_RMS_UV * backgrounds[c].at(t),
                };
        }
        let clean_rms = (clean.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt();
        for (k, &t) in times.iter().enumerate() {
            let noise = noise_scale * clean_rms * noises[c].at(t);
            eeg.set(c, k, quantize(clean[k] + noise, EEG_STEPS));
        }
    }
    TrialRecord::new(format!("trial_{:03}", index + 1), fs, eeg, kin, led, start, stop)
}

/// Generates the trials of a session in memory.
pub fn gen_trials(cfg: &SynthConfig) -> Result<Vec<TrialRecord>, SynthError> {
    cfg.validate()?;
    let plan = plan(cfg);
    Ok((0..cfg.n_trials).map(|i| gen_trial(cfg, &plan, i, None)).collect())
}

/// Like [`gen_trials`], but with one trial per given response time
/// (`cfg.n_trials` is ignored).
pub fn gen_trials_with_response_times(
    cfg: &SynthConfig,
    response_times_s: &[f64],
) -> Result<Vec<TrialRecord>, SynthError> {
    cfg.validate()?;
    let limit = cfg.trial_len_s - LED_ONSET_S - MIN_MOVEMENT_S;
    if let Some(rt) = response_times_s.iter().find(|rt| !(**rt > 0.0 && **rt <= limit)) {
        return Err(SynthError::InvalidConfig(format!(
            "response time {rt} s outside (0, {limit}]"
        )));
    }
    let plan = plan(cfg);
    Ok(response_times_s
        .iter()
        .enumerate()
        .map(|(i, &rt)| gen_trial(cfg, &plan, i, Some(rt)))
        .collect())
}

/// Generates a session and writes it to `dir` in the ingest format.
pub fn gen_session(cfg: &SynthConfig, dir: &Path) -> Result<SessionManifest, SynthError> {
    let trials = gen_trials(cfg)?;
    Ok(write_session(dir, &cfg.subject_id, &trials)?)
}

/// Indices of the informative channels for `cfg`, ascending.
pub fn informative_channels(cfg: &SynthConfig) -> Vec<usize> {
    plan(cfg).informative
}

/// Response times for a session of `total` trials of which exactly `kept`
/// pass an RT gate at `limit_s`: kept trials are normal around `mean_s`
/// (clipped into `[0.1, limit_s]`), the rest fall uniformly in
/// `(limit_s, limit_s + 0.5]`. Order is shuffled.
pub fn response_times_for_keep_count(
    kept: usize,
    total: usize,
    mean_s: f64,
    sd_s: f64,
    limit_s: f64,
    seed: u64,
) -> Vec<f64> {
    assert!(kept <= total, "kept must not exceed total");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean_s, sd_s).unwrap();
    let mut rts: Vec<f64> = (0..kept)
        .map(|_| normal.sample(&mut rng).clamp(0.1, limit_s))
        .collect();
    rts.extend((kept..total).map(|_| limit_s + rng.random_range(0.01..0.5)));
    rts.shuffle(&mut rng);
    rts
}

/// Fraction of the power of `x` (sampled at `fs`) outside `[lo, hi]` Hz,
/// from a Hann-windowed periodogram with the mean removed first.
pub fn out_of_band_fraction(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos();
            Complex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * fs / n as f64;
        let p = c.norm_sqr();
        total += p;
        if (lo..=hi).contains(&f) {
            inside += p;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        1.0 - inside / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Metrics of the least-squares readout on the evaluation split.
    pub metrics: MetricsReport,
    /// Whether the normal equations were singular and ridge was used.
    pub ridge: bool,
}

/// Fits least squares (with intercept) from flattened lag windows to the
/// targets of `train` and reports metrics on `eval`. With `shuffle_seed`,
/// the training targets are permuted first (a permutation null).
pub fn oracle_fit(
    train: &LaggedDataset,
    eval: &LaggedDataset,
    shuffle_seed: Option<u64>,
) -> Result<OracleResult, SynthError> {
    let d = train.input_dim() + 1;
    let s = train.len();
    let design = |ds: &LaggedDataset| {
        DMatrix::from_fn(ds.len(), d, |r, c| if c == 0 { 1.0 } else { ds.input(r)[c - 1] })
    };
    let x = design(train);
    let mut order: Vec<usize> = (0..s).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let y = DMatrix::from_fn(s, 3, |r, c| train.target(order[r])[c]);
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    let (beta, ridge) = match xtx.clone().cholesky() {
        Some(ch) => (ch.solve(&xty), false),
        None => {
            let reg = xtx + DMatrix::identity(d, d) * RIDGE_LAMBDA;
            let beta = match reg.clone().cholesky() {
                Some(ch) => ch.solve(&xty),
                None => reg
                    .svd(true, true)
                    .solve(&xty, 1e-12)
                    .map_err(|e| SynthError::InvalidConfig(e.to_string()))?,
            };
            (beta, true)
        }
    };
    let pred = design(eval) * beta;
    let pred: Vec<f64> = (0..eval.len())
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .map(|(r, c)| pred[(r, c)])
        .collect();
    let target = eval.gather_targets(&(0..eval.len()).collect::<Vec<_>>());
    Ok(OracleResult {
        metrics: metrics_3d(&pred, &target)?,
        ridge,
    })
}

/// Splits `ds` per trial with `ratios`/`seed` (as training does), fits the
/// least-squares readout on the train part and reports validation metrics.
pub fn oracle_best_rho(
    ds: &LaggedDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<OracleResult, SynthError> {
    let (train, val, _) = ds.split(ratios, seed)?;
    oracle_fit(&train, &val, None)
}

#[cfg(test)]
mod tests;
