//! Lag-window datasets.
//!
//! Sample `s` taken at time `t` of a trial gathers the EEG frames
//! `k_i = E[:, t + l - i]` for `i = 0..=l` and targets the kinematics at
//! `t + l + d`. The flattened input stores them newest first, so
//! `input[i * N + n] == E[n, t + l - i]`; the sequence layout is the same
//! buffer viewed as `(l + 1) x N`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::pipeline::PreparedTrial;
use crate::preprocess::ScalerParams;

const MAGIC: &[u8; 8] = b"NKDSET01";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("trial `{trial_id}` has {len} samples, windows need more than {needed}")]
    TrialTooShort {
        trial_id: String,
        len: usize,
        needed: usize,
    },
    #[error("EEG has {eeg} samples but kinematics has {kin}")]
    LengthMismatch { eeg: usize, kin: usize },
    #[error("trial `{trial_id}` has {got} channels, dataset has {expected}")]
    ChannelMismatch {
        trial_id: String,
        expected: usize,
        got: usize,
    },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("{partition} partition received no trials")]
    EmptyPartition { partition: &'static str },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("dataset file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Flattened,
    #[default]
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub lags: usize,
    pub transfer_delay: usize,
    pub layout: Layout,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lags: 10,
            transfer_delay: 4,
            layout: Layout::Sequence,
        }
    }
}

impl WindowConfig {
    pub fn steps(&self) -> usize {
        self.lags + 1
    }
}

/// Where a sample came from: index into [`LaggedDataset::trials`] and the
/// window start `t` in that trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trial: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub trial_id: String,
    pub scaler: Option<ScalerParams>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDataset {
    n_channels: usize,
    cfg: WindowConfig,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    provenance: Vec<Provenance>,
    trials: Vec<TrialMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_channels: usize,
    window: WindowConfig,
    n_samples: usize,
    trials: Vec<TrialMeta>,
}

/// Windows of a single trial, in construction order.
pub fn build_windows(eeg: &Matrix, kin: &Matrix, cfg: &WindowConfig) -> Result<LaggedDataset, DatasetError> {
    let mut ds = LaggedDataset::empty(eeg.rows(), *cfg);
    ds.push_trial("trial", eeg, kin, None)?;
    Ok(ds)
}

impl LaggedDataset {
    pub fn empty(n_channels: usize, cfg: WindowConfig) -> Self {
        Self {
            n_channels,
            cfg,
            inputs: Vec::new(),
            targets: Vec::new(),
            provenance: Vec::new(),
            trials: Vec::new(),
        }
    }

    pub fn from_prepared(trials: &[PreparedTrial], cfg: &WindowConfig) -> Result<Self, DatasetError> {
        let n = trials.first().map_or(0, |t| t.eeg.rows());
        let mut ds = Self::empty(n, *cfg);
        for t in trials {
            ds.push_trial(&t.trial_id, &t.eeg, &t.kin, Some(t.scaler))?;
        }
        Ok(ds)
    }

    /// Appends every window of one trial.
    pub fn push_trial(
        &mut self,
        trial_id: &str,
        eeg: &Matrix,
        kin: &Matrix,
        scaler: Option<ScalerParams>,
    ) -> Result<(), DatasetError> {
        let (l, d) = (self.cfg.lags, self.cfg.transfer_delay);
        let n = self.n_channels;
        if eeg.rows() != n {
            return Err(DatasetError::ChannelMismatch {
                trial_id: trial_id.to_string(),
                expected: n,
                got: eeg.rows(),
            });
        }
        if eeg.cols() != kin.cols() {
            return Err(DatasetError::LengthMismatch {
                eeg: eeg.cols(),
                kin: kin.cols(),
            });
        }
        let len = eeg.cols();
        if len <= l + d {
            return Err(DatasetError::TrialTooShort {
                trial_id: trial_id.to_string(),
                len,
                needed: l + d,
            });
        }
        let count = len - l - d;
        let trial = self.trials.len();
        self.inputs.reserve(count * n * (l + 1));
        self.targets.reserve(count * 3);
        for t in 0..count {
            for i in 0..=l {
                let col = t + l - i;
                self.inputs.extend((0..n).map(|c| eeg.get(c, col)));
            }
            self.targets.extend((0..3).map(|a| kin.get(a, t + l + d)));
            self.provenance.push(Provenance { trial, t });
        }
        self.trials.push(TrialMeta {
            trial_id: trial_id.to_string(),
            scaler,
            n_samples: count,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn window(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.n_channels * (self.cfg.lags + 1)
    }

    pub fn input(&self, s: usize) -> &[f64] {
        let w = self.input_dim();
        &self.inputs[s * w..(s + 1) * w]
    }

    /// Step `i` (`k_i`, i.e. `i` samples before the newest frame) of sample `s`.
    pub fn step(&self, s: usize, i: usize) -> &[f64] {
        let n = self.n_channels;
        &self.input(s)[i * n..(i + 1) * n]
    }

    pub fn target(&self, s: usize) -> [f64; 3] {
        let t = &self.targets[s * 3..s * 3 + 3];
        [t[0], t[1], t[2]]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn trials(&self) -> &[TrialMeta] {
        &self.trials
    }

    /// Inputs of the selected samples, row-major `indices.len() x input_dim`.
    pub fn gather_inputs(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.input_dim());
        for &s in indices {
            out.extend_from_slice(self.input(s));
        }
        out
    }

    /// Targets of the selected samples, row-major `indices.len() x 3`.
    pub fn gather_targets(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * 3);
        for &s in indices {
            out.extend_from_slice(&self.targets[s * 3..s * 3 + 3]);
        }
        out
    }

    /// New dataset holding the listed trials (indices into `trials()`), in
    /// the given order.
    pub fn subset(&self, trial_indices: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(self.trials.len());
        let mut acc = 0;
        for t in &self.trials {
            starts.push(acc);
            acc += t.n_samples;
        }
        let w = self.input_dim();
        let mut out = Self::empty(self.n_channels, self.cfg);
        for (new_idx, &ti) in trial_indices.iter().enumerate() {
            let meta = &self.trials[ti];
            let (a, b) = (starts[ti], starts[ti] + meta.n_samples);
            out.inputs.extend_from_slice(&self.inputs[a * w..b * w]);
            out.targets.extend_from_slice(&self.targets[a * 3..b * 3]);
            out.provenance.extend(
                self.provenance[a..b]
                    .iter()
                    .map(|p| Provenance { trial: new_idx, t: p.t }),
            );
            out.trials.push(meta.clone());
        }
        out
    }

    /// Per-trial split into (train, val, test). Trial order is shuffled with
    /// `seed`; train and val receive `round(ratio * n_trials)` trials and
    /// test receives the rest.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<(Self, Self, Self), DatasetError> {
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(ratios));
        }
        let n = self.trials.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        let parts = [
            ("train", &order[..n_train]),
            ("val", &order[n_train..n_train + n_val]),
            ("test", &order[n_train + n_val..]),
        ];
        for (name, p) in parts {
            if p.is_empty() {
                return Err(DatasetError::EmptyPartition { partition: name });
            }
        }
        Ok((self.subset(parts[0].1), self.subset(parts[1].1), self.subset(parts[2].1)))
    }

    /// Sample indices grouped into batches covering every sample once. The
    /// last batch may be short. With `shuffle`, the order is a permutation
    /// fixed by `(seed, epoch)`.
    pub fn batch_iter(
        &self,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<Vec<usize>>, DatasetError> {
        batches(self.len(), batch_size, shuffle, seed, epoch)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let header = serde_json::to_vec(&Header {
            n_channels: self.n_channels,
            window: self.cfg,
            n_samples: self.len(),
            trials: self.trials.clone(),
        })
        .map_err(|e| DatasetError::Corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &self.provenance {
            w.write_all(&(p.trial as u64).to_le_bytes())?;
            w.write_all(&(p.t as u64).to_le_bytes())?;
        }
        for v in self.inputs.iter().chain(&self.targets) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Corrupt("bad magic".into()));
        }
        let hlen = read_u64(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let h: Header = serde_json::from_slice(&hbuf).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
        let mut provenance = Vec::with_capacity(h.n_samples);
        for _ in 0..h.n_samples {
            let trial = read_u64(&mut r)? as usize;
            let t = read_u64(&mut r)? as usize;
            if trial >= h.trials.len() {
                return Err(DatasetError::Corrupt("provenance trial out of range".into()));
            }
            provenance.push(Provenance { trial, t });
        }
        let w = h.n_channels * (h.window.lags + 1);
        let inputs = read_f64s(&mut r, h.n_samples * w)?;
        let targets = read_f64s(&mut r, h.n_samples * 3)?;
        if h.trials.iter().map(|t| t.n_samples).sum::<usize>() != h.n_samples {
            return Err(DatasetError::Corrupt("trial sample counts do not add up".into()));
        }
        Ok(Self {
            n_channels: h.n_channels,
            cfg: h.window,
            inputs,
            targets,
            provenance,
            trials: h.trials,
        })
    }

    /// Inspection export: `trial_id, t`, then the input columns, then
    /// `x, y, z`. Flattened layout names inputs `lag{i}_ch{n}`; sequence
    /// layout names them `step{j}_ch{n}` with step 0 the oldest frame.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.n_channels;
        let l = self.cfg.lags;
        let mut header = vec!["trial_id".to_string(), "t".to_string()];
        match self.cfg.layout {
            Layout::Flattened => {
                for i in 0..=l {
                    header.extend((1..=n).map(|c| format!("lag{i}_ch{c}")));
                }
            }
            Layout::Sequence => {
                for j in 0..=l {
                    header.extend((1..=n).map(|c| format!("step{j}_ch{c}")));
                }
            }
        }
        header.extend(["x", "y", "z"].map(String::from));
        out.write_record(&header)?;
        for s in 0..self.len() {
            let p = self.provenance[s];
            let mut rec = vec![self.trials[p.trial].trial_id.clone(), p.t.to_string()];
            match self.cfg.layout {
                Layout::Flattened => rec.extend(self.input(s).iter().map(|v| v.to_string())),
                Layout::Sequence => {
                    for j in 0..=l {
                        rec.extend(self.step(s, l - j).iter().map(|v| v.to_string()));
                    }
                }
            }
            rec.extend(self.target(s).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Batch index lists over `0..len`; see [`LaggedDataset::batch_iter`].
pub fn batches(
    len: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DatasetError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, DatasetError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
