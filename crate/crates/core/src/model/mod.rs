//! The decoder: per-time-step (kernel-1) convolution branches with one
//! activation each and a softmax over each branch's features, a
//! bidirectional LSTM whose concatenated final states go through a softmax,
//! a dense stack (affine, batch norm, activation, dropout) and a linear or
//! sigmoid head of width 3.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LaggedDataset;
use crate::grad::{Activation, GradError, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] GradError),
    #[error("batch shape {got:?} does not match the model (expected [B, {steps}, {channels}])")]
    BatchShape {
        got: Vec<usize>,
        steps: usize,
        channels: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBranch {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub window_steps: usize,
    pub conv_branches: Vec<ConvBranch>,
    pub lstm_hidden: usize,
    pub dense_widths: Vec<usize>,
    pub dense_activation: Activation,
    pub dropout_rate: f64,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 32,
            window_steps: 11,
            conv_branches: [
                Activation::Relu,
                Activation::Elu,
                Activation::Selu,
                Activation::LeakyRelu,
            ]
            .into_iter()
            .map(|activation| ConvBranch {
                width: 32,
                activation,
            })
            .collect(),
            lstm_hidden: 64,
            dense_widths: vec![128, 64],
            dense_activation: Activation::Relu,
            dropout_rate: 0.2,
            output_dim: 3,
            output_activation: OutputActivation::Linear,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_channels == 0 {
            return bad("n_channels must be >= 1");
        }
        if self.window_steps == 0 {
            return bad("window_steps must be >= 1");
        }
        if self.conv_branches.is_empty() {
            return bad("at least one convolution branch is required");
        }
        if self.conv_branches.iter().any(|b| b.width == 0) {
            return bad("convolution branch widths must be >= 1");
        }
        if self.lstm_hidden == 0 {
            return bad("lstm_hidden must be >= 1");
        }
        if self.dense_widths.contains(&0) {
            return bad("dense widths must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.output_dim != 3 {
            return bad("output_dim must be 3");
        }
        Ok(())
    }

    pub fn conv_features(&self) -> usize {
        self.conv_branches.iter().map(|b| b.width).sum()
    }

    /// Every trainable tensor in storage order with its shape and init rule.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let n = self.n_channels;
        for (b, br) in self.conv_branches.iter().enumerate() {
            out.push((format!("conv{b}.weight"), vec![n, br.width], Init::FanIn(n)));
            out.push((format!("conv{b}.bias"), vec![br.width], Init::Zero));
        }
        let (f, h) = (self.conv_features(), self.lstm_hidden);
        for dir in ["lstm_fwd", "lstm_bwd"] {
            out.push((format!("{dir}.w_ih"), vec![f, 4 * h], Init::FanIn(f)));
            out.push((format!("{dir}.w_hh"), vec![h, 4 * h], Init::FanIn(h)));
            out.push((format!("{dir}.bias"), vec![4 * h], Init::Zero));
        }
        let mut width = 2 * h;
        for (j, &w) in self.dense_widths.iter().enumerate() {
            out.push((format!("dense{j}.weight"), vec![width, w], Init::FanIn(width)));
            out.push((format!("bn{j}.gamma"), vec![w], Init::One));
            out.push((format!("bn{j}.beta"), vec![w], Init::Zero));
            width = w;
        }
        out.push(("head.weight".into(), vec![width, self.output_dim], Init::FanIn(width)));
        out.push(("head.bias".into(), vec![self.output_dim], Init::Zero));
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zero,
    One,
}

/// Number of trainable values for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    Ok(cfg
        .layout()
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum())
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    running: Vec<RunningStats>,
}

/// Weights are uniform on ±sqrt(3 / fan_in) (unit-variance preserving for
/// unit-variance inputs), drawn in storage order from a ChaCha8 stream
/// seeded with `cfg.seed`. Biases and batch-norm shifts start at zero, scales
/// at one, running means at zero and running variances at one.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in cfg.layout() {
        let n = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let a = (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data).expect("shape"));
    }
    let running = cfg
        .dense_widths
        .iter()
        .map(|&w| RunningStats {
            mean: vec![0.0; w],
            var: vec![1.0; w],
        })
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        names,
        tensors,
        running,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Indices of each layer's tensors in [`ModelParams::tensors`].
struct Slots {
    conv: Vec<(usize, usize)>,
    lstm: [(usize, usize, usize); 2],
    dense: Vec<(usize, usize, usize)>,
    head: (usize, usize),
}

impl Slots {
    fn new(cfg: &ModelConfig) -> Self {
        let nb = cfg.conv_branches.len();
        let conv = (0..nb).map(|b| (2 * b, 2 * b + 1)).collect();
        let l0 = 2 * nb;
        let lstm = [(l0, l0 + 1, l0 + 2), (l0 + 3, l0 + 4, l0 + 5)];
        let d0 = l0 + 6;
        let dense = (0..cfg.dense_widths.len())
            .map(|j| (d0 + 3 * j, d0 + 3 * j + 1, d0 + 3 * j + 2))
            .collect();
        let h0 = d0 + 3 * cfg.dense_widths.len();
        Self {
            conv,
            lstm,
            dense,
            head: (h0, h0 + 1),
        }
    }
}

/// Result of a forward pass: the tape, the variables holding each parameter
/// tensor, the output `[B, 3]` and, in train mode, the batch statistics of
/// every batch-norm layer.
pub struct Forward {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub output: Var,
    pub batch_stats: Vec<RunningStats>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Sets the head bias so that, with zero hidden features, the output
    /// equals `values` (through the logit for a sigmoid head).
    pub fn set_output_offset(&mut self, values: &[f64]) -> Result<(), ModelError> {
        let i = self.names.iter().position(|n| n == "head.bias").expect("head.bias");
        if values.len() != self.tensors[i].len() {
            return Err(ModelError::InvalidConfig(format!(
                "output offset has {} values, head has {}",
                values.len(),
                self.tensors[i].len()
            )));
        }
        let sigmoid = self.config.output_activation == OutputActivation::Sigmoid;
        for (b, &v) in self.tensors[i].data_mut().iter_mut().zip(values) {
            *b = if sigmoid {
                let p = v.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            } else {
                v
            };
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(&r.var).all(|v| v.is_finite()))
    }

    /// Exponential moving average update of running statistics with the
    /// batch statistics of a train-mode forward pass.
    pub fn update_running_stats(&mut self, batch: &[RunningStats]) {
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (m, bm) in r.mean.iter_mut().zip(&b.mean) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * bm;
            }
            for (v, bv) in r.var.iter_mut().zip(&b.var) {
                *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * bv;
            }
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, ModelError> {
        let s = batch.shape();
        let cfg = &self.config;
        if s.len() != 3 || s[1] != cfg.window_steps || s[2] != cfg.n_channels || s[0] == 0 {
            return Err(ModelError::BatchShape {
                got: s.to_vec(),
                steps: cfg.window_steps,
                channels: cfg.n_channels,
            });
        }
        Ok(s[0])
    }

    fn leaves(&self, tape: &mut Tape, mode: Mode) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| match mode {
                Mode::Train => tape.param(t.clone()),
                Mode::Eval => tape.constant(t.clone()),
            })
            .collect()
    }

    /// Full forward pass over `batch: [B, steps, N]`, steps in chronological
    /// order. Dropout masks in train mode come from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let b = self.check_batch(batch)?;
        let cfg = &self.config;
        let slots = Slots::new(cfg);
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, mode);
        let x = tape.constant(batch.clone());

        let conv = conv_stage(&mut tape, cfg, &slots, &p, x, b)?;
        let states = bilstm(&mut tape, cfg, &slots, &p, conv, b)?;
        let mut h = tape.softmax(states, 1)?;

        let mut batch_stats = Vec::new();
        for (j, &(w, gamma, beta)) in slots.dense.iter().enumerate() {
            let z = tape.matmul(h, p[w])?;
            let z = match mode {
                Mode::Train => {
                    let (z, mean, var) = tape.batch_norm_train(z, p[gamma], p[beta], BN_EPS)?;
                    batch_stats.push(RunningStats { mean, var });
                    z
                }
                Mode::Eval => {
                    let r = &self.running[j];
                    tape.batch_norm_eval(z, p[gamma], p[beta], &r.mean, &r.var, BN_EPS)?
                }
            };
            let z = tape.activation(z, cfg.dense_activation);
            h = match mode {
                Mode::Train => tape.dropout(z, cfg.dropout_rate, rng),
                Mode::Eval => z,
            };
        }
        let out = tape.matmul(h, p[slots.head.0])?;
        let out = tape.add(out, p[slots.head.1])?;
        let output = match cfg.output_activation {
            OutputActivation::Linear => out,
            OutputActivation::Sigmoid => tape.activation(out, Activation::Sigmoid),
        };
        Ok(Forward {
            tape,
            params: p,
            output,
            batch_stats,
        })
    }

    /// Eval-mode predictions `[B, 3]`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(batch, Mode::Eval, &mut rng)?;
        Ok(f.tape.value(f.output).clone())
    }

    /// Output of the convolution stage, `[B, steps, F]`.
    pub fn conv_features(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let b = self.check_batch(batch)?;
        let slots = Slots::new(&self.config);
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, Mode::Eval);
        let x = tape.constant(batch.clone());
        let v = conv_stage(&mut tape, &self.config, &slots, &p, x, b)?;
        Ok(tape.value(v).clone())
    }

    /// Concatenated final hidden states `[B, 2H]` (forward then backward) of
    /// the recurrent layer for a feature sequence `[B, steps, F]`, before the
    /// softmax.
    pub fn bilstm_final_states(&self, seq: &Tensor) -> Result<Tensor, ModelError> {
        let s = seq.shape();
        let cfg = &self.config;
        if s.len() != 3 || s[2] != cfg.conv_features() || s[0] == 0 || s[1] == 0 {
            return Err(ModelError::BatchShape {
                got: s.to_vec(),
                steps: cfg.window_steps,
                channels: cfg.conv_features(),
            });
        }
        let slots = Slots::new(cfg);
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, Mode::Eval);
        let x = tape.constant(seq.clone());
        let v = bilstm(&mut tape, cfg, &slots, &p, x, s[0])?;
        Ok(tape.value(v).clone())
    }
}

fn conv_stage(
    tape: &mut Tape,
    cfg: &ModelConfig,
    slots: &Slots,
    p: &[Var],
    x: Var,
    b: usize,
) -> Result<Var, ModelError> {
    let steps = cfg.window_steps;
    let flat = tape.reshape(x, &[b * steps, cfg.n_channels])?;
    let mut branches = Vec::with_capacity(cfg.conv_branches.len());
    for (br, &(w, bias)) in cfg.conv_branches.iter().zip(&slots.conv) {
        let z = tape.matmul(flat, p[w])?;
        let z = tape.add(z, p[bias])?;
        let z = tape.activation(z, br.activation);
        branches.push(tape.softmax(z, 1)?);
    }
    let cat = tape.concat(&branches, 1)?;
    Ok(tape.reshape(cat, &[b, steps, cfg.conv_features()])?)
}

fn bilstm(
    tape: &mut Tape,
    cfg: &ModelConfig,
    slots: &Slots,
    p: &[Var],
    seq: Var,
    b: usize,
) -> Result<Var, ModelError> {
    let steps = tape.shape(seq)[1];
    let f = tape.shape(seq)[2];
    let mut frames = Vec::with_capacity(steps);
    for t in 0..steps {
        let s = tape.slice(seq, 1, t..t + 1)?;
        frames.push(tape.reshape(s, &[b, f])?);
    }
    let fwd = lstm_final(tape, cfg.lstm_hidden, slots.lstm[0], p, frames.iter().copied())?;
    let bwd = lstm_final(tape, cfg.lstm_hidden, slots.lstm[1], p, frames.iter().rev().copied())?;
    Ok(tape.concat(&[fwd, bwd], 1)?)
}

/// Runs one LSTM direction from zero state and returns the last hidden
/// state. Gate order in the packed weights is input, forget, cell, output.
fn lstm_final(
    tape: &mut Tape,
    hidden: usize,
    (w_ih, w_hh, bias): (usize, usize, usize),
    p: &[Var],
    frames: impl Iterator<Item = Var>,
) -> Result<Var, ModelError> {
    let h4 = 4 * hidden;
    let mut state: Option<(Var, Var)> = None;
    for x in frames {
        let mut z = tape.matmul(x, p[w_ih])?;
        if let Some((h, _)) = state {
            let r = tape.matmul(h, p[w_hh])?;
            z = tape.add(z, r)?;
        }
        let z = tape.add(z, p[bias])?;
        let gate = |tape: &mut Tape, k: usize, act: Activation| -> Result<Var, GradError> {
            let s = tape.slice(z, 1, k * hidden..(k + 1) * hidden)?;
            Ok(tape.activation(s, act))
        };
        let i = gate(tape, 0, Activation::Sigmoid)?;
        let fg = gate(tape, 1, Activation::Sigmoid)?;
        let g = gate(tape, 2, Activation::Tanh)?;
        let o = gate(tape, 3, Activation::Sigmoid)?;
        debug_assert_eq!(tape.shape(z)[1], h4);
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let kept = tape.mul(fg, c_prev)?;
            c = tape.add(kept, c)?;
        }
        let tc = tape.activation(c, Activation::Tanh);
        let h = tape.mul(o, tc)?;
        state = Some((h, c));
    }
    state
        .map(|(h, _)| h)
        .ok_or_else(|| ModelError::InvalidConfig("empty sequence".into()))
}

/// Batch tensor `[B, l + 1, N]` for the given samples, steps in
/// chronological order (oldest frame first, newest last).
pub fn sequence_batch(ds: &LaggedDataset, indices: &[usize]) -> Tensor {
    let n = ds.n_channels();
    let steps = ds.window().steps();
    let mut data = Vec::with_capacity(indices.len() * steps * n);
    for &s in indices {
        for j in 0..steps {
            data.extend_from_slice(ds.step(s, steps - 1 - j));
        }
    }
    Tensor::new(vec![indices.len(), steps, n], data).expect("shape")
}

#[cfg(test)]
mod tests;
