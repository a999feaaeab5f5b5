//! Loss, metrics, the checkpoint rule, the training loop and evaluation.

mod loss;
mod metrics;
mod policy;
#[cfg(test)]
mod tests;

pub use loss::{loss_stat, loss_stat_3d, loss_stat_grad, variance_kink_distance, LossValue, EPS_VAR};
pub use metrics::{metrics_3d, mse, pearson, MetricsReport};
pub use policy::CheckpointPolicy;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batches, DatasetError, LaggedDataset};
use crate::grad::{AdamConfig, AdamState, GradError, Tensor};
use crate::model::{sequence_batch, Mode, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("target is constant{}", axis_suffix(*.axis))]
    DegenerateTarget { axis: Option<usize> },
    #[error("input has zero variance{}", axis_suffix(*.axis))]
    ZeroVariance { axis: Option<usize> },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty split")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn axis_suffix(axis: Option<usize>) -> String {
    axis.map(|a| format!(" on axis {}", ["x", "y", "z"][a]))
        .unwrap_or_default()
}

impl TrainError {
    pub(crate) fn on_axis(self, a: usize) -> Self {
        match self {
            TrainError::DegenerateTarget { .. } => TrainError::DegenerateTarget { axis: Some(a) },
            TrainError::ZeroVariance { .. } => TrainError::ZeroVariance { axis: Some(a) },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub rho_tolerance: f64,
    /// Start the head bias at the mean training target per axis.
    pub init_output_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 100,
            adam: AdamConfig::default(),
            rho_tolerance: 0.005,
            init_output_bias: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the batches used this epoch.
    pub train_loss: LossValue,
    pub batches: usize,
    /// Batches skipped because they had fewer than 2 samples or a constant
    /// target axis.
    pub skipped_batches: usize,
    pub val: MetricsReport,
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "epoch",
            "loss_total",
            "loss_term1",
            "loss_term2",
            "loss_term3",
            "batches",
            "skipped_batches",
            "val_rho_x",
            "val_rho_y",
            "val_rho_z",
            "val_rho_3d",
            "val_mse_x",
            "val_mse_y",
            "val_mse_z",
            "val_mse_3d",
            "checkpoint",
        ])?;
        for e in &self.epochs {
            let l = e.train_loss;
            let v = e.val;
            let nums = [
                l.total, l.term1, l.term2, l.term3, v.rho_x, v.rho_y, v.rho_z, v.rho_3d, v.mse_x,
                v.mse_y, v.mse_z, v.mse_3d,
            ];
            let mut rec = vec![e.epoch.to_string()];
            rec.extend(nums[..4].iter().map(f64::to_string));
            rec.push(e.batches.to_string());
            rec.push(e.skipped_batches.to_string());
            rec.extend(nums[4..].iter().map(f64::to_string));
            rec.push(e.checkpoint.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn best_val(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find(|e| e.checkpoint).map(|e| &e.val)
    }
}

pub struct TrainOutcome {
    /// Weights at the last checkpointed epoch.
    pub best: ModelParams,
    /// Weights after the final epoch.
    pub last: ModelParams,
    pub report: TrainReport,
}

/// Eval-mode predictions for every sample, row-major `[S, 3]`.
pub fn predict_dataset(params: &ModelParams, ds: &LaggedDataset) -> Result<Vec<f64>, TrainError> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(ds.len() * 3);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let p = params.predict(&sequence_batch(ds, chunk))?;
        out.extend_from_slice(p.data());
    }
    Ok(out)
}

/// Trains `params` on `train`, validating on `val` after every epoch.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    params: ModelParams,
    train: &LaggedDataset,
    val: &LaggedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let start = Instant::now();
    let mut params = params;
    if cfg.init_output_bias {
        let t = train.gather_targets(&(0..train.len()).collect::<Vec<_>>());
        let dim = 3;
        let mean: Vec<f64> = (0..dim)
            .map(|a| t.iter().skip(a).step_by(dim).sum::<f64>() / train.len() as f64)
            .collect();
        params.set_output_offset(&mean)?;
    }
    let mut best = params.clone();
    let mut adam = AdamState::new(cfg.adam, params.tensors());
    let mut policy = CheckpointPolicy::new(cfg.rho_tolerance);
    let val_targets = val.gather_targets(&(0..val.len()).collect::<Vec<_>>());
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        drop_rng.set_stream(1 << 32 | epoch as u64);
        let mut sum = LossValue::default();
        let (mut used, mut skipped) = (0, 0);
        for (bi, idx) in batches(train.len(), cfg.batch_size, true, cfg.seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 {
                skipped += 1;
                continue;
            }
            let targets = train.gather_targets(&idx);
            let x = sequence_batch(train, &idx);
            let mut f = params.forward(&x, Mode::Train, &mut drop_rng)?;
            let pred = f.tape.value(f.output).data().to_vec();
            let (value, grad, _) = match loss_stat_3d(&pred, &targets) {
                Ok(v) => v,
                Err(TrainError::DegenerateTarget { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            let g = Tensor::new(vec![idx.len(), 3], grad).expect("shape");
            let loss = f.tape.scalar_fn(&[f.output], value.total, vec![g])?;
            let grads = f.tape.backward(loss)?;
            let grads: Vec<Tensor> = f
                .params
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(params.tensors_mut(), &grads)?;
            params.update_running_stats(&f.batch_stats);
            sum = sum.add(&value);
            used += 1;
        }
        let val_pred = predict_dataset(&params, val)?;
        let metrics = metrics_3d(&val_pred, &val_targets)?;
        let checkpoint = policy.consider(metrics.rho_3d, metrics.mse_3d);
        if checkpoint {
            best = params.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum.scale(1.0 / used.max(1) as f64),
            batches: used,
            skipped_batches: skipped,
            val: metrics,
            checkpoint,
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainOutcome {
        best,
        last: params,
        report: TrainReport {
            epochs,
            wall_time_s: start.elapsed().as_secs_f64(),
            checkpoint_path: None,
        },
    })
}

/// Predictions and metrics for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Row-major `[S, 3]`, scaled space.
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn evaluate(params: &ModelParams, ds: &LaggedDataset) -> Result<Evaluation, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let predictions = predict_dataset(params, ds)?;
    let targets = ds.gather_targets(&(0..ds.len()).collect::<Vec<_>>());
    let metrics = metrics_3d(&predictions, &targets)?;
    Ok(Evaluation {
        metrics,
        predictions,
        targets,
    })
}

/// Prediction export: one row per sample with measured and predicted
/// positions, scaled and (when the trial's scaler is known) unscaled.
pub fn write_predictions_csv<W: Write>(
    w: W,
    ds: &LaggedDataset,
    predictions: &[f64],
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["sample".to_string(), "trial_id".into(), "t".into()];
    for kind in ["measured", "predicted"] {
        header.extend(["x", "y", "z"].map(|a| format!("{kind}_{a}")));
    }
    for kind in ["measured", "predicted"] {
        header.extend(["x", "y", "z"].map(|a| format!("{kind}_{a}_unscaled")));
    }
    out.write_record(&header)?;
    for s in 0..ds.len() {
        let p = ds.provenance()[s];
        let meta = &ds.trials()[p.trial];
        let measured = ds.target(s);
        let predicted = &predictions[s * 3..s * 3 + 3];
        let mut rec = vec![s.to_string(), meta.trial_id.clone(), p.t.to_string()];
        rec.extend(measured.iter().map(f64::to_string));
        rec.extend(predicted.iter().map(f64::to_string));
        for values in [&measured[..], predicted] {
            for a in 0..3 {
                rec.push(match &meta.scaler {
                    Some(sc) => (values[a] * (sc.ax_max[a] - sc.ax_min[a]) + sc.ax_min[a]).to_string(),
                    None => String::new(),
                });
            }
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
