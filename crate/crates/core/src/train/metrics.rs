use serde::{Deserialize, Serialize};

use super::TrainError;

/// Pearson correlation, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(TrainError::TooFewSamples { got: x.len() });
    }
    let constant = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo == hi
    };
    if constant(x) || constant(y) {
        return Err(TrainError::ZeroVariance { axis: None });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.is_empty() {
        return Err(TrainError::TooFewSamples { got: 0 });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rho_x: f64,
    pub rho_y: f64,
    pub rho_z: f64,
    pub rho_3d: f64,
    pub mse_x: f64,
    pub mse_y: f64,
    pub mse_z: f64,
    pub mse_3d: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Builds a report from per-axis values; the 3-D figures are plain means.
    pub fn from_axes(rho: [f64; 3], mse: [f64; 3], n_samples: usize) -> Self {
        Self {
            rho_x: rho[0],
            rho_y: rho[1],
            rho_z: rho[2],
            rho_3d: (rho[0] + rho[1] + rho[2]) / 3.0,
            mse_x: mse[0],
            mse_y: mse[1],
            mse_z: mse[2],
            mse_3d: (mse[0] + mse[1] + mse[2]) / 3.0,
            n_samples,
        }
    }

    pub fn rho(&self) -> [f64; 3] {
        [self.rho_x, self.rho_y, self.rho_z]
    }

    pub fn mse(&self) -> [f64; 3] {
        [self.mse_x, self.mse_y, self.mse_z]
    }
}

/// Metrics over row-major `[S, 3]` predictions and targets.
pub fn metrics_3d(pred: &[f64], target: &[f64]) -> Result<MetricsReport, TrainError> {
    if pred.len() != target.len() || pred.len() % 3 != 0 {
        return Err(TrainError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    let s = pred.len() / 3;
    let mut rho = [0.0; 3];
    let mut err = [0.0; 3];
    for a in 0..3 {
        let x: Vec<f64> = (0..s).map(|i| pred[i * 3 + a]).collect();
        let y: Vec<f64> = (0..s).map(|i| target[i * 3 + a]).collect();
        rho[a] = pearson(&x, &y).map_err(|e| e.on_axis(a))?;
        err[a] = mse(&x, &y).map_err(|e| e.on_axis(a))?;
    }
    Ok(MetricsReport::from_axes(rho, err, s))
}
