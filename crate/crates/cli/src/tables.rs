//! Row types for the CSV files the CLI writes, shared by the writers and
//! the readers so every table round-trips.

use std::path::Path;

use neurokinect::train::MetricsReport;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRow {
    pub trial_id: String,
    pub fs_out_hz: f64,
    pub conditioned_samples: usize,
    pub led_onset: usize,
    pub movement_start: usize,
    pub movement_stop: usize,
    pub response_time_s: f64,
    pub prepared_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
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

impl MetricsRow {
    pub fn new(split: &str, m: &MetricsReport) -> Self {
        Self {
            split: split.into(),
            rho_x: m.rho_x,
            rho_y: m.rho_y,
            rho_z: m.rho_z,
            rho_3d: m.rho_3d,
            mse_x: m.mse_x,
            mse_y: m.mse_y,
            mse_z: m.mse_z,
            mse_3d: m.mse_3d,
            n_samples: m.n_samples,
        }
    }
}

/// One row of `report/summary.csv`: metrics over one trial's samples, or
/// over all of them when `trial_id` is `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub trial_id: String,
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

impl SummaryRow {
    pub fn new(trial_id: &str, m: &MetricsReport) -> Self {
        Self {
            trial_id: trial_id.into(),
            rho_x: m.rho_x,
            rho_y: m.rho_y,
            rho_z: m.rho_z,
            rho_3d: m.rho_3d,
            mse_x: m.mse_x,
            mse_y: m.mse_y,
            mse_z: m.mse_z,
            mse_3d: m.mse_3d,
            n_samples: m.n_samples,
        }
    }
}

/// One row of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PredictionRow {
    pub sample: usize,
    pub trial_id: String,
    pub t: usize,
    pub measured_x: f64,
    pub measured_y: f64,
    pub measured_z: f64,
    pub predicted_x: f64,
    pub predicted_y: f64,
    pub predicted_z: f64,
    pub measured_x_unscaled: Option<f64>,
    pub measured_y_unscaled: Option<f64>,
    pub measured_z_unscaled: Option<f64>,
    pub predicted_x_unscaled: Option<f64>,
    pub predicted_y_unscaled: Option<f64>,
    pub predicted_z_unscaled: Option<f64>,
}

impl PredictionRow {
    pub fn measured(&self) -> [f64; 3] {
        [self.measured_x, self.measured_y, self.measured_z]
    }

    pub fn predicted(&self) -> [f64; 3] {
        [self.predicted_x, self.predicted_y, self.predicted_z]
    }
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::csv(path, e))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
