use serde::{Deserialize, Serialize};

/// Decides after each epoch whether to keep the current weights: a higher
/// validation correlation always wins; a correlation within `rho_tolerance`
/// of the best wins when its MSE is lower than the last kept one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub best_rho_3d: f64,
    pub best_mse_3d: f64,
    pub rho_tolerance: f64,
}

impl CheckpointPolicy {
    pub fn new(rho_tolerance: f64) -> Self {
        Self {
            best_rho_3d: f64::NEG_INFINITY,
            best_mse_3d: f64::INFINITY,
            rho_tolerance,
        }
    }

    /// Returns whether to save; updates the bests when it does.
    pub fn consider(&mut self, rho_3d: f64, mse_3d: f64) -> bool {
        let save = rho_3d > self.best_rho_3d
            || (rho_3d >= self.best_rho_3d - self.rho_tolerance && mse_3d < self.best_mse_3d);
        if save {
            self.best_rho_3d = self.best_rho_3d.max(rho_3d);
            self.best_mse_3d = mse_3d;
        }
        save
    }
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        Self::new(0.005)
    }
}
