//! Correlation-aware loss: `1 - rho`, a normalized squared error and a
//! variance-mismatch penalty, all over the current batch.

use super::TrainError;

/// Variance floor for predictions and lower bound for target variance.
pub const EPS_VAR: f64 = 1e-12;
const W_ERR: f64 = 0.01;
const W_VAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

impl LossValue {
    pub fn add(&self, o: &LossValue) -> LossValue {
        LossValue {
            total: self.total + o.total,
            term1: self.term1 + o.term1,
            term2: self.term2 + o.term2,
            term3: self.term3 + o.term3,
        }
    }

    pub fn scale(&self, k: f64) -> LossValue {
        LossValue {
            total: self.total * k,
            term1: self.term1 * k,
            term2: self.term2 * k,
            term3: self.term3 * k,
        }
    }
}

struct Moments {
    n: f64,
    dx: Vec<f64>,
    dy: Vec<f64>,
    sxx: f64,
    syy: f64,
    sxy: f64,
    sq_err: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Result<Moments, TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(TrainError::TooFewSamples { got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx = dx.iter().map(|v| v * v).sum();
    let syy = dy.iter().map(|v| v * v).sum::<f64>();
    if syy <= EPS_VAR {
        return Err(TrainError::DegenerateTarget { axis: None });
    }
    let sxy = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
    let sq_err = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(Moments {
        n,
        dx,
        dy,
        sxx,
        syy,
        sxy,
        sq_err,
    })
}

fn value(m: &Moments) -> LossValue {
    let rho = m.sxy / (m.sxx.max(EPS_VAR) * m.syy).sqrt();
    let term1 = 1.0 - rho;
    let term2 = W_ERR * m.sq_err / (m.n.sqrt() * m.syy.sqrt());
    let term3 = W_VAR * (m.sxx - m.syy).abs() / m.syy;
    LossValue {
        total: term1 + term2 + term3,
        term1,
        term2,
        term3,
    }
}

/// Loss of predictions `x` against targets `y`.
///
/// When the prediction variance falls below [`EPS_VAR`] the correlation
/// denominator uses the floor instead, so a constant prediction gives
/// `rho = 0` rather than a division by zero.
pub fn loss_stat(x: &[f64], y: &[f64]) -> Result<LossValue, TrainError> {
    Ok(value(&moments(x, y)?))
}

/// Loss and its gradient with respect to `x`. The absolute value in the
/// variance term uses sign(0) = 0.
pub fn loss_stat_grad(x: &[f64], y: &[f64]) -> Result<(LossValue, Vec<f64>), TrainError> {
    let m = moments(x, y)?;
    let v = value(&m);
    let floored = m.sxx <= EPS_VAR;
    let d = m.sxx.max(EPS_VAR);
    let rho = m.sxy / (d * m.syy).sqrt();
    let inv = 1.0 / (d * m.syy).sqrt();
    let k2 = 2.0 * W_ERR / (m.n.sqrt() * m.syy.sqrt());
    let diff = m.sxx - m.syy;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let k3 = 2.0 * W_VAR * sign / m.syy;
    let grad = (0..x.len())
        .map(|i| {
            let drho = m.dy[i] * inv - if floored { 0.0 } else { rho * m.dx[i] / m.sxx };
            -drho + k2 * (x[i] - y[i]) + k3 * m.dx[i]
        })
        .collect();
    Ok((v, grad))
}

/// Relative distance of the prediction variance from the target variance,
/// i.e. how far this batch is from the variance-term kink.
pub fn variance_kink_distance(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    let m = moments(x, y)?;
    Ok((m.sxx - m.syy).abs() / m.syy)
}

/// Per-axis loss over row-major `[B, 3]` predictions and targets, summed
/// across axes, with the gradient in the same layout.
pub fn loss_stat_3d(pred: &[f64], target: &[f64]) -> Result<(LossValue, Vec<f64>, f64), TrainError> {
    if pred.len() != target.len() || pred.len() % 3 != 0 {
        return Err(TrainError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    let b = pred.len() / 3;
    let mut total = LossValue::default();
    let mut grad = vec![0.0; pred.len()];
    let mut kink = f64::INFINITY;
    for a in 0..3 {
        let x: Vec<f64> = (0..b).map(|i| pred[i * 3 + a]).collect();
        let y: Vec<f64> = (0..b).map(|i| target[i * 3 + a]).collect();
        let (v, g) = loss_stat_grad(&x, &y).map_err(|e| e.on_axis(a))?;
        total = total.add(&v);
        for i in 0..b {
            grad[i * 3 + a] = g[i];
        }
        kink = kink.min(variance_kink_distance(&x, &y)?);
    }
    Ok((total, grad, kink))
}
