use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{Layout, WindowConfig};
use crate::grad::finite_diff_check;
use crate::matrix::Matrix;
use crate::model::{init_model, ConvBranch, ModelConfig};
use crate::preprocess::ScalerParams;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn pearson_examples() {
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-15));
    assert!(close(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, 1e-15));
    assert!(close(pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, 1e-12));
    assert!(matches!(
        pearson(&[1.0, 1.0], &[1.0, 2.0]),
        Err(TrainError::ZeroVariance { axis: None })
    ));
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!(close(mse(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).unwrap(), 5.0 / 3.0, 1e-15));
    assert!(matches!(mse(&[0.0], &[1.0, 1.0]), Err(TrainError::LengthMismatch { .. })));
}

#[test]
fn reference_metric_averages() {
    let p1 = MetricsReport::from_axes([0.95, 0.95, 0.87], [0.006, 0.006, 0.012], 1);
    assert!(close(p1.rho_3d, 0.923, 5e-4));
    assert!(close(p1.mse_3d, 0.008, 1e-12));
    let avg = MetricsReport::from_axes([0.92, 0.93, 0.83], [0.0, 0.0, 0.0], 1);
    assert!(close(avg.rho_3d, 0.89, 5e-3));
    // Full table: (rho x, y, z, rho_3d, mse x, y, z, mse_3d) per subject.
    let table = [
        [0.95, 0.95, 0.87, 0.923, 0.006, 0.006, 0.012, 0.008],
        [0.88, 0.88, 0.84, 0.867, 0.020, 0.020, 0.019, 0.020],
        [0.90, 0.91, 0.84, 0.883, 0.015, 0.017, 0.025, 0.019],
        [0.92, 0.93, 0.71, 0.853, 0.020, 0.021, 0.023, 0.021],
        [0.93, 0.93, 0.83, 0.900, 0.022, 0.017, 0.015, 0.018],
        [0.92, 0.92, 0.83, 0.890, 0.017, 0.012, 0.016, 0.015],
        [0.95, 0.96, 0.90, 0.937, 0.019, 0.018, 0.014, 0.017],
        [0.90, 0.93, 0.79, 0.873, 0.013, 0.011, 0.018, 0.014],
    ];
    // Axis correlations are printed to two decimals, so a printed 3-D value
    // can sit up to 0.005 from the mean of the printed axes (P8 does).
    for row in &table {
        let m = MetricsReport::from_axes([row[0], row[1], row[2]], [row[4], row[5], row[6]], 1);
        assert!(close(m.rho_3d, row[3], 5e-3), "{row:?}");
        assert!(close(m.mse_3d, row[7], 5e-4 + 1e-12), "{row:?}");
    }
    let col_mean = |c: usize| table.iter().map(|r| r[c]).sum::<f64>() / table.len() as f64;
    assert!(close(col_mean(0), 0.91875, 1e-12));
    assert!(close(col_mean(1), 0.92625, 1e-12));
    assert!(close(col_mean(2), 0.82625, 1e-12));
    assert!(close(col_mean(4), 0.0165, 1e-12));
    assert!(close(col_mean(5), 0.01525, 1e-12));
    assert!(close(col_mean(6), 0.01775, 1e-12));
}

#[test]
fn metrics_equal_axiswise_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
    let tgt: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
    let m = metrics_3d(&pred, &tgt).unwrap();
    for a in 0..3 {
        let x: Vec<f64> = (0..20).map(|i| pred[i * 3 + a]).collect();
        let y: Vec<f64> = (0..20).map(|i| tgt[i * 3 + a]).collect();
        assert_eq!(m.rho()[a], pearson(&x, &y).unwrap());
        assert_eq!(m.mse()[a], mse(&x, &y).unwrap());
    }
    assert_eq!(m.rho_3d, (m.rho_x + m.rho_y + m.rho_z) / 3.0);
    assert_eq!(m.mse_3d, (m.mse_x + m.mse_y + m.mse_z) / 3.0);
    assert_eq!(m.n_samples, 20);
    let perfect = metrics_3d(&tgt, &tgt).unwrap();
    assert_eq!((perfect.rho_3d, perfect.mse_3d), (1.0, 0.0));
    let mut constant = pred.clone();
    for i in 0..20 {
        constant[i * 3 + 1] = 0.5;
    }
    assert!(matches!(
        metrics_3d(&constant, &tgt),
        Err(TrainError::ZeroVariance { axis: Some(1) })
    ));
}

#[test]
fn loss_examples() {
    let same = loss_stat(&[0.0, 1.0, 3.0], &[0.0, 1.0, 3.0]).unwrap();
    assert!(same.total.abs() < 1e-15);
    let v = loss_stat(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).unwrap();
    // Direct evaluation: sum sq err 5, Syy 8, Sxx 2, n 3.
    assert!(close(v.term1, 0.0, 1e-15));
    assert!(close(v.term2, 0.01 * 5.0 / (3f64.sqrt() * 8f64.sqrt()), 1e-15));
    assert!(close(v.term2, 0.010206, 1e-6));
    assert!(close(v.term3, 0.075, 1e-15));
    assert!(close(v.total, 0.085206, 1e-6));
    assert_eq!(v.total, v.term1 + v.term2 + v.term3);
    assert!(matches!(
        loss_stat(&[0.0, 1.0], &[2.0, 2.0]),
        Err(TrainError::DegenerateTarget { .. })
    ));
}

#[test]
fn amplitude_mismatch_is_penalized() {
    let y = [0.1, 0.4, 0.3, 0.9];
    let x: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    let l = loss_stat(&x, &y).unwrap();
    assert!(l.term1.abs() < 1e-15);
    assert!(l.term2 > 0.0);
    assert!(close(l.term3, 0.3, 1e-15));
}

#[test]
fn constant_prediction_keeps_loss_finite() {
    let l = loss_stat(&[0.5, 0.5, 0.5], &[0.0, 1.0, 2.0]).unwrap();
    assert!(close(l.term1, 1.0, 1e-15));
    let (_, g) = loss_stat_grad(&[0.5, 0.5, 0.5], &[0.0, 1.0, 2.0]).unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn two_point_gradient_by_hand() {
    // x = [0, 1], y = [0, 2]: dx = ±1/2, dy = ±1, Sxx = 1/2, Syy = 2, rho = 1.
    // d term1 = -(dy/sqrt(Sxx Syy) - rho dx/Sxx) = -(±1 - ±1) = 0.
    // d term2 = 0.02 (x - y) / (sqrt2 sqrt2) = 0.01 (x - y) = [0, -0.01].
    // d term3 = 0.2 sign(Sxx - Syy) dx / Syy = -0.1 dx = [0.05, -0.05].
    let (_, g) = loss_stat_grad(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
    assert!(close(g[0], 0.05, 1e-15));
    assert!(close(g[1], -0.06, 1e-15));
}

fn fd_loss(x: &[f64], y: &[f64]) -> f64 {
    let (_, g) = loss_stat_grad(x, y).unwrap();
    let xs = [Tensor::from_slice(&[x.len()], x).unwrap()];
    let gs = [Tensor::from_slice(&[x.len()], &g).unwrap()];
    finite_diff_check(|p| loss_stat(p[0].data(), y).unwrap().total, &xs, &gs, 1e-5)
}

#[test]
fn loss_gradient_at_identity() {
    let y = [0.2, 0.9, 0.4, 0.7, 0.1];
    let (_, g) = loss_stat_grad(&y, &y).unwrap();
    // term2 gradient vanishes and term3 sits on its kink (sign 0), so the
    // whole gradient is the correlation term's, which is zero at rho = 1.
    assert!(g.iter().all(|v| v.abs() < 1e-12));
    // Just off the identity the total gradient matches finite differences.
    let x: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.01 * i as f64).collect();
    assert!(fd_loss(&x, &y) < 1e-6);
}

#[test]
fn loss_gradient_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut done = 0;
    while done < 100 {
        let x: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        if variance_kink_distance(&x, &y).unwrap() < 1e-3 {
            continue;
        }
        let err = fd_loss(&x, &y);
        assert!(err < 1e-6, "relative error {err}");
        done += 1;
    }
}

proptest! {
    #[test]
    fn pearson_affine_invariance(
        x in prop::collection::vec(-10.0f64..10.0, 5..30),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
        if let Ok(r) = pearson(&x, &y) {
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn small_loss_means_identity(
        y in prop::collection::vec(0.0f64..1.0, 3..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        scale in 0.0f64..1e-3,
    ) {
        let x: Vec<f64> = y.iter().zip(&noise).map(|(v, n)| v + scale * n).collect();
        if let Ok(l) = loss_stat(&x, &y) {
            prop_assert!(l.term2 >= 0.0 && l.term3 >= 0.0);
            prop_assert!((l.total - (l.term1 + l.term2 + l.term3)).abs() < 1e-12);
            if l.total < 1e-12 {
                let worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(worst < 1e-6);
            }
        }
    }

    #[test]
    fn best_rho_never_decreases(seq in prop::collection::vec((0.0f64..1.0, 0.0f64..0.1), 1..40)) {
        let mut p = CheckpointPolicy::default();
        let mut last = f64::NEG_INFINITY;
        for (r, m) in seq {
            p.consider(r, m);
            prop_assert!(p.best_rho_3d >= last);
            last = p.best_rho_3d;
        }
    }
}

#[test]
fn checkpoint_sequence() {
    let mut p = CheckpointPolicy::new(0.005);
    assert!(p.consider(0.5, 0.1));
    assert!(!p.consider(0.49, 0.05));
    assert!(p.consider(0.498, 0.05));
    assert_eq!(p.best_rho_3d, 0.5);
    assert_eq!(p.best_mse_3d, 0.05);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_channels: 2,
        window_steps: 3,
        conv_branches: vec![ConvBranch {
            width: 4,
            activation: crate::grad::Activation::Relu,
        }],
        lstm_hidden: 4,
        dense_widths: vec![4],
        seed: 9,
        ..ModelConfig::default()
    }
}

#[test]
fn model_loss_gradient_matches_finite_differences() {
    let cfg = tiny_model();
    let base = init_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let x = Tensor::new(vec![8, 3, 2], (0..48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
        let eval = |params: &[Tensor]| -> (f64, Vec<Tensor>, f64) {
            let mut p = base.clone();
            p.tensors_mut().clone_from_slice(params);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(2);
            let mut f = p.forward(&x, Mode::Train, &mut drop_rng).unwrap();
            let pred = f.tape.value(f.output).data().to_vec();
            let (v, g, kink) = loss_stat_3d(&pred, &y).unwrap();
            f.tape.note_kink(kink);
            let gt = Tensor::new(vec![8, 3], g).unwrap();
            let loss = f.tape.scalar_fn(&[f.output], v.total, vec![gt]).unwrap();
            let grads = f.tape.backward(loss).unwrap();
            let gs = f
                .params
                .iter()
                .zip(params)
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            (v.total, gs, f.tape.kink_margin())
        };
        let (_, analytic, margin) = eval(base.tensors());
        if margin < 1e-3 {
            continue;
        }
        let err = finite_diff_check(|p| eval(p).0, base.tensors(), &analytic, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
        return;
    }
    panic!("no batch away from kinks");
}

fn toy_dataset(n_trials: usize, seed: u64) -> LaggedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = LaggedDataset::empty(
        2,
        WindowConfig {
            lags: 2,
            transfer_delay: 1,
            layout: Layout::Sequence,
        },
    );
    for k in 0..n_trials {
        let t = 40;
        let phase: f64 = rng.random_range(0.0..6.0);
        let kin: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                (0..t)
                    .map(|i| 0.5 + 0.4 * ((i as f64) * 0.2 + phase + a as f64).sin())
                    .collect()
            })
            .collect();
        let eeg: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                (0..t)
                    .map(|i| {
                        let j = (i + 2).min(t - 1);
                        kin[c][j] + rng.random_range(-0.1..0.1)
                    })
                    .collect()
            })
            .collect();
        ds.push_trial(
            &format!("t{k}"),
            &Matrix::from_rows(&eeg).unwrap(),
            &Matrix::from_rows(&kin).unwrap(),
            Some(ScalerParams {
                ax_min: [0.0, -1.0, 2.0],
                ax_max: [1.0, 1.0, 4.0],
            }),
        )
        .unwrap();
    }
    ds
}

#[test]
fn training_is_deterministic_and_records_epochs() {
    let ds = toy_dataset(6, 1);
    let (tr, va, _) = ds.split([0.5, 0.25, 0.25], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let p = init_model(&tiny_model()).unwrap();
        train(p, &tr, &va, &cfg, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.best, b.best);
    let numbers: Vec<usize> = a.report.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(numbers, vec![1, 2, 3]);
    assert!(a.report.epochs[0].checkpoint);
    let mut buf = Vec::new();
    a.report.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
}

#[test]
fn evaluation_matches_recomputation_from_csv() {
    let ds = toy_dataset(3, 2);
    let p = init_model(&tiny_model()).unwrap();
    let ev = evaluate(&p, &ds).unwrap();
    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, &ds, &ev.predictions).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (mut pred, mut tgt) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for a in ["x", "y", "z"] {
            pred.push(rec[col(&format!("predicted_{a}"))].parse::<f64>().unwrap());
            tgt.push(rec[col(&format!("measured_{a}"))].parse::<f64>().unwrap());
        }
        let scaled: f64 = rec[col("measured_y")].parse().unwrap();
        let unscaled: f64 = rec[col("measured_y_unscaled")].parse().unwrap();
        assert!(close(unscaled, scaled * 2.0 - 1.0, 1e-12));
    }
    let again = metrics_3d(&pred, &tgt).unwrap();
    for (a, b) in again.rho().iter().zip(ev.metrics.rho()) {
        assert!(close(*a, b, 1e-12));
    }
    for (a, b) in again.mse().iter().zip(ev.metrics.mse()) {
        assert!(close(*a, b, 1e-12));
    }
}
