use super::*;
use crate::dataset::{Layout, WindowConfig};
use crate::pipeline::{Conditioner, PreprocessConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_channels: 8,
        n_trials: 3,
        seed,
        ..SynthConfig::default()
    }
}

fn dataset(trials: &[TrialRecord]) -> LaggedDataset {
    let cond = Conditioner::new(&PreprocessConfig::default(), trials[0].sample_rate_hz).unwrap();
    let prepared: Vec<_> = trials
        .iter()
        .map(|t| cond.prepare(&cond.condition(t).unwrap()).unwrap())
        .collect();
    let window = WindowConfig {
        layout: Layout::Flattened,
        ..WindowConfig::default()
    };
    LaggedDataset::from_prepared(&prepared, &window).unwrap()
}

fn oracle(cfg: &SynthConfig) -> OracleResult {
    oracle_best_rho(&dataset(&gen_trials(cfg).unwrap()), [0.7, 0.15, 0.15], cfg.seed).unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_session(&small(5), a.path()).unwrap();
    gen_session(&small(5), b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

#[test]
fn different_seeds_differ() {
    assert_ne!(gen_trials(&small(1)).unwrap()[0].eeg, gen_trials(&small(2)).unwrap()[0].eeg);
}

#[test]
fn written_session_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_session(&small(9), dir.path()).unwrap();
    let loaded = crate::io::load_all_trials(&crate::io::load_manifest(dir.path()).unwrap()).unwrap();
    assert_eq!(m.trials.len(), 3);
    assert_eq!(loaded, gen_trials(&small(9)).unwrap());
}

#[test]
fn csv_values_print_at_quantum_precision() {
    let dir = tempfile::tempdir().unwrap();
    gen_session(&small(4), dir.path()).unwrap();
    for (file, decimals) in [("trial_001_eeg.csv", 4), ("trial_001_kin.csv", 6)] {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        for field in text.lines().skip(1).flat_map(|l| l.split(',').skip(1)) {
            let frac = field.split_once('.').map_or("", |(_, f)| f);
            assert!(frac.len() <= decimals, "{file}: {field}");
        }
    }
}

#[test]
fn trajectories_stay_in_unit_cube_and_timing_is_plausible() {
    let trials = gen_trials(&SynthConfig {
        n_channels: 2,
        informative_channels: 2,
        n_trials: 200,
        ..SynthConfig::default()
    })
    .unwrap();
    for t in &trials {
        assert!(t.kin.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(t.led_onset_sample, 500);
        assert!(t.movement_stop_sample <= t.eeg.cols());
        assert!(t.movement_stop_sample - t.movement_start_sample >= 500);
    }
    let rts: Vec<f64> = trials.iter().map(|t| t.response_time_s).collect();
    let mean = rts.iter().sum::<f64>() / rts.len() as f64;
    let sd = (rts.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rts.len() as f64).sqrt();
    assert!((mean - RT_MEAN_S).abs() < 0.015, "mean {mean}");
    assert!((sd - RT_SD_S).abs() < 0.015, "sd {sd}");
}

#[test]
fn eeg_power_is_in_band() {
    for t in gen_trials(&small(4)).unwrap() {
        for c in 0..t.eeg.rows() {
            let f = out_of_band_fraction(t.eeg.row(c), t.sample_rate_hz, 0.5, 12.0);
            assert!(f < 0.01, "channel {c}: {f}");
        }
    }
}

#[test]
fn out_of_band_fraction_detects_a_slow_drift() {
    let x: Vec<f64> = (0..5000).map(|k| (2.0 * PI * 0.1 * k as f64 / 500.0).sin()).collect();
    assert!(out_of_band_fraction(&x, 500.0, 0.5, 12.0) > 0.9);
    let y: Vec<f64> = (0..5000).map(|k| (2.0 * PI * 5.0 * k as f64 / 500.0).sin()).collect();
    assert!(out_of_band_fraction(&y, 500.0, 0.5, 12.0) < 1e-3);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig {
            informative_channels: 40,
            ..SynthConfig::default()
        },
        SynthConfig {
            n_trials: 0,
            ..SynthConfig::default()
        },
        SynthConfig {
            trial_len_s: 2.0,
            ..SynthConfig::default()
        },
        SynthConfig {
            noise_snr_db: f64::NAN,
            ..SynthConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(gen_trials(&cfg), Err(SynthError::InvalidConfig(_))));
    }
}

#[test]
fn keep_count_response_times() {
    let rts = response_times_for_keep_count(284, 294, 0.33, 0.06, 0.5, 1);
    assert_eq!(rts.len(), 294);
    assert_eq!(rts.iter().filter(|r| **r <= 0.5).count(), 284);
}

#[test]
fn noiseless_oracle_is_near_perfect() {
    let r = oracle(&SynthConfig {
        noise_snr_db: f64::INFINITY,
        ..SynthConfig::default()
    });
    assert!(r.metrics.rho_3d > 0.99, "{:?}", r.metrics);
    assert!(!r.ridge);
}

#[test]
fn no_informative_channels_gives_chance_oracle() {
    let r = oracle(&SynthConfig {
        informative_channels: 0,
        ..SynthConfig::default()
    });
    assert!(r.metrics.rho_3d.abs() < 0.15, "{:?}", r.metrics);
}

#[test]
fn shuffled_targets_give_chance_oracle() {
    let cfg = SynthConfig::default();
    let ds = dataset(&gen_trials(&cfg).unwrap());
    let (train, val, _) = ds.split([0.7, 0.15, 0.15], 0).unwrap();
    let r = oracle_fit(&train, &val, Some(11)).unwrap();
    assert!(r.metrics.rho_3d.abs() < 0.1, "{:?}", r.metrics);
}

#[test]
fn duplicated_features_fall_back_to_ridge() {
    let cfg = WindowConfig {
        lags: 0,
        transfer_delay: 0,
        layout: Layout::Flattened,
    };
    let row: Vec<f64> = (0..40).map(|k| (k as f64 * 0.3).sin()).collect();
    let eeg = Matrix::from_rows(&[row.clone(), row.clone()]).unwrap();
    let kin = Matrix::from_rows(&[row.clone(), row.iter().map(|v| -v).collect(), row.iter().map(|v| 2.0 * v).collect()]).unwrap();
    let ds = crate::dataset::build_windows(&eeg, &kin, &cfg).unwrap();
    let r = oracle_fit(&ds, &ds, None).unwrap();
    assert!(r.ridge);
    assert!(r.metrics.rho_3d > 0.999);
}

