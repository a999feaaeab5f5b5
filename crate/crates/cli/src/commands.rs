use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use neurokinect::config::RunConfig;
use neurokinect::dataset::LaggedDataset;
use neurokinect::erp::{averages, subject_epochs};
use neurokinect::io::{
    channel_names, load_all_trials, load_manifest, write_signal_csv, SessionManifest, TrialRecord,
    MANIFEST_FILE,
};
use neurokinect::model::{init_model, read_checkpoint, write_checkpoint, ModelParams};
use neurokinect::pipeline::process_session;
use neurokinect::qc::QcReport;
use neurokinect::synth::{gen_session, SynthConfig};
use neurokinect::train::{evaluate, metrics_3d, train, write_predictions_csv, MetricsReport};

use crate::error::CliError;
use crate::run::RunDir;
use crate::svg::{Chart, Series};
use crate::tables::{read_rows, write_rows, MetricsRow, PredictionRow, PreprocessRow, SummaryRow};
use crate::{Cli, Command};

pub const DEFAULT_RUN_DIR: &str = "neurokinect-run";
pub const SESSION_DIR: &str = "session";
pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const QC_REPORT_FILE: &str = "qc_report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

const AXES: [&str; 3] = ["x", "y", "z"];

/// Config file, then NEUROKINECT_SEED, then flags.
fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::user("ConfigMissing", format!("{}: {e}", path.display()))
            })?;
            match RunConfig::from_toml(&text) {
                Ok(c) => c,
                // `synth` also accepts a bare synthetic-session config.
                Err(e) => match (&cli.command, toml::from_str::<SynthConfig>(&text)) {
                    (Command::Synth, Ok(s)) => {
                        let mut c = RunConfig::default();
                        c.data.synth = Some(s);
                        c
                    }
                    _ => return Err(CliError::user("ConfigInvalid", format!("{}: {e}", path.display()))),
                },
            }
        }
    };
    cfg.apply_env()?;
    let common = &cli.common;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.session = Some(d.clone());
        cfg.data.synth = None;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    match &cli.command {
        Command::Qc { threshold: Some(t) } => cfg.qc.threshold = *t,
        Command::Dataset { lags, delay, .. } => {
            if let Some(l) = lags {
                cfg.window.lags = *l;
            }
            if let Some(d) = delay {
                cfg.window.transfer_delay = *d;
            }
        }
        Command::Train {
            epochs,
            batch_size,
            lr,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(cli: &Cli, run_root: &mut Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let root = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    *run_root = Some(root.clone());
    let run = RunDir::open(&root, cli.command.name(), cli.common.force)?;
    match &cli.command {
        Command::Synth => synth(&cfg, run),
        Command::Preprocess => preprocess(&cfg, run),
        Command::Qc { .. } => qc(&cfg, run),
        Command::Dataset { csv, .. } => dataset(&cfg, run, *csv),
        Command::Train { .. } => train_cmd(&cfg, run),
        Command::Eval => eval(&cfg, run),
        Command::Erp { subjects } => erp(&cfg, run, subjects),
        Command::Report => report(&cfg, run),
    }
}

fn synth(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    let scfg = cfg.data.synth.clone().unwrap_or_default();
    scfg.validate()?;
    let out = run.claim(&[SESSION_DIR])?;
    let manifest = gen_session(&scfg, &out[0])?;
    println!(
        "synth: {} trials x {} channels at {} Hz -> {}",
        manifest.trials.len(),
        manifest.n_channels,
        manifest.sample_rate_hz,
        out[0].display()
    );
    run.finish(&cfg.to_toml())
}

/// The session a command reads: `data.session` (or `--data-dir`), else the
/// run's own synthetic session.
fn session_path(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf, CliError> {
    if let Some(p) = &cfg.data.session {
        return Ok(p.clone());
    }
    let own = run.path(SESSION_DIR);
    if own.join(MANIFEST_FILE).exists() {
        return Ok(own);
    }
    Err(CliError::user(
        "SessionMissing",
        format!(
            "no session: set data.session, pass --data-dir, or run `synth` into {}",
            run.root().display()
        ),
    ))
}

fn load_session(path: &Path, run: &mut RunDir) -> Result<(SessionManifest, Vec<TrialRecord>), CliError> {
    let manifest = load_manifest(path)?;
    run.input(&manifest.base_dir.join(MANIFEST_FILE));
    for t in &manifest.trials {
        run.input(&manifest.resolve(&t.eeg_path));
        run.input(&manifest.resolve(&t.kin_path));
    }
    let trials = load_all_trials(&manifest)?;
    Ok((manifest, trials))
}

fn preprocess(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    let path = session_path(cfg, &run)?;
    let (_, trials) = load_session(&path, &mut run)?;
    let out = run.claim(&["preprocess_report.csv", "prepared"])?;
    let session = process_session(&trials, &cfg.preprocess, None)?;
    fs::create_dir_all(&out[1]).map_err(|e| CliError::io(&out[1], e))?;
    let mut rows = Vec::new();
    for (c, p) in session.conditioned.iter().zip(&session.prepared) {
        rows.push(PreprocessRow {
            trial_id: c.trial_id.clone(),
            fs_out_hz: c.fs,
            conditioned_samples: c.eeg.cols(),
            led_onset: c.led_onset,
            movement_start: c.movement_start,
            movement_stop: c.movement_stop,
            response_time_s: c.response_time_s,
            prepared_samples: p.eeg.cols(),
        });
        write_signal_csv(
            &out[1].join(format!("{}_eeg.csv", p.trial_id)),
            &p.eeg,
            &channel_names(p.eeg.rows()),
        )?;
        write_signal_csv(
            &out[1].join(format!("{}_kin.csv", p.trial_id)),
            &p.kin,
            &AXES.map(String::from),
        )?;
    }
    write_rows(&out[0], &rows)?;
    println!("preprocess: {} trials conditioned -> {}", rows.len(), out[0].display());
    run.finish(&cfg.to_toml())
}

fn qc(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    if !cfg.qc.enabled {
        return Err(CliError::user("ConfigInvalid", "qc.enabled is false"));
    }
    let path = session_path(cfg, &run)?;
    let (_, trials) = load_session(&path, &mut run)?;
    let out = run.claim(&[QC_REPORT_FILE])?;
    let session = process_session(&trials, &cfg.preprocess, Some(&cfg.qc.qc_config()))?;
    let report = session.qc.expect("qc ran");
    let f = fs::File::create(&out[0]).map_err(|e| CliError::io(&out[0], e))?;
    report.write_csv(BufWriter::new(f)).map_err(|e| CliError::csv(&out[0], e))?;
    println!(
        "qc: kept {}/{} trials (threshold {}) -> {}",
        report.kept_ids().count(),
        report.entries.len(),
        cfg.qc.threshold,
        out[0].display()
    );
    run.finish(&cfg.to_toml())
}

fn read_qc_report(path: &Path) -> Result<QcReport, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(QcReport::read_csv(BufReader::new(f))?)
}

fn dataset(cfg: &RunConfig, mut run: RunDir, with_csv: bool) -> Result<(), CliError> {
    let path = session_path(cfg, &run)?;
    let (_, trials) = load_session(&path, &mut run)?;
    let qc_path = run.path(QC_REPORT_FILE);
    let mut names = vec![DATASET_FILE];
    if with_csv {
        names.push("dataset.csv");
    }
    let prepared = if qc_path.exists() {
        run.input(&qc_path);
        let report = read_qc_report(&qc_path)?;
        for e in &report.entries {
            if !trials.iter().any(|t| t.trial_id == e.trial_id) {
                return Err(CliError::user(
                    "QcReportMismatch",
                    format!("{} lists trial `{}` which is not in the session", qc_path.display(), e.trial_id),
                ));
            }
        }
        let kept: Vec<TrialRecord> = trials
            .into_iter()
            .filter(|t| report.kept_ids().any(|id| id == t.trial_id))
            .collect();
        if kept.is_empty() {
            return Err(CliError::user("Dataset", "QC kept no trials"));
        }
        process_session(&kept, &cfg.preprocess, None)?.prepared
    } else {
        let qc = cfg.qc.enabled.then(|| cfg.qc.qc_config());
        process_session(&trials, &cfg.preprocess, qc.as_ref())?.prepared
    };
    let out = run.claim(&names)?;
    let ds = LaggedDataset::from_prepared(&prepared, &cfg.window)?;
    let f = fs::File::create(&out[0]).map_err(|e| CliError::io(&out[0], e))?;
    ds.write_binary(BufWriter::new(f))?;
    if with_csv {
        let f = fs::File::create(&out[1]).map_err(|e| CliError::io(&out[1], e))?;
        ds.write_csv(BufWriter::new(f)).map_err(|e| CliError::csv(&out[1], e))?;
    }
    println!(
        "dataset: {} samples from {} trials, {} features -> {}",
        ds.len(),
        prepared.len(),
        ds.input_dim(),
        out[0].display()
    );
    run.finish(&cfg.to_toml())
}

fn load_dataset(run: &mut RunDir) -> Result<LaggedDataset, CliError> {
    let path = run.path(DATASET_FILE);
    if !path.exists() {
        return Err(CliError::user(
            "DatasetMissing",
            format!("{} not found; run `dataset` first", path.display()),
        ));
    }
    run.input(&path);
    let f = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(LaggedDataset::read_binary(BufReader::new(f))?)
}

fn splits(cfg: &RunConfig, ds: &LaggedDataset) -> Result<[(&'static str, LaggedDataset); 3], CliError> {
    let (tr, val, te) = ds.split(cfg.data.split, cfg.seed)?;
    Ok([("train", tr), ("val", val), ("test", te)])
}

fn train_cmd(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    let ds = load_dataset(&mut run)?;
    let [(_, tr), (_, val), _] = splits(cfg, &ds)?;
    let out = run.claim(&["train_report.csv", CHECKPOINT_FILE, PREDICTIONS_FILE])?;
    let model_cfg = cfg
        .model
        .model_config(ds.n_channels(), ds.window().steps(), cfg.seed);
    let params = init_model(&model_cfg)?;
    let outcome = train(params, &tr, &val, &cfg.train.train_config(cfg.seed), |e| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val rho_3d {:.4}  mse_3d {:.5}{}",
            e.epoch,
            e.train_loss.total,
            e.val.rho_3d,
            e.val.mse_3d,
            if e.checkpoint { "  *" } else { "" }
        );
    })?;
    let f = fs::File::create(&out[0]).map_err(|e| CliError::io(&out[0], e))?;
    outcome
        .report
        .write_csv(BufWriter::new(f))
        .map_err(|e| CliError::csv(&out[0], e))?;
    let f = fs::File::create(&out[1]).map_err(|e| CliError::io(&out[1], e))?;
    write_checkpoint(BufWriter::new(f), &outcome.best)?;
    let ev = evaluate(&outcome.best, &val)?;
    let f = fs::File::create(&out[2]).map_err(|e| CliError::io(&out[2], e))?;
    write_predictions_csv(BufWriter::new(f), &val, &ev.predictions).map_err(|e| CliError::csv(&out[2], e))?;
    println!(
        "train: {} train / {} val samples; best val rho_3d {:.4} mse_3d {:.5} -> {}",
        tr.len(),
        val.len(),
        ev.metrics.rho_3d,
        ev.metrics.mse_3d,
        out[1].display()
    );
    run.finish(&cfg.to_toml())
}

fn load_checkpoint(run: &mut RunDir) -> Result<ModelParams, CliError> {
    let path = run.path(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(CliError::user(
            "CheckpointMissing",
            format!("{} not found; run `train` first", path.display()),
        ));
    }
    run.input(&path);
    let f = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

fn eval(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    let ds = load_dataset(&mut run)?;
    let params = load_checkpoint(&mut run)?;
    let out = run.claim(&["metrics.csv"])?;
    let mut rows = Vec::new();
    for (name, part) in splits(cfg, &ds)? {
        let ev = evaluate(&params, &part)?;
        println!(
            "eval {name:>5}: rho_3d {:.4}  mse_3d {:.5}  ({} samples)",
            ev.metrics.rho_3d, ev.metrics.mse_3d, ev.metrics.n_samples
        );
        rows.push(MetricsRow::new(name, &ev.metrics));
    }
    write_rows(&out[0], &rows)?;
    run.finish(&cfg.to_toml())
}

fn erp(cfg: &RunConfig, mut run: RunDir, extra: &[PathBuf]) -> Result<(), CliError> {
    let mut paths = vec![session_path(cfg, &run)?];
    paths.extend(extra.iter().cloned());
    let mut subjects = Vec::new();
    // Subjects are epoched one at a time so only one session is in memory.
    for p in &paths {
        let (manifest, trials) = load_session(p, &mut run)?;
        let (kept, fraction) = if cfg.qc.enabled {
            let s = process_session(&trials, &cfg.preprocess, Some(&cfg.qc.qc_config()))?;
            let report = s.qc.expect("qc ran");
            let total = trials.len();
            let kept: Vec<TrialRecord> = trials
                .into_iter()
                .filter(|t| report.kept_ids().any(|id| id == t.trial_id))
                .collect();
            let frac = kept.len() as f64 / total as f64;
            (kept, frac)
        } else {
            (trials, 1.0)
        };
        if kept.is_empty() {
            eprintln!("erp: subject `{}` has no kept trials, skipped", manifest.subject_id);
            continue;
        }
        subjects.push(subject_epochs(&manifest.subject_id, &kept, fraction, &cfg.erp)?);
    }
    let out = run.claim(&["erp.csv", "erp.svg"])?;
    let result = averages(&subjects, cfg.erp.min_kept_fraction)?;
    let f = fs::File::create(&out[0]).map_err(|e| CliError::io(&out[0], e))?;
    result.write_csv(BufWriter::new(f)).map_err(|e| CliError::csv(&out[0], e))?;
    let chart = Chart {
        title: "Grand-average ERP (sum over channels)",
        x_label: "time from LED onset (ms)",
        y_label: "amplitude (µV)",
        series: vec![Series {
            label: "ERP",
            color: "#1f4e9c",
            points: result.time_ms.iter().copied().zip(result.erp_trace.iter().copied()).collect(),
            dashed: false,
        }],
        markers: vec![0.0],
        equal_aspect: false,
    };
    fs::write(&out[1], chart.render()).map_err(|e| CliError::io(&out[1], e))?;
    for s in &result.excluded_subjects {
        eprintln!("erp: subject `{s}` excluded (kept fraction below {})", cfg.erp.min_kept_fraction);
    }
    println!(
        "erp: {} subject(s) averaged, {} samples per epoch at {} Hz -> {}",
        result.subject_averages.len(),
        result.time_ms.len(),
        result.fs,
        out[0].display()
    );
    run.finish(&cfg.to_toml())
}

/// Prediction rows grouped by trial, in file order.
fn group_by_trial(rows: &[PredictionRow]) -> Vec<(&str, Vec<&PredictionRow>)> {
    let mut groups: Vec<(&str, Vec<&PredictionRow>)> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some((id, g)) if *id == r.trial_id => g.push(r),
            _ => groups.push((&r.trial_id, vec![r])),
        }
    }
    groups
}

fn summary_row(id: &str, rows: &[&PredictionRow]) -> SummaryRow {
    let pred: Vec<f64> = rows.iter().flat_map(|r| r.predicted()).collect();
    let meas: Vec<f64> = rows.iter().flat_map(|r| r.measured()).collect();
    match metrics_3d(&pred, &meas) {
        Ok(m) => SummaryRow::new(id, &m),
        // Too short or constant: correlation is undefined.
        Err(_) => SummaryRow::new(id, &MetricsReport::from_axes([f64::NAN; 3], [f64::NAN; 3], rows.len())),
    }
}

/// Oblique projection of a 3-D point onto the page.
fn project(p: [f64; 3]) -> (f64, f64) {
    let (c, s) = (std::f64::consts::FRAC_PI_6.cos(), std::f64::consts::FRAC_PI_6.sin());
    (p[0] * c - p[1] * c, p[2] + (p[0] + p[1]) * s)
}

const PLOT_TRIALS: usize = 3;

fn report(cfg: &RunConfig, mut run: RunDir) -> Result<(), CliError> {
    let pred_path = run.path(PREDICTIONS_FILE);
    if !pred_path.exists() {
        return Err(CliError::user(
            "PredictionsMissing",
            format!("{} not found; run `train` first", pred_path.display()),
        ));
    }
    run.input(&pred_path);
    let rows: Vec<PredictionRow> = read_rows(&pred_path)?;
    if rows.is_empty() {
        return Err(CliError::user("PredictionsMissing", format!("{} has no rows", pred_path.display())));
    }
    let out = run.claim(&["report"])?;
    let dir = &out[0];
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let groups = group_by_trial(&rows);

    let shown = &groups[..groups.len().min(PLOT_TRIALS)];
    let mut markers = Vec::new();
    let mut offset = 0usize;
    for (_, g) in shown {
        offset += g.len();
        markers.push(offset as f64 - 0.5);
    }
    markers.pop();
    for (a, axis) in AXES.iter().enumerate() {
        let mut measured = Vec::new();
        let mut predicted = Vec::new();
        let mut k = 0usize;
        for (_, g) in shown {
            for r in g {
                measured.push((k as f64, r.measured()[a]));
                predicted.push((k as f64, r.predicted()[a]));
                k += 1;
            }
        }
        let title = format!("Measured vs predicted position, {axis} axis");
        let y_label = format!("{axis} (scaled)");
        let chart = Chart {
            title: &title,
            x_label: "sample (validation trials, concatenated)",
            y_label: &y_label,
            series: vec![
                Series {
                    label: "measured",
                    color: "#222222",
                    points: measured,
                    dashed: false,
                },
                Series {
                    label: "predicted",
                    color: "#d1495b",
                    points: predicted,
                    dashed: true,
                },
            ],
            markers: markers.clone(),
            equal_aspect: false,
        };
        let p = dir.join(format!("axis_{axis}.svg"));
        fs::write(&p, chart.render()).map_err(|e| CliError::io(&p, e))?;
    }

    let (first_id, first) = &groups[0];
    let title = format!("3-D trajectory, trial {first_id} (oblique projection)");
    let chart = Chart {
        title: &title,
        x_label: "x cos30 - y cos30",
        y_label: "z + (x + y) sin30",
        series: vec![
            Series {
                label: "measured",
                color: "#222222",
                points: first.iter().map(|r| project(r.measured())).collect(),
                dashed: false,
            },
            Series {
                label: "predicted",
                color: "#d1495b",
                points: first.iter().map(|r| project(r.predicted())).collect(),
                dashed: true,
            },
        ],
        markers: vec![],
        equal_aspect: true,
    };
    let p = dir.join("trajectory.svg");
    fs::write(&p, chart.render()).map_err(|e| CliError::io(&p, e))?;

    let mut summary: Vec<SummaryRow> = groups.iter().map(|(id, g)| summary_row(id, g)).collect();
    summary.push(summary_row("all", &rows.iter().collect::<Vec<_>>()));
    write_rows(&dir.join("summary.csv"), &summary)?;
    println!(
        "report: {} trials, all-sample rho_3d {:.4} -> {}",
        groups.len(),
        summary.last().expect("all row").rho_3d,
        dir.display()
    );
    run.finish(&cfg.to_toml())
}
