use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use incepformer::baselines::Method;
use incepformer::eval::{
    ablation_csv, ablation_sweep, evaluate_accuracy, evaluate_baseline, export_features, features_csv, itr,
    run_subject, EvalReport, FoldReport, FoldSelection,
};
use incepformer::model::{load_checkpoint, save_checkpoint, IncepFormer, TrainingMeta};
use incepformer::signal::archive::{load_epochs, load_recording, save_epoch_archive};
use incepformer::signal::synth::synth_recording;
use incepformer::signal::{preprocess, SubBandEpochs};
use incepformer::{Error, Scalar};
use log::info;

use crate::config::{Precision, RunConfig};
use crate::CliError;

/// `<outdir>/<command>-<first 12 hex digits of the fingerprint>/`, with the
/// resolved configuration written as `config.json`.
pub fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let fp = cfg.fingerprint();
    let dir = cfg.outdir.join(format!("{command}-{}", &fp[..12]));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn input(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Usage("no input archive (use --input or set `input`)".into()))
}

fn checkpoint(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("no checkpoint (use --checkpoint or set `checkpoint`)".into()))
}

fn stamp(report: &mut EvalReport, started: Instant) {
    report.meta.created_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    report.meta.wall_clock_s = started.elapsed().as_secs_f64();
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("report.csv"), &report.to_csv())
}

fn channels(cfg: &RunConfig) -> Vec<&str> {
    cfg.pipeline.channels.iter().map(String::as_str).collect()
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = run_dir(cfg, "synth")?;
    let rec = synth_recording(&cfg.synth, cfg.seed)?;
    save_epoch_archive(rec.clone(), &dir.join("raw"))?;
    let epochs = preprocess(&rec, &cfg.pipeline.bands, &channels(cfg), cfg.pipeline.window())?;
    save_epoch_archive(epochs.clone(), &dir.join("epochs"))?;
    println!(
        "synthesized {} trials ({} classes, {} blocks) -> {}",
        epochs.n_trials,
        epochs.n_classes(),
        epochs.block_ids.len(),
        dir.join("epochs").display()
    );
    Ok(dir)
}

pub fn preprocess_cmd(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let rec = load_recording(input(cfg)?)?;
    let dir = run_dir(cfg, "preprocess")?;
    let epochs = preprocess(&rec, &cfg.pipeline.bands, &channels(cfg), cfg.pipeline.window())?;
    save_epoch_archive(epochs.clone(), &dir.join("epochs"))?;
    println!(
        "{} trials x {} bands x {} channels x {} samples -> {}",
        epochs.n_trials,
        epochs.n_bands,
        epochs.n_channels,
        epochs.n_samples,
        dir.join("epochs").display()
    );
    Ok(dir)
}

fn train_as<T: Scalar>(cfg: &RunConfig, epochs: &SubBandEpochs, selection: FoldSelection, dir: &Path) -> Result<EvalReport, CliError> {
    let started = Instant::now();
    let run = run_subject::<T>(
        epochs,
        &cfg.model,
        &cfg.schedule,
        cfg.seed,
        selection,
        cfg.workers,
        &cfg.fingerprint(),
    )?;
    for a in &run.artifacts {
        let fdir = dir.join(format!("fold{}", a.fold.index));
        save_checkpoint(&a.model, &a.meta, &fdir)?;
        let curve = serde_json::to_string_pretty(&a.curve).expect("curve serializes");
        write(&fdir.join("curve.json"), &curve)?;
    }
    let mut report = run.report;
    stamp(&mut report, started);
    Ok(report)
}

pub fn train(cfg: &RunConfig, selection: FoldSelection) -> Result<PathBuf, CliError> {
    let epochs = load_epochs(input(cfg)?)?;
    let dir = run_dir(cfg, "train")?;
    let report = match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, &epochs, selection, &dir)?,
        Precision::F64 => train_as::<f64>(cfg, &epochs, selection, &dir)?,
    };
    write_report(&dir, &report)?;
    println!(
        "{} fold(s): mean accuracy {:.4} (sd {:.4}), ITR {:.2} bits/min -> {}",
        report.folds.len(),
        report.mean_accuracy,
        report.std_accuracy,
        report.itr,
        dir.display()
    );
    Ok(dir)
}

fn eval_as<T: Scalar>(cfg: &RunConfig, epochs: &SubBandEpochs, blocks: &[usize]) -> Result<EvalReport, CliError> {
    let started = Instant::now();
    let (model, meta): (IncepFormer<T>, TrainingMeta) = load_checkpoint(checkpoint(cfg)?)?;
    let n_classes = model.config.n_classes;
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut folds = Vec::with_capacity(blocks.len());
    for (k, &b) in blocks.iter().enumerate() {
        let idx = epochs.indices_in_block(b);
        if idx.is_empty() {
            return Err(Error::Data(format!("block {b} has no trials in the archive")).into());
        }
        let ev = evaluate_accuracy(&model, epochs, &idx, cfg.schedule.eval_batch_size)?;
        for (t, p) in confusion.iter_mut().zip(&ev.confusion) {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        folds.push(FoldReport {
            fold: k,
            test_block: b,
            train_blocks: Vec::new(),
            n_train: 0,
            n_val: 0,
            n_test: idx.len(),
            accuracy: ev.accuracy,
            itr: itr(ev.accuracy, n_classes, epochs.window.tw)?,
            batches_run: meta.batches_run,
            best_batch: meta.best_batch,
            stopped_early: meta.stopped_early,
        });
    }
    let mut report = EvalReport::assemble(
        "incepformer",
        n_classes,
        epochs.window.tw,
        folds,
        confusion,
        &cfg.fingerprint(),
    )?;
    stamp(&mut report, started);
    Ok(report)
}

pub fn eval(cfg: &RunConfig, blocks: Option<Vec<usize>>) -> Result<PathBuf, CliError> {
    let epochs = load_epochs(input(cfg)?)?;
    let blocks = blocks.unwrap_or_else(|| epochs.block_ids.clone());
    let dir = run_dir(cfg, "eval")?;
    let report = match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg, &epochs, &blocks)?,
        Precision::F64 => eval_as::<f64>(cfg, &epochs, &blocks)?,
    };
    write_report(&dir, &report)?;
    println!("accuracy {:.4} over {} block(s) -> {}", report.mean_accuracy, blocks.len(), dir.display());
    Ok(dir)
}

pub fn baseline(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let epochs = load_epochs(input(cfg)?)?;
    let dir = run_dir(cfg, "baseline")?;
    let mut report = evaluate_baseline(
        &epochs,
        cfg.baseline.method,
        &cfg.baseline.fbcca,
        FoldSelection::All,
        &cfg.fingerprint(),
    )?;
    stamp(&mut report, started);
    write_report(&dir, &report)?;
    let name = match cfg.baseline.method {
        Method::Cca => "cca",
        Method::Fbcca => "fbcca",
    };
    println!("{name}: mean accuracy {:.4}, ITR {:.2} bits/min -> {}", report.mean_accuracy, report.itr, dir.display());
    Ok(dir)
}

pub fn ablate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let epochs = load_epochs(input(cfg)?)?;
    let dir = run_dir(cfg, "ablate")?;
    let n = &cfg.ablation.n_blocks;
    let rows = match cfg.precision {
        Precision::F32 => ablation_sweep::<f32>(&epochs, &cfg.model, &cfg.schedule, n, cfg.seed, cfg.workers)?,
        Precision::F64 => ablation_sweep::<f64>(&epochs, &cfg.model, &cfg.schedule, n, cfg.seed, cfg.workers)?,
    };
    let csv = ablation_csv(&rows);
    write(&dir.join("ablation.csv"), &csv)?;
    for r in &rows {
        info!("{} block(s): {:.4} +- {:.4}", r.n_blocks, r.mean_acc, r.std_acc);
    }
    print!("{csv}");
    Ok(dir)
}

fn features_as<T: Scalar>(cfg: &RunConfig, epochs: &SubBandEpochs) -> Result<String, CliError> {
    let (model, _): (IncepFormer<T>, TrainingMeta) = load_checkpoint(checkpoint(cfg)?)?;
    Ok(features_csv(&export_features(&model, epochs, cfg.schedule.eval_batch_size)?))
}

pub fn export(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let epochs = load_epochs(input(cfg)?)?;
    let dir = run_dir(cfg, "export-features")?;
    let csv = match cfg.precision {
        Precision::F32 => features_as::<f32>(cfg, &epochs)?,
        Precision::F64 => features_as::<f64>(cfg, &epochs)?,
    };
    let path = dir.join("features.csv");
    write(&path, &csv)?;
    println!("{} rows -> {}", epochs.n_trials, path.display());
    Ok(dir)
}
