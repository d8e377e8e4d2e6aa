use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_run, TrainCurve, TrainSchedule};
use super::{accuracy_from, confusion_matrix, itr, lobo_split, mean_std, EvalReport, Fold, FoldReport};
use crate::baselines::{classify_epochs, FbccaParams, Method};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, batch_input, IncepFormer, ModelConfig, TrainingMeta};
use crate::rng;
use crate::scalar::Scalar;
use crate::signal::SubBandEpochs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<usize>,
}

/// Eval-mode accuracy of `model` on the trials at `indices`.
pub fn evaluate_accuracy<T: Scalar>(
    model: &IncepFormer<T>,
    epochs: &SubBandEpochs,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    let c = model.config.n_classes;
    let mut predictions = Vec::with_capacity(indices.len());
    for part in indices.chunks(batch_size.max(1)) {
        let logits = model.logits(&batch_input::<T>(epochs, part)?)?;
        predictions.extend(argmax_rows(logits.data(), c));
    }
    let labels: Vec<usize> = indices.iter().map(|&i| epochs.labels[i]).collect();
    let confusion = confusion_matrix(&labels, &predictions, c)?;
    Ok(Evaluation {
        accuracy: accuracy_from(&confusion),
        confusion,
        predictions,
    })
}

/// Which leave-one-block-out folds to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    All,
    /// A single fold by 0-based position in ascending test-block order.
    One(usize),
}

#[derive(Clone, Debug)]
pub struct FoldArtifact<T> {
    pub fold: Fold,
    pub model: IncepFormer<T>,
    pub meta: TrainingMeta,
    pub curve: TrainCurve,
}

#[derive(Clone, Debug)]
pub struct SubjectRun<T> {
    pub report: EvalReport,
    pub artifacts: Vec<FoldArtifact<T>>,
}

/// Copies the data geometry (bands, channels, samples, classes) into `config`.
pub fn fit_config(config: &ModelConfig, epochs: &SubBandEpochs) -> ModelConfig {
    ModelConfig {
        n_bands: epochs.n_bands,
        n_channels: epochs.n_channels,
        n_times: epochs.n_samples,
        n_classes: epochs.n_classes(),
        ..config.clone()
    }
}

fn selected_folds(epochs: &SubBandEpochs, val_fraction: f64, selection: FoldSelection) -> Result<Vec<Fold>> {
    epochs.validate()?;
    for &b in &epochs.block_ids {
        if epochs.indices_in_block(b).is_empty() {
            return Err(Error::Data(format!("block {b} is declared but has no trials")));
        }
    }
    let plan = lobo_split(&epochs.block_ids, val_fraction)?;
    match selection {
        FoldSelection::All => Ok(plan.folds),
        FoldSelection::One(k) => {
            let n = plan.folds.len();
            plan.folds
                .into_iter()
                .nth(k)
                .map(|f| vec![f])
                .ok_or_else(|| Error::Config(format!("fold {k} out of range for {n} folds")))
        }
    }
}

fn train_indices(epochs: &SubBandEpochs, fold: &Fold) -> Vec<usize> {
    let mut idx: Vec<usize> = fold.train_blocks.iter().flat_map(|&b| epochs.indices_in_block(b)).collect();
    idx.sort_unstable();
    idx
}

fn in_pool<R: Send>(workers: usize, job: impl FnOnce() -> R + Send) -> Result<R> {
    if workers <= 1 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(job))
}

/// Leave-one-block-out training and evaluation for one subject. Each fold
/// trains a fresh model from a seed derived from `(seed, fold)`; the test
/// block is only read by [`evaluate_accuracy`].
pub fn run_subject<T: Scalar>(
    epochs: &SubBandEpochs,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    seed: u64,
    selection: FoldSelection,
    workers: usize,
    fingerprint: &str,
) -> Result<SubjectRun<T>> {
    schedule.validate()?;
    let config = fit_config(config, epochs);
    config.validate()?;
    let folds = selected_folds(epochs, schedule.val_fraction, selection)?;
    let n_classes = config.n_classes;

    let run_fold = |fold: &Fold| -> Result<(FoldReport, Evaluation, FoldArtifact<T>)> {
        let train_idx = train_indices(epochs, fold);
        let test_idx = epochs.indices_in_block(fold.test_block);
        let train = epochs.subset(&train_idx);
        let fold_seed = rng::derive_seed(seed, &format!("fold{}", fold.test_block));
        let mut out = train_run::<T>(&train, &config, schedule, fold_seed)?;
        out.meta.fold = Some(fold.index);
        out.meta.test_block = Some(fold.test_block);
        let ev = evaluate_accuracy(&out.model, epochs, &test_idx, schedule.eval_batch_size)?;
        log::info!("fold {} (test block {}): accuracy {:.4}", fold.index, fold.test_block, ev.accuracy);
        let report = FoldReport {
            fold: fold.index,
            test_block: fold.test_block,
            train_blocks: fold.train_blocks.clone(),
            n_train: out.n_train,
            n_val: out.n_val,
            n_test: test_idx.len(),
            accuracy: ev.accuracy,
            itr: itr(ev.accuracy, n_classes, epochs.window.tw)?,
            batches_run: out.meta.batches_run,
            best_batch: out.meta.best_batch,
            stopped_early: out.meta.stopped_early,
        };
        let artifact = FoldArtifact {
            fold: fold.clone(),
            model: out.model,
            meta: out.meta,
            curve: out.curve,
        };
        Ok((report, ev, artifact))
    };
    let results: Vec<Result<_>> = in_pool(workers, || {
        if workers > 1 {
            folds.par_iter().map(run_fold).collect()
        } else {
            folds.iter().map(run_fold).collect()
        }
    })?;

    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut reports = Vec::with_capacity(results.len());
    let mut artifacts = Vec::with_capacity(results.len());
    for r in results {
        let (rep, ev, art) = r?;
        add_confusion(&mut confusion, &ev.confusion);
        reports.push(rep);
        artifacts.push(art);
    }
    let report = EvalReport::assemble("incepformer", n_classes, epochs.window.tw, reports, confusion, fingerprint)?;
    Ok(SubjectRun { report, artifacts })
}

fn add_confusion(total: &mut [Vec<u64>], part: &[Vec<u64>]) {
    for (t, p) in total.iter_mut().zip(part) {
        for (a, b) in t.iter_mut().zip(p) {
            *a += b;
        }
    }
}

/// CCA or FBCCA scored on each leave-one-block-out test block. Both methods
/// are training-free, so `n_train` is reported as 0.
pub fn evaluate_baseline(
    epochs: &SubBandEpochs,
    method: Method,
    params: &FbccaParams,
    selection: FoldSelection,
    fingerprint: &str,
) -> Result<EvalReport> {
    let folds = selected_folds(epochs, 0.0, selection)?;
    let n_classes = epochs.n_classes();
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut reports = Vec::with_capacity(folds.len());
    for fold in folds {
        let test_idx = epochs.indices_in_block(fold.test_block);
        let test = epochs.subset(&test_idx);
        let preds = classify_epochs(&test, method, params)?;
        let cm = confusion_matrix(&test.labels, &preds, n_classes)?;
        let acc = accuracy_from(&cm);
        add_confusion(&mut confusion, &cm);
        reports.push(FoldReport {
            fold: fold.index,
            test_block: fold.test_block,
            train_blocks: fold.train_blocks,
            n_train: 0,
            n_val: 0,
            n_test: test_idx.len(),
            accuracy: acc,
            itr: itr(acc, n_classes, epochs.window.tw)?,
            batches_run: 0,
            best_batch: 0,
            stopped_early: false,
        });
    }
    let name = match method {
        Method::Cca => "cca",
        Method::Fbcca => "fbcca",
    };
    EvalReport::assemble(name, n_classes, epochs.window.tw, reports, confusion, fingerprint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_blocks: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub itr: f64,
}

/// One full leave-one-block-out run per scale-block count.
pub fn ablation_sweep<T: Scalar>(
    epochs: &SubBandEpochs,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    n_blocks: &[usize],
    seed: u64,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    n_blocks
        .iter()
        .map(|&n| {
            let cfg = ModelConfig {
                n_scale_blocks: n,
                ..config.clone()
            };
            let run = run_subject::<T>(epochs, &cfg, schedule, seed, FoldSelection::All, workers, "")?;
            let accs: Vec<f64> = run.report.folds.iter().map(|f| f.accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            Ok(AblationRow {
                n_blocks: n,
                mean_acc,
                std_acc,
                itr: run.report.itr,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("n_blocks,mean_acc,std_acc,itr\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.n_blocks, r.mean_acc, r.std_acc, r.itr);
    }
    s
}

/// Pre-classifier features, one row per trial.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n_rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn export_features<T: Scalar>(model: &IncepFormer<T>, epochs: &SubBandEpochs, batch_size: usize) -> Result<FeatureMatrix> {
    let dim = model.config.feature_dim();
    let mut data = Vec::with_capacity(epochs.n_trials * dim);
    let all: Vec<usize> = (0..epochs.n_trials).collect();
    for part in all.chunks(batch_size.max(1)) {
        let (_, feats) = model.eval_pass(&batch_input::<T>(epochs, part)?)?;
        data.extend(feats.data().iter().map(|v| v.as_f64()));
    }
    Ok(FeatureMatrix {
        n_rows: epochs.n_trials,
        dim,
        data,
        labels: epochs.labels.clone(),
    })
}

/// `trial,label,f0..f{dim-1}`.
pub fn features_csv(f: &FeatureMatrix) -> String {
    let mut s = String::from("trial,label");
    for j in 0..f.dim {
        s += &format!(",f{j}");
    }
    s.push('\n');
    for i in 0..f.n_rows {
        s += &format!("{},{}", i, f.labels[i]);
        for v in f.row(i) {
            s += &format!(",{v}");
        }
        s.push('\n');
    }
    s
}
