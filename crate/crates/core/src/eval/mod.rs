//! Training loop, leave-one-block-out protocol, accuracy and ITR reporting.

mod protocol;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use protocol::{
    ablation_csv, ablation_sweep, evaluate_accuracy, evaluate_baseline, export_features, features_csv, fit_config, run_subject,
    AblationRow, Evaluation, FeatureMatrix, FoldArtifact, FoldSelection, SubjectRun,
};
pub use train::{train_model, train_run, validation_split, TrainCurve, TrainOutcome, TrainSchedule};

/// Wolpaw information transfer rate in bits per minute for accuracy `p`
/// over `n` targets with `t` seconds per selection. Accuracies at or
/// below chance give 0.
pub fn itr(p: f64, n: usize, t: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Parameter(format!("ITR needs at least 2 targets, got {n}")));
    }
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("ITR selection time {t} must be positive")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("accuracy {p} outside [0, 1]")));
    }
    let nf = n as f64;
    if p <= 1.0 / nf {
        return Ok(0.0);
    }
    let mut bits = nf.log2();
    if p > 0.0 {
        bits += p * p.log2();
    }
    if p < 1.0 {
        bits += (1.0 - p) * ((1.0 - p) / (nf - 1.0)).log2();
    }
    Ok((60.0 / t * bits).max(0.0))
}

/// One train/test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test_block: usize,
    pub train_blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    /// Share of training trials held out for early stopping.
    pub val_fraction: f64,
}

/// Leave-one-block-out folds in ascending order of test block.
pub fn lobo_split(blocks: &[usize], val_fraction: f64) -> Result<FoldPlan> {
    let mut sorted = blocks.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate block ids in {blocks:?}")));
    }
    if sorted.len() < 2 {
        return Err(Error::Data(format!("leave-one-block-out needs at least 2 blocks, got {}", sorted.len())));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let folds = sorted
        .iter()
        .enumerate()
        .map(|(index, &test_block)| Fold {
            index,
            test_block,
            train_blocks: sorted.iter().copied().filter(|&b| b != test_block).collect(),
        })
        .collect();
    Ok(FoldPlan { folds, val_fraction })
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != preds.len() {
        return Err(Error::dim(format!("{} labels for {} predictions", labels.len(), preds.len())));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        if l >= n_classes || p >= n_classes {
            return Err(Error::Data(format!("class {} outside {n_classes}", l.max(p))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// `trace / total`, 0 for an empty matrix.
pub fn accuracy_from(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let hits: u64 = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Per-class recall; `None` for classes without trials.
pub fn per_class_accuracy(confusion: &[Vec<u64>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let n: u64 = r.iter().sum();
            (n > 0).then(|| r[i] as f64 / n as f64)
        })
        .collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_block: usize,
    pub train_blocks: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub itr: f64,
    pub batches_run: usize,
    pub best_batch: usize,
    pub stopped_early: bool,
}

/// Run-time details that vary between otherwise identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub created_unix_s: u64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_classes: usize,
    pub window_s: f64,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// ITR of the mean accuracy, bits per minute.
    pub itr: f64,
    /// Summed over the evaluated folds, `[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub config_fingerprint: String,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Aggregates fold rows; ITR is taken at the mean accuracy.
    pub fn assemble(
        method: &str,
        n_classes: usize,
        window_s: f64,
        folds: Vec<FoldReport>,
        confusion: Vec<Vec<u64>>,
        fingerprint: &str,
    ) -> Result<Self> {
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        Ok(EvalReport {
            method: method.to_string(),
            n_classes,
            window_s,
            itr: itr(mean_accuracy, n_classes, window_s)?,
            folds,
            mean_accuracy,
            std_accuracy,
            per_class_accuracy: per_class_accuracy(&confusion),
            confusion,
            config_fingerprint: fingerprint.to_string(),
            meta: ReportMeta::default(),
        })
    }

    /// Serialized form without the `meta` block; equal inputs and seed give
    /// equal bytes.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("report is an object").remove("meta");
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("malformed report: {e}")))
    }

    /// One row per fold: `fold,test_block,n_train,n_test,accuracy,itr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,test_block,n_train,n_test,accuracy,itr\n");
        for f in &self.folds {
            s += &format!("{},{},{},{},{},{}\n", f.fold, f.test_block, f.n_train, f.n_test, f.accuracy, f.itr);
        }
        s
    }
}
