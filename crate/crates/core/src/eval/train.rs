use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Mode, Tape};
use crate::error::{Error, Result};
use crate::model::{batch_input, IncepFormer, ModelConfig, TrainingMeta};
use crate::rng;
use crate::scalar::Scalar;
use crate::signal::{zero_mask_augment, SubBandEpochs, ZERO_MASK_LEN};
use crate::tensor::Tensor;

/// Mini-batch budget, step-decay learning rate and early stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_batches: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate is multiplied by this every `decay_every` batches.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub min_lr: f64,
    /// Batches between validation checks.
    pub eval_every: usize,
    /// Checks without a strictly lower validation loss before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub augment: bool,
    pub mask_len: usize,
    pub eval_batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_batches: 5000,
            batch_size: 64,
            lr: 1e-3,
            decay_factor: 0.5,
            decay_every: 1000,
            min_lr: 1e-5,
            eval_every: 100,
            patience: 10,
            val_fraction: 0.1,
            augment: true,
            mask_len: ZERO_MASK_LEN,
            eval_batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_batches == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("total_batches, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if self.decay_every == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("decay_every, eval_every and patience must be positive".into());
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Learning rate used for 0-based batch `b`.
    pub fn lr_at(&self, b: usize) -> f64 {
        let steps = (b / self.decay_every) as i32;
        (self.lr * self.decay_factor.powi(steps)).max(self.min_lr.min(self.lr))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub train_loss: Vec<f64>,
    /// `(batches completed, validation loss, validation accuracy)`.
    pub val: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: IncepFormer<T>,
    pub curve: TrainCurve,
    pub meta: TrainingMeta,
    pub n_train: usize,
    pub n_val: usize,
}

/// Holds out about `fraction` of `indices` for validation, balanced over
/// classes: each round takes one trial per class (latest block first) in a
/// shuffled class order, and a class always keeps at least one training
/// trial.
pub fn validation_split<R: Rng + ?Sized>(
    epochs: &SubBandEpochs,
    indices: &[usize],
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 || indices.is_empty() {
        return (indices.to_vec(), Vec::new());
    }
    let n_val = ((fraction * indices.len() as f64).round() as usize).max(1);
    let n_classes = epochs.n_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in indices {
        per_class[epochs.labels[i]].push(i);
    }
    for c in per_class.iter_mut() {
        c.sort_by_key(|&i| (std::cmp::Reverse(epochs.blocks[i]), epochs.trials[i].trial));
    }
    let mut classes: Vec<usize> = (0..n_classes).filter(|&c| per_class[c].len() > 1).collect();
    classes.shuffle(rng);
    let mut val = Vec::with_capacity(n_val);
    let mut round = 0;
    while val.len() < n_val {
        let before = val.len();
        for &c in &classes {
            if val.len() == n_val {
                break;
            }
            if round + 1 < per_class[c].len() {
                val.push(per_class[c][round]);
            }
        }
        if val.len() == before {
            break;
        }
        round += 1;
    }
    val.sort_unstable();
    let train = indices.iter().copied().filter(|i| val.binary_search(i).is_err()).collect();
    (train, val)
}

/// Mean cross-entropy and accuracy in eval mode.
pub(crate) fn eval_loss<T: Scalar>(model: &IncepFormer<T>, epochs: &SubBandEpochs, idx: &[usize], chunk: usize) -> Result<(f64, f64)> {
    let c = model.config.n_classes;
    let (mut loss, mut hits) = (0.0, 0usize);
    for part in idx.chunks(chunk) {
        let logits = model.logits(&batch_input::<T>(epochs, part)?)?;
        for (row, &i) in logits.data().chunks_exact(c).zip(part) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[epochs.labels[i]];
            if crate::model::argmax_rows(&row, c)[0] == epochs.labels[i] {
                hits += 1;
            }
        }
    }
    let n = idx.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

fn augmented_batch<T: Scalar, R: Rng + ?Sized>(
    epochs: &SubBandEpochs,
    idx: &[usize],
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !schedule.augment {
        return batch_input(epochs, idx);
    }
    let mut data = Vec::with_capacity(idx.len() * epochs.trial_len());
    for &i in idx {
        let (masked, _) = zero_mask_augment(epochs.trial(i), epochs.n_samples, schedule.mask_len, rng);
        data.extend(masked.into_iter().map(T::lit));
    }
    Tensor::new([idx.len(), epochs.n_bands, epochs.n_channels, epochs.n_samples], data)
}

/// Trains a fresh model on `train` (which must not contain test trials).
pub fn train_run<T: Scalar>(
    train: &SubBandEpochs,
    config: &ModelConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    let model = IncepFormer::init(config.clone(), &mut rng::stream(seed, "init"))?;
    train_model(model, train, schedule, seed)
}

/// Continues training `model` on `train`. Returns the parameters with the
/// lowest validation loss (the final ones when nothing is held out).
pub fn train_model<T: Scalar>(
    mut model: IncepFormer<T>,
    train: &SubBandEpochs,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    train.validate()?;
    let cfg = model.config.clone();
    if [train.n_bands, train.n_channels, train.n_samples, train.n_classes()]
        != [cfg.n_bands, cfg.n_channels, cfg.n_times, cfg.n_classes]
    {
        return Err(Error::Config(format!(
            "data [bands {}, channels {}, samples {}, classes {}] does not fit the model [{}, {}, {}, {}]",
            train.n_bands,
            train.n_channels,
            train.n_samples,
            train.n_classes(),
            cfg.n_bands,
            cfg.n_channels,
            cfg.n_times,
            cfg.n_classes
        )));
    }
    let mut present = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Data(format!("training data covers {} class(es); need at least 2", present.len())));
    }

    let all: Vec<usize> = (0..train.n_trials).collect();
    let (train_idx, val_idx) = validation_split(train, &all, schedule.val_fraction, &mut rng::stream(seed, "split"));
    let mut order_rng = rng::stream(seed, "order");
    let mut aug_rng = rng::stream(seed, "augment");
    let mut drop_rng = rng::stream(seed, "dropout");

    let trainable: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.at(i).1.kind.trainable()).collect();
    let adam_cfg = AdamConfig {
        lr: schedule.lr,
        beta1: schedule.beta1,
        beta2: schedule.beta2,
        eps: schedule.adam_eps,
    };
    let mut adam = Adam::<T>::new(adam_cfg, trainable.iter().map(|&i| model.params.at(i).1.value.shape()));

    let bs = schedule.batch_size.min(train_idx.len());
    let mut order = train_idx.clone();
    order.shuffle(&mut order_rng);
    let mut pos = 0;
    let mut curve = TrainCurve::default();
    let mut best: Option<(f64, usize, IncepFormer<T>)> = None;
    let mut bad_checks = 0;
    let mut meta = TrainingMeta {
        seed,
        ..TrainingMeta::default()
    };

    for b in 0..schedule.total_batches {
        if pos + bs > order.len() {
            order.shuffle(&mut order_rng);
            pos = 0;
        }
        let idx = &order[pos..pos + bs];
        pos += bs;
        let x = augmented_batch::<T, _>(train, idx, schedule, &mut aug_rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv, Mode::Train, &mut drop_rng)?;
        let loss = model.loss(&mut tape, &out, &labels)?;
        let lv = tape.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("training loss became {lv} at mini-batch {}", b + 1)));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<T>> = trainable
            .iter()
            .map(|&i| grads.get_or_zeros(bound.vars[i].expect("trainable tensors are bound")))
            .collect();
        drop(tape);
        adam.set_lr(schedule.lr_at(b));
        {
            let mut params: Vec<&mut Tensor<T>> = model
                .params
                .iter_mut()
                .filter(|(_, p)| p.kind.trainable())
                .map(|(_, p)| &mut p.value)
                .collect();
            adam.step(&mut params, &g)?;
        }
        model.apply_norm_updates(&out.norm_updates)?;
        curve.train_loss.push(lv);
        meta.batches_run = b + 1;

        let done = b + 1 == schedule.total_batches;
        if !val_idx.is_empty() && ((b + 1) % schedule.eval_every == 0 || done) {
            let (vl, va) = eval_loss(&model, train, &val_idx, schedule.eval_batch_size)?;
            if !vl.is_finite() {
                return Err(Error::Numerical(format!("validation loss became {vl} at mini-batch {}", b + 1)));
            }
            curve.val.push((b + 1, vl, va));
            if best.as_ref().is_none_or(|(bl, _, _)| vl < *bl) {
                best = Some((vl, b + 1, model.clone()));
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= schedule.patience {
                    meta.stopped_early = !done;
                    break;
                }
            }
        }
    }
    let final_model = match best {
        Some((vl, at, m)) => {
            meta.best_val_loss = Some(vl);
            meta.best_batch = at;
            m
        }
        None => {
            meta.best_batch = meta.batches_run;
            model
        }
    };
    Ok(TrainOutcome {
        model: final_model,
        curve,
        meta,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
    })
}
