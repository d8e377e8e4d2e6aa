//! The hybrid Inception/Transformer SSVEP classifier.
//!
//! Data flow: per-band channel fusion, a multi-scale temporal module whose
//! larger kernels form a cascade, a stack of self-attention encoder layers,
//! and a dense classifier over the flattened sequence.

pub mod checkpoint;
pub mod config;
pub mod params;

use rand::RngCore;

use crate::autograd::{AttentionParams, BatchMoments, Mode, NormStats, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::SubBandEpochs;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use config::ModelConfig;
pub use params::{init_params, ModelParams, Param, ParamKind};

/// Tape handles of the trainable tensors, indexed like [`ModelParams`].
/// Buffers have no handle.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Option<Var>>,
}

/// Everything one forward pass leaves behind.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Var,
    /// Flattened encoder output fed to the classifier, `[batch, time * d_model]`.
    pub features: Var,
    pub fused: Var,
    pub temporal: Var,
    pub encoded: Var,
    pub bound: Bound,
    /// Batch moments from train-mode batch norm, keyed by block name.
    pub norm_updates: Vec<(String, BatchMoments<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncepFormer<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

struct Pass<'a, T> {
    model: &'a IncepFormer<T>,
    tape: &'a mut Tape<T>,
    bound: &'a Bound,
    mode: Mode,
    rng: &'a mut dyn RngCore,
    updates: Vec<(String, BatchMoments<T>)>,
}

impl<T: Scalar> Pass<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.model
            .params
            .index_of(name)
            .and_then(|i| self.bound.vars[i])
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is missing")))
    }

    fn buffer(&self, name: &str) -> Result<&[T]> {
        self.model
            .params
            .get(name)
            .map(|p| p.value.data())
            .ok_or_else(|| Error::Config(format!("buffer `{name}` is missing")))
    }

    /// conv (same, no bias) -> batch norm -> ELU -> dropout.
    fn conv_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let (alpha, eps, p) = (T::lit(cfg.elu_alpha), T::lit(cfg.bn_eps), cfg.dropout);
        let w = self.var(&format!("{name}.conv.weight"))?;
        let gamma = self.var(&format!("{name}.bn.gamma"))?;
        let beta = self.var(&format!("{name}.bn.beta"))?;
        let h = self.tape.conv1d(x, w, None, Padding::Same, 1)?;
        let (h, moments) = match self.mode {
            Mode::Train => self.tape.batchnorm1d(h, gamma, beta, NormStats::Batch, eps)?,
            Mode::Eval => {
                let mean = self.buffer(&format!("{name}.bn.running_mean"))?.to_vec();
                let var = self.buffer(&format!("{name}.bn.running_var"))?.to_vec();
                let stats = NormStats::Running { mean: &mean, var: &var };
                self.tape.batchnorm1d(h, gamma, beta, stats, eps)?
            }
        };
        if let Some(m) = moments {
            self.updates.push((name.to_string(), m));
        }
        let h = self.tape.elu(h, alpha);
        self.tape.dropout(h, p, self.mode, self.rng)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn layernorm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.var(&format!("{name}.gamma"))?;
        let b = self.var(&format!("{name}.beta"))?;
        self.tape.layernorm(x, g, b, T::lit(self.model.config.ln_eps))
    }

    fn temporal(&mut self, fused: Var) -> Result<Var> {
        let cfg = self.model.config.clone();
        let k = cfg.n_scale_blocks;
        let mut scales = Vec::with_capacity(k);
        for i in 0..k {
            scales.push(if i == 0 && !cfg.uses_first_block() {
                None
            } else {
                Some(self.conv_block(&format!("scale{}", i + 1), fused)?)
            });
        }
        let mut parts = Vec::new();
        if let Some(x1) = scales[0] {
            parts.push(x1);
        }
        if k >= 2 {
            let x2 = scales[1].expect("second scale block is always built");
            parts.push(x2);
            let mut c = self.conv_block("chain1", x2)?;
            parts.push(c);
            for j in 2..k {
                let next = scales[j].expect("scale blocks past the first are always built");
                let input = self.tape.concat(&[c, next], 1)?;
                c = self.conv_block(&format!("chain{j}"), input)?;
                parts.push(c);
            }
        }
        for _ in 0..2 {
            parts.push(self.tape.maxpool1d(fused, cfg.pool_size, 1, Padding::Same)?);
        }
        self.tape.concat(&parts, 1)
    }

    fn encoder(&mut self, x: Var) -> Result<Var> {
        let cfg = self.model.config.clone();
        let t = self.tape.transpose_last(x)?;
        let h = self.linear("former.proj", t)?;
        let pos = self.var("former.pos")?;
        let mut h = self.tape.add_positional(h, pos)?;
        for l in 1..=cfg.n_encoder_layers {
            let p = |s: &str| self.var(&format!("encoder{l}.attn.{s}"));
            let ap = AttentionParams {
                wq: p("q.weight")?,
                bq: p("q.bias")?,
                wk: p("k.weight")?,
                bk: p("k.bias")?,
                wv: p("v.weight")?,
                bv: p("v.bias")?,
                wo: p("o.weight")?,
                bo: p("o.bias")?,
            };
            let a = self.tape.multi_head_attention(h, &ap, cfg.n_heads)?;
            let r = self.tape.add(h, a)?;
            let y = self.layernorm(&format!("encoder{l}.ln1"), r)?;
            let f = self.linear(&format!("encoder{l}.ffn.hidden"), y)?;
            let f = self.tape.elu(f, T::lit(cfg.elu_alpha));
            let f = self.tape.dropout(f, cfg.ffn_dropout, self.mode, self.rng)?;
            let f = self.linear(&format!("encoder{l}.ffn.out"), f)?;
            let r = self.tape.add(y, f)?;
            h = self.layernorm(&format!("encoder{l}.ln2"), r)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> IncepFormer<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(IncepFormer { config, params })
    }

    /// Freshly initialized model drawing from `rng`.
    pub fn init<R: rand::Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(IncepFormer { config, params })
    }

    /// Records every trainable tensor on `tape`. Gradients are tracked when
    /// `requires_grad` is set.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, p)| p.kind.trainable().then(|| tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Runs the network on `x: [batch, bands, channels, time]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Forward<T>> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != cfg.n_bands || xs[2] != cfg.n_channels {
            return Err(Error::dim(format!(
                "model expects [batch, {}, {}, time], got {xs:?}",
                cfg.n_bands, cfg.n_channels
            )));
        }
        if xs[3] != cfg.n_times {
            return Err(Error::Config(format!(
                "input has {} samples, model is built for {}",
                xs[3], cfg.n_times
            )));
        }
        let mut pass = Pass {
            model: self,
            tape,
            bound,
            mode,
            rng,
            updates: Vec::new(),
        };
        let w = pass.var("fusion.weight")?;
        let fused = pass.tape.channel_fusion(x, w)?;
        let temporal = pass.temporal(fused)?;
        let encoded = pass.encoder(temporal)?;
        let batch = xs[0];
        let features = pass.tape.reshape(encoded, &[batch, cfg.feature_dim()])?;
        let logits = pass.linear("classifier", features)?;
        Ok(Forward {
            logits,
            features,
            fused,
            temporal,
            encoded,
            bound: bound.clone(),
            norm_updates: pass.updates,
        })
    }

    /// Cross-entropy plus `l2_coeff` times the squared norm of every
    /// weight matrix and kernel (biases, norm scales and the positional
    /// table are not penalized).
    pub fn loss(&self, tape: &mut Tape<T>, out: &Forward<T>, labels: &[usize]) -> Result<Var> {
        let ce = tape.cross_entropy(out.logits, labels)?;
        if self.config.l2_coeff == 0.0 {
            return Ok(ce);
        }
        let weights: Vec<Var> = self
            .params
            .iter()
            .zip(&out.bound.vars)
            .filter(|((_, p), _)| p.kind == ParamKind::Weight)
            .filter_map(|(_, v)| *v)
            .collect();
        let sq = tape.sum_squares(&weights);
        let pen = tape.scale(sq, T::lit(self.config.l2_coeff));
        tape.add(ce, pen)
    }

    /// Folds train-mode batch moments into the running statistics with
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_norm_updates(&mut self, updates: &[(String, BatchMoments<T>)]) -> Result<()> {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for (name, moments) in updates {
            for (suffix, batch) in [("running_mean", &moments.mean), ("running_var", &moments.var)] {
                let key = format!("{name}.bn.{suffix}");
                let p = self
                    .params
                    .get_mut(&key)
                    .ok_or_else(|| Error::Config(format!("buffer `{key}` is missing")))?;
                if p.value.len() != batch.len() {
                    return Err(Error::dim(format!("{key}: {} entries, update has {}", p.value.len(), batch.len())));
                }
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits for a batch `[batch, bands, channels, time]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.eval_pass(x)?.0)
    }

    /// Eval-mode logits and pre-classifier features.
    pub fn eval_pass(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        // eval mode draws nothing from the generator
        let mut rng = crate::rng::seeded(0);
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval, &mut rng)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    /// Class probabilities `[batch, classes]` in eval mode.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        let c = self.config.n_classes;
        let mut out = logits.clone();
        for (row, src) in out.data_mut().chunks_exact_mut(c).zip(logits.data().chunks_exact(c)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (o, &s) in row.iter_mut().zip(src) {
                *o = (s - max).exp();
                z += *o;
            }
            row.iter_mut().for_each(|o| *o /= z);
        }
        Ok(out)
    }

    /// Predicted class per row, ties to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(logits.data(), self.config.n_classes))
    }
}

pub fn argmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<usize> {
    data.chunks_exact(cols)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stacks the trials at `indices` into a model input
/// `[batch, bands, channels, time]`.
pub fn batch_input<T: Scalar>(epochs: &SubBandEpochs, indices: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(indices.len() * epochs.trial_len());
    for &i in indices {
        if i >= epochs.n_trials {
            return Err(Error::dim(format!("trial {i} out of {}", epochs.n_trials)));
        }
        data.extend(epochs.trial(i).iter().map(|&v| T::lit(v)));
    }
    Tensor::new([indices.len(), epochs.n_bands, epochs.n_channels, epochs.n_samples], data)
}
