use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Role of a named tensor. Only `Weight` entries carry the L2 penalty;
/// `Buffer` entries are running statistics, not trained by gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

/// How a tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

fn slot(s: &mut Vec<Slot>, name: String, shape: Vec<usize>, kind: ParamKind, init: Init) {
    s.push(Slot { name, shape, kind, init });
}

fn linear_slots(s: &mut Vec<Slot>, name: &str, n_out: usize, n_in: usize) {
    let init = Init::Xavier {
        fan_in: n_in,
        fan_out: n_out,
    };
    slot(s, format!("{name}.weight"), vec![n_out, n_in], ParamKind::Weight, init);
    slot(s, format!("{name}.bias"), vec![n_out], ParamKind::Bias, Init::Zeros);
}

fn norm_slots(s: &mut Vec<Slot>, name: &str, n: usize) {
    slot(s, format!("{name}.gamma"), vec![n], ParamKind::Norm, Init::Ones);
    slot(s, format!("{name}.beta"), vec![n], ParamKind::Norm, Init::Zeros);
}

/// Bias-free conv followed by batch norm with running statistics.
fn conv_block_slots(s: &mut Vec<Slot>, name: &str, c_out: usize, c_in: usize, k: usize) {
    let init = Init::Xavier {
        fan_in: c_in * k,
        fan_out: c_out * k,
    };
    slot(s, format!("{name}.conv.weight"), vec![c_out, c_in, k], ParamKind::Weight, init);
    norm_slots(s, &format!("{name}.bn"), c_out);
    slot(s, format!("{name}.bn.running_mean"), vec![c_out], ParamKind::Buffer, Init::Zeros);
    slot(s, format!("{name}.bn.running_var"), vec![c_out], ParamKind::Buffer, Init::Ones);
}

/// Every tensor the network needs, in a fixed order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut s = Vec::new();
    let (c, m) = (cfg.n_channels, cfg.n_channels);
    let init = Init::Xavier { fan_in: c, fan_out: m };
    slot(&mut s, "fusion.weight".into(), vec![cfg.n_bands, m, c], ParamKind::Weight, init);

    let f = cfg.filters_per_block;
    for (i, &k) in cfg.block_kernels().iter().enumerate() {
        if i == 0 && !cfg.uses_first_block() {
            continue;
        }
        conv_block_slots(&mut s, &format!("scale{}", i + 1), f, cfg.fused_channels(), k);
    }
    for (j, &k) in cfg.fusion_block_kernels().iter().enumerate() {
        let c_in = if j == 0 { f } else { 2 * f };
        conv_block_slots(&mut s, &format!("chain{}", j + 1), f, c_in, k);
    }

    let (d, h) = (cfg.d_model, cfg.ffn_hidden);
    linear_slots(&mut s, "former.proj", d, cfg.concat_channels());
    slot(&mut s, "former.pos".into(), vec![cfg.n_times, d], ParamKind::Embedding, Init::Normal(0.02));
    for l in 1..=cfg.n_encoder_layers {
        for p in ["q", "k", "v", "o"] {
            linear_slots(&mut s, &format!("encoder{l}.attn.{p}"), d, d);
        }
        norm_slots(&mut s, &format!("encoder{l}.ln1"), d);
        linear_slots(&mut s, &format!("encoder{l}.ffn.hidden"), h, d);
        linear_slots(&mut s, &format!("encoder{l}.ffn.out"), d, h);
        norm_slots(&mut s, &format!("encoder{l}.ln2"), d);
    }
    linear_slots(&mut s, "classifier", cfg.n_classes, cfg.feature_dim());
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named network tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    map: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Param<T>)>) -> Result<Self> {
        let mut map = IndexMap::new();
        for (name, p) in entries {
            if map.insert(name.clone(), p).is_some() {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(ModelParams { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn at(&self, i: usize) -> (&str, &Param<T>) {
        let (k, v) = self.map.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    /// Total scalar count of trainable tensors.
    pub fn n_trainable(&self) -> usize {
        self.map.values().filter(|p| p.kind.trainable()).map(|p| p.value.len()).sum()
    }

    /// Checks names, order, shapes and kinds against the layout for `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let slots = layout(cfg);
        if slots.len() != self.map.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, found {}",
                slots.len(),
                self.map.len()
            )));
        }
        for (slot, (name, p)) in slots.iter().zip(&self.map) {
            if &slot.name != name || slot.shape != p.value.shape() || slot.kind != p.kind {
                return Err(Error::Config(format!(
                    "parameter `{name}` {:?} ({:?}) does not match expected `{}` {:?} ({:?})",
                    p.value.shape(),
                    p.kind,
                    slot.name,
                    slot.shape,
                    slot.kind
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|p| p.value.is_finite())
    }
}

/// Fresh parameters: Xavier-uniform weights, zero biases, unit norm scales,
/// `N(0, 0.02)` positional table. Values are drawn in order of the layout.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let entries = layout(cfg).into_iter().map(|slot| {
        let n: usize = slot.shape.iter().product();
        let data: Vec<T> = match slot.init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(sd) => {
                let d = Normal::new(0.0, sd).expect("positive std");
                (0..n).map(|_| T::lit(d.sample(rng))).collect()
            }
        };
        let value = Tensor::new(slot.shape, data).expect("layout shapes are non-empty");
        (slot.name, Param { value, kind: slot.kind })
    });
    ModelParams::from_entries(entries)
}
