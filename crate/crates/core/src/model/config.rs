use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_bands: usize,
    pub n_classes: usize,
    /// Samples per epoch. Sizes the positional table and the classifier.
    pub n_times: usize,
    pub scale_kernels: Vec<usize>,
    pub fusion_kernels: Vec<usize>,
    pub pool_size: usize,
    pub filters_per_block: usize,
    pub n_scale_blocks: usize,
    pub dropout: f64,
    pub ffn_dropout: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub ffn_hidden: usize,
    pub l2_coeff: f64,
    pub include_x1_in_concat: bool,
    pub elu_alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 9,
            n_bands: 3,
            n_classes: 40,
            n_times: 250,
            scale_kernels: vec![1, 3, 5, 8],
            fusion_kernels: vec![32, 16, 11],
            pool_size: 2,
            filters_per_block: 16,
            n_scale_blocks: 4,
            dropout: 0.5,
            ffn_dropout: 0.1,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            ffn_hidden: 128,
            l2_coeff: 1e-4,
            include_x1_in_concat: false,
            elu_alpha: 1.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

pub const MAX_SCALE_BLOCKS: usize = 6;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_channels == 0 || self.n_bands == 0 || self.n_times == 0 {
            return bad("channel, band and time counts must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(1..=MAX_SCALE_BLOCKS).contains(&self.n_scale_blocks) {
            return bad(format!("n_scale_blocks {} outside 1..={MAX_SCALE_BLOCKS}", self.n_scale_blocks));
        }
        if self.scale_kernels.is_empty() || self.scale_kernels.contains(&0) {
            return bad("scale_kernels must be non-empty and positive".into());
        }
        if self.n_scale_blocks > 1 && (self.fusion_kernels.is_empty() || self.fusion_kernels.contains(&0)) {
            return bad("fusion_kernels must be non-empty and positive".into());
        }
        if self.pool_size == 0 || self.filters_per_block == 0 {
            return bad("pool_size and filters_per_block must be positive".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("ffn_dropout", self.ffn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if !(self.l2_coeff >= 0.0) {
            return bad(format!("l2_coeff {} must be non-negative", self.l2_coeff));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn_momentum {} outside (0, 1]", self.bn_momentum));
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0 && self.elu_alpha > 0.0) {
            return bad("bn_eps, ln_eps and elu_alpha must be positive".into());
        }
        Ok(())
    }

    /// Kernel of each scale block. Lists shorter than `n_scale_blocks`
    /// repeat their last entry.
    pub fn block_kernels(&self) -> Vec<usize> {
        extend_to(&self.scale_kernels, self.n_scale_blocks)
    }

    /// Kernel of each fusion block (one fewer than scale blocks).
    pub fn fusion_block_kernels(&self) -> Vec<usize> {
        extend_to(&self.fusion_kernels, self.n_scale_blocks - 1)
    }

    /// Whether the first scale block feeds the concatenation. It has no
    /// other consumer, so when excluded it is not built at all.
    pub fn uses_first_block(&self) -> bool {
        self.include_x1_in_concat || self.n_scale_blocks == 1
    }

    pub fn fused_channels(&self) -> usize {
        self.n_bands * self.n_channels
    }

    /// Channel count entering the encoder.
    pub fn concat_channels(&self) -> usize {
        let f = self.filters_per_block;
        let k = self.n_scale_blocks;
        let chain = if k >= 2 { f * k } else { 0 };
        let first = if self.uses_first_block() { f } else { 0 };
        chain + first + 2 * self.fused_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.n_times * self.d_model
    }
}

fn extend_to(list: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|i| *list.get(i).or(list.last()).unwrap_or(&1)).collect()
}
