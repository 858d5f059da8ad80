//! The gait network: input normalisation, stacked TCN+ST blocks with residual
//! shortcuts, average pooling and a linear embedding head.

mod counts;
mod layers;
mod params;

pub use counts::{
    count_flops, count_params, reconcile_params, FlopReport, ParamReport, ReconcileRow, FLOP_CONVENTION,
    REFERENCE_BLOCK_PARAMS,
};
pub use layers::{
    block_forward, embed, input_norm, model_forward, spatial_attention_forward, tcn_forward, AttentionParams,
    BlockParams, BnParams, ConvParams, Forward,
};
pub use params::{ParamStore, MODEL_KIND};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::skeleton::{MULTI_INPUT_CHANNELS, NUM_JOINTS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Small,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Small => "small",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "small" => Ok(Variant::Small),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected full or small)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Output channels of each TCN+ST block.
    pub block_channels: Vec<usize>,
    pub heads: usize,
    /// `d_q = d_k = f_k · d_model`.
    pub f_k: f64,
    /// `d_v = f_v · d_model`.
    pub f_v: f64,
    /// Temporal kernel length (odd).
    pub tcn_kernel: usize,
    pub embedding_dim: usize,
    pub in_channels: usize,
    pub joints: usize,
    /// Biases on the query/key/value projections.
    pub attention_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            variant: Variant::Full,
            block_channels: vec![64, 64, 128, 256],
            heads: 8,
            f_k: 0.125,
            f_v: 0.125,
            tcn_kernel: 9,
            embedding_dim: 128,
            in_channels: MULTI_INPUT_CHANNELS,
            joints: NUM_JOINTS,
            attention_bias: true,
        }
    }

    /// The full network with its last block removed.
    pub fn small() -> Self {
        Self { variant: Variant::Small, block_channels: vec![64, 64, 128], ..Self::full() }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Full => Self::full(),
            Variant::Small => Self::small(),
        }
    }

    /// Per-head query/key width: `round(f_k · d_model / H)`, at least 1.
    pub fn head_dim_k(&self, d_model: usize) -> usize {
        ((self.f_k * d_model as f64 / self.heads as f64).round() as usize).max(1)
    }

    pub fn head_dim_v(&self, d_model: usize) -> usize {
        ((self.f_v * d_model as f64 / self.heads as f64).round() as usize).max(1)
    }

    /// Channels after pooling.
    pub fn pooled_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return bad(format!("block channels {:?} must be non-empty and positive", self.block_channels));
        }
        if self.variant == Variant::Small && self.block_channels != [64, 64, 128] {
            return bad(format!("small variant uses blocks [64, 64, 128], got {:?}", self.block_channels));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if !(self.f_k > 0.0 && self.f_v > 0.0 && self.f_k.is_finite() && self.f_v.is_finite()) {
            return bad(format!("attention factors ({}, {}) must be positive", self.f_k, self.f_v));
        }
        if self.tcn_kernel % 2 == 0 {
            return bad(format!("tcn kernel {} must be odd", self.tcn_kernel));
        }
        if self.embedding_dim == 0 || self.in_channels == 0 || self.joints == 0 {
            return bad("embedding, input channel and joint counts must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let chans: Vec<String> = self.block_channels.iter().map(usize::to_string).collect();
        format!(
            "variant={}\nblock_channels={}\nheads={}\nf_k={}\nf_v={}\ntcn_kernel={}\nembedding_dim={}\nin_channels={}\njoints={}\nattention_bias={}\n",
            self.variant,
            chans.join(","),
            self.heads,
            self.f_k,
            self.f_v,
            self.tcn_kernel,
            self.embedding_dim,
            self.in_channels,
            self.joints,
            self.attention_bias
        )
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn apply_kv(mut self, kv: &BTreeMap<String, String>) -> Result<Self> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for model key `{k}`")))
        }
        if let Some(v) = kv.get("variant") {
            let variant: Variant = v.parse()?;
            if variant != self.variant {
                self = Self::for_variant(variant);
            }
        }
        for (k, v) in kv {
            match k.as_str() {
                "variant" => {}
                "block_channels" => {
                    self.block_channels = v.split(',').map(|c| num(k, c)).collect::<Result<_>>()?;
                }
                "heads" => self.heads = num(k, v)?,
                "f_k" => self.f_k = num(k, v)?,
                "f_v" => self.f_v = num(k, v)?,
                "tcn_kernel" => self.tcn_kernel = num(k, v)?,
                "embedding_dim" => self.embedding_dim = num(k, v)?,
                "in_channels" => self.in_channels = num(k, v)?,
                "joints" => self.joints = num(k, v)?,
                "attention_bias" => self.attention_bias = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown model key `{k}`"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("`{line}` is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::full().apply_kv(&kv)
    }
}
