//! Analytic parameter and FLOP counts.

use super::ModelConfig;

/// Reference per-block parameter counts of the default network. The block2 value is
/// the reading that makes the column sum to the 0.513M reference total.
pub const REFERENCE_BLOCK_PARAMS: [(&str, usize); 5] =
    [("block0", 8_278), ("block1", 49_760), ("block2", 85_632), ("block3", 335_104), ("fc", 32_768)];

pub const FLOP_CONVENTION: &str = "batch 1; multiply-add = 2 FLOPs; bias add, Mish, attention scaling, softmax, \
     residual add and pooling = 1 FLOP per element; batchnorm = 2 FLOPs per element";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    /// `data_norm`, `block0`.., `fc`.
    pub blocks: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamReport {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.blocks.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub frames: usize,
    pub blocks: Vec<(String, u64)>,
    pub total: u64,
    pub convention: &'static str,
}

fn block_params(cfg: &ModelConfig, c_in: usize, c: usize) -> usize {
    let dk = cfg.heads * cfg.head_dim_k(c);
    let dv = cfg.heads * cfg.head_dim_v(c);
    let tcn = c_in * c * cfg.tcn_kernel + c + 2 * c;
    let qkv_bias = if cfg.attention_bias { 2 * dk + dv } else { 0 };
    let st = c * (2 * dk + dv) + qkv_bias + dv * c + c + 2 * c;
    let res = if c_in != c { c_in * c + c + 2 * c } else { 0 };
    tcn + st + res
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let mut blocks = vec![("data_norm".to_string(), 2 * cfg.in_channels * cfg.joints)];
    let mut c_in = cfg.in_channels;
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        blocks.push((format!("block{i}"), block_params(cfg, c_in, c)));
        c_in = c;
    }
    blocks.push(("fc".to_string(), c_in * cfg.embedding_dim));
    let total = blocks.iter().map(|b| b.1).sum();
    ParamReport { blocks, total }
}

fn block_flops(cfg: &ModelConfig, c_in: usize, c: usize, frames: usize) -> u64 {
    let (ci, co, l) = (c_in as u64, c as u64, cfg.tcn_kernel as u64);
    let (t, v, h) = (frames as u64, cfg.joints as u64, cfg.heads as u64);
    let n = t * v;
    let (hk, hv) = (cfg.head_dim_k(c) as u64, cfg.head_dim_v(c) as u64);
    let (dk, dv) = (h * hk, h * hv);
    let conv_mish_bn = |k_in: u64, kernel: u64| 2 * k_in * co * kernel * n + co * n + co * n + 2 * co * n;
    let tcn = conv_mish_bn(ci, l);
    let qkv_bias = if cfg.attention_bias { (2 * dk + dv) * n } else { 0 };
    let projections = 2 * co * (2 * dk + dv) * n + qkv_bias + 2 * dv * co * n + co * n;
    let scores = t * h * v * v;
    let attention = 2 * scores * hk + scores + scores + 2 * scores * hv;
    let st = projections + attention + co * n + 2 * co * n;
    let res = if c_in != c { conv_mish_bn(ci, 1) } else { 0 };
    tcn + st + res + co * n
}

pub fn count_flops(cfg: &ModelConfig, frames: usize) -> FlopReport {
    let n = (frames * cfg.joints) as u64;
    let mut blocks = vec![("data_norm".to_string(), 2 * cfg.in_channels as u64 * n)];
    let mut c_in = cfg.in_channels;
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        blocks.push((format!("block{i}"), block_flops(cfg, c_in, c, frames)));
        c_in = c;
    }
    blocks.push(("pool".to_string(), c_in as u64 * n));
    blocks.push(("fc".to_string(), 2 * (c_in * cfg.embedding_dim) as u64));
    let total = blocks.iter().map(|b| b.1).sum();
    FlopReport { frames, blocks, total, convention: FLOP_CONVENTION }
}

/// One setting of the reconciliation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconcileRow {
    pub f_k: f64,
    pub f_v: f64,
    pub tcn_kernel: usize,
    pub attention_bias: bool,
    pub report: ParamReport,
    /// Mean absolute relative error over the reference blocks.
    pub mean_block_error: f64,
    /// Relative error of the learnable total against the reference sum.
    pub total_error: f64,
}

/// Parameter counts over a grid of attention factors, kernel lengths and bias
/// placement, ordered by mean per-block error against [`REFERENCE_BLOCK_PARAMS`].
pub fn reconcile_params(base: &ModelConfig, factors: &[f64], kernels: &[usize]) -> Vec<ReconcileRow> {
    let reference_total: usize = REFERENCE_BLOCK_PARAMS.iter().map(|r| r.1).sum();
    let mut rows = Vec::new();
    for &f_k in factors {
        for &f_v in factors {
            for &tcn_kernel in kernels {
                for attention_bias in [true, false] {
                    let cfg = ModelConfig { f_k, f_v, tcn_kernel, attention_bias, ..base.clone() };
                    let report = count_params(&cfg);
                    let errs: Vec<f64> = REFERENCE_BLOCK_PARAMS
                        .iter()
                        .filter_map(|&(name, want)| report.get(name).map(|got| (got as f64 / want as f64 - 1.0).abs()))
                        .collect();
                    let mean_block_error = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
                    let total_error = (report.total as f64 / reference_total as f64 - 1.0).abs();
                    rows.push(ReconcileRow { f_k, f_v, tcn_kernel, attention_bias, report, mean_block_error, total_error });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        a.mean_block_error.total_cmp(&b.mean_block_error).then(a.total_error.total_cmp(&b.total_error))
    });
    rows
}
