use super::ParamStore;
use crate::ndtensor::{BnLayout, BnMode, Precision, RunningStats, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: Var,
    pub beta: Var,
}

/// Temporal convolution followed by Mish and batchnorm.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    /// `[C_out, C_in, L]`.
    pub weight: Var,
    pub bias: Option<Var>,
    pub bn: BnParams,
}

/// One spatial self-attention module. Projection weights are `[n_in, n_out]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Var,
    pub bq: Option<Var>,
    pub wk: Var,
    pub bk: Option<Var>,
    pub wv: Var,
    pub bv: Option<Var>,
    pub wo: Var,
    pub bo: Option<Var>,
    pub bn: BnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub tcn: ConvParams,
    pub st: AttentionParams,
    /// Projected shortcut, used when the block changes the channel count.
    pub shortcut: Option<ConvParams>,
}

/// Data normalisation: batchnorm with one group per (channel, joint), reduced over
/// batch and time.
pub fn input_norm(tape: &mut Tape, x: Var, bn: &BnParams, stats: &mut RunningStats, mode: BnMode) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] * s[3] != stats.groups() {
        return Err(Error::dim(format!("input norm with {} groups cannot take {s:?}", stats.groups())));
    }
    tape.batchnorm(x, bn.gamma, bn.beta, stats, mode, BnLayout::PerChannelJoint)
}

/// `batchnorm(mish(temporal_conv(x)))` at stride 1.
pub fn tcn_forward(tape: &mut Tape, x: Var, p: &ConvParams, stats: &mut RunningStats, mode: BnMode) -> Result<Var> {
    let y = tape.temporal_conv(x, p.weight, p.bias, 1)?;
    let y = tape.mish(y);
    tape.batchnorm(y, p.bn.gamma, p.bn.beta, stats, mode, BnLayout::PerChannel)
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Multi-head self-attention over the joints of every frame, then Mish and
/// batchnorm. `[B, C_in, T, V] → [B, d_model, T, V]`.
pub fn spatial_attention_forward(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<Var> {
    let &[b, c_in, t, v] = tape.shape(x) else {
        return Err(Error::dim(format!("spatial attention needs [B,C,T,V], got {:?}", tape.shape(x))));
    };
    let h = p.heads;
    let (sq, sk, sv, so) =
        (tape.shape(p.wq).to_vec(), tape.shape(p.wk).to_vec(), tape.shape(p.wv).to_vec(), tape.shape(p.wo).to_vec());
    let dk = sq.get(1).copied().unwrap_or(0);
    let dv = sv.get(1).copied().unwrap_or(0);
    let consistent = sq.len() == 2
        && sq[0] == c_in
        && sk == sq
        && sv.len() == 2
        && sv[0] == c_in
        && so.len() == 2
        && so[0] == dv
        && h > 0
        && dk % h == 0
        && dv % h == 0;
    if !consistent {
        return Err(Error::dim(format!(
            "attention weights q{sq:?} k{sk:?} v{sv:?} o{so:?} with {h} heads do not fit {c_in} input channels"
        )));
    }
    let (hk, hv) = (dk / h, dv / h);
    let xt = tape.permute(x, &[0, 2, 3, 1])?;
    let q = project(tape, xt, p.wq, p.bq)?;
    let q = tape.reshape(q, &[b, t, v, h, hk])?;
    let q = tape.permute(q, &[0, 1, 3, 2, 4])?;
    let k = project(tape, xt, p.wk, p.bk)?;
    let k = tape.reshape(k, &[b, t, v, h, hk])?;
    let k = tape.permute(k, &[0, 1, 3, 4, 2])?;
    let val = project(tape, xt, p.wv, p.bv)?;
    let val = tape.reshape(val, &[b, t, v, h, hv])?;
    let val = tape.permute(val, &[0, 1, 3, 2, 4])?;
    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, 1.0 / (hk as f64).sqrt());
    let attn = tape.softmax(scores, 4)?;
    let heads = tape.matmul(attn, val)?;
    let heads = tape.permute(heads, &[0, 1, 3, 2, 4])?;
    let merged = tape.reshape(heads, &[b, t, v, dv])?;
    let out = project(tape, merged, p.wo, p.bo)?;
    let out = tape.permute(out, &[0, 3, 1, 2])?;
    let out = tape.mish(out);
    tape.batchnorm(out, p.bn.gamma, p.bn.beta, stats, mode, BnLayout::PerChannel)
}

/// `ST(TCN(x))` plus the identity or projected shortcut. `stats` holds the tcn, st
/// and (when projecting) shortcut buffers in that order.
pub fn block_forward(tape: &mut Tape, x: Var, p: &BlockParams, stats: &mut [RunningStats], mode: BnMode) -> Result<Var> {
    let want = 2 + p.shortcut.is_some() as usize;
    if stats.len() != want {
        return Err(Error::dim(format!("block needs {want} batchnorm buffers, got {}", stats.len())));
    }
    let (tcn_stats, rest) = stats.split_at_mut(1);
    let (st_stats, res_stats) = rest.split_at_mut(1);
    let f = tcn_forward(tape, x, &p.tcn, &mut tcn_stats[0], mode)?;
    let f = spatial_attention_forward(tape, f, &p.st, &mut st_stats[0], mode)?;
    let shortcut = match &p.shortcut {
        Some(sc) => tcn_forward(tape, x, sc, &mut res_stats[0], mode)?,
        None => {
            if tape.shape(f) != tape.shape(x) {
                return Err(Error::dim(format!(
                    "identity shortcut needs equal shapes, got {:?} and {:?}",
                    tape.shape(x),
                    tape.shape(f)
                )));
            }
            x
        }
    };
    tape.add(f, shortcut)
}

/// Result of [`model_forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, embedding_dim]`.
    pub embedding: Var,
    /// Tape handles of the store's parameters, in store order.
    pub params: Vec<Var>,
}

fn forward_impl(
    tape: &mut Tape,
    store_params: (&super::ModelConfig, &std::collections::HashMap<String, usize>, &[Tensor]),
    stats: &mut [RunningStats],
    x: &Tensor,
    mode: BnMode,
) -> Result<Forward> {
    let (cfg, index, tensors) = store_params;
    let &[b, c, t, v] = x.shape() else {
        return Err(Error::dim(format!("model input must be [B,C,T,V], got {:?}", x.shape())));
    };
    if c != cfg.in_channels || v != cfg.joints {
        return Err(Error::dim(format!(
            "model expects {} channels and {} joints, got {:?}",
            cfg.in_channels,
            cfg.joints,
            x.shape()
        )));
    }
    if t < cfg.tcn_kernel {
        return Err(Error::InsufficientFrames { needed: cfg.tcn_kernel, got: t });
    }
    if mode == BnMode::Train && b < 2 {
        return Err(Error::Contract("train-mode forward needs a batch of at least 2 (batch statistics)".into()));
    }
    let params: Vec<Var> = tensors
        .iter()
        .map(|p| match mode {
            BnMode::Train => tape.param(p.clone()),
            BnMode::Eval => tape.constant(p.clone()),
        })
        .collect();
    let var = |name: &str| -> Var { params[index[name]] };
    let opt = |name: &str| -> Option<Var> { index.get(name).map(|&i| params[i]) };
    let bn = |prefix: &str| BnParams { gamma: var(&format!("{prefix}.gamma")), beta: var(&format!("{prefix}.beta")) };

    let input = tape.constant(x.clone());
    let (first, mut rest) = stats.split_first_mut().ok_or_else(|| Error::dim("missing batchnorm buffers"))?;
    let mut h = input_norm(tape, input, &bn("input_bn"), first, mode)?;
    for i in 0..cfg.block_channels.len() {
        let p = format!("block{i}");
        let conv = |prefix: String| ConvParams {
            weight: var(&format!("{prefix}.conv.weight")),
            bias: opt(&format!("{prefix}.conv.bias")),
            bn: bn(&format!("{prefix}.bn")),
        };
        let lin = |n: &str| (var(&format!("{p}.st.{n}.weight")), opt(&format!("{p}.st.{n}.bias")));
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        let shortcut = index.contains_key(&format!("{p}.res.conv.weight")).then(|| conv(format!("{p}.res")));
        let bp = BlockParams {
            tcn: conv(format!("{p}.tcn")),
            st: AttentionParams { heads: cfg.heads, wq, bq, wk, bk, wv, bv, wo, bo, bn: bn(&format!("{p}.st.bn")) },
            shortcut,
        };
        let n = 2 + shortcut.is_some() as usize;
        let (mine, tail) = std::mem::take(&mut rest).split_at_mut(n);
        rest = tail;
        h = block_forward(tape, h, &bp, mine, mode)?;
    }
    let pooled = tape.reduce_mean(h, &[2, 3])?;
    let embedding = tape.matmul(pooled, var("fc.weight"))?;
    Ok(Forward { embedding, params })
}

/// Full forward pass on a `[B, C, T, V]` batch. Train mode tracks gradients for
/// every parameter and updates the running statistics in `store`.
pub fn model_forward(tape: &mut Tape, store: &mut ParamStore, x: &Tensor, mode: BnMode) -> Result<Forward> {
    forward_impl(tape, (&store.config, &store.index, &store.params), &mut store.stats, x, mode)
}

/// Eval-mode embeddings `[B, embedding_dim]` of a batch; `store` is not modified.
pub fn embed(store: &ParamStore, x: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut tape = Tape::new(precision);
    let mut stats = store.stats.clone();
    let f = forward_impl(&mut tape, (&store.config, &store.index, &store.params), &mut stats, x, BnMode::Eval)?;
    Ok(tape.value(f.embedding).clone())
}
