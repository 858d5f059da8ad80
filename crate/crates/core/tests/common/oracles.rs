//! Loop-level reference implementations shared by the test targets.

use gaittr::model::{spatial_attention_forward, AttentionParams, BnParams};
use gaittr::ndtensor::{BnMode, Precision, RunningStats, Tape, Tensor, BN_EPS};

use super::{random_tensor, rng};

pub fn mish(x: f64) -> f64 {
    x * (x.exp().ln_1p()).tanh()
}

pub struct Attn {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Attn {
    pub fn random(seed: u64, c_in: usize, d_model: usize, heads: usize, hk: usize, hv: usize) -> Self {
        let mut r = rng(seed);
        let (dk, dv) = (heads * hk, heads * hv);
        Attn {
            heads,
            wq: random_tensor(&mut r, &[c_in, dk], 0.8),
            bq: random_tensor(&mut r, &[dk], 0.3),
            wk: random_tensor(&mut r, &[c_in, dk], 0.8),
            bk: random_tensor(&mut r, &[dk], 0.3),
            wv: random_tensor(&mut r, &[c_in, dv], 0.8),
            bv: random_tensor(&mut r, &[dv], 0.3),
            wo: random_tensor(&mut r, &[dv, d_model], 0.8),
            bo: random_tensor(&mut r, &[d_model], 0.3),
            gamma: Tensor::from_fn(&[d_model], |i| 1.0 + 0.1 * i as f64),
            beta: Tensor::from_fn(&[d_model], |i| 0.05 * i as f64),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionParams {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        AttentionParams {
            heads: self.heads,
            wq: c(&self.wq),
            bq: Some(c(&self.bq)),
            wk: c(&self.wk),
            bk: Some(c(&self.bk)),
            wv: c(&self.wv),
            bv: Some(c(&self.bv)),
            wo: c(&self.wo),
            bo: Some(c(&self.bo)),
            bn: BnParams { gamma: c(&self.gamma), beta: c(&self.beta) },
        }
    }

    pub fn run(&self, x: &Tensor, stats: &mut RunningStats, mode: BnMode) -> Tensor {
        let mut tape = Tape::new(Precision::Double);
        let p = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = spatial_attention_forward(&mut tape, xv, &p, stats, mode).unwrap();
        tape.value(y).clone()
    }

    /// Per-frame, per-head loops followed by Mish and train-mode batchnorm.
    pub fn naive(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (b, c_in, t, v) = (s[0], s[1], s[2], s[3]);
        let h = self.heads;
        let (dk, dv, dm) = (self.wq.shape()[1], self.wv.shape()[1], self.wo.shape()[1]);
        let (hk, hv) = (dk / h, dv / h);
        let lin = |w: &Tensor, bias: &Tensor, bi: usize, ti: usize, j: usize, o: usize| -> f64 {
            bias.data()[o] + (0..c_in).map(|c| x.at(&[bi, c, ti, j]) * w.at(&[c, o])).sum::<f64>()
        };
        let mut pre = vec![0.0; b * dm * t * v];
        for bi in 0..b {
            for ti in 0..t {
                let mut merged = vec![vec![0.0; dv]; v];
                for hh in 0..h {
                    for i in 0..v {
                        let q: Vec<f64> = (0..hk).map(|e| lin(&self.wq, &self.bq, bi, ti, i, hh * hk + e)).collect();
                        let scores: Vec<f64> = (0..v)
                            .map(|j| {
                                (0..hk).map(|e| q[e] * lin(&self.wk, &self.bk, bi, ti, j, hh * hk + e)).sum::<f64>()
                                    / (hk as f64).sqrt()
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                        for j in 0..v {
                            let a = (scores[j] - m).exp() / z;
                            for e in 0..hv {
                                merged[i][hh * hv + e] += a * lin(&self.wv, &self.bv, bi, ti, j, hh * hv + e);
                            }
                        }
                    }
                }
                for i in 0..v {
                    for o in 0..dm {
                        let y = self.bo.data()[o] + (0..dv).map(|d| merged[i][d] * self.wo.at(&[d, o])).sum::<f64>();
                        pre[((bi * dm + o) * t + ti) * v + i] = mish(y);
                    }
                }
            }
        }
        let n = (b * t * v) as f64;
        let mut out = pre.clone();
        for o in 0..dm {
            let idx: Vec<usize> =
                (0..b).flat_map(|bi| (0..t * v).map(move |k| (bi * dm + o) * t * v + k)).collect();
            let mean = idx.iter().map(|&i| pre[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (pre[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &idx {
                out[i] = self.gamma.data()[o] * (pre[i] - mean) / (var + BN_EPS).sqrt() + self.beta.data()[o];
            }
        }
        Tensor::new(vec![b, dm, t, v], out).unwrap()
    }
}

/// Five nested loops over `[C_in, T, V]` with zero padding.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (c_in, tt, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, l) = (w.shape()[0], w.shape()[2]);
    let pad = (l - 1) / 2;
    let t_out = tt.div_ceil(stride);
    let mut out = vec![0.0; c_out * t_out * v];
    for c in 0..c_out {
        for to in 0..t_out {
            for j in 0..v {
                let mut acc = bias.data()[c];
                for ci in 0..c_in {
                    for tau in 0..l {
                        let src = (to * stride + tau) as isize - pad as isize;
                        if src >= 0 && (src as usize) < tt {
                            acc += w.at(&[c, ci, tau]) * x.at(&[ci, src as usize, j]);
                        }
                    }
                }
                out[(c * t_out + to) * v + j] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, t_out, v], out).unwrap()
}
