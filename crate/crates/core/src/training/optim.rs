use std::f64::consts::PI;

use super::TrainConfig;
use crate::ndtensor::{Precision, Tensor};
use crate::{Error, Result};

/// Three-phase 1-cycle learning rate at `step` of `total_iters`: linear warm-up
/// `lr_init → lr_max`, linear decay `lr_max → lr_init`, cosine anneal
/// `lr_init → lr_final`. Phase boundaries are rounded to whole steps.
pub fn one_cycle_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_iters;
    if step > total {
        return Err(Error::Contract(format!("step {step} beyond the {total}-step schedule")));
    }
    let [f1, f2, _] = cfg.phases;
    let e1 = (f1 * total as f64).round() as usize;
    let e2 = (((f1 + f2) * total as f64).round() as usize).clamp(e1, total);
    let lerp = |a: f64, b: f64, w: f64| a * (1.0 - w) + b * w;
    let lr = if e1 > 0 && step <= e1 {
        lerp(cfg.lr_init, cfg.lr_max, step as f64 / e1 as f64)
    } else if step <= e2 && e2 > e1 {
        lerp(cfg.lr_max, cfg.lr_init, (step - e1) as f64 / (e2 - e1) as f64)
    } else if total > e2 {
        let w = (step - e2) as f64 / (total - e2) as f64;
        cfg.lr_final + (cfg.lr_init - cfg.lr_final) * 0.5 * (1.0 + (PI * w).cos())
    } else {
        cfg.lr_final
    };
    Ok(lr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`θ ← θ − lr·wd·θ` before the moment step). Every updated value is rounded to
/// `precision`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
    precision: Precision,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::dim(format!("adam: parameter {i} has {} values, gradient {}", p.len(), g.len())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = precision.round(hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j]);
            v[j] = precision.round(hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j]);
            let decayed = *theta - lr * weight_decay * *theta;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
            *theta = precision.round(decayed - update);
        }
    }
    Ok(())
}
