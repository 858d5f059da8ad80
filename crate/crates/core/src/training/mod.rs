//! Batch-hard triplet training with Adam and a three-phase 1-cycle schedule.

mod loss;
mod optim;
mod trainer;

pub use loss::{batch_hard_triplet_loss, check_labels, mine_batch_hard, TripletLoss};
pub use optim::{adam_step, one_cycle_lr, AdamHyper, AdamState};
pub use trainer::{
    batch_seed, load_checkpoint, save_checkpoint, train, train_step, Checkpoint, MetricRow, StepStats, TrainOptions,
    TrainOutcome, CHECKPOINT_KIND, METRICS_HEADER,
};

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::skeleton::SamplerConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    pub total_iters: usize,
    /// Fractions of the schedule spent warming up, cooling down and annealing.
    pub phases: [f64; 3],
    pub sampler: SamplerConfig,
    pub adam: AdamHyper,
    pub seed: u64,
    /// Metrics rows are written every `log_every` iterations.
    pub log_every: usize,
    /// Checkpoints are written every `checkpoint_every` iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            weight_decay: 2e-5,
            lr_init: 1e-5,
            lr_max: 1e-3,
            lr_final: 1e-8,
            total_iters: 10_000,
            phases: [0.3, 0.3, 0.4],
            sampler: SamplerConfig::default(),
            adam: AdamHyper::default(),
            seed: 0,
            log_every: 10,
            checkpoint_every: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.margin >= 0.0) {
            return bad(format!("margin {} must be non-negative", self.margin));
        }
        if !(self.lr_init > 0.0 && self.lr_max > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if self.phases.iter().any(|&f| !(f >= 0.0)) || (self.phases.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("phase fractions {:?} must be non-negative and sum to 1", self.phases));
        }
        if self.total_iters == 0 {
            return bad("total_iters must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.sampler.validate()
    }

    pub fn to_kv(&self) -> String {
        let s = &self.sampler;
        format!(
            "margin={}\nweight_decay={}\nlr_init={}\nlr_max={}\nlr_final={}\ntotal_iters={}\nphases={},{},{}\n\
             p={}\nk={}\ncrop_len={}\nmirror_prob={}\nsigma_joint={}\nsigma_seq={}\nbeta1={}\nbeta2={}\neps={}\n\
             seed={}\nlog_every={}\ncheckpoint_every={}\n",
            self.margin,
            self.weight_decay,
            self.lr_init,
            self.lr_max,
            self.lr_final,
            self.total_iters,
            self.phases[0],
            self.phases[1],
            self.phases[2],
            s.p,
            s.k,
            s.crop_len,
            s.mirror_prob,
            s.sigma_joint,
            s.sigma_seq,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.seed,
            self.log_every,
            self.checkpoint_every
        )
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn apply_kv(mut self, kv: &BTreeMap<String, String>) -> Result<Self> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for training key `{k}`")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "margin" => self.margin = num(k, v)?,
                "weight_decay" => self.weight_decay = num(k, v)?,
                "lr_init" => self.lr_init = num(k, v)?,
                "lr_max" => self.lr_max = num(k, v)?,
                "lr_final" => self.lr_final = num(k, v)?,
                "total_iters" => self.total_iters = num(k, v)?,
                "phases" => {
                    let f: Vec<f64> = v.split(',').map(|x| num(k, x)).collect::<Result<_>>()?;
                    self.phases = f
                        .try_into()
                        .map_err(|_| Error::Config(format!("phases needs three fractions, got `{v}`")))?;
                }
                "p" => self.sampler.p = num(k, v)?,
                "k" => self.sampler.k = num(k, v)?,
                "crop_len" => self.sampler.crop_len = num(k, v)?,
                "mirror_prob" => self.sampler.mirror_prob = num(k, v)?,
                "sigma_joint" => self.sampler.sigma_joint = num(k, v)?,
                "sigma_seq" => self.sampler.sigma_seq = num(k, v)?,
                "beta1" => self.adam.beta1 = num(k, v)?,
                "beta2" => self.adam.beta2 = num(k, v)?,
                "eps" => self.adam.eps = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "log_every" => self.log_every = num(k, v)?,
                "checkpoint_every" => self.checkpoint_every = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown training key `{k}`"))),
            }
        }
        self.validate()?;
        Ok(self)
    }
}
