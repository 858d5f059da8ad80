//! P×K batch sampling for metric learning.

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    augment_mirror, augment_noise, build_multi_input, random_crop, GaitDataset, GaitSampleMeta,
    MULTI_INPUT_CHANNELS, NUM_JOINTS,
};
use crate::ndtensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Subjects per batch.
    pub p: usize,
    /// Sequences per subject.
    pub k: usize,
    pub crop_len: usize,
    pub mirror_prob: f64,
    pub sigma_joint: f64,
    pub sigma_seq: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 4, k: 64, crop_len: 60, mirror_prob: 0.5, sigma_joint: 0.01, sigma_seq: 0.05 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 {
            return Err(Error::Config(format!("batch shape ({}, {}) must be positive", self.p, self.k)));
        }
        if self.crop_len < 3 {
            return Err(Error::Config(format!("crop length {} is below 3 frames", self.crop_len)));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config(format!("mirror probability {} outside [0, 1]", self.mirror_prob)));
        }
        if !(self.sigma_joint >= 0.0 && self.sigma_seq >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training samples grouped by subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainPool {
    by_subject: BTreeMap<u32, Vec<usize>>,
}

impl TrainPool {
    /// Samples of training subjects (per the dataset split) accepted by `filter`.
    pub fn new(dataset: &GaitDataset, filter: impl Fn(&GaitSampleMeta) -> bool) -> Self {
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if dataset.split.is_train(s.meta.subject_id) && filter(&s.meta) {
                by_subject.entry(s.meta.subject_id).or_default().push(i);
            }
        }
        Self { by_subject }
    }

    pub fn from_split(dataset: &GaitDataset) -> Self {
        Self::new(dataset, |_| true)
    }

    pub fn num_subjects(&self) -> usize {
        self.by_subject.len()
    }

    pub fn num_samples(&self) -> usize {
        self.by_subject.values().map(Vec::len).sum()
    }
}

/// A training batch: inputs `[p·k, 10, crop_len, 17]` and subject labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<u32>,
}

/// Draws `p` distinct subjects and `k` sequences of each (with replacement only
/// when a subject has fewer than `k`), augments every item with its own RNG stream
/// and builds the multi-input features. Items are prepared in parallel; the result
/// depends only on `rng`.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &GaitDataset,
    pool: &TrainPool,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Batch> {
    cfg.validate()?;
    if pool.num_subjects() < cfg.p {
        return Err(Error::Config(format!(
            "batch needs {} subjects, training pool has {}",
            cfg.p,
            pool.num_subjects()
        )));
    }
    let subjects: Vec<(&u32, &Vec<usize>)> = pool.by_subject.iter().collect();
    let mut items = Vec::with_capacity(cfg.batch_size());
    for si in index::sample(rng, subjects.len(), cfg.p) {
        let (&subject, samples) = subjects[si];
        if samples.len() >= cfg.k {
            for i in index::sample(rng, samples.len(), cfg.k) {
                items.push((subject, samples[i], rng.next_u64()));
            }
        } else {
            for _ in 0..cfg.k {
                let &s = samples.choose(rng).expect("pool subjects are non-empty");
                items.push((subject, s, rng.next_u64()));
            }
        }
    }
    let features = items
        .par_iter()
        .map(|&(_, idx, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut seq = dataset.samples[idx].clone();
            if r.random_bool(cfg.mirror_prob) {
                seq = augment_mirror(&seq);
            }
            seq = augment_noise(&seq, cfg.sigma_joint, cfg.sigma_seq, &mut r);
            seq = random_crop(&seq, cfg.crop_len, &mut r);
            build_multi_input(&seq)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(items.len() * MULTI_INPUT_CHANNELS * cfg.crop_len * NUM_JOINTS);
    for f in features {
        data.extend_from_slice(f.tensor().data());
    }
    let input = Tensor::new(vec![items.len(), MULTI_INPUT_CHANNELS, cfg.crop_len, NUM_JOINTS], data)?;
    Ok(Batch { input, labels: items.iter().map(|it| it.0).collect() })
}
