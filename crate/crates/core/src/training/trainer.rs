use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, batch_hard_triplet_loss, one_cycle_lr, AdamState, TrainConfig};
use crate::container::Container;
use crate::model::{model_forward, ModelConfig, ParamStore};
use crate::ndtensor::{BnMode, Precision, Tape, Tensor};
use crate::skeleton::{sample_batch, Batch, GaitDataset, TrainPool};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: [u8; 4] = *b"CKPT";
pub const METRICS_HEADER: &str = "iter,lr,loss,active_frac";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub active_frac: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    /// Number of completed iterations.
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub active_frac: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.iter, self.lr, self.loss, self.active_frac)
    }
}

/// Seed of the batch drawn at `iter`; depends only on the run seed and the index.
pub fn batch_seed(seed: u64, iter: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(iter as u64))
}

/// Forward, loss, backward and one Adam update on a prepared batch. Parameters are
/// left untouched when the loss is not finite.
pub fn train_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    batch: &Batch,
    lr: f64,
    cfg: &TrainConfig,
    precision: Precision,
) -> Result<StepStats> {
    let stats_before = store.stats().to_vec();
    let mut tape = Tape::new(precision);
    let fwd = model_forward(&mut tape, store, &batch.input, BnMode::Train)?;
    let tl = batch_hard_triplet_loss(&mut tape, fwd.embedding, &batch.labels, cfg.margin)?;
    let loss = tape.value(tl.loss).data()[0];
    if !loss.is_finite() {
        store.stats_mut().clone_from_slice(&stats_before);
        return Err(Error::NonFinite { iter: adam.step as usize, batch_seed: 0 });
    }
    tape.backward(tl.loss)?;
    let grads: Vec<&[f64]> =
        fwd.params.iter().map(|&p| tape.grad(p).ok_or_else(|| Error::Contract("missing gradient".into()))).collect::<Result<_>>()?;
    adam_step(store.params_mut(), &grads, adam, lr, cfg.weight_decay, cfg.adam, precision)?;
    Ok(StepStats { loss, active_frac: tl.active_frac })
}

/// Complete training state after `iter` iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub adam: AdamState,
    pub iter: usize,
    pub train: TrainConfig,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut c = Container::new(CHECKPOINT_KIND);
    ckpt.store.write_to_container(&mut c);
    for line in ckpt.train.to_kv().lines() {
        if let Some((k, v)) = line.split_once('=') {
            c.header.insert(format!("train.{k}"), v.to_string());
        }
    }
    c.header.insert("iter".into(), ckpt.iter.to_string());
    c.header.insert("adam.step".into(), ckpt.adam.step.to_string());
    for (i, name) in ckpt.store.names().iter().enumerate() {
        let shape = ckpt.store.params()[i].shape().to_vec();
        c.entries.push((format!("adam.m/{name}"), Tensor::new(shape.clone(), ckpt.adam.m[i].clone())?));
        c.entries.push((format!("adam.v/{name}"), Tensor::new(shape, ckpt.adam.v[i].clone())?));
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path, CHECKPOINT_KIND)?;
    let store = ParamStore::read_from_container(&c)?;
    let kv = c
        .header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let train = TrainConfig::default().apply_kv(&kv)?;
    let mut adam = AdamState::new(store.params());
    adam.step = c.header_value("adam.step")?;
    for (i, name) in store.names().iter().enumerate() {
        for (slot, what) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
            let t = c.get(&format!("adam.{what}/{name}")).ok_or_else(|| Error::Format(format!("missing adam.{what}/{name}")))?;
            if t.len() != slot.len() {
                return Err(Error::Format(format!("adam.{what}/{name} has the wrong size")));
            }
            slot.copy_from_slice(t.data());
        }
    }
    Ok(Checkpoint { store, adam, iter: c.header_value("iter")?, train })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv`, periodic checkpoints and `model.gttr`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub precision: Precision,
    /// Stop after this many iterations of the schedule (the schedule itself still
    /// spans `total_iters`).
    pub stop_after: Option<usize>,
}

impl TrainOptions {
    pub fn single_precision() -> Self {
        Self { precision: Precision::Single, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub adam: AdamState,
    /// One row per iteration run in this call.
    pub metrics: Vec<MetricRow>,
    /// Completed iterations of the schedule.
    pub iter: usize,
}

fn append_metrics(path: &Path, rows: &[MetricRow], fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs the training schedule on the training subjects of `dataset` (normalised
/// here). The model is initialised from `cfg.seed` unless resuming; the batch of
/// iteration `i` is drawn from [`batch_seed`]`(cfg.seed, i)`, so a resumed run
/// reproduces an uninterrupted one bit for bit.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &GaitDataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut store, mut adam, start) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.store.config() != model_cfg {
                return Err(Error::Config(format!("{} was trained with a different model configuration", path.display())));
            }
            (ck.store, ck.adam, ck.iter)
        }
        None => {
            let store = ParamStore::init(model_cfg, cfg.seed)?;
            let adam = AdamState::new(store.params());
            (store, adam, 0)
        }
    };
    if start > cfg.total_iters {
        return Err(Error::Config(format!("checkpoint at iteration {start} is past the {}-step schedule", cfg.total_iters)));
    }
    let data = dataset.normalized()?;
    let pool = TrainPool::from_split(&data);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.csv"));
    let mut fresh_metrics = opts.resume.is_none() || metrics_path.as_ref().is_some_and(|p| !p.exists());
    let end = opts.stop_after.map_or(cfg.total_iters, |s| s.min(cfg.total_iters)).max(start);
    let mut metrics = Vec::with_capacity(end - start);
    let mut unlogged = 0;
    for iter in start..end {
        let lr = one_cycle_lr(iter, cfg)?;
        let seed = batch_seed(cfg.seed, iter);
        let batch = sample_batch(&data, &pool, &cfg.sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let stats = match train_step(&mut store, &mut adam, &batch, lr, cfg, opts.precision) {
            Err(Error::NonFinite { .. }) => {
                log::error!("non-finite loss at iteration {iter}; batch seed {seed:#018x} reproduces the batch");
                return Err(Error::NonFinite { iter, batch_seed: seed });
            }
            other => other?,
        };
        let row = MetricRow { iter: iter + 1, lr, loss: stats.loss, active_frac: stats.active_frac };
        metrics.push(row);
        unlogged += 1;
        let done = iter + 1;
        if done % cfg.log_every == 0 || done == end {
            log::info!("iter {done}/{} lr {lr:.3e} loss {:.5} active {:.3}", cfg.total_iters, stats.loss, stats.active_frac);
            if let Some(p) = &metrics_path {
                append_metrics(p, &metrics[metrics.len() - unlogged..], fresh_metrics)?;
                fresh_metrics = false;
            }
            unlogged = 0;
        }
        if let Some(dir) = &opts.out_dir {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == end {
                let ck = Checkpoint { store: store.clone(), adam: adam.clone(), iter: done, train: cfg.clone() };
                save_checkpoint(&dir.join(format!("ckpt-{done:06}.gttr")), &ck)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        store.save(&dir.join("model.gttr"))?;
    }
    Ok(TrainOutcome { store, adam, metrics, iter: end })
}
