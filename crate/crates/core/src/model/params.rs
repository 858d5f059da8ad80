use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::ndtensor::{RunningStats, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-b, b)`.
    Uniform(f64),
    Ones,
    Zeros,
}

fn push_bn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::Ones));
    out.push((format!("{prefix}.beta"), vec![c], Init::Zeros));
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, n_in: usize, n_out: usize, bias: bool) {
    let b = 1.0 / (n_in as f64).sqrt();
    out.push((format!("{prefix}.weight"), vec![n_in, n_out], Init::Uniform(b)));
    if bias {
        out.push((format!("{prefix}.bias"), vec![n_out], Init::Uniform(b)));
    }
}

fn push_conv(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c_in: usize, c_out: usize, kernel: usize) {
    let b = 1.0 / ((c_in * kernel) as f64).sqrt();
    out.push((format!("{prefix}.weight"), vec![c_out, c_in, kernel], Init::Uniform(b)));
    out.push((format!("{prefix}.bias"), vec![c_out], Init::Uniform(b)));
}

/// Every learnable tensor of `cfg` in registration order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    push_bn(&mut out, "input_bn", cfg.in_channels * cfg.joints);
    let mut c_in = cfg.in_channels;
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        let p = format!("block{i}");
        push_conv(&mut out, &format!("{p}.tcn.conv"), c_in, c, cfg.tcn_kernel);
        push_bn(&mut out, &format!("{p}.tcn.bn"), c);
        let dk = cfg.heads * cfg.head_dim_k(c);
        let dv = cfg.heads * cfg.head_dim_v(c);
        push_linear(&mut out, &format!("{p}.st.q"), c, dk, cfg.attention_bias);
        push_linear(&mut out, &format!("{p}.st.k"), c, dk, cfg.attention_bias);
        push_linear(&mut out, &format!("{p}.st.v"), c, dv, cfg.attention_bias);
        push_linear(&mut out, &format!("{p}.st.o"), dv, c, true);
        push_bn(&mut out, &format!("{p}.st.bn"), c);
        if c_in != c {
            push_conv(&mut out, &format!("{p}.res.conv"), c_in, c, 1);
            push_bn(&mut out, &format!("{p}.res.bn"), c);
        }
        c_in = c;
    }
    push_linear(&mut out, "fc", c_in, cfg.embedding_dim, false);
    out
}

/// Batchnorm buffers in forward order: input, then per block tcn, st and the
/// projected shortcut when present.
fn stats_layout(cfg: &ModelConfig) -> Vec<RunningStats> {
    let mut out = vec![RunningStats::new("input_bn", cfg.in_channels * cfg.joints)];
    let mut c_in = cfg.in_channels;
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        out.push(RunningStats::new(format!("block{i}.tcn.bn"), c));
        out.push(RunningStats::new(format!("block{i}.st.bn"), c));
        if c_in != c {
            out.push(RunningStats::new(format!("block{i}.res.bn"), c));
        }
        c_in = c;
    }
    out
}

/// Named parameters and batchnorm buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub(super) config: ModelConfig,
    pub(super) names: Vec<String>,
    pub(super) params: Vec<Tensor>,
    pub(super) stats: Vec<RunningStats>,
    pub(super) index: HashMap<String, usize>,
}

impl ParamStore {
    /// Fresh parameters: weights `U(-1/√fan_in, 1/√fan_in)`, batchnorm scale 1 and
    /// shift 0. Values are rounded to `f32` so they survive serialisation exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in param_layout(config) {
            let t = match init {
                Init::Uniform(b) => Tensor::from_fn(&shape, |_| rng.random_range(-b..b) as f32 as f64),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            params.push(t);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config: config.clone(), names, params, stats: stats_layout(config), index })
    }

    /// Rebuilds a store from saved tensors, checking names and shapes against the
    /// layout of `config`.
    pub fn from_parts(config: &ModelConfig, params: Vec<(String, Tensor)>, stats: Vec<RunningStats>) -> Result<Self> {
        let mut store = Self::init(config, 0)?;
        if params.len() != store.params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", store.params.len(), params.len())));
        }
        for (i, (name, t)) in params.into_iter().enumerate() {
            if name != store.names[i] || t.shape() != store.params[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    store.names[i],
                    store.params[i].shape(),
                    t.shape()
                )));
            }
            store.params[i] = t;
        }
        if stats.len() != store.stats.len() {
            return Err(Error::Format(format!("expected {} buffers, found {}", store.stats.len(), stats.len())));
        }
        for (have, want) in stats.iter().zip(&store.stats) {
            if have.name != want.name || have.groups() != want.groups() {
                return Err(Error::Format(format!("buffer {} does not match {}", have.name, want.name)));
            }
        }
        store.stats = stats;
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Learnable scalars (running statistics excluded).
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

impl ParamStore {
    /// Adds `model.*` header keys, `param/*` tensors and `buffer/*` statistics.
    pub fn write_to_container(&self, c: &mut crate::container::Container) {
        for line in self.config.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                c.header.insert(format!("model.{k}"), v.to_string());
            }
        }
        for (name, t) in self.names.iter().zip(&self.params) {
            c.entries.push((format!("param/{name}"), t.clone()));
        }
        for s in &self.stats {
            c.header.insert(format!("buffer.{}.tracked", s.name), s.tracked.to_string());
            c.entries.push((format!("buffer/{}/mean", s.name), Tensor::new(vec![s.groups()], s.mean.clone()).expect("groups > 0")));
            c.entries.push((format!("buffer/{}/var", s.name), Tensor::new(vec![s.groups()], s.var.clone()).expect("groups > 0")));
        }
    }

    /// Inverse of [`ParamStore::write_to_container`].
    pub fn read_from_container(c: &crate::container::Container) -> Result<Self> {
        let kv: Vec<String> = c
            .header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| format!("{k}={v}")))
            .collect();
        if kv.is_empty() {
            return Err(Error::Format("file carries no model configuration".into()));
        }
        let config = ModelConfig::from_kv(&kv.join("\n"))?;
        let template = Self::init(&config, 0)?;
        let mut params = Vec::with_capacity(template.names.len());
        for name in &template.names {
            let t = c.get(&format!("param/{name}")).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            params.push((name.clone(), t.clone()));
        }
        let mut stats = template.stats.clone();
        for s in &mut stats {
            let (name, groups) = (s.name.clone(), s.groups());
            let fetch = |what: &str| -> Result<Vec<f64>> {
                let key = format!("buffer/{name}/{what}");
                let t = c.get(&key).ok_or_else(|| Error::Format(format!("missing buffer {key}")))?;
                if t.len() != groups {
                    return Err(Error::Format(format!("buffer {key} has {} values, expected {groups}", t.len())));
                }
                Ok(t.data().to_vec())
            };
            s.mean = fetch("mean")?;
            s.var = fetch("var")?;
            s.tracked = c.header_value(&format!("buffer.{}.tracked", s.name))?;
        }
        Self::from_parts(&config, params, stats)
    }

    /// Writes a model-only file (kind `MODL`).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = crate::container::Container::new(MODEL_KIND);
        self.write_to_container(&mut c);
        c.save(path)
    }

    /// Loads the model part of a model file or a training checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let c = crate::container::Container::read_from(&mut std::io::BufReader::new(file))?;
        Self::read_from_container(&c)
    }
}

/// Container kind tag of model-only files.
pub const MODEL_KIND: [u8; 4] = *b"MODL";
