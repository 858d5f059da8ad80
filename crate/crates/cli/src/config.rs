//! `key=value` config files with `[section]` headers.

use std::collections::BTreeMap;
use std::path::Path;

use gaittr::model::ModelConfig;
use gaittr::skeleton::SynthConfig;
use gaittr::training::TrainConfig;

use crate::UsageError;

pub const SECTIONS: [&str; 5] = ["data", "synth", "model", "train", "eval"];

pub type Section = BTreeMap<String, String>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub sections: BTreeMap<String, Section>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, UsageError> {
        let mut cfg = RunConfig::default();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_ascii_lowercase();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(UsageError(format!("{origin}:{}: unknown section [{name}]; expected one of {SECTIONS:?}", n + 1)));
                }
                current = Some(name);
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(UsageError(format!("{origin}:{}: `{line}` is not key=value", n + 1)));
            };
            let Some(section) = &current else {
                return Err(UsageError(format!("{origin}:{}: `{line}` appears before any [section]", n + 1)));
            };
            cfg.set(section, k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides(&mut self, items: &[String]) -> Result<(), UsageError> {
        for item in items {
            let parsed = item.split_once('=').and_then(|(path, v)| path.split_once('.').map(|(s, k)| (s, k, v)));
            let Some((s, k, v)) = parsed else {
                return Err(UsageError(format!("--set expects section.key=value, got `{item}`")));
            };
            let s = s.trim().to_ascii_lowercase();
            if !SECTIONS.contains(&s.as_str()) {
                return Err(UsageError(format!("unknown section `{s}` in `{item}`; expected one of {SECTIONS:?}")));
            }
            self.set(&s, k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn section(&self, name: &str) -> Section {
        self.sections.get(name).cloned().unwrap_or_default()
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(String::as_str)
    }

    /// Rejects keys outside `allowed` in `section`.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<(), UsageError> {
        if let Some(s) = self.sections.get(section) {
            if let Some(k) = s.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(UsageError(format!("unknown {section} key `{k}`; expected one of {allowed:?}")));
            }
        }
        Ok(())
    }
}

/// Writes `[name]` and its `key=value` lines.
pub fn render_section(name: &str, kv: &str) -> String {
    format!("[{name}]\n{}\n", kv.trim_end())
}

pub const DATA_KEYS: [(&str, &str); 5] = [
    ("root", "dataset directory (required)"),
    ("manifest", "<root>/manifest.tsv"),
    ("split", "LT with more than 74 subjects, else train:1-<n/2>; also ST, MT, train:<ids>, closed:<ids>"),
    ("precision", "single"),
    ("format", "gttr"),
];

pub const EVAL_KEYS: [(&str, &str); 2] = [("frames", "full sequences"), ("lengths", "10,20,30,40,50,60")];

pub fn synth_kv(c: &SynthConfig) -> String {
    let views: Vec<String> = c.views.iter().map(u16::to_string).collect();
    format!(
        "subjects={}\nnm={}\nbg={}\ncl={}\nviews={}\nframes={}\nseed=(required)\namplitude_gap={}\nnoise_px={}\n",
        c.n_subjects,
        c.counts.nm,
        c.counts.bg,
        c.counts.cl,
        views.join(","),
        c.frames,
        c.amplitude_gap,
        c.noise_px
    )
}

fn listed(keys: &[(&str, &str)]) -> String {
    keys.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Help text listing every config key of the given sections with its default.
pub fn keys_help(sections: &[&str]) -> String {
    let mut s = String::from("Config keys (file sections or --set section.key=value; flags override both):\n\n");
    for &name in sections {
        let body = match name {
            "data" => listed(&DATA_KEYS),
            "eval" => listed(&EVAL_KEYS),
            "synth" => synth_kv(&SynthConfig::default()),
            "model" => ModelConfig::full().to_kv() + "(variant=small sets block_channels=64,64,128)\n",
            "train" => TrainConfig::default().to_kv(),
            _ => String::new(),
        };
        s.push_str(&render_section(name, &body));
    }
    s
}
