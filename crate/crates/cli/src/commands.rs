use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gaittr::evaluation::{
    evaluate, limited_frame_curve, load_embeddings, rank1_table, save_embeddings, split_embeddings,
};
use gaittr::model::{count_flops, count_params, reconcile_params, ModelConfig, ParamStore, REFERENCE_BLOCK_PARAMS};
use gaittr::ndtensor::Precision;
use gaittr::skeleton::{
    load_dataset, normalize_sequence, synth_generate, write_dataset, ConditionCounts, GaitDataset, KeypointFormat, Split,
    SynthConfig,
};
use gaittr::training::{train, TrainConfig, TrainOptions};

use crate::config::{render_section, synth_kv, RunConfig, DATA_KEYS, EVAL_KEYS};
use crate::{Command, ConfigArgs, DataArgs, UsageError};

fn usage(e: impl Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn base_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    rc.apply_overrides(&args.set)?;
    Ok(rc)
}

fn set_opt<T: ToString>(rc: &mut RunConfig, section: &str, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        rc.set(section, key, v.to_string());
    }
}

fn apply_data_flags(rc: &mut RunConfig, d: &DataArgs) {
    set_opt(rc, "data", "root", &d.data.as_ref().map(|p| p.display().to_string()));
    set_opt(rc, "data", "manifest", &d.manifest.as_ref().map(|p| p.display().to_string()));
    set_opt(rc, "data", "split", &d.split);
    set_opt(rc, "data", "precision", &d.precision);
}

fn keys(list: &[(&'static str, &str)]) -> Vec<&'static str> {
    list.iter().map(|k| k.0).collect()
}

fn parse_precision(rc: &RunConfig) -> Result<Precision> {
    match rc.get("data", "precision").unwrap_or("single") {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        other => Err(usage(format!("precision `{other}` must be single or double"))),
    }
}

fn parse_format(rc: &RunConfig) -> Result<KeypointFormat> {
    match rc.get("data", "format").unwrap_or("gttr") {
        "gttr" => Ok(KeypointFormat::Gttr),
        "csv" => Ok(KeypointFormat::Csv),
        other => Err(usage(format!("format `{other}` must be gttr or csv"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| usage(format!("bad {what} `{x}`"))))
        .collect()
}

struct DataSpec {
    root: PathBuf,
    manifest: PathBuf,
    split: Option<Split>,
    precision: Precision,
}

fn resolve_data(rc: &RunConfig) -> Result<DataSpec> {
    rc.check_keys("data", &keys(&DATA_KEYS))?;
    let root = PathBuf::from(rc.get("data", "root").ok_or_else(|| usage("no dataset given (--data or data.root)"))?);
    if !root.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", root.display())));
    }
    let manifest = rc.get("data", "manifest").map_or_else(|| root.join("manifest.tsv"), PathBuf::from);
    if !manifest.is_file() {
        return Err(usage(format!("manifest {} does not exist", manifest.display())));
    }
    let split = rc.get("data", "split").map(str::parse::<Split>).transpose().map_err(usage)?;
    Ok(DataSpec { root, manifest, split, precision: parse_precision(rc)? })
}

fn load(spec: &DataSpec) -> Result<GaitDataset> {
    let (ds, report) = load_dataset(&spec.root, &spec.manifest, spec.split.clone().unwrap_or(Split::Lt))
        .with_context(|| format!("loading {}", spec.manifest.display()))?;
    if !report.is_clean() {
        log::warn!("skipped {} sequences shorter than two frames", report.rejected_short.len());
    }
    let split = match &spec.split {
        Some(s) => s.clone(),
        None => Split::default_for(ds.subjects().last().copied().unwrap_or(0)),
    };
    log::info!("{} sequences of {} subjects, split {split}", ds.len(), ds.subjects().len());
    Ok(ds.with_split(split))
}

fn resolve_model(rc: &RunConfig) -> Result<ModelConfig> {
    ModelConfig::full().apply_kv(&rc.section("model")).map_err(usage)
}

fn resolve_train(rc: &RunConfig) -> Result<TrainConfig> {
    TrainConfig::default().apply_kv(&rc.section("train")).map_err(usage)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { cfg, out, seed, subjects, frames, views, format } => {
            let mut rc = base_config(&cfg)?;
            set_opt(&mut rc, "synth", "seed", &seed);
            set_opt(&mut rc, "synth", "subjects", &subjects);
            set_opt(&mut rc, "synth", "frames", &frames);
            set_opt(&mut rc, "synth", "views", &views);
            set_opt(&mut rc, "data", "format", &format);
            cmd_synth(&rc, &out)
        }
        Command::Preprocess { cfg, data, out, format } => {
            let mut rc = base_config(&cfg)?;
            apply_data_flags(&mut rc, &data);
            set_opt(&mut rc, "data", "format", &format);
            cmd_preprocess(&rc, &out)
        }
        Command::Train { cfg, data, out, seed, variant, iters, margin, resume } => {
            let mut rc = base_config(&cfg)?;
            apply_data_flags(&mut rc, &data);
            set_opt(&mut rc, "train", "seed", &seed);
            set_opt(&mut rc, "model", "variant", &variant);
            set_opt(&mut rc, "train", "total_iters", &iters);
            set_opt(&mut rc, "train", "margin", &margin);
            cmd_train(&rc, &out, resume)
        }
        Command::Eval { cfg, data, model, embeddings, out, frames } => {
            let mut rc = base_config(&cfg)?;
            apply_data_flags(&mut rc, &data);
            set_opt(&mut rc, "eval", "frames", &frames);
            cmd_eval(&rc, model.as_deref(), embeddings.as_deref(), &out)
        }
        Command::Curve { cfg, data, model, out, lengths, no_plot } => {
            let mut rc = base_config(&cfg)?;
            apply_data_flags(&mut rc, &data);
            set_opt(&mut rc, "eval", "lengths", &lengths);
            cmd_curve(&rc, &model, &out, !no_plot)
        }
        Command::Params { cfg, variant, reconcile } => {
            let mut rc = base_config(&cfg)?;
            set_opt(&mut rc, "model", "variant", &variant);
            cmd_params(&rc, reconcile)
        }
        Command::Flops { cfg, variant, frames } => {
            let mut rc = base_config(&cfg)?;
            set_opt(&mut rc, "model", "variant", &variant);
            cmd_flops(&rc, frames)
        }
    }
}

fn cmd_synth(rc: &RunConfig, out: &Path) -> Result<()> {
    let allowed = ["subjects", "nm", "bg", "cl", "views", "frames", "seed", "amplitude_gap", "noise_px"];
    rc.check_keys("synth", &allowed)?;
    let seed: u64 = rc
        .get("synth", "seed")
        .ok_or_else(|| usage("a seed is required (--seed or synth.seed)"))?
        .parse()
        .map_err(|_| usage("synth.seed must be an unsigned integer"))?;
    let mut cfg = SynthConfig { seed, ..SynthConfig::default() };
    let num = |k: &str| -> Result<Option<f64>> {
        rc.get("synth", k).map(|v| v.parse::<f64>().map_err(|_| usage(format!("bad synth.{k} `{v}`")))).transpose()
    };
    if let Some(v) = num("subjects")? {
        cfg.n_subjects = v as u32;
    }
    let counts = ConditionCounts {
        nm: num("nm")?.map_or(cfg.counts.nm, |v| v as u8),
        bg: num("bg")?.map_or(cfg.counts.bg, |v| v as u8),
        cl: num("cl")?.map_or(cfg.counts.cl, |v| v as u8),
    };
    cfg.counts = counts;
    if let Some(v) = rc.get("synth", "views") {
        cfg.views = parse_list(v, "view")?;
    }
    if let Some(v) = num("frames")? {
        cfg.frames = v as usize;
    }
    if let Some(v) = num("amplitude_gap")? {
        cfg.amplitude_gap = v;
    }
    if let Some(v) = num("noise_px")? {
        cfg.noise_px = v;
    }
    cfg.validate().map_err(usage)?;
    let format = parse_format(rc)?;
    let ds = synth_generate(&cfg)?;
    create_dir(out)?;
    let manifest = write_dataset(out, &ds, format)?;
    let resolved = render_section("synth", &synth_kv(&cfg).replace("seed=(required)", &format!("seed={seed}")))
        + &render_section("data", &format!("format={}\nsplit={}\n", format.extension(), ds.split));
    write(&out.join("config.txt"), &resolved)?;
    println!("{resolved}");
    println!("wrote {} sequences of {} subjects to {}", ds.len(), cfg.n_subjects, manifest.display());
    Ok(())
}

fn cmd_preprocess(rc: &RunConfig, out: &Path) -> Result<()> {
    let spec = resolve_data(rc)?;
    let format = parse_format(rc)?;
    let ds = load(&spec)?;
    let mut kept = Vec::with_capacity(ds.len());
    let mut dropped = 0;
    for s in &ds.samples {
        match normalize_sequence(s) {
            Ok(n) => kept.push(n),
            Err(e) => {
                log::warn!("dropping {}: {e}", s.meta.key());
                dropped += 1;
            }
        }
    }
    create_dir(out)?;
    let normalized = GaitDataset::new(kept, ds.split.clone());
    let manifest = write_dataset(out, &normalized, format)?;
    println!("normalised {} sequences ({dropped} dropped) into {}", normalized.len(), manifest.display());
    Ok(())
}

fn cmd_train(rc: &RunConfig, out: &Path, resume: Option<PathBuf>) -> Result<()> {
    if rc.get("train", "seed").is_none() {
        return Err(usage("a seed is required (--seed or train.seed)"));
    }
    let model_cfg = resolve_model(rc)?;
    let train_cfg = resolve_train(rc)?;
    let spec = resolve_data(rc)?;
    if let Some(r) = &resume {
        if !r.is_file() {
            return Err(usage(format!("checkpoint {} does not exist", r.display())));
        }
    }
    let ds = load(&spec)?;
    let header = render_section("model", &model_cfg.to_kv())
        + &render_section("train", &train_cfg.to_kv())
        + &render_section(
            "data",
            &format!(
                "root={}\nmanifest={}\nsplit={}\nprecision={}\n",
                spec.root.display(),
                spec.manifest.display(),
                ds.split,
                if spec.precision == Precision::Single { "single" } else { "double" }
            ),
        );
    println!("{header}");
    create_dir(out)?;
    write(&out.join("config.txt"), &header)?;
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume, precision: spec.precision, stop_after: None };
    let outcome = train(&model_cfg, &train_cfg, &ds, &opts)?;
    if let Some(last) = outcome.metrics.last() {
        println!("finished iteration {} loss {} active {}", last.iter, last.loss, last.active_frac);
    }
    println!("model written to {}", out.join("model.gttr").display());
    Ok(())
}

fn cmd_eval(rc: &RunConfig, model: Option<&Path>, dump: Option<&Path>, out: &Path) -> Result<()> {
    rc.check_keys("eval", &keys(&EVAL_KEYS))?;
    let frames = rc
        .get("eval", "frames")
        .map(|v| v.parse::<usize>().map_err(|_| usage(format!("bad eval.frames `{v}`"))))
        .transpose()?;
    let table = if let Some(dump) = dump {
        let split = rc.get("data", "split").map(str::parse::<Split>).transpose().map_err(usage)?;
        let all = load_embeddings(dump)?;
        let max_subject = all.iter().map(|e| e.meta.subject_id).max().unwrap_or(0);
        let split = split.unwrap_or_else(|| Split::default_for(max_subject));
        let test = all.iter().map(|e| e.meta.subject_id).filter(|&s| split.is_test(s)).collect();
        let (gallery, probes) = split_embeddings(&all, Some(&test));
        rank1_table(&gallery, &probes)?
    } else {
        let model = model.ok_or_else(|| usage("--model or --embeddings is required"))?;
        if !model.is_file() {
            return Err(usage(format!("model {} does not exist", model.display())));
        }
        let spec = resolve_data(rc)?;
        let store = ParamStore::load(model)?;
        let ds = load(&spec)?;
        let (table, embeddings) = evaluate(&store, &ds, frames, spec.precision)?;
        create_dir(out)?;
        save_embeddings(&out.join("embeddings.gttr"), &embeddings)?;
        table
    };
    create_dir(out)?;
    write(&out.join("rank1.csv"), &table.to_csv())?;
    write(&out.join("rank1.txt"), &table.to_text())?;
    for r in &table.rows {
        if r.probes == 0 {
            log::warn!("{} probe set is empty; its row is n/a", r.condition);
        }
    }
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_curve(rc: &RunConfig, model: &Path, out: &Path, plot: bool) -> Result<()> {
    rc.check_keys("eval", &keys(&EVAL_KEYS))?;
    let lengths: Vec<usize> = parse_list(rc.get("eval", "lengths").unwrap_or("10,20,30,40,50,60"), "length")?;
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(usage("lengths must be positive"));
    }
    if !model.is_file() {
        return Err(usage(format!("model {} does not exist", model.display())));
    }
    let spec = resolve_data(rc)?;
    let store = ParamStore::load(model)?;
    let ds = load(&spec)?;
    let curve = limited_frame_curve(&store, &ds, &lengths, spec.precision)?;
    create_dir(out)?;
    write(&out.join("curve.csv"), &curve.to_csv())?;
    if plot {
        write(&out.join("curve.svg"), &curve.to_svg())?;
    }
    print!("{}", curve.to_csv());
    Ok(())
}

fn cmd_params(rc: &RunConfig, reconcile: bool) -> Result<()> {
    let cfg = resolve_model(rc)?;
    let report = count_params(&cfg);
    println!("{:<10} {:>10} {:>10}", "block", "params", "reference");
    for (name, n) in &report.blocks {
        let reference = REFERENCE_BLOCK_PARAMS.iter().find(|r| r.0 == name).map_or("-".to_string(), |r| r.1.to_string());
        println!("{name:<10} {n:>10} {reference:>10}");
    }
    println!("{:<10} {:>10}", "total", report.total);
    if reconcile {
        println!("\nf_k    f_v    kernel bias  total      mean_block_err total_err");
        for r in reconcile_params(&cfg, &[0.125, 0.25, 0.5], &[3, 5, 7, 9]) {
            println!(
                "{:<6} {:<6} {:<6} {:<5} {:<10} {:<14.4} {:.4}",
                r.f_k, r.f_v, r.tcn_kernel, r.attention_bias, r.report.total, r.mean_block_error, r.total_error
            );
        }
    }
    Ok(())
}

fn cmd_flops(rc: &RunConfig, frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(usage("frames must be positive"));
    }
    let cfg = resolve_model(rc)?;
    let report = count_flops(&cfg, frames);
    println!("{:<10} {:>14}", "block", "flops");
    for (name, n) in &report.blocks {
        println!("{name:<10} {n:>14}");
    }
    println!("{:<10} {:>14}  ({:.3} G at {} frames)", "total", report.total, report.total as f64 / 1e9, report.frames);
    println!("convention: {}", report.convention);
    Ok(())
}
