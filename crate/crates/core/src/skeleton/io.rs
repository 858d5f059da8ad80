//! Manifest and keypoint file formats.
//!
//! A manifest holds one `subject-condition-seq-view<TAB>file` record per line; blank
//! lines and lines starting with `#` are ignored. Keypoint files are either GTTR
//! tensors of shape `T × 17 × 2` or CSV with header `t,joint,x,y[,conf]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{GaitDataset, GaitSampleMeta, SkeletonSequence, Split, NUM_JOINTS};
use crate::ndtensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointFormat {
    Gttr,
    Csv,
}

impl KeypointFormat {
    /// `.csv` files are CSV, everything else is GTTR.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => KeypointFormat::Csv,
            _ => KeypointFormat::Gttr,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            KeypointFormat::Gttr => "gttr",
            KeypointFormat::Csv => "csv",
        }
    }
}

/// Samples dropped while loading.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Keys of sequences with fewer than two frames.
    pub rejected_short: Vec<String>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.rejected_short.is_empty()
    }
}

/// Reads one keypoint file; the metadata is supplied by the caller.
pub fn read_keypoints(path: &Path, meta: GaitSampleMeta) -> Result<SkeletonSequence> {
    match KeypointFormat::from_path(path) {
        KeypointFormat::Gttr => read_gttr(path, meta),
        KeypointFormat::Csv => read_csv(path, meta),
    }
}

fn schema(path: &Path, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.to_path_buf(), msg: msg.into() }
}

fn read_gttr(path: &Path, meta: GaitSampleMeta) -> Result<SkeletonSequence> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let t = read_tensor(&mut BufReader::new(file))?;
    match t.shape() {
        &[frames, NUM_JOINTS, 2] => SkeletonSequence::new(meta, frames, t.into_data(), None),
        &[_, joints, 2] => Err(schema(path, format!("expected {NUM_JOINTS} joints, found {joints}"))),
        s => Err(schema(path, format!("expected shape T×{NUM_JOINTS}×2, found {s:?}"))),
    }
}

fn read_csv(path: &Path, meta: GaitSampleMeta) -> Result<SkeletonSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let with_conf = match header {
        "t,joint,x,y" => false,
        "t,joint,x,y,conf" => true,
        _ => return Err(parse_err(1, format!("expected header `t,joint,x,y[,conf]`, found `{header}`"))),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 + with_conf as usize {
            return Err(parse_err(i + 1, format!("expected {} fields, found {}", 4 + with_conf as usize, fields.len())));
        }
        let t: usize = fields[0].parse().map_err(|_| parse_err(i + 1, format!("bad frame `{}`", fields[0])))?;
        let j: usize = fields[1].parse().map_err(|_| parse_err(i + 1, format!("bad joint `{}`", fields[1])))?;
        let mut vals = [1.0; 3];
        for (k, f) in fields[2..].iter().enumerate() {
            vals[k] = f.parse().map_err(|_| parse_err(i + 1, format!("bad number `{f}`")))?;
        }
        rows.push((t, j, vals));
    }
    if rows.is_empty() {
        return Err(schema(path, "no keypoint rows"));
    }
    let joints = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    if joints != NUM_JOINTS {
        return Err(schema(path, format!("expected {NUM_JOINTS} joints, found {joints}")));
    }
    let frames = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let mut coords = vec![0.0; frames * NUM_JOINTS * 2];
    let mut conf = vec![1.0; frames * NUM_JOINTS];
    let mut seen = vec![false; frames * NUM_JOINTS];
    for (t, j, [x, y, c]) in rows {
        let idx = t * NUM_JOINTS + j;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(schema(path, format!("duplicate row for frame {t}, joint {j}")));
        }
        coords[2 * idx] = x;
        coords[2 * idx + 1] = y;
        conf[idx] = c;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(schema(
            path,
            format!("missing row for frame {}, joint {}", missing / NUM_JOINTS, missing % NUM_JOINTS),
        ));
    }
    SkeletonSequence::new(meta, frames, coords, with_conf.then_some(conf))
}

/// Writes one keypoint file in `format`. GTTR stores coordinates as f32 and drops
/// confidences.
pub fn write_keypoints(path: &Path, seq: &SkeletonSequence, format: KeypointFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    match format {
        KeypointFormat::Gttr => {
            let t = Tensor::new(vec![seq.frames(), NUM_JOINTS, 2], seq.coords().to_vec())?;
            write_tensor(&mut w, &t)?;
        }
        KeypointFormat::Csv => {
            let conf = seq.confidence();
            let header = if conf.is_some() { "t,joint,x,y,conf" } else { "t,joint,x,y" };
            let mut out = String::from(header);
            out.push('\n');
            for t in 0..seq.frames() {
                for j in 0..NUM_JOINTS {
                    let [x, y] = seq.xy(t, j);
                    out.push_str(&format!("{t},{j},{x},{y}"));
                    if let Some(c) = conf {
                        out.push_str(&format!(",{}", c[t * NUM_JOINTS + j]));
                    }
                    out.push('\n');
                }
            }
            w.write_all(out.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses manifest text into `(meta, relative path)` records.
fn parse_manifest(path: &Path, text: &str) -> Result<Vec<(GaitSampleMeta, PathBuf)>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let (key, file) = line.split_once('\t').ok_or_else(|| err("expected `key<TAB>file`".into()))?;
        let meta: GaitSampleMeta = key.parse().map_err(|e: Error| err(e.to_string()))?;
        let file = file.trim();
        if file.is_empty() {
            return Err(err("empty file name".into()));
        }
        records.push((meta, PathBuf::from(file)));
    }
    Ok(records)
}

/// Loads every sample listed in `manifest`; file paths are resolved against `root`.
/// Sequences shorter than two frames are skipped with a warning and listed in the
/// report.
pub fn load_dataset(root: &Path, manifest: &Path, split: Split) -> Result<(GaitDataset, LoadReport)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(format!("reading {}", manifest.display()), e))?;
    let records = parse_manifest(manifest, &text)?;
    let mut samples = Vec::with_capacity(records.len());
    let mut report = LoadReport::default();
    for (meta, rel) in records {
        let seq = read_keypoints(&root.join(rel), meta)?;
        if seq.frames() < 2 {
            log::warn!("{}: {} frame(s), need at least 2; skipped", meta.key(), seq.frames());
            report.rejected_short.push(meta.key());
            continue;
        }
        samples.push(seq);
    }
    Ok((GaitDataset::new(samples, split), report))
}

/// Writes every sample under `root` (one file per sample, named by its key) and a
/// `manifest.tsv` listing them; returns the manifest path.
pub fn write_dataset(root: &Path, dataset: &GaitDataset, format: KeypointFormat) -> Result<PathBuf> {
    let dir = root.join("keypoints");
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = String::new();
    for s in &dataset.samples {
        let name = format!("{}.{}", s.meta.key(), format.extension());
        write_keypoints(&dir.join(&name), s, format)?;
        manifest.push_str(&format!("{}\tkeypoints/{name}\n", s.meta.key()));
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
