use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{build_gallery_probe, rank1_table, Embedding, RankTable};
use crate::container::Container;
use crate::model::{embed, ParamStore};
use crate::ndtensor::{Precision, Tensor};
use crate::skeleton::{build_multi_input, cyclic_window, normalize_sequence, Condition, GaitDataset, GaitSampleMeta, SkeletonSequence};
use crate::{Error, Result};

pub const EMBEDDING_KIND: [u8; 4] = *b"EMBD";

fn window(seq: &SkeletonSequence, limit: Option<usize>) -> SkeletonSequence {
    match limit {
        Some(len) if len != seq.frames() => {
            let start = seq.frames().saturating_sub(len) / 2;
            cyclic_window(seq, start, len)
        }
        _ => seq.clone(),
    }
}

/// Embeds raw sequences in eval mode, in parallel. With `frame_limit`, each sequence
/// is cut to the centred window of that length (repeated cyclically when shorter)
/// before normalisation.
pub fn embed_dataset(
    store: &ParamStore,
    samples: &[&SkeletonSequence],
    frame_limit: Option<usize>,
    precision: Precision,
) -> Result<Vec<Embedding>> {
    if frame_limit == Some(0) {
        return Err(Error::Config("frame limit must be positive".into()));
    }
    samples
        .par_iter()
        .map(|s| {
            let seq = normalize_sequence(&window(s, frame_limit))?;
            let x = build_multi_input(&seq)?.into_tensor();
            let shape = x.shape().to_vec();
            let x = x.reshape(&[1, shape[0], shape[1], shape[2]])?;
            Ok(Embedding { meta: s.meta, vector: embed(store, &x, precision)?.into_data() })
        })
        .collect()
}

/// Embeds the gallery and probe sets of `dataset` and scores them.
pub fn evaluate(
    store: &ParamStore,
    dataset: &GaitDataset,
    frame_limit: Option<usize>,
    precision: Precision,
) -> Result<(RankTable, Vec<Embedding>)> {
    let gp = build_gallery_probe(dataset)?;
    let mut order: Vec<usize> = gp.gallery.clone();
    for (_, p) in &gp.probes {
        order.extend(p);
    }
    let samples: Vec<&SkeletonSequence> = order.iter().map(|&i| &dataset.samples[i]).collect();
    let all = embed_dataset(store, &samples, frame_limit, precision)?;
    let (gallery, rest) = all.split_at(gp.gallery.len());
    let mut probes = Vec::new();
    let mut offset = 0;
    for (c, p) in &gp.probes {
        probes.push((*c, rest[offset..offset + p.len()].to_vec()));
        offset += p.len();
    }
    Ok((rank1_table(gallery, &probes)?, all))
}

pub fn save_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut c = Container::new(EMBEDDING_KIND);
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    c.header.insert("dim".into(), dim.to_string());
    for e in embeddings {
        c.entries.push((e.meta.key(), Tensor::new(vec![e.vector.len()], e.vector.clone())?));
    }
    c.save(path)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let c = Container::load(path, EMBEDDING_KIND)?;
    c.entries
        .iter()
        .map(|(key, t)| {
            if t.rank() != 1 {
                return Err(Error::Format(format!("embedding {key} has shape {:?}", t.shape())));
            }
            Ok(Embedding { meta: key.parse::<GaitSampleMeta>()?, vector: t.data().to_vec() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub length: usize,
    pub condition: Condition,
    pub mean_rank1: Option<f64>,
}

/// Mean rank-1 accuracy against the number of inference frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCurve {
    pub rows: Vec<CurveRow>,
}

impl FrameCurve {
    pub fn get(&self, length: usize, condition: Condition) -> Option<f64> {
        self.rows.iter().find(|r| r.length == length && r.condition == condition).and_then(|r| r.mean_rank1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,condition,mean_rank1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.length, r.condition, super::format_accuracy(r.mean_rank1));
        }
        s
    }

    /// Line plot with one polyline per condition.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let lengths: Vec<usize> = self.rows.iter().map(|r| r.length).collect();
        let lo = lengths.iter().copied().min().unwrap_or(0) as f64;
        let hi = lengths.iter().copied().max().unwrap_or(1) as f64;
        let span = (hi - lo).max(1.0);
        let px = |l: usize| pad + (l as f64 - lo) / span * (w - 2.0 * pad);
        let py = |a: f64| h - pad - a * (h - 2.0 * pad);
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-size=\"11\">\n");
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
        let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">frames</text>", w / 2.0, h - 8.0);
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">1.0</text><text x=\"4\" y=\"{}\">0.0</text>", py(1.0), py(0.0));
        let colours = [(Condition::Nm, "#1f77b4"), (Condition::Bg, "#2ca02c"), (Condition::Cl, "#d62728")];
        for (i, (c, colour)) in colours.iter().enumerate() {
            let pts: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.condition == *c)
                .filter_map(|r| r.mean_rank1.map(|a| format!("{:.1},{:.1}", px(r.length), py(a))))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{c}</text>", w - pad + 4.0, pad + 14.0 * i as f64);
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Rank-1 means per condition at each window length.
pub fn limited_frame_curve(store: &ParamStore, dataset: &GaitDataset, lengths: &[usize], precision: Precision) -> Result<FrameCurve> {
    if lengths.is_empty() {
        return Err(Error::Config("no window lengths given".into()));
    }
    let mut rows = Vec::new();
    for &len in lengths {
        let (table, _) = evaluate(store, dataset, Some(len), precision)?;
        for r in &table.rows {
            rows.push(CurveRow { length: len, condition: r.condition, mean_rank1: r.mean });
        }
    }
    Ok(FrameCurve { rows })
}
