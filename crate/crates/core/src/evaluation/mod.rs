//! Cross-view gallery/probe protocol: NM#1-4 gallery, NM#5-6, BG#1-2 and CL#1-2
//! probes, rank-1 accuracy with identical views excluded.

mod embed;
mod report;

pub use embed::{embed_dataset, evaluate, limited_frame_curve, load_embeddings, save_embeddings, CurveRow, FrameCurve, EMBEDDING_KIND};
pub use report::{format_accuracy, parse_accuracy};

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::skeleton::{Condition, GaitDataset, GaitSampleMeta, VIEWS};
use crate::{Error, Result};

pub const NUM_VIEWS: usize = VIEWS.len();

/// Sequences of one condition that form a probe set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSpec {
    pub condition: Condition,
    pub seq_indices: [u8; 2],
}

impl ProbeSpec {
    pub const PROTOCOL: [ProbeSpec; 3] = [
        ProbeSpec { condition: Condition::Nm, seq_indices: [5, 6] },
        ProbeSpec { condition: Condition::Bg, seq_indices: [1, 2] },
        ProbeSpec { condition: Condition::Cl, seq_indices: [1, 2] },
    ];

    pub fn contains(&self, meta: &GaitSampleMeta) -> bool {
        meta.condition == self.condition && self.seq_indices.contains(&meta.seq_index)
    }
}

/// NM sequences enrolled in the gallery.
pub const GALLERY_SEQS: [u8; 4] = [1, 2, 3, 4];

pub fn is_gallery(meta: &GaitSampleMeta) -> bool {
    meta.condition == Condition::Nm && GALLERY_SEQS.contains(&meta.seq_index)
}

/// Sample indices into a dataset, split into the gallery and the three probe sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryProbe {
    pub gallery: Vec<usize>,
    /// In [`ProbeSpec::PROTOCOL`] order.
    pub probes: Vec<(Condition, Vec<usize>)>,
    /// Protocol samples of test subjects that the dataset does not contain.
    pub missing: usize,
}

impl GalleryProbe {
    pub fn probe(&self, condition: Condition) -> &[usize] {
        self.probes.iter().find(|(c, _)| *c == condition).map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn empty_conditions(&self) -> Vec<Condition> {
        self.probes.iter().filter(|(_, v)| v.is_empty()).map(|(c, _)| *c).collect()
    }
}

/// Gallery and probe sets over the test subjects of `dataset`.
pub fn build_gallery_probe(dataset: &GaitDataset) -> Result<GalleryProbe> {
    let test = dataset.test_subjects();
    if test.is_empty() {
        return Err(Error::Config(format!("the {} split leaves no test subjects", dataset.split.name())));
    }
    let mut gallery = Vec::new();
    let mut probes: Vec<(Condition, Vec<usize>)> = ProbeSpec::PROTOCOL.iter().map(|p| (p.condition, Vec::new())).collect();
    for (i, s) in dataset.samples.iter().enumerate() {
        if !test.contains(&s.meta.subject_id) {
            continue;
        }
        if is_gallery(&s.meta) {
            gallery.push(i);
        }
        for (spec, (_, set)) in ProbeSpec::PROTOCOL.iter().zip(probes.iter_mut()) {
            if spec.contains(&s.meta) {
                set.push(i);
            }
        }
    }
    let per_subject = NUM_VIEWS * (GALLERY_SEQS.len() + 2 * ProbeSpec::PROTOCOL.len());
    let found = gallery.len() + probes.iter().map(|(_, v)| v.len()).sum::<usize>();
    let missing = (test.len() * per_subject).saturating_sub(found);
    if missing > 0 {
        log::warn!("{missing} protocol samples of {} test subjects are absent", test.len());
    }
    for (c, v) in &probes {
        if v.is_empty() {
            log::warn!("{c} probe set is empty");
        }
    }
    Ok(GalleryProbe { gallery, probes, missing })
}

/// One embedded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub meta: GaitSampleMeta,
    pub vector: Vec<f64>,
}

/// Rank-1 accuracies of one probe condition.
#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub condition: Condition,
    /// Per probe view; `None` when no probe at that view could be scored.
    pub per_view: [Option<f64>; NUM_VIEWS],
    /// Mean of the defined per-view entries.
    pub mean: Option<f64>,
    /// Probes scored.
    pub probes: usize,
    /// Probes whose subject has no gallery sample.
    pub excluded: usize,
}

impl RankRow {
    pub fn empty(condition: Condition) -> Self {
        Self { condition, per_view: [None; NUM_VIEWS], mean: None, probes: 0, excluded: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub rows: Vec<RankRow>,
}

impl RankTable {
    pub fn row(&self, condition: Condition) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn mean(&self, condition: Condition) -> Option<f64> {
        self.row(condition).and_then(|r| r.mean)
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per gallery view, the subject of the nearest gallery sample (lowest index on ties).
fn nearest_per_view(gallery: &[Embedding], by_view: &[Vec<usize>], probe: &[f64]) -> [Option<u32>; NUM_VIEWS] {
    let mut out = [None; NUM_VIEWS];
    for (v, idx) in by_view.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for &g in idx {
            let d = sq_dist(&gallery[g].vector, probe);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        out[v] = best.map(|(_, g)| gallery[g].meta.subject_id);
    }
    out
}

fn rank_row(gallery: &[Embedding], by_view: &[Vec<usize>], subjects: &BTreeSet<u32>, condition: Condition, probes: &[Embedding]) -> RankRow {
    let scored: Vec<&Embedding> = probes.iter().filter(|p| subjects.contains(&p.meta.subject_id)).collect();
    let excluded = probes.len() - scored.len();
    if excluded > 0 {
        log::warn!("{excluded} {condition} probes have no gallery sample of their subject");
    }
    // hits[v_p][v_g] and totals[v_p][v_g]
    let outcomes: Vec<(usize, [Option<bool>; NUM_VIEWS])> = scored
        .par_iter()
        .map(|p| {
            let near = nearest_per_view(gallery, by_view, &p.vector);
            let vp = p.meta.view_index();
            let mut hit = [None; NUM_VIEWS];
            for vg in 0..NUM_VIEWS {
                if vg != vp {
                    hit[vg] = near[vg].map(|s| s == p.meta.subject_id);
                }
            }
            (vp, hit)
        })
        .collect();
    let mut hits = [[0usize; NUM_VIEWS]; NUM_VIEWS];
    let mut totals = [[0usize; NUM_VIEWS]; NUM_VIEWS];
    for (vp, hit) in &outcomes {
        for (vg, h) in hit.iter().enumerate() {
            if let Some(h) = h {
                totals[*vp][vg] += 1;
                hits[*vp][vg] += usize::from(*h);
            }
        }
    }
    let mut per_view = [None; NUM_VIEWS];
    for vp in 0..NUM_VIEWS {
        per_view[vp] = mean_of((0..NUM_VIEWS).filter(|&vg| totals[vp][vg] > 0).map(|vg| hits[vp][vg] as f64 / totals[vp][vg] as f64));
    }
    RankRow { condition, per_view, mean: mean_of(per_view.iter().flatten().copied()), probes: scored.len(), excluded }
}

/// Rank-1 table: a probe at view `v_p` is correct at gallery view `v_g ≠ v_p` when
/// its nearest gallery sample at `v_g` shares its subject. Cells are averaged over
/// gallery views, then over probe views.
pub fn rank1_table(gallery: &[Embedding], probes: &[(Condition, Vec<Embedding>)]) -> Result<RankTable> {
    if let Some(dim) = gallery.first().map(|g| g.vector.len()) {
        let bad = gallery.iter().chain(probes.iter().flat_map(|(_, p)| p)).find(|e| e.vector.len() != dim);
        if let Some(e) = bad {
            return Err(Error::dim(format!("{} has a {}-d embedding, gallery uses {dim}", e.meta.key(), e.vector.len())));
        }
    }
    let mut by_view = vec![Vec::new(); NUM_VIEWS];
    for (i, g) in gallery.iter().enumerate() {
        by_view[g.meta.view_index()].push(i);
    }
    let subjects: BTreeSet<u32> = gallery.iter().map(|g| g.meta.subject_id).collect();
    let rows = probes.iter().map(|(c, p)| rank_row(gallery, &by_view, &subjects, *c, p)).collect();
    Ok(RankTable { rows })
}

/// Embeddings of a dataset split into gallery and probe sets by sample key.
pub fn split_embeddings(embeddings: &[Embedding], test_subjects: Option<&BTreeSet<u32>>) -> (Vec<Embedding>, Vec<(Condition, Vec<Embedding>)>) {
    let keep = |e: &&Embedding| test_subjects.is_none_or(|t| t.contains(&e.meta.subject_id));
    let gallery = embeddings.iter().filter(keep).filter(|e| is_gallery(&e.meta)).cloned().collect();
    let probes = ProbeSpec::PROTOCOL
        .iter()
        .map(|spec| (spec.condition, embeddings.iter().filter(keep).filter(|e| spec.contains(&e.meta)).cloned().collect()))
        .collect();
    (gallery, probes)
}
