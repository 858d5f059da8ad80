//! Keypoint sequences and everything between raw pose-estimator output and the
//! network input tensor.

mod augment;
mod features;
mod io;
mod sampler;
mod synth;

pub use augment::{augment_mirror, augment_noise, cyclic_window, random_crop};
pub use features::{build_multi_input, normalize_sequence, MultiInputTensor, MULTI_INPUT_CHANNELS};
pub use io::{load_dataset, read_keypoints, write_dataset, write_keypoints, KeypointFormat, LoadReport};
pub use sampler::{sample_batch, Batch, SamplerConfig, TrainPool};
pub use synth::{subject_signatures, synth_generate, ConditionCounts, GaitSignature, SynthConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

pub const NUM_JOINTS: usize = 17;

/// COCO keypoint order.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const L_EYE: usize = 1;
    pub const R_EYE: usize = 2;
    pub const L_EAR: usize = 3;
    pub const R_EAR: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const L_ELBOW: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const L_WRIST: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const L_HIP: usize = 11;
    pub const R_HIP: usize = 12;
    pub const L_KNEE: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const L_ANKLE: usize = 15;
    pub const R_ANKLE: usize = 16;
}

/// Parent of each joint in the nose-rooted COCO tree; the nose is its own parent.
pub const BONE_PARENT: [usize; NUM_JOINTS] = {
    use joint::*;
    [
        NOSE, NOSE, NOSE, NOSE, NOSE, // face
        NOSE, NOSE, // shoulders
        L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, // arms
        NOSE, NOSE, // hips
        L_HIP, R_HIP, L_KNEE, R_KNEE, // legs
    ]
};

/// Left/right pairs exchanged by mirroring.
pub const MIRROR_PAIRS: [(usize, usize); 8] = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];

/// The eleven CASIA-B camera angles.
pub const VIEWS: [u16; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    /// Number of sequences per view in the CASIA-B layout.
    pub fn max_seq(self) -> u8 {
        match self {
            Condition::Nm => 6,
            Condition::Bg | Condition::Cl => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            _ => Err(Error::Config(format!("unknown condition `{s}` (expected NM, BG or CL)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GaitSampleMeta {
    pub subject_id: u32,
    pub condition: Condition,
    pub seq_index: u8,
    pub view_deg: u16,
}

impl GaitSampleMeta {
    pub fn new(subject_id: u32, condition: Condition, seq_index: u8, view_deg: u16) -> Result<Self> {
        if subject_id == 0 {
            return Err(Error::Config("subject ids start at 1".into()));
        }
        if view_deg % 18 != 0 || view_deg > 180 {
            return Err(Error::Config(format!("view {view_deg} is not one of 0,18,...,180")));
        }
        if seq_index == 0 || seq_index > condition.max_seq() {
            return Err(Error::Config(format!(
                "{condition} sequence index {seq_index} outside 1..={}",
                condition.max_seq()
            )));
        }
        Ok(Self { subject_id, condition, seq_index, view_deg })
    }

    /// `subject-condition-seq-view`, e.g. `001-nm-01-090`.
    pub fn key(&self) -> String {
        format!("{:03}-{}-{:02}-{:03}", self.subject_id, self.condition.as_str(), self.seq_index, self.view_deg)
    }

    /// Index of the view in [`VIEWS`].
    pub fn view_index(&self) -> usize {
        (self.view_deg / 18) as usize
    }
}

impl FromStr for GaitSampleMeta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let [subj, cond, seq, view] = parts.as_slice() else {
            return Err(Error::Config(format!("`{s}` is not subject-condition-seq-view")));
        };
        let num = |field: &str, what: &str| -> Result<u32> {
            field.parse::<u32>().map_err(|_| Error::Config(format!("bad {what} `{field}` in `{s}`")))
        };
        let seq = u8::try_from(num(seq, "sequence index")?).map_err(|_| Error::Config(format!("bad sequence in `{s}`")))?;
        let view = u16::try_from(num(view, "view")?).map_err(|_| Error::Config(format!("bad view in `{s}`")))?;
        GaitSampleMeta::new(num(subj, "subject")?, cond.parse()?, seq, view)
    }
}

/// `T × 17 × 2` keypoints of one walk.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub meta: GaitSampleMeta,
    frames: usize,
    coords: Vec<f64>,
    confidence: Option<Vec<f64>>,
}

impl SkeletonSequence {
    pub fn new(meta: GaitSampleMeta, frames: usize, coords: Vec<f64>, confidence: Option<Vec<f64>>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InsufficientFrames { needed: 1, got: 0 });
        }
        if coords.len() != frames * NUM_JOINTS * 2 {
            return Err(Error::dim(format!(
                "{} coordinates for {frames} frames of {NUM_JOINTS} joints",
                coords.len()
            )));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::Degenerate(format!("{}: non-finite coordinate", meta.key())));
        }
        if let Some(c) = &confidence {
            if c.len() != frames * NUM_JOINTS || !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::dim(format!("{}: confidence must be T×17 values in [0,1]", meta.key())));
            }
        }
        Ok(Self { meta, frames, coords, confidence })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }

    #[inline]
    pub fn xy(&self, t: usize, j: usize) -> [f64; 2] {
        let o = (t * NUM_JOINTS + j) * 2;
        [self.coords[o], self.coords[o + 1]]
    }

    pub(crate) fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub(crate) fn confidence_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.confidence.as_mut()
    }

    /// Frames `indices` in order (indices may repeat).
    pub fn select_frames(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut coords = Vec::new();
        let mut conf = self.confidence.as_ref().map(|_| Vec::new());
        let mut frames = 0;
        for t in indices {
            coords.extend_from_slice(&self.coords[t * NUM_JOINTS * 2..(t + 1) * NUM_JOINTS * 2]);
            if let (Some(out), Some(c)) = (conf.as_mut(), &self.confidence) {
                out.extend_from_slice(&c[t * NUM_JOINTS..(t + 1) * NUM_JOINTS]);
            }
            frames += 1;
        }
        Self { meta: self.meta, frames, coords, confidence: conf }
    }
}

/// Train/test subject partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Split {
    /// Subjects 1-24 train.
    St,
    /// Subjects 1-62 train.
    Mt,
    /// Subjects 1-74 train.
    Lt,
    /// Explicit training subjects; with `closed_set`, the same subjects are also
    /// evaluated (gallery/probe sequences stay disjoint from training sequences).
    Custom { train: BTreeSet<u32>, closed_set: bool },
}

impl Split {
    pub fn is_train(&self, subject: u32) -> bool {
        match self {
            Split::St => subject <= 24,
            Split::Mt => subject <= 62,
            Split::Lt => subject <= 74,
            Split::Custom { train, .. } => train.contains(&subject),
        }
    }

    pub fn is_test(&self, subject: u32) -> bool {
        match self {
            Split::Custom { closed_set: true, train } => train.contains(&subject),
            _ => !self.is_train(subject),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::St => "ST",
            Split::Mt => "MT",
            Split::Lt => "LT",
            Split::Custom { .. } => "custom",
        }
    }
}

impl Split {
    /// `LT` when there are more than 74 subjects, otherwise the first half trains.
    pub fn default_for(n_subjects: u32) -> Self {
        if n_subjects > 74 {
            Split::Lt
        } else {
            Split::Custom { train: (1..=n_subjects / 2).collect(), closed_set: false }
        }
    }
}

fn format_ids(ids: &BTreeSet<u32>) -> String {
    let mut runs: Vec<String> = Vec::new();
    let mut it = ids.iter().copied().peekable();
    while let Some(a) = it.next() {
        let mut b = a;
        while it.peek() == Some(&(b + 1)) {
            b = it.next().unwrap_or(b);
        }
        runs.push(if a == b { a.to_string() } else { format!("{a}-{b}") });
    }
    runs.join(",")
}

fn parse_ids(s: &str) -> Option<BTreeSet<u32>> {
    let mut ids = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?);
                if a == 0 || a > b {
                    return None;
                }
                ids.extend(a..=b);
            }
            None => {
                ids.insert(part.parse::<u32>().ok().filter(|&v| v > 0)?);
            }
        }
    }
    Some(ids)
}

/// `ST`, `MT`, `LT`, `train:<ids>` or `closed:<ids>` with ids such as `1-4,7`.
impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Custom { train, closed_set } => {
                write!(f, "{}:{}", if *closed_set { "closed" } else { "train" }, format_ids(train))
            }
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let custom = |rest: &str, closed_set: bool| {
            parse_ids(rest)
                .map(|train| Split::Custom { train, closed_set })
                .ok_or_else(|| Error::Config(format!("bad subject list `{rest}` in split `{s}`")))
        };
        let t = s.trim();
        if let Some(rest) = t.strip_prefix("train:") {
            return custom(rest, false);
        }
        if let Some(rest) = t.strip_prefix("closed:") {
            return custom(rest, true);
        }
        match t.to_ascii_uppercase().as_str() {
            "ST" => Ok(Split::St),
            "MT" => Ok(Split::Mt),
            "LT" => Ok(Split::Lt),
            _ => Err(Error::Config(format!(
                "unknown split `{s}`; expected one of {{ST,MT,LT}} (or train:<ids> / closed:<ids>)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaitDataset {
    pub samples: Vec<SkeletonSequence>,
    pub split: Split,
}

impl GaitDataset {
    pub fn new(samples: Vec<SkeletonSequence>, split: Split) -> Self {
        Self { samples, split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.meta.subject_id).collect()
    }

    pub fn train_subjects(&self) -> BTreeSet<u32> {
        self.subjects().into_iter().filter(|&s| self.split.is_train(s)).collect()
    }

    pub fn test_subjects(&self) -> BTreeSet<u32> {
        self.subjects().into_iter().filter(|&s| self.split.is_test(s)).collect()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Applies [`normalize_sequence`] to every sample.
    pub fn normalized(&self) -> Result<Self> {
        let samples = self.samples.iter().map(normalize_sequence).collect::<Result<_>>()?;
        Ok(Self { samples, split: self.split.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_casia_style_keys() {
        let m: GaitSampleMeta = "001-nm-01-090".parse().unwrap();
        assert_eq!(m, GaitSampleMeta { subject_id: 1, condition: Condition::Nm, seq_index: 1, view_deg: 90 });
        assert_eq!(m.key(), "001-nm-01-090");
        assert_eq!("124-CL-02-180".parse::<GaitSampleMeta>().unwrap().view_index(), 10);
    }

    #[test]
    fn rejects_invalid_layout() {
        assert!("001-bg-03-090".parse::<GaitSampleMeta>().is_err());
        assert!("001-nm-07-090".parse::<GaitSampleMeta>().is_err());
        assert!("001-nm-01-095".parse::<GaitSampleMeta>().is_err());
        assert!("001-nm-01-198".parse::<GaitSampleMeta>().is_err());
        assert!("000-nm-01-090".parse::<GaitSampleMeta>().is_err());
        assert!("001-xx-01-090".parse::<GaitSampleMeta>().is_err());
        assert!("001-nm-01".parse::<GaitSampleMeta>().is_err());
    }

    #[test]
    fn split_partitions() {
        assert!(Split::St.is_train(24) && !Split::St.is_train(25));
        assert!(Split::Mt.is_train(62) && Split::Mt.is_test(63));
        assert!(Split::Lt.is_train(74) && Split::Lt.is_test(75));
        let err = "XT".parse::<Split>().unwrap_err().to_string();
        assert!(err.contains("{ST,MT,LT}"), "{err}");
        let closed = Split::Custom { train: [1, 2].into(), closed_set: true };
        assert!(closed.is_train(1) && closed.is_test(1) && !closed.is_test(3));
    }

    #[test]
    fn bone_tree_is_rooted_at_nose() {
        for j in 0..NUM_JOINTS {
            let mut cur = j;
            for _ in 0..NUM_JOINTS {
                cur = BONE_PARENT[cur];
            }
            assert_eq!(cur, joint::NOSE);
        }
    }
}
