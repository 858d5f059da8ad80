//! Synthetic walkers: a 3D stick figure driven by a per-subject gait signature,
//! projected to 2D pixel keypoints from each camera view.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{joint, Condition, GaitDataset, GaitSampleMeta, SkeletonSequence, Split, NUM_JOINTS, VIEWS};
use crate::{Error, Result};

/// Sequences generated per condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionCounts {
    pub nm: u8,
    pub bg: u8,
    pub cl: u8,
}

impl ConditionCounts {
    /// The full CASIA-B layout: 6 NM, 2 BG, 2 CL.
    pub const CASIA: ConditionCounts = ConditionCounts { nm: 6, bg: 2, cl: 2 };

    /// `n` sequences per condition, capped at each condition's maximum.
    pub fn uniform(n: u8) -> Self {
        Self {
            nm: n.min(Condition::Nm.max_seq()),
            bg: n.min(Condition::Bg.max_seq()),
            cl: n.min(Condition::Cl.max_seq()),
        }
    }

    pub fn get(&self, c: Condition) -> u8 {
        match c {
            Condition::Nm => self.nm,
            Condition::Bg => self.bg,
            Condition::Cl => self.cl,
        }
    }

    pub fn total(&self) -> usize {
        (self.nm + self.bg + self.cl) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: u32,
    pub counts: ConditionCounts,
    pub views: Vec<u16>,
    pub frames: usize,
    pub seed: u64,
    /// Minimum spacing between the stride amplitudes (radians) of any two subjects.
    pub amplitude_gap: f64,
    /// Standard deviation of the per-keypoint detector noise, in pixels.
    pub noise_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 124,
            counts: ConditionCounts::CASIA,
            views: VIEWS.to_vec(),
            frames: 80,
            seed: 0,
            amplitude_gap: 0.002,
            noise_px: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::Config(format!("need at least 2 subjects, got {}", self.n_subjects)));
        }
        for c in Condition::ALL {
            if self.counts.get(c) > c.max_seq() {
                return Err(Error::Config(format!(
                    "{c} allows at most {} sequences, {} requested",
                    c.max_seq(),
                    self.counts.get(c)
                )));
            }
        }
        if self.views.is_empty() {
            return Err(Error::Config("no views requested".into()));
        }
        for &v in &self.views {
            GaitSampleMeta::new(1, Condition::Nm, 1, v)?;
        }
        if self.frames < 3 {
            return Err(Error::Config(format!("{} frames is below the 3-frame minimum", self.frames)));
        }
        if !(self.amplitude_gap >= 0.0 && self.noise_px >= 0.0) {
            return Err(Error::Config("amplitude gap and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-subject walking style. Angles are in radians, lengths in body units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSignature {
    /// Peak hip swing angle.
    pub stride_amplitude: f64,
    /// Frames per gait cycle.
    pub cadence: f64,
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub torso: f64,
    pub neck: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub arm_swing: f64,
    pub elbow_flex: f64,
    pub knee_flex: f64,
    /// Phase of peak knee flexion relative to hip swing.
    pub knee_phase: f64,
    /// Phase lag of the arms relative to the opposite leg.
    pub arm_phase: f64,
    pub lean: f64,
    pub bounce: f64,
    pub sway: f64,
}

/// Subject signatures for `cfg`, indexed by subject id − 1.
pub fn subject_signatures(cfg: &SynthConfig) -> Vec<GaitSignature> {
    let n = cfg.n_subjects as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let range = f64::max(0.25, cfg.amplitude_gap * (n - 1) as f64);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    slots
        .into_iter()
        .map(|slot| {
            let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
            GaitSignature {
                stride_amplitude: 0.30 + range * slot as f64 / (n - 1) as f64,
                cadence: u(22.0, 30.0),
                thigh: u(0.42, 0.52),
                shin: u(0.40, 0.50),
                upper_arm: u(0.28, 0.36),
                forearm: u(0.24, 0.32),
                torso: u(0.48, 0.60),
                neck: u(0.18, 0.26),
                shoulder_width: u(0.32, 0.46),
                hip_width: u(0.18, 0.30),
                arm_swing: u(0.15, 0.60),
                elbow_flex: u(0.10, 0.60),
                knee_flex: u(0.30, 0.90),
                knee_phase: u(-0.6, 0.6),
                arm_phase: u(-0.5, 0.5),
                lean: u(-0.05, 0.20),
                bounce: u(0.005, 0.035),
                sway: u(0.005, 0.04),
            }
        })
        .collect()
}

type P3 = [f64; 3];

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Unit vector hanging down, rotated forward by `angle` in the sagittal plane.
fn limb(len: f64, angle: f64) -> P3 {
    [0.0, len * angle.sin(), -len * angle.cos()]
}

/// Per-walk state shared by all camera views of one recording.
struct Walk {
    sig: GaitSignature,
    phase0: f64,
    condition: Condition,
    /// Per-frame coat jitter of shoulders and hips (CL only).
    coat: Vec<[P3; 4]>,
}

/// 3D joint positions at frame `t`; x lateral (left positive), y forward, z up.
fn pose(w: &Walk, t: usize) -> [P3; NUM_JOINTS] {
    let s = &w.sig;
    let th = TAU * t as f64 / s.cadence + w.phase0;
    let (widen, arm_damp) = match w.condition {
        Condition::Nm => (1.0, 1.0),
        Condition::Bg => (1.0, 0.25),
        Condition::Cl => (1.15, 1.0),
    };
    let leg_len = s.thigh + s.shin;
    let pelvis = [s.sway * th.sin(), 0.0, leg_len + s.bounce * (2.0 * th).cos()];
    let neck = add(pelvis, [0.0, s.torso * s.lean.sin(), s.torso * s.lean.cos()]);
    let mut p = [[0.0; 3]; NUM_JOINTS];
    let half_sh = widen * s.shoulder_width / 2.0;
    let half_hip = widen * s.hip_width / 2.0;
    p[joint::L_SHOULDER] = add(neck, [half_sh, 0.0, 0.0]);
    p[joint::R_SHOULDER] = add(neck, [-half_sh, 0.0, 0.0]);
    p[joint::L_HIP] = add(pelvis, [half_hip, 0.0, 0.0]);
    p[joint::R_HIP] = add(pelvis, [-half_hip, 0.0, 0.0]);
    if let Some(j) = w.coat.get(t) {
        for (k, &jt) in [joint::L_SHOULDER, joint::R_SHOULDER, joint::L_HIP, joint::R_HIP].iter().enumerate() {
            p[jt] = add(p[jt], j[k]);
        }
    }
    let head = add(neck, [0.0, s.neck * (s.lean + 0.15).sin(), s.neck * (s.lean + 0.15).cos()]);
    p[joint::NOSE] = add(head, [0.0, 0.08, 0.0]);
    p[joint::L_EYE] = add(head, [0.03, 0.07, 0.03]);
    p[joint::R_EYE] = add(head, [-0.03, 0.07, 0.03]);
    p[joint::L_EAR] = add(head, [0.07, 0.0, 0.01]);
    p[joint::R_EAR] = add(head, [-0.07, 0.0, 0.01]);
    for (side, offset) in [(0usize, 0.0), (1, PI)] {
        let ph = th + offset;
        let hip_angle = s.stride_amplitude * ph.sin();
        let knee = s.knee_flex * 0.5 * (1.0 + (ph + s.knee_phase).cos());
        let (hip, knee_j, ankle) = if side == 0 {
            (joint::L_HIP, joint::L_KNEE, joint::L_ANKLE)
        } else {
            (joint::R_HIP, joint::R_KNEE, joint::R_ANKLE)
        };
        p[knee_j] = add(p[hip], limb(s.thigh, hip_angle));
        p[ankle] = add(p[knee_j], limb(s.shin, hip_angle - knee));
        let damp = if side == 1 { arm_damp } else { 1.0 };
        let arm_angle = damp * s.arm_swing * (ph + PI + s.arm_phase).sin();
        let (sh, el, wr) = if side == 0 {
            (joint::L_SHOULDER, joint::L_ELBOW, joint::L_WRIST)
        } else {
            (joint::R_SHOULDER, joint::R_ELBOW, joint::R_WRIST)
        };
        p[el] = add(p[sh], limb(s.upper_arm, arm_angle));
        p[wr] = add(p[el], limb(s.forearm, arm_angle + s.elbow_flex * (0.7 + 0.3 * ph.cos())));
    }
    p
}

const PIXELS_PER_UNIT: f64 = 120.0;
const CAMERA_DISTANCE: f64 = 8.0;

/// Weak-perspective projection for a camera at `view_deg` (0 = walking towards the
/// camera, 90 = side view) in image coordinates with y pointing down.
fn project(p: P3, view_deg: u16) -> [f64; 2] {
    let phi = (view_deg as f64).to_radians();
    let horizontal = p[0] * phi.cos() + p[1] * phi.sin();
    let depth = -p[0] * phi.sin() + p[1] * phi.cos();
    let scale = PIXELS_PER_UNIT * CAMERA_DISTANCE / (CAMERA_DISTANCE - depth);
    [320.0 + scale * horizontal, 400.0 - scale * p[2]]
}

fn jitter(sig: &GaitSignature, rng: &mut ChaCha8Rng) -> GaitSignature {
    let mut s = sig.clone();
    let mut j = |x: &mut f64, rel: f64| *x *= 1.0 + rel * rng.sample::<f64, _>(StandardNormal);
    j(&mut s.stride_amplitude, 0.01);
    j(&mut s.cadence, 0.01);
    j(&mut s.arm_swing, 0.03);
    j(&mut s.knee_flex, 0.02);
    j(&mut s.bounce, 0.05);
    j(&mut s.sway, 0.05);
    s
}

/// Generates a deterministic synthetic dataset with the default split `LT` when
/// there are more than 74 subjects and a 50/50 custom split otherwise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<GaitDataset> {
    cfg.validate()?;
    let sigs = subject_signatures(cfg);
    let mut walks = Vec::new();
    for subject in 1..=cfg.n_subjects {
        for c in Condition::ALL {
            for seq in 1..=cfg.counts.get(c) {
                walks.push((subject, c, seq));
            }
        }
    }
    let samples: Vec<Vec<SkeletonSequence>> = walks
        .par_iter()
        .enumerate()
        .map(|(wi, &(subject, condition, seq))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + wi as u64);
            let sig = jitter(&sigs[subject as usize - 1], &mut rng);
            let phase0 = rng.random_range(0.0..TAU);
            let coat = if condition == Condition::Cl {
                (0..cfg.frames)
                    .map(|_| {
                        let mut pt = || -> P3 {
                            let mut g = || 0.02 * rng.sample::<f64, _>(StandardNormal);
                            [g(), g(), g()]
                        };
                        [pt(), pt(), pt(), pt()]
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let walk = Walk { sig, phase0, condition, coat };
            let poses: Vec<[P3; NUM_JOINTS]> = (0..cfg.frames).map(|t| pose(&walk, t)).collect();
            cfg.views
                .iter()
                .map(|&view| {
                    let meta = GaitSampleMeta::new(subject, condition, seq, view)?;
                    let mut coords = Vec::with_capacity(cfg.frames * NUM_JOINTS * 2);
                    for p in &poses {
                        for &j in p {
                            let [u, v] = project(j, view);
                            coords.push(u + cfg.noise_px * rng.sample::<f64, _>(StandardNormal));
                            coords.push(v + cfg.noise_px * rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    SkeletonSequence::new(meta, cfg.frames, coords, None)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(GaitDataset::new(samples.into_iter().flatten().collect(), Split::default_for(cfg.n_subjects)))
}
