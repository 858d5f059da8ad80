use rand::Rng;
use rand_distr::StandardNormal;

use super::{SkeletonSequence, MIRROR_PAIRS, NUM_JOINTS};

/// Swaps left/right joints and reflects x about the origin.
pub fn augment_mirror(seq: &SkeletonSequence) -> SkeletonSequence {
    let mut out = seq.clone();
    let frames = out.frames();
    let coords = out.coords_mut();
    for t in 0..frames {
        let base = t * NUM_JOINTS * 2;
        for &(l, r) in &MIRROR_PAIRS {
            coords.swap(base + 2 * l, base + 2 * r);
            coords.swap(base + 2 * l + 1, base + 2 * r + 1);
        }
        for j in 0..NUM_JOINTS {
            coords[base + 2 * j] = -coords[base + 2 * j];
        }
    }
    if let Some(conf) = out.confidence_mut() {
        for t in 0..frames {
            for &(l, r) in &MIRROR_PAIRS {
                conf.swap(t * NUM_JOINTS + l, t * NUM_JOINTS + r);
            }
        }
    }
    out
}

/// Adds an independent Gaussian offset per joint coordinate plus one offset per
/// coordinate shared by the whole sequence.
pub fn augment_noise<R: Rng + ?Sized>(seq: &SkeletonSequence, sigma_joint: f64, sigma_seq: f64, rng: &mut R) -> SkeletonSequence {
    assert!(sigma_joint >= 0.0 && sigma_seq >= 0.0, "noise sigmas must be non-negative");
    let shared: [f64; 2] = [
        sigma_seq * rng.sample::<f64, _>(StandardNormal),
        sigma_seq * rng.sample::<f64, _>(StandardNormal),
    ];
    let mut out = seq.clone();
    for (i, c) in out.coords_mut().iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        *c += sigma_joint * z + shared[i % 2];
    }
    out
}

/// `length` consecutive frames starting at `start`, wrapping around the end of the
/// sequence as often as needed.
pub fn cyclic_window(seq: &SkeletonSequence, start: usize, length: usize) -> SkeletonSequence {
    let t = seq.frames();
    seq.select_frames((start..start + length).map(|i| i % t))
}

/// A uniformly placed window of `length` frames, or the whole sequence repeated
/// cyclically when it is shorter than `length`.
pub fn random_crop<R: Rng + ?Sized>(seq: &SkeletonSequence, length: usize, rng: &mut R) -> SkeletonSequence {
    let t = seq.frames();
    if t >= length {
        let start = rng.random_range(0..=t - length);
        cyclic_window(seq, start, length)
    } else {
        cyclic_window(seq, 0, length)
    }
}
