use super::{joint, SkeletonSequence, BONE_PARENT, NUM_JOINTS};
use crate::ndtensor::Tensor;
use crate::{Error, Result};

pub const MULTI_INPUT_CHANNELS: usize = 10;

/// Network input for one sequence: `10 × T × 17`.
///
/// Channel pairs (x, y): joints, nose-relative joints, first-order velocity,
/// second-order velocity, bones.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiInputTensor {
    data: Tensor,
}

impl MultiInputTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }
}

fn hip_center(seq: &SkeletonSequence, t: usize) -> [f64; 2] {
    let l = seq.xy(t, joint::L_HIP);
    let r = seq.xy(t, joint::R_HIP);
    [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Moves the time-averaged hip centre to the origin and scales so that the median
/// nose-to-hip-centre distance is 1.
pub fn normalize_sequence(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    let frames = seq.frames();
    if frames < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: frames });
    }
    let mut origin = [0.0; 2];
    let mut dists = Vec::with_capacity(frames);
    for t in 0..frames {
        let hc = hip_center(seq, t);
        origin[0] += hc[0];
        origin[1] += hc[1];
        let nose = seq.xy(t, joint::NOSE);
        dists.push(((nose[0] - hc[0]).powi(2) + (nose[1] - hc[1]).powi(2)).sqrt());
    }
    origin[0] /= frames as f64;
    origin[1] /= frames as f64;
    let zero = dists.iter().filter(|&&d| d == 0.0).count();
    let scale = median(dists);
    if 2 * zero > frames || scale == 0.0 {
        return Err(Error::Degenerate(format!(
            "{}: nose coincides with hip centre in {zero} of {frames} frames",
            seq.meta.key()
        )));
    }
    let mut out = seq.clone();
    for pair in out.coords_mut().chunks_exact_mut(2) {
        pair[0] = (pair[0] - origin[0]) / scale;
        pair[1] = (pair[1] - origin[1]) / scale;
    }
    Ok(out)
}

/// Builds the 10-channel multi-input representation of a (normalised) sequence.
pub fn build_multi_input(seq: &SkeletonSequence) -> Result<MultiInputTensor> {
    let frames = seq.frames();
    if frames < 3 {
        return Err(Error::InsufficientFrames { needed: 3, got: frames });
    }
    let plane = frames * NUM_JOINTS;
    let mut data = vec![0.0; MULTI_INPUT_CHANNELS * plane];
    for t in 0..frames {
        let nose = seq.xy(t, joint::NOSE);
        for j in 0..NUM_JOINTS {
            let p = seq.xy(t, j);
            let parent = seq.xy(t, BONE_PARENT[j]);
            let v1 = if t + 1 < frames { sub(seq.xy(t + 1, j), p) } else { [0.0; 2] };
            let v2 = if t + 2 < frames { sub(seq.xy(t + 2, j), p) } else { [0.0; 2] };
            let feats = [p, sub(p, nose), v1, v2, sub(p, parent)];
            for (k, f) in feats.iter().enumerate() {
                data[(2 * k) * plane + t * NUM_JOINTS + j] = f[0];
                data[(2 * k + 1) * plane + t * NUM_JOINTS + j] = f[1];
            }
        }
    }
    Ok(MultiInputTensor { data: Tensor::new(vec![MULTI_INPUT_CHANNELS, frames, NUM_JOINTS], data)? })
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Condition, GaitSampleMeta};

    fn meta() -> GaitSampleMeta {
        GaitSampleMeta::new(1, Condition::Nm, 1, 90).unwrap()
    }

    fn seq_from(frames: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> SkeletonSequence {
        let mut c = Vec::new();
        for t in 0..frames {
            for j in 0..NUM_JOINTS {
                c.extend(f(t, j));
            }
        }
        SkeletonSequence::new(meta(), frames, c, None).unwrap()
    }

    fn walker(t: usize, j: usize) -> [f64; 2] {
        let tf = t as f64;
        [j as f64 * 3.0 + (tf * 0.3 + j as f64).sin() * 5.0 + tf, -(j as f64) * 7.0 + (tf * 0.2).cos() * 2.0]
    }

    #[test]
    fn short_sequences_are_rejected() {
        let s = seq_from(1, walker);
        assert!(matches!(normalize_sequence(&s), Err(Error::InsufficientFrames { needed: 2, got: 1 })));
        let s = seq_from(2, walker);
        assert!(matches!(build_multi_input(&s), Err(Error::InsufficientFrames { needed: 3, got: 2 })));
    }

    #[test]
    fn degenerate_skeleton_is_reported() {
        let s = seq_from(5, |_, _| [1.0, 1.0]);
        assert!(matches!(normalize_sequence(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalized_sequence_has_unit_median_and_centered_hips() {
        let n = normalize_sequence(&seq_from(9, walker)).unwrap();
        let mut mean = [0.0; 2];
        let mut d = Vec::new();
        for t in 0..9 {
            let hc = hip_center(&n, t);
            mean[0] += hc[0] / 9.0;
            mean[1] += hc[1] / 9.0;
            let nose = n.xy(t, joint::NOSE);
            d.push(((nose[0] - hc[0]).powi(2) + (nose[1] - hc[1]).powi(2)).sqrt());
        }
        assert!(mean[0].abs() < 1e-12 && mean[1].abs() < 1e-12);
        assert!((median(d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_input_channels() {
        let s = seq_from(4, |t, j| if j == joint::NOSE { [1.0, 1.0] } else if j == 5 { [3.0, 4.0] } else { [t as f64, j as f64] });
        let m = build_multi_input(&s).unwrap();
        let x = m.tensor();
        assert_eq!(x.shape(), &[10, 4, 17]);
        assert_eq!((x.at(&[2, 0, 5]), x.at(&[3, 0, 5])), (2.0, 3.0));
        // first-order velocity of a moving joint, zero-padded at the end
        assert_eq!(x.at(&[4, 0, 8]), 1.0);
        assert_eq!(x.at(&[4, 3, 8]), 0.0);
        assert_eq!(x.at(&[6, 1, 8]), 2.0);
        assert_eq!(x.at(&[6, 2, 8]), 0.0);
        // nose bone is the zero vector; elbow bone points from shoulder
        assert_eq!((x.at(&[8, 2, 0]), x.at(&[9, 2, 0])), (0.0, 0.0));
        assert_eq!((x.at(&[8, 2, 7]), x.at(&[9, 2, 7])), (2.0 - 3.0, 7.0 - 4.0));
    }

    #[test]
    fn constant_sequence_has_zero_velocity() {
        let s = seq_from(6, |_, j| [j as f64, 2.0 * j as f64]);
        let m = build_multi_input(&s).unwrap();
        let plane = 6 * NUM_JOINTS;
        assert!(m.tensor().data()[4 * plane..8 * plane].iter().all(|&v| v == 0.0));
    }
}
