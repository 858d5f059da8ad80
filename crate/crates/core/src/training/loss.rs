use std::collections::BTreeMap;

use crate::ndtensor::{Tape, Var};
use crate::{Error, Result};

/// Batch-hard triplet loss recorded on a tape.
#[derive(Clone, Debug)]
pub struct TripletLoss {
    /// Scalar mean hinge over anchors.
    pub loss: Var,
    /// Fraction of anchors with a positive hinge.
    pub active_frac: f64,
    /// Hardest positive of each anchor.
    pub positives: Vec<usize>,
    /// Hardest negative of each anchor.
    pub negatives: Vec<usize>,
}

/// Checks that every label occurs at least twice and that there are two classes.
pub fn check_labels(labels: &[u32]) -> Result<()> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((label, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Contract(format!("label {label} has a single sample; batch-hard mining needs a positive")));
    }
    if counts.len() < 2 {
        let only = counts.keys().next().map_or("none".to_string(), |l| l.to_string());
        return Err(Error::Contract(format!("batch holds only label {only}; batch-hard mining needs a negative")));
    }
    Ok(())
}

/// Per anchor, the farthest same-label sample and the nearest other-label sample of
/// a row-major `B × B` distance matrix; ties go to the lowest index.
pub fn mine_batch_hard(dist: &[f64], labels: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let b = labels.len();
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for a in 0..b {
        let row = &dist[a * b..(a + 1) * b];
        let mut p: Option<usize> = None;
        let mut n: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if p.is_none_or(|p| row[j] > row[p]) {
                    p = Some(j);
                }
            } else if n.is_none_or(|n| row[j] < row[n]) {
                n = Some(j);
            }
        }
        pos.push(p.expect("labels checked"));
        neg.push(n.expect("labels checked"));
    }
    (pos, neg)
}

/// `mean_a max(d(a, p*) − d(a, n*) + margin, 0)` over the `[B, D]` embeddings.
pub fn batch_hard_triplet_loss(tape: &mut Tape, embeddings: Var, labels: &[u32], margin: f64) -> Result<TripletLoss> {
    let b = match tape.shape(embeddings) {
        &[b, _] => b,
        s => return Err(Error::dim(format!("triplet loss needs [B,D] embeddings, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for a batch of {b}", labels.len())));
    }
    if !(margin >= 0.0) {
        return Err(Error::Contract(format!("margin {margin} must be non-negative")));
    }
    check_labels(labels)?;
    let d = tape.pairwise_distances(embeddings)?;
    let (positives, negatives) = mine_batch_hard(tape.value(d).data(), labels);
    let pi: Vec<usize> = positives.iter().enumerate().map(|(a, &p)| a * b + p).collect();
    let ni: Vec<usize> = negatives.iter().enumerate().map(|(a, &n)| a * b + n).collect();
    let dp = tape.gather(d, &pi)?;
    let dn = tape.gather(d, &ni)?;
    let diff = tape.sub(dp, dn)?;
    let hinge = tape.add_scalar(diff, margin);
    let hinge = tape.relu(hinge);
    let active = tape.value(hinge).data().iter().filter(|&&h| h > 0.0).count();
    let loss = tape.mean(hinge);
    Ok(TripletLoss { loss, active_frac: active as f64 / b as f64, positives, negatives })
}
