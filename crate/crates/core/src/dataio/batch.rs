use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MultiViewFrame;
use crate::error::{Error, Result};

/// Frame indices of a sequence-atomic train/val/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [&Vec<usize>; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Clones the frames of each part, in index order.
    pub fn select<F: Clone>(&self, frames: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
        let pick = |idx: &[usize]| idx.iter().map(|&i| frames[i].clone()).collect();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// Assigns whole sequences greedily, largest first, to the split whose frame
/// count is furthest below its target. Ties go to the earlier split. Once the
/// remaining sequences only just cover the still-empty splits they are
/// reserved for those, so every split receives at least one sequence.
pub fn split_dataset<T>(frames: &[MultiViewFrame<T>], ratios: [f64; 3]) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut by_seq: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        by_seq.entry(f.seq.as_str()).or_default().push(i);
    }
    if by_seq.len() < 3 {
        return Err(Error::InsufficientSequences(by_seq.len()));
    }
    let mut seqs: Vec<(&str, Vec<usize>)> = by_seq.into_iter().collect();
    seqs.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));

    let total: f64 = ratios.iter().sum();
    let targets = ratios.map(|r| r / total * frames.len() as f64);
    let mut assigned = [0usize; 3];
    let mut nseq = [0usize; 3];
    let mut parts: [Vec<usize>; 3] = Default::default();
    let n = seqs.len();
    for (k, (_, idx)) in seqs.into_iter().enumerate() {
        let remaining = n - k;
        let empty: Vec<usize> = (0..3).filter(|&s| nseq[s] == 0).collect();
        let candidates: Vec<usize> = if remaining <= empty.len() { empty } else { (0..3).collect() };
        let deficit = |s: usize| targets[s] - assigned[s] as f64;
        let mut best = candidates[0];
        for &s in &candidates[1..] {
            if deficit(s) > deficit(best) {
                best = s;
            }
        }
        assigned[best] += idx.len();
        nseq[best] += 1;
        parts[best].extend(idx);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

/// A frame in a batch with the indices of the views drawn for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchFrame {
    pub index: usize,
    pub views: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub frames: Vec<BatchFrame>,
}

/// Shuffled mini-batches for one epoch. Frames with more than
/// `views_per_frame` views get a random subset (in ascending order); the
/// last, possibly partial, batch is kept. Deterministic in `(seed, epoch)`.
pub fn batch_iter<T>(
    frames: &[MultiViewFrame<T>],
    frames_per_batch: usize,
    views_per_frame: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Batch> {
    let frames_per_batch = frames_per_batch.max(1);
    let views_per_frame = views_per_frame.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(frames_per_batch)
        .map(|chunk| Batch {
            frames: chunk
                .iter()
                .map(|&i| {
                    let nv = frames[i].views.len();
                    let views = if nv > views_per_frame {
                        let mut v = index::sample(&mut rng, nv, views_per_frame).into_vec();
                        v.sort_unstable();
                        v
                    } else {
                        (0..nv).collect()
                    };
                    BatchFrame { index: i, views }
                })
                .collect(),
        })
        .collect()
}
