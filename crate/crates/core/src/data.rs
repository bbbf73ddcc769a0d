use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::transformer::TokenSequence;

/// A labelled sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(flatten)]
    pub seq: TokenSequence,
    pub label: usize,
}

/// Mini-batches of example indices for one epoch. Batches never mix sequence
/// lengths; order is a deterministic function of `seed` and `epoch`.
pub fn length_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        by_len.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_len {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Batches in input order (for evaluation and extraction).
pub fn sequential_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        by_len.entry(n).or_default().push(i);
    }
    by_len.into_values().flat_map(|idx| idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once_without_mixing_lengths() {
        let lengths = [3, 5, 3, 3, 5, 4, 3, 5, 5, 5];
        let batches = length_batches(&lengths, 2, 9, 0);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.len() <= 2);
            assert!(b.iter().all(|&i| lengths[i] == lengths[b[0]]));
        }
    }

    #[test]
    fn batches_are_seeded() {
        let lengths = vec![4; 40];
        assert_eq!(length_batches(&lengths, 8, 1, 3), length_batches(&lengths, 8, 1, 3));
        assert_ne!(length_batches(&lengths, 8, 1, 3), length_batches(&lengths, 8, 1, 4));
    }
}
