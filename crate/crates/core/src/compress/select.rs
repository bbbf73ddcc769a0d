use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{round_ratio, LengthStrategy, WidthStrategy};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;
use crate::transformer::{Mark, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WidthMask {
    pub bits: Vec<bool>,
    pub kind: MaskKind,
}

impl WidthMask {
    pub fn from_indices(dim: usize, kept: impl IntoIterator<Item = usize>, kind: MaskKind) -> Self {
        let mut bits = vec![false; dim];
        for i in kept {
            bits[i] = true;
        }
        Self { bits, kind }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Mean over heads of each head's `[CLS]` attention row, for teacher layer
/// `layer` (1-based). Layer 0 has no attention and reads layer 1.
pub fn importance_scores(attentions: &[Vec<Tensor<f32>>], layer: usize) -> Result<Vec<f64>> {
    let layer = layer.max(1);
    ensure!(layer <= attentions.len(), "layer {layer} above {}", attentions.len());
    let heads = &attentions[layer - 1];
    ensure!(!heads.is_empty(), "layer {layer} has no attention heads");
    let n = heads[0].shape()[1];
    let mut s = vec![0.0f64; n];
    for h in heads {
        for (acc, &p) in s.iter_mut().zip(h.row(0)) {
            *acc += p as f64;
        }
    }
    let a = heads.len() as f64;
    s.iter_mut().for_each(|v| *v /= a);
    Ok(s)
}

/// Candidate positions ordered by descending score, ties to the lower index.
pub(crate) fn ranking(scores: &[f64], keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Kept token positions, ascending.
pub fn select_tokens(scores: &[f64], seq: &TokenSequence, n_length: usize, strategy: LengthStrategy) -> Result<Vec<usize>> {
    ensure!(n_length >= 1, "n_length must be at least 1");
    let n = seq.len();
    let mut kept = match strategy {
        LengthStrategy::Left => (0..n_length.min(n)).collect(),
        LengthStrategy::Att | LengthStrategy::AttNoSep | LengthStrategy::AttNoSepTop12 => {
            ensure!(scores.len() == n, "{} scores for {n} tokens", scores.len());
            let drop_sep = strategy != LengthStrategy::Att;
            let mut order = ranking(scores, |i| !(drop_sep && seq.marks[i] == Mark::Sep));
            order.truncate(n_length);
            order
        }
    };
    kept.sort_unstable();
    Ok(kept)
}

/// The mask shared by every vector for `Rand` and `Uniform`; `None` for `Mag`.
pub fn static_mask(strategy: WidthStrategy, dim: usize, n_w: usize, seed: u64) -> Result<Option<WidthMask>> {
    ensure!((1..=dim).contains(&n_w), "kept width {n_w} outside [1, {dim}]");
    Ok(match strategy {
        WidthStrategy::Uniform => {
            // 1-indexed positions round(i·d/N^W), i = 1..N^W
            let kept = (1..=n_w).map(|i| round_ratio(i * dim, n_w) - 1);
            Some(WidthMask::from_indices(dim, kept, MaskKind::Static))
        }
        WidthStrategy::Rand => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kept = rand::seq::index::sample(&mut rng, dim, n_w);
            Some(WidthMask::from_indices(dim, kept, MaskKind::Static))
        }
        WidthStrategy::Mag => None,
    })
}

/// Keeps the `n_w` largest magnitudes; ties go to the lower index.
pub fn mag_mask(values: &[f32], n_w: usize) -> Result<WidthMask> {
    let dim = values.len();
    ensure!((1..=dim).contains(&n_w), "kept width {n_w} outside [1, {dim}]");
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    Ok(WidthMask::from_indices(dim, idx[..n_w].iter().copied(), MaskKind::Dynamic))
}

/// Width mask for `dim` dimensions; `Mag` needs the vector itself.
pub fn width_mask(dim: usize, vector: Option<&[f32]>, n_w: usize, strategy: WidthStrategy, seed: u64) -> Result<WidthMask> {
    match strategy {
        WidthStrategy::Mag => {
            let v = vector.ok_or_else(|| crate::Error::contract("magnitude masks need the vector"))?;
            ensure!(v.len() == dim, "vector has {} entries, expected {dim}", v.len());
            mag_mask(v, n_w)
        }
        _ => Ok(static_mask(strategy, dim, n_w, seed)?.expect("static strategy")),
    }
}
