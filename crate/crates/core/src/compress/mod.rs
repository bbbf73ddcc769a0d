//! Hidden-state knowledge selection along depth, length and width.
//!
//! A teacher trace holds `L+1` hidden layers of `|x|×d` activations. A
//! [`CompressionConfig`] picks which layer pairs, which token positions and
//! which hidden dimensions survive; [`compress`] gathers the survivors.

mod select;
mod space;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;
use crate::transformer::{ForwardTrace, Transformer, TokenSequence};

pub use select::{importance_scores, mag_mask, select_tokens, static_mask, width_mask, WidthMask, MaskKind};
pub use space::{enumerate_configs, sample_configs, GridPoint, Sampled, MAX_LENGTH};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMapMode {
    #[serde(rename = "literal_eq5")]
    Literal,
    #[default]
    PerLayerRound,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LengthStrategy {
    #[default]
    Att,
    AttNoSep,
    AttNoSepTop12,
    Left,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WidthStrategy {
    Rand,
    #[default]
    Uniform,
    Mag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub n_depth: usize,
    pub n_length: usize,
    pub width_fraction: f64,
    pub l_top: usize,
    #[serde(default)]
    pub depth_map_mode: DepthMapMode,
    #[serde(default)]
    pub length_strategy: LengthStrategy,
    #[serde(default)]
    pub width_strategy: WidthStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl CompressionConfig {
    /// Keeps everything: every layer, up to `max_len` tokens, every dimension.
    pub fn full(student_layers: usize, teacher_layers: usize, max_len: usize) -> Self {
        Self {
            n_depth: student_layers + 1,
            n_length: max_len,
            width_fraction: 1.0,
            l_top: teacher_layers,
            depth_map_mode: DepthMapMode::PerLayerRound,
            length_strategy: LengthStrategy::Left,
            width_strategy: WidthStrategy::Uniform,
            seed: 0,
        }
    }

    pub fn from_grid(p: GridPoint, teacher_layers: usize) -> Self {
        Self {
            n_depth: p.n_depth,
            n_length: p.n_length,
            width_fraction: p.tenths as f64 / 10.0,
            l_top: teacher_layers,
            ..Self::full(0, teacher_layers, 0)
        }
    }

    /// Width fraction in tenths (1..=10).
    pub fn width_tenths(&self) -> Result<u32> {
        let t = self.width_fraction * 10.0;
        let r = t.round();
        ensure!(
            (t - r).abs() < 1e-9 && (1.0..=10.0).contains(&r),
            "width_fraction {} is not one of 0.1, 0.2, ..., 1.0",
            self.width_fraction
        );
        Ok(r as u32)
    }

    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        ensure!(
            (1..=student_layers + 1).contains(&self.n_depth),
            "n_depth {} outside [1, {}]",
            self.n_depth,
            student_layers + 1
        );
        ensure!((1..=MAX_LENGTH).contains(&self.n_length), "n_length {} outside [1, {MAX_LENGTH}]", self.n_length);
        ensure!(
            (1..=teacher_layers).contains(&self.l_top),
            "l_top {} outside [1, {teacher_layers}]",
            self.l_top
        );
        self.width_tenths()?;
        Ok(())
    }

    /// Number of kept dimensions out of `dim`: `round(width_fraction·dim)`, at least 1.
    pub fn kept_width(&self, dim: usize) -> Result<usize> {
        let tenths = self.width_tenths()? as usize;
        Ok(round_ratio(tenths * dim, 10).max(1))
    }
}

/// `round(num/den)` with halves away from zero, for non-negative integers.
pub(crate) fn round_ratio(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// `g(l) = l·L/L'`.
pub fn layer_map_uniform(l: usize, teacher_layers: usize, student_layers: usize) -> Result<usize> {
    ensure!(student_layers > 0, "student must have at least one layer");
    ensure!(
        teacher_layers.is_multiple_of(student_layers),
        "teacher depth {teacher_layers} is not a multiple of student depth {student_layers}"
    );
    ensure!(l <= student_layers, "student layer {l} above {student_layers}");
    Ok(l * teacher_layers / student_layers)
}

/// Mapping that sends the top student layer towards teacher layer `l_top`.
pub fn layer_map_redesigned(l: usize, student_layers: usize, l_top: usize, mode: DepthMapMode) -> usize {
    match mode {
        DepthMapMode::Literal => l * round_ratio(l_top, student_layers),
        DepthMapMode::PerLayerRound => round_ratio(l * l_top, student_layers),
    }
}

/// Keeps the top `n_depth` entries of a list indexed by student layer `0..=L'`.
pub fn select_depth<P: Clone>(pairs: &[P], n_depth: usize) -> Result<Vec<P>> {
    ensure!(
        (1..=pairs.len()).contains(&n_depth),
        "n_depth {n_depth} outside [1, {}]",
        pairs.len()
    );
    Ok(pairs[pairs.len() - n_depth..].to_vec())
}

/// `N^D·min(N^L, |x|)·N^W/d`.
pub fn a_hsk(config: &CompressionConfig, seq_len: usize) -> Result<f64> {
    let tenths = config.width_tenths()? as usize;
    Ok((config.n_depth * config.n_length.min(seq_len) * tenths) as f64 / 10.0)
}

/// Amount carried by the uncompressed tensor: `(L'+1)·|x|`.
pub fn full_a_hsk(student_layers: usize, seq_len: usize) -> f64 {
    ((student_layers + 1) * seq_len) as f64
}

pub fn normalized_a_hsk(config: &CompressionConfig, student_layers: usize, seq_len: usize) -> Result<f64> {
    Ok(a_hsk(config, seq_len)? / full_a_hsk(student_layers, seq_len))
}

/// Kept dimensions of one pair: one shared mask, or one per kept token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairMasks {
    Static(WidthMask),
    Dynamic(Vec<WidthMask>),
}

impl PairMasks {
    pub fn for_token(&self, i: usize) -> &WidthMask {
        match self {
            PairMasks::Static(m) => m,
            PairMasks::Dynamic(ms) => &ms[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HskPair {
    pub student_layer: usize,
    pub teacher_layer: usize,
    /// Kept positions, ascending.
    pub tokens: Vec<usize>,
    pub masks: PairMasks,
    /// Kept activations, token-major, dimensions ascending within a token.
    pub values: Vec<f32>,
}

impl HskPair {
    /// Dense `tokens×dim` target with eliminated dimensions set to zero, and the matching 0/1 mask.
    pub fn dense(&self, dim: usize) -> (Vec<f32>, Vec<f32>) {
        let mut target = vec![0.0; self.tokens.len() * dim];
        let mut mask = vec![0.0; self.tokens.len() * dim];
        let mut vals = self.values.iter();
        for i in 0..self.tokens.len() {
            for j in self.masks.for_token(i).kept() {
                target[i * dim + j] = *vals.next().expect("value count matches masks");
                mask[i * dim + j] = 1.0;
            }
        }
        (target, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedHsk {
    pub seq_len: usize,
    pub dim: usize,
    pub pairs: Vec<HskPair>,
}

impl CompressedHsk {
    /// A^HSK counted from what was actually kept.
    pub fn structural_a_hsk(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| (0..p.tokens.len()).map(|i| p.masks.for_token(i).popcount() as f64 / self.dim as f64).sum::<f64>())
            .sum()
    }

    pub fn num_values(&self) -> usize {
        self.pairs.iter().map(|p| p.values.len()).sum()
    }
}

/// Teacher layer whose scores rank tokens for student layer `l`.
fn score_layer(l: usize, student_layers: usize, teacher_layers: usize, config: &CompressionConfig) -> usize {
    // The embedding pair has no attention of its own; it borrows layer 1's scores.
    let l = l.max(1);
    let top = match config.length_strategy {
        LengthStrategy::AttNoSepTop12 => teacher_layers,
        _ => config.l_top,
    };
    layer_map_redesigned(l, student_layers, top, config.depth_map_mode)
}

/// Layer pairs `(l, g(l))` for `l = 0..=L'` under the configured mapping.
pub fn layer_pairs(config: &CompressionConfig, student_layers: usize, teacher_layers: usize) -> Result<Vec<(usize, usize)>> {
    (0..=student_layers)
        .map(|l| {
            let g = layer_map_redesigned(l, student_layers, config.l_top, config.depth_map_mode);
            ensure!(g <= teacher_layers, "student layer {l} maps to teacher layer {g} above {teacher_layers}");
            Ok((l, g))
        })
        .collect()
}

/// Selects and gathers the teacher's hidden-state knowledge for one sequence.
pub fn compress(
    trace: &ForwardTrace<f32>,
    seq: &TokenSequence,
    config: &CompressionConfig,
    student_layers: usize,
) -> Result<CompressedHsk> {
    let teacher_layers = trace.num_layers();
    config.validate(student_layers, teacher_layers)?;
    ensure!(trace.seq_len() == seq.len(), "trace covers {} tokens, sequence has {}", trace.seq_len(), seq.len());
    let dim = trace.hidden[0].shape()[1];
    let n_w = config.kept_width(dim)?;
    let shared = static_mask(config.width_strategy, dim, n_w, config.seed)?;
    let kept = select_depth(&layer_pairs(config, student_layers, teacher_layers)?, config.n_depth)?;
    let mut pairs = Vec::with_capacity(kept.len());
    for (l, g) in kept {
        let tokens = if config.length_strategy == LengthStrategy::Left {
            select_tokens(&[], seq, config.n_length, LengthStrategy::Left)?
        } else {
            let sl = score_layer(l, student_layers, teacher_layers, config);
            ensure!(sl <= teacher_layers, "score layer {sl} above {teacher_layers}");
            let scores = importance_scores(&trace.attentions, sl)?;
            select_tokens(&scores, seq, config.n_length, config.length_strategy)?
        };
        let hidden: &Tensor<f32> = &trace.hidden[g];
        let mut values = Vec::new();
        let masks = match &shared {
            Some(m) => {
                for &t in &tokens {
                    let row = hidden.row(t);
                    values.extend(m.kept().map(|j| row[j]));
                }
                PairMasks::Static(m.clone())
            }
            None => PairMasks::Dynamic(
                tokens
                    .iter()
                    .map(|&t| {
                        let row = hidden.row(t);
                        let m = mag_mask(row, n_w)?;
                        values.extend(m.kept().map(|j| row[j]));
                        Ok(m)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        ensure!(values.iter().all(|v| v.is_finite()), "non-finite teacher activation in layer {g}");
        pairs.push(HskPair { student_layer: l, teacher_layer: g, tokens, masks, values });
    }
    Ok(CompressedHsk { seq_len: seq.len(), dim, pairs })
}

/// How often a `[SEP]` position is the most attended (or among the top three) token of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepRank {
    pub layer: usize,
    pub top1_fraction: f64,
    pub top3_fraction: f64,
}

/// Rank statistics over traces; a sample counts when its best-ranked `[SEP]`
/// qualifies. Samples without `[SEP]` are left out of the denominator.
pub fn sep_rank_stats_from_traces(traces: &[ForwardTrace<f32>], seqs: &[TokenSequence]) -> Result<Vec<SepRank>> {
    ensure!(traces.len() == seqs.len(), "{} traces for {} sequences", traces.len(), seqs.len());
    let with_sep: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].sep_positions().next().is_some()).collect();
    ensure!(!with_sep.is_empty(), "no sample contains a [SEP] token");
    let layers = traces[with_sep[0]].num_layers();
    let mut out = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let (mut top1, mut top3) = (0usize, 0usize);
        for &i in &with_sep {
            let scores = importance_scores(&traces[i].attentions, layer)?;
            let order = select::ranking(&scores, |_| true);
            let best = seqs[i].sep_positions().map(|p| order.iter().position(|&q| q == p).unwrap()).min().unwrap();
            top1 += usize::from(best == 0);
            top3 += usize::from(best < 3);
        }
        let n = with_sep.len() as f64;
        out.push(SepRank { layer, top1_fraction: top1 as f64 / n, top3_fraction: top3 as f64 / n });
    }
    Ok(out)
}

pub fn sep_rank_stats(teacher: &Transformer<f32>, seqs: &[TokenSequence]) -> Result<Vec<SepRank>> {
    let traces = seqs.iter().map(|s| teacher.forward(s)).collect::<Result<Vec<_>>>()?;
    sep_rank_stats_from_traces(&traces, seqs)
}
