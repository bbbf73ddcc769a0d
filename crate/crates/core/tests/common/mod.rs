#![allow(dead_code)]

use hsk_core::compress::{CompressedHsk, CompressionConfig, DepthMapMode, LengthStrategy, WidthStrategy};
use hsk_core::transformer::{ForwardTrace, Mark, TokenSequence};
use hsk_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Published `(N^D, N^L, N^W/d)` configurations per target amount, with the band in percent.
pub const PUBLISHED_CONFIGS: [(f64, u32, &[(usize, usize, f64)]); 5] = [
    (1.0, 10, &[
        (2, 1, 0.5), (5, 2, 0.1), (1, 9, 0.1), (1, 2, 0.5), (1, 5, 0.2), (1, 1, 1.0), (3, 3, 0.1),
        (3, 1, 0.3), (1, 10, 0.1), (2, 5, 0.1), (1, 1, 0.9), (5, 1, 0.2), (1, 3, 0.3),
    ]),
    (3.0, 5, &[
        (6, 1, 0.5), (6, 5, 0.1), (1, 29, 0.1), (1, 10, 0.3), (1, 5, 0.6), (2, 15, 0.1), (5, 2, 0.3),
        (5, 1, 0.6), (5, 6, 0.1), (3, 5, 0.2), (1, 30, 0.1), (5, 3, 0.2), (1, 6, 0.5), (1, 15, 0.2),
        (2, 3, 0.5), (1, 3, 1.0), (2, 5, 0.3), (3, 10, 0.1), (3, 2, 0.5), (3, 1, 1.0),
    ]),
    (5.0, 5, &[
        (1, 13, 0.4), (6, 2, 0.4), (5, 5, 0.2), (2, 24, 0.1), (1, 25, 0.2), (1, 6, 0.8), (7, 7, 0.1),
        (6, 8, 0.1), (4, 4, 0.3), (2, 6, 0.4), (2, 3, 0.8), (3, 8, 0.2), (4, 12, 0.1), (1, 7, 0.7),
        (1, 49, 0.1), (2, 4, 0.6), (5, 10, 0.1), (1, 5, 1.0), (3, 4, 0.4), (1, 10, 0.5), (2, 13, 0.2),
        (3, 2, 0.8), (4, 3, 0.4), (1, 8, 0.6), (5, 2, 0.5), (2, 5, 0.5), (6, 1, 0.8), (4, 6, 0.2),
        (1, 16, 0.3), (4, 13, 0.1), (6, 4, 0.2),
    ]),
    (10.0, 5, &[
        (7, 3, 0.5), (1, 49, 0.2), (3, 8, 0.4), (3, 5, 0.7), (1, 25, 0.4), (2, 7, 0.7), (3, 16, 0.2),
        (7, 14, 0.1), (2, 8, 0.6), (5, 3, 0.7), (3, 7, 0.5), (4, 8, 0.3), (5, 7, 0.3), (6, 8, 0.2),
        (5, 5, 0.4), (6, 2, 0.8), (5, 4, 0.5), (4, 5, 0.5), (1, 13, 0.8), (1, 32, 0.3), (3, 33, 0.1),
        (3, 34, 0.1), (4, 25, 0.1), (6, 4, 0.4), (5, 10, 0.2), (2, 26, 0.2), (7, 15, 0.1), (1, 11, 0.9),
        (4, 6, 0.4), (2, 6, 0.8), (2, 10, 0.5), (1, 10, 1.0), (4, 26, 0.1), (5, 2, 1.0), (3, 4, 0.8),
        (4, 3, 0.8),
    ]),
    (50.0, 5, &[
        (6, 10, 0.8), (2, 36, 0.7), (3, 25, 0.7), (2, 27, 0.9), (6, 9, 0.9), (6, 12, 0.7), (6, 27, 0.3),
        (7, 24, 0.3), (4, 18, 0.7), (3, 21, 0.8), (5, 10, 1.0), (7, 23, 0.3), (5, 25, 0.4), (4, 26, 0.5),
        (6, 17, 0.5), (2, 26, 1.0), (6, 8, 1.0), (4, 12, 1.0), (2, 43, 0.6), (5, 16, 0.6), (4, 25, 0.5),
    ]),
];

/// Kept entries of one layer pair: `(l, g, [(token, [(dim, bits)])])`.
pub type PairEntries = (usize, usize, Vec<(usize, Vec<(usize, u32)>)>);

/// Flattens a compressed record into explicit kept entries.
pub fn entries_of(c: &CompressedHsk) -> Vec<PairEntries> {
    c.pairs
        .iter()
        .map(|p| {
            let mut vals = p.values.iter();
            let toks = p
                .tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, p.masks.for_token(i).kept().map(|j| (j, vals.next().unwrap().to_bits())).collect()))
                .collect();
            assert!(vals.next().is_none(), "more values than mask bits");
            (p.student_layer, p.teacher_layer, toks)
        })
        .collect()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn map_layer(l: usize, student_layers: usize, top: usize, mode: DepthMapMode) -> usize {
    match mode {
        DepthMapMode::Literal => l * round_half_up(top as f64 / student_layers as f64),
        DepthMapMode::PerLayerRound => round_half_up((l * top) as f64 / student_layers as f64),
    }
}

/// Number of candidates strictly ahead of `i`: higher key, or equal key at a lower index.
fn rank_of(keys: &[f64], candidates: &[usize], i: usize) -> usize {
    candidates.iter().filter(|&&j| keys[j] > keys[i] || (keys[j] == keys[i] && j < i)).count()
}

/// Brute-force compressor. `None` when the configuration maps past the teacher's depth.
pub fn reference_compress(
    trace: &ForwardTrace<f32>,
    seq: &TokenSequence,
    c: &CompressionConfig,
    student_layers: usize,
) -> Option<Vec<PairEntries>> {
    let big_l = trace.attentions.len();
    let n = seq.len();
    let d = trace.hidden[0].shape()[1];
    let tenths = (c.width_fraction * 10.0).round() as usize;
    let n_w = round_half_up((tenths * d) as f64 / 10.0).max(1);

    let shared: Option<Vec<usize>> = match c.width_strategy {
        WidthStrategy::Uniform => Some((1..=n_w).map(|i| round_half_up((i * d) as f64 / n_w as f64) - 1).collect()),
        WidthStrategy::Rand => {
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            let mut v = rand::seq::index::sample(&mut rng, d, n_w).into_vec();
            v.sort_unstable();
            Some(v)
        }
        WidthStrategy::Mag => None,
    };

    let mut all = Vec::new();
    for l in 0..=student_layers {
        let g = map_layer(l, student_layers, c.l_top, c.depth_map_mode);
        if g > big_l {
            return None;
        }
        all.push((l, g));
    }
    let kept = &all[all.len() - c.n_depth..];

    let mut out = Vec::new();
    for &(l, g) in kept {
        let tokens: Vec<usize> = if c.length_strategy == LengthStrategy::Left {
            (0..n).filter(|&t| t < c.n_length).collect()
        } else {
            let top = if c.length_strategy == LengthStrategy::AttNoSepTop12 { big_l } else { c.l_top };
            let sl = map_layer(l.max(1), student_layers, top, c.depth_map_mode).max(1);
            if sl > big_l {
                return None;
            }
            let heads = &trace.attentions[sl - 1];
            let mut scores = vec![0.0f64; n];
            for (j, s) in scores.iter_mut().enumerate() {
                for h in heads {
                    *s += h.data()[j] as f64;
                }
                *s /= heads.len() as f64;
            }
            let drop_sep = c.length_strategy != LengthStrategy::Att;
            let cands: Vec<usize> = (0..n).filter(|&t| !(drop_sep && seq.marks[t] == Mark::Sep)).collect();
            cands.iter().copied().filter(|&t| rank_of(&scores, &cands, t) < c.n_length).collect()
        };
        let hidden = &trace.hidden[g];
        let toks = tokens
            .into_iter()
            .map(|t| {
                let row = &hidden.data()[t * d..(t + 1) * d];
                let dims: Vec<usize> = match &shared {
                    Some(m) => m.clone(),
                    None => {
                        let mags: Vec<f64> = row.iter().map(|v| v.abs() as f64).collect();
                        let all: Vec<usize> = (0..d).collect();
                        (0..d).filter(|&j| rank_of(&mags, &all, j) < n_w).collect()
                    }
                };
                (t, dims.into_iter().map(|j| (j, row[j].to_bits())).collect())
            })
            .collect();
        out.push((l, g, toks));
    }
    Some(out)
}

/// Small random sequence: `[CLS]` then ordinary tokens with a few `[SEP]` marks.
pub fn random_seq(rng: &mut impl Rng, n: usize) -> TokenSequence {
    let mut marks = vec![Mark::Ordinary; n];
    marks[0] = Mark::Cls;
    for m in marks.iter_mut().skip(1) {
        if rng.random_bool(0.3) {
            *m = Mark::Sep;
        }
    }
    let token_ids = marks.iter().map(|m| if *m == Mark::Sep { 2 } else { rng.random_range(3..20) }).collect();
    TokenSequence { token_ids, segment_ids: vec![0; n], marks }
}

fn draw(rng: &mut impl Rng, coarse: bool) -> f32 {
    if coarse {
        rng.random_range(-2i32..=2) as f32
    } else {
        rng.random_range(-3.0f32..3.0)
    }
}

/// Random trace with row-stochastic attention. Some traces use coarse values so ties occur.
pub fn random_trace(rng: &mut impl Rng, layers: usize, heads: usize, n: usize, d: usize) -> ForwardTrace<f32> {
    let coarse = rng.random_bool(0.3);
    let hidden = (0..=layers)
        .map(|_| Tensor::new(vec![n, d], (0..n * d).map(|_| draw(rng, coarse)).collect()).unwrap())
        .collect();
    let attentions = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut data = Vec::with_capacity(n * n);
                    for _ in 0..n {
                        let w: Vec<f32> = (0..n)
                            .map(|_| if coarse { rng.random_range(1..4) as f32 } else { rng.random_range(0.01f32..1.0) })
                            .collect();
                        let s: f32 = w.iter().sum();
                        data.extend(w.iter().map(|x| x / s));
                    }
                    Tensor::new(vec![n, n], data).unwrap()
                })
                .collect()
        })
        .collect();
    ForwardTrace { hidden, attentions, logits: vec![0.0; 2] }
}

/// One random instance: trace, sequence, config and student depth.
pub fn random_instance(rng: &mut impl Rng) -> (ForwardTrace<f32>, TokenSequence, CompressionConfig, usize) {
    let big_l = rng.random_range(1..=6);
    let student = rng.random_range(1..=3);
    let n = rng.random_range(1..=8);
    let d = rng.random_range(1..=16);
    let heads = rng.random_range(1..=3);
    let trace = random_trace(rng, big_l, heads, n, d);
    let seq = random_seq(rng, n);
    let length_strategy = [LengthStrategy::Att, LengthStrategy::AttNoSep, LengthStrategy::AttNoSepTop12, LengthStrategy::Left]
        [rng.random_range(0..4)];
    let width_strategy = [WidthStrategy::Rand, WidthStrategy::Uniform, WidthStrategy::Mag][rng.random_range(0..3)];
    let config = CompressionConfig {
        n_depth: rng.random_range(1..=student + 1),
        n_length: rng.random_range(1..=10),
        width_fraction: rng.random_range(1..=10) as f64 / 10.0,
        l_top: rng.random_range(1..=big_l),
        depth_map_mode: if rng.random_bool(0.5) { DepthMapMode::Literal } else { DepthMapMode::PerLayerRound },
        length_strategy,
        width_strategy,
        seed: rng.random(),
    };
    (trace, seq, config, student)
}

/// Brute-force `[SEP]` statistics: per layer, fraction of samples whose best `[SEP]` is first / in the top three.
pub fn reference_sep_stats(traces: &[ForwardTrace<f32>], seqs: &[TokenSequence]) -> Vec<(f64, f64)> {
    let idx: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].marks.contains(&Mark::Sep)).collect();
    let layers = traces[idx[0]].attentions.len();
    (1..=layers)
        .map(|layer| {
            let (mut t1, mut t3) = (0, 0);
            for &i in &idx {
                let n = seqs[i].len();
                let heads = &traces[i].attentions[layer - 1];
                let scores: Vec<f64> = (0..n)
                    .map(|j| heads.iter().map(|h| h.data()[j] as f64).sum::<f64>() / heads.len() as f64)
                    .collect();
                let all: Vec<usize> = (0..n).collect();
                let best = (0..n).filter(|&j| seqs[i].marks[j] == Mark::Sep).map(|j| rank_of(&scores, &all, j)).min().unwrap();
                t1 += usize::from(best == 0);
                t3 += usize::from(best < 3);
            }
            (t1 as f64 / idx.len() as f64, t3 as f64 / idx.len() as f64)
        })
        .collect()
}
