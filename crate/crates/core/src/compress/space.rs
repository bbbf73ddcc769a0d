use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CompressionConfig;
use crate::error::{ensure, Result};

/// Largest `N^L` in the search grid.
pub const MAX_LENGTH: usize = 50;

/// One `(N^D, N^L, N^W/d)` point, with the width in tenths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_depth: usize,
    pub n_length: usize,
    pub tenths: u32,
}

impl GridPoint {
    pub fn a_hsk(&self) -> f64 {
        (self.n_depth * self.n_length * self.tenths as usize) as f64 / 10.0
    }
}

/// Grid points whose amount lies within `tolerance_pct` percent of `target`
/// (closed band, exact integer arithmetic), in `(N^D, N^L, width)` order.
pub fn enumerate_configs(target: f64, tolerance_pct: u32, student_layers: usize, max_length: usize) -> Result<Vec<GridPoint>> {
    ensure!(target > 0.0 && target.is_finite(), "target must be positive");
    ensure!(matches!(tolerance_pct, 5 | 10), "tolerance must be 5 or 10 percent, got {tolerance_pct}");
    // Everything in thousandths: a·1000 = N^D·N^L·tenths·100.
    let t = (target * 1000.0).round() as i64;
    let tol = tolerance_pct as i64;
    let mut out = Vec::new();
    for n_depth in 1..=student_layers + 1 {
        for n_length in 1..=max_length {
            for tenths in 1..=10u32 {
                let a = (n_depth * n_length) as i64 * tenths as i64 * 100;
                if 100 * (a - t).abs() <= tol * t {
                    out.push(GridPoint { n_depth, n_length, tenths });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub configs: Vec<CompressionConfig>,
    /// Set when fewer feasible points existed than were requested.
    pub exhausted: bool,
    pub feasible: usize,
}

/// Draws `count` distinct feasible grid points (`N^L ≤ max_length`) uniformly
/// at random. Other fields are copied from `template`.
#[allow(clippy::too_many_arguments)]
pub fn sample_configs(
    target: f64,
    tolerance_pct: u32,
    student_layers: usize,
    max_length: usize,
    count: usize,
    seed: u64,
    template: &CompressionConfig,
) -> Result<Sampled> {
    let feasible = enumerate_configs(target, tolerance_pct, student_layers, max_length)?;
    let exhausted = feasible.len() < count;
    let picked: Vec<usize> = if exhausted {
        (0..feasible.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, feasible.len(), count).into_vec();
        idx.sort_unstable();
        idx
    };
    let configs = picked
        .into_iter()
        .map(|i| {
            let p = feasible[i];
            CompressionConfig {
                n_depth: p.n_depth,
                n_length: p.n_length,
                width_fraction: p.tenths as f64 / 10.0,
                ..template.clone()
            }
        })
        .collect();
    Ok(Sampled { configs, exhausted, feasible: feasible.len() })
}
