//! Selection baselines evaluated on oracle maps: top-k, top-cdf,
//! difference-aware thresholding and the streaming (sink + recent) mask, each
//! at a configurable tile granularity.
//!
//! A tile is `row_span` query rows by `col_span` keys. Tiles that straddle
//! the diagonal only ever score and select their causal entries.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use crate::mask::SelectionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Granularity {
    pub row_span: usize,
    pub col_span: usize,
}

impl Granularity {
    pub fn new(row_span: usize, col_span: usize) -> Result<Self> {
        if row_span == 0 || col_span == 0 {
            return Err(Error::invalid("granularity spans must be >= 1"));
        }
        Ok(Self { row_span, col_span })
    }

    pub fn token() -> Self {
        Self {
            row_span: 1,
            col_span: 1,
        }
    }

    /// `(rows, 1)`: one key column across a band of query rows.
    pub fn stripe(rows: usize) -> Self {
        Self {
            row_span: rows,
            col_span: 1,
        }
    }

    pub fn block(size: usize) -> Self {
        Self {
            row_span: size,
            col_span: size,
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.row_span, self.col_span)
    }
}

fn check_square(m: &Matrix) -> Result<usize> {
    if m.rows() != m.cols() {
        return Err(Error::shape(format!("expected a square map, got {:?}", m.shape())));
    }
    Ok(m.rows())
}

/// Row range of row-tile `t`.
fn tile_rows(t: usize, g: Granularity, n: usize) -> (usize, usize) {
    (t * g.row_span, ((t + 1) * g.row_span).min(n))
}

/// Number of column tiles holding at least one causal entry for row-tile `t`.
fn causal_col_tiles(t: usize, g: Granularity, n: usize) -> usize {
    let (_, end) = tile_rows(t, g, n);
    (end - 1) / g.col_span + 1
}

/// Sum (or mean, when `average`) over the causal entries of each tile in
/// row-tile `t`.
fn tile_scores(m: &Matrix, t: usize, g: Granularity, average: bool) -> Vec<f64> {
    let n = m.rows();
    let (r0, r1) = tile_rows(t, g, n);
    let tiles = causal_col_tiles(t, g, n);
    let mut sums = vec![0f64; tiles];
    let mut counts = vec![0u64; tiles];
    for i in r0..r1 {
        for (j, &x) in m.row(i)[..=i].iter().enumerate() {
            sums[j / g.col_span] += f64::from(x);
            counts[j / g.col_span] += 1;
        }
    }
    if average {
        for (s, c) in sums.iter_mut().zip(&counts) {
            *s /= *c as f64;
        }
    }
    sums
}

/// Tile sums of a causal probability map; non-causal tiles are zero.
pub fn pooled_score_map(p: &Matrix, g: Granularity) -> Result<Matrix> {
    let n = check_square(p)?;
    let row_tiles = n.div_ceil(g.row_span);
    let col_tiles = n.div_ceil(g.col_span);
    let mut out = Matrix::zeros(row_tiles, col_tiles);
    for t in 0..row_tiles {
        for (c, s) in tile_scores(p, t, g, false).into_iter().enumerate() {
            out.set(t, c, s as f32);
        }
    }
    Ok(out)
}

/// Tile indices sorted by descending score, lower column first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Expands per-row-tile tile selections into a token-level causal mask.
fn expand(n: usize, g: Granularity, picks: &[Vec<usize>]) -> SelectionMask {
    let rows = (0..n)
        .map(|i| {
            let mut tiles = picks[i / g.row_span].clone();
            tiles.sort_unstable();
            tiles
                .iter()
                .flat_map(|&c| (c * g.col_span)..((c + 1) * g.col_span).min(i + 1))
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    SelectionMask::from_rows_unchecked(n, rows)
}

fn select_tiles(
    m: &Matrix,
    g: Granularity,
    average: bool,
    pick: impl Fn(&[f64]) -> Vec<usize> + Sync,
) -> Result<SelectionMask> {
    let n = check_square(m)?;
    let picks: Vec<Vec<usize>> = (0..n.div_ceil(g.row_span))
        .into_par_iter()
        .map(|t| pick(&tile_scores(m, t, g, average)))
        .collect();
    Ok(expand(n, g, &picks))
}

/// The `k` highest-mass tiles per row-tile.
pub fn select_topk(p: &Matrix, k: usize, g: Granularity) -> Result<SelectionMask> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    select_tiles(p, g, false, |scores| ranked(scores).into_iter().take(k).collect())
}

/// Smallest descending-score prefix of tiles whose mass reaches
/// `gamma` times the row-tile mass. `gamma = 1` keeps every causal tile,
/// including zero-mass ones.
pub fn select_topcdf(p: &Matrix, gamma: f64, g: Granularity) -> Result<SelectionMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    select_tiles(p, g, false, |scores| {
        let order = ranked(scores);
        if gamma >= 1.0 {
            return order;
        }
        let total: f64 = order.iter().map(|&c| scores[c]).sum();
        let target = gamma * total;
        let mut cum = 0.0;
        let mut take = 0;
        for &c in &order {
            cum += scores[c];
            take += 1;
            if cum >= target {
                break;
            }
        }
        order[..take].to_vec()
    })
}

/// Tiles whose mean score is within `theta` of the row-tile's best tile.
pub fn select_diff_aware(s: &Matrix, theta: f64, g: Granularity) -> Result<SelectionMask> {
    if theta.is_nan() {
        return Err(Error::invalid("theta must not be NaN"));
    }
    select_tiles(s, g, true, |scores| {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..scores.len()).filter(|&c| max - scores[c] <= theta).collect()
    })
}

/// Keys `j < init_tokens` plus the `local_tokens` most recent keys.
pub fn streaming_mask(n: usize, init_tokens: usize, local_tokens: usize) -> Result<SelectionMask> {
    if local_tokens == 0 {
        return Err(Error::invalid("local window must hold at least one token"));
    }
    Ok(SelectionMask::from_fn(n, |i, j| j < init_tokens || j + local_tokens > i))
}
