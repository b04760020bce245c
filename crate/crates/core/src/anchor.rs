//! Anchor pass: blocked attention over the initial key block plus a
//! step-aligned local window.
//!
//! Every query row ends up with a partial softmax state `(m, l, acc)` over
//! its covered keys. `m` doubles as the row's anchor logit, and the state is
//! later resumed by the sparse pass so covered keys are never recomputed.

use rayon::prelude::*;

use crate::mask::SelectionMask;
use crate::online::OnlineSoftmax;
use crate::tensor::{dot, BlockConfig, HeadWorkload, Matrix};

/// Kv-block indices (0-based) visited by query block `i_block`: block 0 plus
/// the local window. Out-of-range blocks are clamped away.
///
/// With 1-based block numbers `i` and ratio `r = b_q / b_kv` the window is
/// `max(2, floor((i-1)/step)*step*r) ..= i*r`.
pub fn anchor_region(i_block: usize, cfg: &BlockConfig, n: usize) -> Vec<usize> {
    let kv_blocks = cfg.kv_blocks(n);
    let mut blocks = Vec::new();
    if kv_blocks > 0 {
        blocks.push(0);
    }
    let (first, last) = window_blocks(i_block, cfg, n);
    blocks.extend(first..last);
    blocks
}

/// Half-open 0-based kv-block range of the local window for a query block.
fn window_blocks(i_block: usize, cfg: &BlockConfig, n: usize) -> (usize, usize) {
    let first = window_start_block(i_block / cfg.step, cfg);
    let last = ((i_block + 1) * cfg.b_q).div_ceil(cfg.b_kv).min(cfg.kv_blocks(n));
    (first, last.max(first))
}

/// 0-based first window block shared by all query blocks of a step group.
fn window_start_block(group: usize, cfg: &BlockConfig) -> usize {
    let group_start = group * cfg.group_rows();
    (group_start / cfg.b_kv).max(2) - 1
}

/// First key token of the local window for `group`; the searchable middle
/// region of that group is `[b_kv, window_start_token)`.
pub fn window_start_token(group: usize, cfg: &BlockConfig) -> usize {
    window_start_block(group, cfg) * cfg.b_kv
}

/// Which keys the anchor pass covers for each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    n: usize,
    b_q: usize,
    init_end: usize,
    /// Per query block, the half-open token range of the local window.
    windows: Vec<(usize, usize)>,
}

impl Coverage {
    pub fn new(n: usize, cfg: &BlockConfig) -> Self {
        let windows = (0..cfg.query_blocks(n))
            .map(|b| {
                let (first, last) = window_blocks(b, cfg, n);
                (first * cfg.b_kv, (last * cfg.b_kv).min(n))
            })
            .collect();
        Self {
            n,
            b_q: cfg.b_q,
            init_end: cfg.b_kv.min(n),
            windows,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The two causally clamped key ranges covered for `row`.
    pub fn ranges(&self, row: usize) -> [(usize, usize); 2] {
        let lim = row + 1;
        let (ws, we) = self.windows[row / self.b_q];
        let init = (0, self.init_end.min(lim));
        let we = we.min(lim);
        [init, (ws.min(we), we)]
    }

    pub fn contains(&self, row: usize, j: usize) -> bool {
        self.ranges(row).iter().any(|&(a, b)| a <= j && j < b)
    }

    pub fn count(&self, row: usize) -> usize {
        self.ranges(row).iter().map(|(a, b)| b - a).sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.n).map(|r| self.count(r) as u64).sum()
    }

    pub fn mask(&self) -> SelectionMask {
        let rows = (0..self.n)
            .map(|r| {
                self.ranges(r)
                    .iter()
                    .flat_map(|&(a, b)| a as u32..b as u32)
                    .collect()
            })
            .collect();
        SelectionMask::from_rows_unchecked(self.n, rows)
    }
}

/// Per-row partial softmax state left by the anchor pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    /// Running max logit per row; this is the row's anchor.
    pub m: Vec<f64>,
    pub l: Vec<f64>,
    /// Row-major `n x d` value accumulators.
    pub acc: Vec<f64>,
    pub d: usize,
    pub coverage: Coverage,
}

impl AnchorState {
    pub fn n(&self) -> usize {
        self.m.len()
    }

    pub fn row_state(&self, i: usize) -> OnlineSoftmax {
        OnlineSoftmax::from_parts(self.m[i], self.l[i], self.acc[i * self.d..(i + 1) * self.d].to_vec())
    }

    /// `acc / l` for every row.
    pub fn finalize(&self) -> Matrix {
        let mut o = Matrix::zeros(self.n(), self.d);
        for i in 0..self.n() {
            let l = self.l[i];
            for (dst, a) in o.row_mut(i).iter_mut().zip(&self.acc[i * self.d..]) {
                *dst = (a / l) as f32;
            }
        }
        o
    }
}

fn fold_range(st: &mut OnlineSoftmax, w: &HeadWorkload, row: usize, keys: std::ops::Range<usize>) {
    if keys.is_empty() {
        return;
    }
    let qi = w.q.row(row);
    let scale = w.scale();
    let scores: Vec<f64> = keys.clone().map(|j| dot(qi, w.k.row(j)) * scale).collect();
    st.fold(&scores, keys.map(|j| w.v.row(j)));
}

fn anchor_row(w: &HeadWorkload, cfg: &BlockConfig, cov: &Coverage, row: usize) -> OnlineSoftmax {
    let mut st = OnlineSoftmax::new(w.d());
    let [init, (ws, we)] = cov.ranges(row);
    fold_range(&mut st, w, row, init.0..init.1);
    let mut start = ws;
    while start < we {
        let end = (start + cfg.b_kv).min(we);
        fold_range(&mut st, w, row, start..end);
        start = end;
    }
    st
}

/// Runs the anchor pass over every query row.
pub fn compute_anchor(w: &HeadWorkload, cfg: &BlockConfig) -> AnchorState {
    let n = w.n();
    let d = w.d();
    let coverage = Coverage::new(n, cfg);
    let rows: Vec<OnlineSoftmax> = (0..n)
        .into_par_iter()
        .map(|r| anchor_row(w, cfg, &coverage, r))
        .collect();
    let mut m = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n * d);
    for st in rows {
        m.push(st.m);
        l.push(st.l);
        acc.extend(st.acc);
    }
    AnchorState {
        m,
        l,
        acc,
        d,
        coverage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b_q: usize, b_kv: usize, step: usize) -> BlockConfig {
        BlockConfig::new(b_q, b_kv, step, 12.0).unwrap()
    }

    // Expected sets below are the 1-based pseudocode values shifted by one.
    #[test]
    fn region_first_block_is_initial_only() {
        assert_eq!(anchor_region(0, &cfg(128, 128, 16), 128 * 40), vec![0]);
    }

    #[test]
    fn region_seventeenth_block() {
        // i = 17 -> {1} U {16, 17}
        assert_eq!(anchor_region(16, &cfg(128, 128, 16), 128 * 40), vec![0, 15, 16]);
    }

    #[test]
    fn region_with_block_ratio_two() {
        // b_q = 2 b_kv, i = 3 -> {1} U {4, 5, 6}
        assert_eq!(anchor_region(2, &cfg(128, 64, 1), 1024), vec![0, 3, 4, 5]);
    }

    #[test]
    fn region_clamps_to_sequence() {
        // last query block is partial; window cannot run past the keys
        assert_eq!(anchor_region(2, &cfg(128, 64, 1), 300), vec![0, 3, 4]);
    }

    #[test]
    fn region_with_small_query_blocks() {
        // b_kv = 2 b_q: query block 5 (rows 320..384) lives in kv block 2
        let c = cfg(64, 128, 1);
        assert_eq!(anchor_region(5, &c, 1024), vec![0, 1, 2]);
        assert_eq!(anchor_region(1, &c, 1024), vec![0]);
    }

    #[test]
    fn coverage_ranges_are_causal_and_disjoint() {
        let c = cfg(32, 16, 2);
        let cov = Coverage::new(200, &c);
        for r in 0..200 {
            let [a, b] = cov.ranges(r);
            assert_eq!(a.0, 0);
            assert!(a.1 <= r + 1 && b.1 <= r + 1);
            assert!(a.1 <= b.0 || b.0 == b.1);
            assert!(cov.contains(r, r), "diagonal must be covered for row {r}");
        }
        assert_eq!(cov.mask().count(), cov.total());
    }

    #[test]
    fn anchor_of_single_block_is_dense_state() {
        let n = 5;
        let w = HeadWorkload::new(
            Matrix::from_fn(n, 2, |i, j| (i + j) as f32 * 0.3),
            Matrix::from_fn(n, 2, |i, j| (i * j) as f32 * 0.2 - 0.1),
            Matrix::from_fn(n, 2, |i, j| i as f32 - j as f32),
        )
        .unwrap();
        let st = compute_anchor(&w, &cfg(8, 8, 1));
        assert_eq!(st.coverage.total(), 15);
        assert!(st.l.iter().all(|&l| l > 0.0));
        let dense = crate::oracle::dense_attention(&w).unwrap().o;
        for (a, b) in st.finalize().data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
