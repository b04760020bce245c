//! Sparse execution: resume each row's anchor state and fold in the
//! gathered stripe keys, then normalize.

use rayon::prelude::*;

use crate::anchor::{compute_anchor, AnchorState, Coverage};
use crate::error::{Error, Result};
use crate::mask::{causal_positions, SelectionMask};
use crate::oracle::AttentionOutput;
use crate::stripe::{identify_stripes_with, AnchorMode, StripeIndex};
use crate::tensor::{dot, BlockConfig, HeadWorkload, Matrix};

/// Work accounting for one sparse run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    /// Score evaluations performed: anchor-covered positions plus folded
    /// stripe positions.
    pub computed_positions: u64,
    pub causal_positions: u64,
    pub sparsity: f64,
    /// Captured probability mass; only known once an oracle map is available.
    pub recall: Option<f64>,
}

impl RunStats {
    pub fn new(computed_positions: u64, n: usize) -> Self {
        let causal = causal_positions(n);
        Self {
            computed_positions,
            causal_positions: causal,
            sparsity: 1.0 - computed_positions as f64 / causal as f64,
            recall: None,
        }
    }
}

/// Anchor coverage plus every stripe index, causally clamped per row.
pub fn union_mask(coverage: &Coverage, idx: &StripeIndex) -> SelectionMask {
    let n = coverage.n();
    let rows = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut row: Vec<u32> = coverage
                .ranges(r)
                .iter()
                .flat_map(|&(a, b)| a as u32..b as u32)
                .collect();
            if let Some(group) = idx.groups.get(idx.group_of_row(r)) {
                row.extend(
                    group
                        .f_idx
                        .iter()
                        .copied()
                        .filter(|&j| j as usize <= r && !coverage.contains(r, j as usize)),
                );
            }
            row.sort_unstable();
            row
        })
        .collect();
    SelectionMask::from_rows_unchecked(n, rows)
}

fn check_inputs(w: &HeadWorkload, state: &AnchorState, idx: &StripeIndex) -> Result<()> {
    let n = w.n();
    if state.n() != n || state.d != w.d() {
        return Err(Error::shape(format!(
            "anchor state is {}x{}, workload is {}x{}",
            state.n(),
            state.d,
            n,
            w.d()
        )));
    }
    if idx.group_rows == 0 || idx.groups.len() != n.div_ceil(idx.group_rows) {
        return Err(Error::shape(format!(
            "stripe index has {} groups of {} rows for n = {n}",
            idx.groups.len(),
            idx.group_rows
        )));
    }
    for g in &idx.groups {
        if let Some(&bad) = g.f_idx.iter().find(|&&j| j as usize >= n) {
            return Err(Error::InvalidIndex { index: bad as usize, n });
        }
    }
    Ok(())
}

/// Folds stripes in chunks of `b_kv` indices, ascending.
pub fn sparse_attention(
    w: &HeadWorkload,
    state: &AnchorState,
    idx: &StripeIndex,
    cfg: &BlockConfig,
) -> Result<(AttentionOutput, RunStats)> {
    let chunk = cfg.b_kv;
    sparse_attention_chunked(w, state, idx, |_, f_idx| {
        f_idx.chunks(chunk).map(<[u32]>::to_vec).collect()
    })
}

/// Sparse execution with a caller-chosen gather plan: `plan(group, f_idx)`
/// returns the index chunks to fold, in order. Chunking and order only
/// affect rounding.
pub fn sparse_attention_chunked<P>(
    w: &HeadWorkload,
    state: &AnchorState,
    idx: &StripeIndex,
    plan: P,
) -> Result<(AttentionOutput, RunStats)>
where
    P: Fn(usize, &[u32]) -> Vec<Vec<u32>>,
{
    check_inputs(w, state, idx)?;
    let plans: Vec<Vec<Vec<u32>>> = idx
        .groups
        .iter()
        .enumerate()
        .map(|(g, grp)| plan(g, &grp.f_idx))
        .collect();
    for chunk in plans.iter().flatten() {
        if let Some(&bad) = chunk.iter().find(|&&j| j as usize >= w.n()) {
            return Err(Error::InvalidIndex {
                index: bad as usize,
                n: w.n(),
            });
        }
    }

    let d = w.d();
    let scale = w.scale();
    let cov = &state.coverage;
    let mut o = Matrix::zeros(w.n(), d);
    let folded: u64 = o
        .data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .map(|(r, out)| {
            let mut st = state.row_state(r);
            let qi = w.q.row(r);
            let mut count = 0u64;
            let mut keys = Vec::new();
            let mut scores = Vec::new();
            for chunk in &plans[idx.group_of_row(r)] {
                keys.clear();
                keys.extend(
                    chunk
                        .iter()
                        .map(|&j| j as usize)
                        .filter(|&j| j <= r && !cov.contains(r, j)),
                );
                scores.clear();
                scores.extend(keys.iter().map(|&j| dot(qi, w.k.row(j)) * scale));
                st.fold(&scores, keys.iter().map(|&j| w.v.row(j)));
                count += keys.len() as u64;
            }
            for (dst, x) in out.iter_mut().zip(st.finish()) {
                *dst = x as f32;
            }
            count
        })
        .sum();

    let stats = RunStats::new(cov.total() + folded, w.n());
    Ok((AttentionOutput { o }, stats))
}

/// Everything produced by one end-to-end run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub output: AttentionOutput,
    pub stats: RunStats,
    pub stripes: StripeIndex,
    pub coverage: Coverage,
}

impl PipelineRun {
    /// Positions whose scores were evaluated.
    pub fn selection_mask(&self) -> SelectionMask {
        union_mask(&self.coverage, &self.stripes)
    }

    /// Fills `stats.recall` from a dense probability map.
    pub fn with_recall(mut self, probs: &Matrix) -> Result<Self> {
        self.stats.recall = Some(crate::metrics::recall(&self.selection_mask(), probs)?);
        Ok(self)
    }
}

pub fn run_pipeline(w: &HeadWorkload, cfg: &BlockConfig, mode: AnchorMode) -> Result<PipelineRun> {
    cfg.validate()?;
    let state = compute_anchor(w, cfg);
    let stripes = identify_stripes_with(w, &state, cfg, mode)?;
    let (output, stats) = sparse_attention(w, &state, &stripes, cfg)?;
    Ok(PipelineRun {
        output,
        stats,
        stripes,
        coverage: state.coverage,
    })
}

/// Anchor pass, stripe identification and sparse execution in one call.
pub fn anchor_attention(w: &HeadWorkload, cfg: &BlockConfig) -> Result<(AttentionOutput, RunStats)> {
    let run = run_pipeline(w, cfg, AnchorMode::Computed)?;
    Ok((run.output, run.stats))
}
