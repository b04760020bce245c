//! Difference-aware stripe identification.
//!
//! Pooled queries are scored against every key of a group's middle region
//! (after the initial block, before the local window). A key is kept when the
//! pooled anchor minus its scaled score is at most `theta`. No sorting is
//! involved; selection is a single comparison per key.

use rayon::prelude::*;

use crate::anchor::{window_start_token, AnchorState};
use crate::error::Result;
use crate::tensor::{avgpool_rows, avgpool_vector, dot, BlockConfig, HeadWorkload};

/// Selected key tokens for one step group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripeGroup {
    /// Sorted, unique key indices inside `[b_kv, middle_end)`.
    pub f_idx: Vec<u32>,
    /// Exclusive end of the searchable middle region.
    pub middle_end: usize,
}

impl StripeGroup {
    pub fn f_c(&self) -> usize {
        self.f_idx.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripeIndex {
    pub groups: Vec<StripeGroup>,
    /// Query rows per group.
    pub group_rows: usize,
}

impl StripeIndex {
    /// An index selecting nothing; sparse execution then reduces to the
    /// anchor pass.
    pub fn empty(n: usize, cfg: &BlockConfig) -> Self {
        let groups = (0..cfg.groups(n))
            .map(|g| StripeGroup {
                f_idx: Vec::new(),
                middle_end: middle_end(g, cfg),
            })
            .collect();
        Self {
            groups,
            group_rows: cfg.group_rows(),
        }
    }

    pub fn group_of_row(&self, row: usize) -> usize {
        row / self.group_rows
    }

    pub fn total_selected(&self) -> usize {
        self.groups.iter().map(StripeGroup::f_c).sum()
    }
}

/// Which anchor value the threshold is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorMode {
    /// Pooled running-max logits from the anchor pass.
    #[default]
    Computed,
    /// A zero anchor; used to ablate the anchor from identification only.
    Zero,
}

/// End (exclusive) of group `group`'s stripe search region.
pub fn middle_end(group: usize, cfg: &BlockConfig) -> usize {
    window_start_token(group, cfg)
}

/// Mean anchor logit per pooling unit (`b_q` rows, or a whole step group
/// under [`crate::QueryPooling::PerGroup`]).
pub fn pooled_anchor(state: &AnchorState, cfg: &BlockConfig) -> Result<Vec<f64>> {
    avgpool_vector(&state.m, cfg.pool_rows())
}

pub fn identify_stripes(w: &HeadWorkload, state: &AnchorState, cfg: &BlockConfig) -> Result<StripeIndex> {
    identify_stripes_with(w, state, cfg, AnchorMode::Computed)
}

pub fn identify_stripes_with(
    w: &HeadWorkload,
    state: &AnchorState,
    cfg: &BlockConfig,
    mode: AnchorMode,
) -> Result<StripeIndex> {
    let anchors = match mode {
        AnchorMode::Computed => pooled_anchor(state, cfg)?,
        AnchorMode::Zero => vec![0.0; w.n().div_ceil(cfg.pool_rows())],
    };
    identify_with_anchors(w, &anchors, cfg)
}

/// Identification against explicit pooled anchor values, one per pooling
/// unit.
pub fn identify_with_anchors(w: &HeadWorkload, anchors: &[f64], cfg: &BlockConfig) -> Result<StripeIndex> {
    cfg.validate()?;
    let n = w.n();
    let pool = cfg.pool_rows();
    let pooled_q = avgpool_rows(&w.q, pool)?;
    if anchors.len() != pooled_q.rows() {
        return Err(crate::Error::shape(format!(
            "{} pooled anchors for {} pooled queries",
            anchors.len(),
            pooled_q.rows()
        )));
    }
    let units_per_group = cfg.group_rows() / pool;
    let scale = w.scale();
    let theta = cfg.theta;

    let groups = (0..cfg.groups(n))
        .into_par_iter()
        .map(|g| {
            let end = middle_end(g, cfg);
            let units = g * units_per_group..((g + 1) * units_per_group).min(pooled_q.rows());
            let f_idx = (cfg.b_kv..end)
                .filter(|&j| {
                    let kj = w.k.row(j);
                    units
                        .clone()
                        .any(|u| anchors[u] - dot(pooled_q.row(u), kj) * scale <= theta)
                })
                .map(|j| j as u32)
                .collect();
            StripeGroup { f_idx, middle_end: end }
        })
        .collect();
    Ok(StripeIndex {
        groups,
        group_rows: cfg.group_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::compute_anchor;
    use crate::tensor::{Matrix, QueryPooling};

    fn random_head(n: usize, d: usize) -> HeadWorkload {
        let f = |s: usize| Matrix::from_fn(n, d, move |i, j| ((i * 13 + j * 7 + s) as f32 * 0.77).sin() * 2.0);
        HeadWorkload::new(f(0), f(5), f(9)).unwrap()
    }

    #[test]
    fn pooled_anchor_group_sizes() {
        let w = random_head(512, 4);
        let c = BlockConfig::new(128, 128, 2, 12.0).unwrap();
        let st = compute_anchor(&w, &c);

        let per_group = pooled_anchor(&st, &c.with_pooling(QueryPooling::PerGroup)).unwrap();
        assert_eq!(per_group.len(), 2);
        for (g, v) in per_group.iter().enumerate() {
            let mean = st.m[g * 256..(g + 1) * 256].iter().sum::<f64>() / 256.0;
            assert!((v - mean).abs() < 1e-12);
        }

        let per_block = pooled_anchor(&st, &c).unwrap();
        assert_eq!(per_block.len(), 4);

        let single = BlockConfig::new(512, 512, 1, 12.0).unwrap();
        let one = pooled_anchor(&compute_anchor(&w, &single), &single).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0] - st_mean(&compute_anchor(&w, &single).m)).abs() < 1e-12);
    }

    fn st_mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn constant_anchor_pools_to_constant() {
        let w = random_head(300, 4);
        let c = BlockConfig::new(64, 64, 2, 1.0).unwrap();
        let mut st = compute_anchor(&w, &c);
        st.m.iter_mut().for_each(|m| *m = -3.25);
        assert!(pooled_anchor(&st, &c).unwrap().iter().all(|&v| v == -3.25));
    }

    #[test]
    fn extreme_thresholds() {
        let w = random_head(400, 8);
        let base = BlockConfig::new(32, 32, 2, 0.0).unwrap();
        let st = compute_anchor(&w, &base);

        let all = identify_stripes(&w, &st, &base.with_theta(1e9)).unwrap();
        for (g, grp) in all.groups.iter().enumerate() {
            let expect: Vec<u32> = (32..grp.middle_end as u32).collect();
            assert_eq!(grp.f_idx, expect, "group {g}");
            assert_eq!(grp.middle_end, window_start_token(g, &base));
        }
        let none = identify_stripes(&w, &st, &base.with_theta(-1e9)).unwrap();
        assert_eq!(none.total_selected(), 0);
        assert_eq!(none, StripeIndex::empty(400, &base));
    }

    #[test]
    fn single_group_has_empty_middle() {
        let w = random_head(96, 4);
        let c = BlockConfig::new(96, 96, 1, 1e9).unwrap();
        let idx = identify_stripes(&w, &compute_anchor(&w, &c), &c).unwrap();
        assert_eq!(idx.groups.len(), 1);
        assert_eq!(idx.total_selected(), 0);
    }

    #[test]
    fn planted_columns_are_found() {
        // Every query points along e0. Keys 0, c1 and c2 share that direction;
        // every other key points the opposite way, ~45 logits lower.
        let (n, d) = (512, 8);
        let (c1, c2) = (150, 301);
        let s = 8.0f32;
        let q = Matrix::from_fn(n, d, |_, j| if j == 0 { s } else { 0.0 });
        let k = Matrix::from_fn(n, d, |i, j| match (i, j) {
            (0, 0) => s,
            (i, 0) if i == c1 || i == c2 => s - 0.05,
            (_, 0) => -s,
            _ => 0.0,
        });
        let v = Matrix::from_fn(n, d, |i, j| (i + j) as f32);
        let w = HeadWorkload::new(q, k, v).unwrap();
        let c = BlockConfig::new(64, 64, 1, 12.0).unwrap();
        let st = compute_anchor(&w, &c);
        let idx = identify_stripes(&w, &st, &c).unwrap();
        for grp in &idx.groups {
            let expect: Vec<u32> = [c1, c2]
                .into_iter()
                .filter(|&x| x >= 64 && x < grp.middle_end)
                .map(|x| x as u32)
                .collect();
            assert_eq!(grp.f_idx, expect);
        }
        assert!(idx.groups.last().unwrap().f_c() == 2);
    }
}
