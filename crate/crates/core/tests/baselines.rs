mod common;

use anchor_attention::{
    dense_probs, dense_scores, pooled_score_map, recall, select_diff_aware, select_topcdf, select_topk, sparsity,
    streaming_mask, Granularity, Matrix, SelectionMask,
};
use common::*;
use proptest::prelude::*;

/// Causal tile sums computed entry by entry.
fn brute_tiles(p: &Matrix, g: Granularity, t: usize) -> Vec<f64> {
    let n = p.rows();
    let mut sums = vec![0.0; n.div_ceil(g.col_span)];
    for i in t * g.row_span..((t + 1) * g.row_span).min(n) {
        for j in 0..=i {
            sums[j / g.col_span] += f64::from(p.get(i, j));
        }
    }
    sums
}

fn causal_tiles(n: usize, g: Granularity, t: usize) -> usize {
    (((t + 1) * g.row_span).min(n) - 1) / g.col_span + 1
}

/// Expands per-row-tile tile choices into a mask the slow way.
fn brute_mask(n: usize, g: Granularity, picks: impl Fn(usize) -> Vec<usize>) -> SelectionMask {
    let chosen: Vec<Vec<usize>> = (0..n.div_ceil(g.row_span)).map(&picks).collect();
    SelectionMask::from_fn(n, |i, j| chosen[i / g.row_span].contains(&(j / g.col_span)))
}

fn sort_desc(sums: &[f64], limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..limit).collect();
    order.sort_by(|&a, &b| sums[b].partial_cmp(&sums[a]).unwrap().then(a.cmp(&b)));
    order
}

fn granularities() -> Vec<Granularity> {
    vec![
        Granularity::token(),
        Granularity::stripe(4),
        Granularity::block(4),
        Granularity::new(2, 3).unwrap(),
    ]
}

#[test]
fn topk_matches_sorting_oracle() {
    let w = random_head(16, 4, 3);
    let p = dense_probs(&w.q, &w.k).unwrap();
    for g in granularities() {
        let expect = brute_mask(16, g, |t| {
            let sums = brute_tiles(&p, g, t);
            sort_desc(&sums, causal_tiles(16, g, t)).into_iter().take(2).collect()
        });
        assert_eq!(select_topk(&p, 2, g).unwrap(), expect, "granularity {g}");
    }
}

#[test]
fn topcdf_matches_prefix_oracle() {
    let w = random_head(16, 4, 4);
    let p = dense_probs(&w.q, &w.k).unwrap();
    for g in granularities() {
        let expect = brute_mask(16, g, |t| {
            let sums = brute_tiles(&p, g, t);
            let order = sort_desc(&sums, causal_tiles(16, g, t));
            let total: f64 = order.iter().map(|&c| sums[c]).sum();
            let mut acc = 0.0;
            let mut out = Vec::new();
            for c in order {
                out.push(c);
                acc += sums[c];
                if acc >= 0.9 * total {
                    break;
                }
            }
            out
        });
        assert_eq!(select_topcdf(&p, 0.9, g).unwrap(), expect, "granularity {g}");
    }
}

#[test]
fn tile_sums_match_entrywise_sums() {
    let w = random_head(13, 4, 5);
    let p = dense_probs(&w.q, &w.k).unwrap();
    for g in granularities() {
        let m = pooled_score_map(&p, g).unwrap();
        for t in 0..m.rows() {
            for (c, s) in brute_tiles(&p, g, t).into_iter().enumerate() {
                assert!((f64::from(m.get(t, c)) - s).abs() < 1e-5);
            }
        }
    }
    assert_eq!(pooled_score_map(&p, Granularity::token()).unwrap(), p);
    let whole = pooled_score_map(&p, Granularity::block(13)).unwrap();
    assert_eq!(whole.shape(), (1, 1));
    assert!((whole.get(0, 0) - 13.0).abs() < 1e-4);
}

#[test]
fn forced_selections() {
    let w = random_head(24, 8, 6);
    let p = dense_probs(&w.q, &w.k).unwrap();
    let argmax = select_topk(&p, 1, Granularity::token()).unwrap();
    for i in 0..24 {
        let row = &p.row(i)[..=i];
        let best = (0..=i).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(argmax.row(i), &[best as u32]);
    }
    assert_eq!(select_topk(&p, 24, Granularity::token()).unwrap(), SelectionMask::full_causal(24));
    assert_eq!(select_topcdf(&p, 1.0, Granularity::stripe(5)).unwrap(), SelectionMask::full_causal(24));

    let s = dense_scores(&w.q, &w.k).unwrap();
    assert_eq!(select_diff_aware(&s, 0.0, Granularity::token()).unwrap(), argmax);
    assert_eq!(
        select_diff_aware(&s, 1e9, Granularity::block(8)).unwrap(),
        SelectionMask::full_causal(24)
    );
}

#[test]
fn dominant_tile_is_chosen_alone() {
    // Row-tile 1 of a 4x4 map at granularity (2, 2): tile 0 holds 0.96 of
    // the mass.
    let p = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.5, 0.46, 0.04, 0.0],
        vec![0.5, 0.46, 0.0, 0.04],
    ])
    .unwrap();
    let m = select_topcdf(&p, 0.95, Granularity::block(2)).unwrap();
    assert_eq!(m.row(2), &[0, 1]);
    assert_eq!(m.row(3), &[0, 1]);
}

#[test]
fn streaming_shapes() {
    assert_eq!(streaming_mask(9, 9, 1).unwrap(), SelectionMask::full_causal(9));
    assert_eq!(streaming_mask(9, 0, 1).unwrap(), SelectionMask::diagonal(9));
    assert_eq!(streaming_mask(8, 1, 2).unwrap().row(4), &[0, 3, 4]);
    assert!(streaming_mask(8, 1, 0).is_err());
}

#[test]
fn parameter_errors() {
    let p = dense_probs(&random_head(8, 2, 1).q, &random_head(8, 2, 1).k).unwrap();
    assert!(select_topk(&p, 0, Granularity::token()).is_err());
    assert!(select_topcdf(&p, 0.0, Granularity::token()).is_err());
    assert!(select_topcdf(&p, 1.5, Granularity::token()).is_err());
    assert!(select_diff_aware(&p, f64::NAN, Granularity::token()).is_err());
    assert!(Granularity::new(0, 4).is_err());
    assert!(select_topk(&Matrix::zeros(3, 4), 1, Granularity::token()).is_err());
}

#[test]
fn stripes_beat_blocks_on_planted_columns() {
    let (w, _) = planted_head(1024, 32, 4, 0.6, 77);
    let p = dense_probs(&w.q, &w.k).unwrap();
    let s = dense_scores(&w.q, &w.k).unwrap();
    let curve = |g: Granularity| -> Vec<(f64, f64)> {
        // Block tiles average over many columns, so their differences are
        // tiny; the grid is fine near zero.
        (0..=200)
            .map(|t| 0.001 * t as f64)
            .chain((5..=80).map(|t| 0.1 * t as f64))
            .map(|theta| {
                let m = select_diff_aware(&s, theta, g).unwrap();
                (recall(&m, &p).unwrap(), sparsity(&m))
            })
            .collect()
    };
    let stripe = curve(Granularity::stripe(128));
    let block = curve(Granularity::block(128));
    let (a, b) = (
        best_sparsity_near(&stripe, 0.9, 0.02).expect("stripe curve reaches 0.9"),
        best_sparsity_near(&block, 0.9, 0.02).expect("block curve reaches 0.9"),
    );
    assert!(a >= b, "stripe {a} vs block {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn topcdf_recall_reaches_gamma(n in 1usize..48, seed in any::<u64>(), gamma in 0.05f64..1.0, rows in 1usize..6, cols in 1usize..6) {
        let w = random_head(n, 4, seed);
        let p = dense_probs(&w.q, &w.k).unwrap();
        let m = select_topcdf(&p, gamma, Granularity::new(rows, cols).unwrap()).unwrap();
        prop_assert!(recall(&m, &p).unwrap() >= gamma - 1e-5);
    }

    #[test]
    fn selections_nest_in_their_parameter(n in 1usize..40, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0, rows in 1usize..5, cols in 1usize..5) {
        let g = Granularity::new(rows, cols).unwrap();
        let w = random_head(n, 4, seed);
        let p = dense_probs(&w.q, &w.k).unwrap();
        let s = dense_scores(&w.q, &w.k).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(select_topcdf(&p, lo.max(1e-3), g).unwrap().is_subset_of(&select_topcdf(&p, hi.max(1e-3), g).unwrap()));
        prop_assert!(select_diff_aware(&s, lo * 4.0, g).unwrap().is_subset_of(&select_diff_aware(&s, hi * 4.0, g).unwrap()));
        let (k1, k2) = (1 + (lo * 10.0) as usize, 1 + (hi * 10.0) as usize);
        prop_assert!(select_topk(&p, k1, g).unwrap().is_subset_of(&select_topk(&p, k2, g).unwrap()));
    }

    #[test]
    fn every_scheme_is_causal_and_nonempty(n in 1usize..40, seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let g = Granularity::new(rows, cols).unwrap();
        let w = random_head(n, 4, seed);
        let p = dense_probs(&w.q, &w.k).unwrap();
        let s = dense_scores(&w.q, &w.k).unwrap();
        for m in [
            select_topk(&p, 1, g).unwrap(),
            select_topcdf(&p, 0.5, g).unwrap(),
            select_diff_aware(&s, 0.0, g).unwrap(),
        ] {
            prop_assert!(m.is_subset_of(&SelectionMask::full_causal(n)));
            prop_assert!(m.count() > 0);
        }
    }
}
