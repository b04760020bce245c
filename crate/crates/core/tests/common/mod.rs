#![allow(dead_code)]

use anchor_attention::{
    gen_random, AttentionOutput, BlockConfig, HeadWorkload, Matrix, PlantedStripes, SinkLocal,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn max_abs(a: &AttentionOutput, b: &AttentionOutput) -> f64 {
    assert_eq!(a.o.shape(), b.o.shape());
    a.o.data()
        .iter()
        .zip(b.o.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
}

pub fn cfg(b_q: usize, b_kv: usize, step: usize, theta: f64) -> BlockConfig {
    BlockConfig::new(b_q, b_kv, step, theta).unwrap()
}

pub fn random_head(n: usize, d: usize, seed: u64) -> HeadWorkload {
    gen_random(n, d, 1, seed).unwrap().remove(0)
}

/// Random heads cycling through the shape grid used for exactness checks.
pub fn random_suite(count: usize, seed: u64) -> Vec<HeadWorkload> {
    let shapes: Vec<(usize, usize)> = [64, 256, 1024, 2048]
        .into_iter()
        .flat_map(|n| [16, 64].into_iter().map(move |d| (n, d)))
        .collect();
    (0..count)
        .map(|i| {
            let (n, d) = shapes[i % shapes.len()];
            random_head(n, d, seed + i as u64)
        })
        .collect()
}

pub fn sink_head(n: usize, d: usize, sink: f64, seed: u64) -> HeadWorkload {
    let mut s = SinkLocal::new(n, d, sink, 128, seed);
    s.offset_block = 128.min(n);
    s.generate().unwrap()
}

/// Sink-dominated head with strong recency and large per-block score
/// offsets, the regime where the anchor calibrates the threshold.
pub fn ablation_head(n: usize, d: usize, seed: u64) -> HeadWorkload {
    let mut s = SinkLocal::new(n, d, 9.0, 128, seed);
    s.recency = 3.0;
    s.offset_sd = 6.0;
    s.generate().unwrap()
}

/// Planted stripe parameters with `count` columns drawn away from the sink and
/// the sequence tail.
pub fn planted_params(n: usize, d: usize, count: usize, mass: f64, seed: u64) -> PlantedStripes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut cols: Vec<usize> = (128..n * 3 / 4).collect();
    cols.shuffle(&mut rng);
    let mut cols: Vec<usize> = cols.into_iter().take(count).collect();
    cols.sort_unstable();
    PlantedStripes::new(n, d, cols, mass, seed)
}

pub fn planted_head(n: usize, d: usize, count: usize, mass: f64, seed: u64) -> (HeadWorkload, Vec<usize>) {
    let params = planted_params(n, d, count, mass, seed);
    (params.generate().unwrap(), params.stripe_cols)
}

/// A structured mix: random, sink-heavy and planted heads with varied
/// lengths, including ones that are not multiples of the block size.
pub fn mixed_suite(count: usize, seed: u64) -> Vec<HeadWorkload> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000) + i as u64;
            match i % 3 {
                0 => random_head(rng.random_range(1..=1200), [8, 16, 32][i % 3], s),
                1 => sink_head(rng.random_range(200..=1500), 32, [8.0, 16.0][i % 2], s),
                _ => {
                    let mut params = planted_params(rng.random_range(600..=1500), 32, 3, 0.5, s);
                    params.sink_strength = [4.0, 16.0][i % 2];
                    params.generate().unwrap()
                }
            }
        })
        .collect()
}

/// Block configurations exercising block ratios, steps and pooling modes.
pub fn config_grid() -> Vec<BlockConfig> {
    use anchor_attention::QueryPooling;
    vec![
        cfg(128, 128, 16, 12.0),
        cfg(128, 128, 1, 12.0),
        cfg(64, 64, 2, 12.0),
        cfg(128, 64, 1, 12.0),
        cfg(64, 128, 4, 12.0),
        cfg(32, 32, 3, 12.0).with_pooling(QueryPooling::PerGroup),
    ]
}

pub fn matrix_max_abs(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold(0.0, f64::max)
}

/// Highest sparsity among curve points whose recall lies within `tol` of
/// `level`.
pub fn best_sparsity_near(points: &[(f64, f64)], level: f64, tol: f64) -> Option<f64> {
    points
        .iter()
        .filter(|(r, _)| (r - level).abs() <= tol)
        .map(|&(_, s)| s)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
}
