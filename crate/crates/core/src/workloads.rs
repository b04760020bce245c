//! Synthetic Q/K/V generators.
//!
//! The structured generators write each logit feature into its own pair of
//! coordinates. With `c = d^(1/4)`, a query coordinate `a * c` against a key
//! coordinate `b * c` contributes exactly `a * b` to the scaled score
//! `q.k / sqrt(d)`, so logit bonuses can be planted directly. Remaining
//! coordinates hold unit-variance Gaussian content.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::oracle::dense_probs;
use crate::tensor::{dot, HeadWorkload, Matrix};

fn gaussian(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
    let data = (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Matrix::new(n, d, data).expect("shape is consistent")
}

/// Independent standard-normal heads. The same seed always yields the same
/// bits.
pub fn gen_random(n: usize, d: usize, heads: usize, seed: u64) -> Result<Vec<HeadWorkload>> {
    if n == 0 || d == 0 || heads == 0 {
        return Err(Error::invalid("n, d and heads must all be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..heads)
        .map(|_| {
            let q = gaussian(&mut rng, n, d);
            let k = gaussian(&mut rng, n, d);
            let v = gaussian(&mut rng, n, d);
            HeadWorkload::new(q, k, v)
        })
        .collect()
}

/// Fraction of rows whose causal score argmax is key 0 or one of the
/// `window` most recent keys.
pub fn anchor_argmax_fraction(w: &HeadWorkload, window: usize) -> f64 {
    let scale = w.scale();
    let hits = (0..w.n())
        .into_par_iter()
        .filter(|&i| {
            let qi = w.q.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..=i {
                let s = dot(qi, w.k.row(j)) * scale;
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0 == 0 || best.0 + window > i
        })
        .count();
    hits as f64 / w.n() as f64
}

const MIN_ANCHOR_ARGMAX: f64 = 0.99;
const SINK_ATTEMPTS: u64 = 8;

/// Attention-sink workload: key 0 carries a large logit bonus, recent keys
/// a smaller recency bonus, and every query block gets its own constant logit
/// offset (softmax-invariant, but it moves the absolute score level).
#[derive(Debug, Clone, PartialEq)]
pub struct SinkLocal {
    pub n: usize,
    pub d: usize,
    pub sink_strength: f64,
    pub window: usize,
    pub seed: u64,
    /// Peak recency bonus at distance zero, decaying to zero at distance `n`.
    pub recency: f64,
    /// Standard deviation of the per-block logit offset.
    pub offset_sd: f64,
    pub offset_block: usize,
    pub content_scale: f64,
}

impl SinkLocal {
    pub fn new(n: usize, d: usize, sink_strength: f64, window: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            sink_strength,
            window,
            seed,
            recency: 1.0,
            offset_sd: 3.0,
            offset_block: 128,
            content_scale: 1.0,
        }
    }

    fn build(&self, seed: u64) -> Result<HeadWorkload> {
        let (n, d) = (self.n, self.d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (d as f64).powf(0.25);
        let content = ((d as f64) / (d - 4) as f64).sqrt() * self.content_scale;
        let omega = std::f64::consts::FRAC_PI_2 / n as f64;
        let blocks = n.div_ceil(self.offset_block.max(1));
        let offsets: Vec<f64> = (0..blocks)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * self.offset_sd)
            .collect();

        let mut q = gaussian(&mut rng, n, d);
        let mut k = gaussian(&mut rng, n, d);
        let v = gaussian(&mut rng, n, d);
        for i in 0..n {
            let phase = omega * i as f64;
            let row = q.row_mut(i);
            row[0] = c as f32;
            row[1] = (offsets[i / self.offset_block.max(1)] * c) as f32;
            row[2] = (self.recency * c * phase.cos()) as f32;
            row[3] = (self.recency * c * phase.sin()) as f32;

            let row = k.row_mut(i);
            row[0] = if i == 0 { (self.sink_strength * c) as f32 } else { 0.0 };
            row[1] = c as f32;
            row[2] = (c * phase.cos()) as f32;
            row[3] = (c * phase.sin()) as f32;
            row[4..].iter_mut().for_each(|x| *x = (f64::from(*x) * content) as f32);
        }
        HeadWorkload::new(q, k, v)
    }

    /// Builds the head and checks that at least 99% of rows have their
    /// score argmax on key 0 or inside the local window, retrying with
    /// derived seeds a bounded number of times.
    pub fn generate(&self) -> Result<HeadWorkload> {
        if self.n == 0 || self.d < 5 {
            return Err(Error::invalid("sink workloads need n >= 1 and d >= 5"));
        }
        if !(self.sink_strength > 0.0 && self.sink_strength.is_finite()) {
            return Err(Error::invalid("sink_strength must be positive and finite"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        let mut best = 0.0;
        for attempt in 0..SINK_ATTEMPTS {
            let w = self.build(self.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
            let frac = anchor_argmax_fraction(&w, self.window);
            if frac >= MIN_ANCHOR_ARGMAX {
                return Ok(w);
            }
            best = f64::max(best, frac);
        }
        Err(Error::Construction(format!(
            "anchor-argmax fraction reached only {best:.4} after {SINK_ATTEMPTS} attempts"
        )))
    }
}

pub fn gen_sink_local(n: usize, d: usize, sink_strength: f64, window: usize, seed: u64) -> Result<HeadWorkload> {
    SinkLocal::new(n, d, sink_strength, window, seed).generate()
}

/// Workload with a few key columns that attract a fixed share of every
/// eligible row's attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedStripes {
    pub n: usize,
    pub d: usize,
    pub stripe_cols: Vec<usize>,
    /// Minimum probability mass the planted columns carry in each eligible
    /// row.
    pub mass_fraction: f64,
    pub seed: u64,
    /// A row is eligible when some planted column lies at least this far
    /// behind it.
    pub window: usize,
    pub sink_strength: f64,
    pub content_scale: f64,
    /// Query rows for which the stripes are switched off.
    pub vanish: Option<Range<usize>>,
}

const STRIPE_MARGIN: f64 = 0.05;
const MAX_STRIPE_LOGIT: f64 = 60.0;

impl PlantedStripes {
    pub fn new(n: usize, d: usize, stripe_cols: Vec<usize>, mass_fraction: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            stripe_cols,
            mass_fraction,
            seed,
            window: 128,
            sink_strength: 4.0,
            content_scale: 1.0,
            vanish: None,
        }
    }

    fn gated(&self, row: usize) -> bool {
        !self.vanish.as_ref().is_some_and(|r| r.contains(&row))
    }

    /// Rows whose planted mass is enforced.
    pub fn eligible_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| {
            self.gated(i) && self.stripe_cols.iter().any(|&c| c != 0 && c + self.window <= i)
        })
    }

    fn validate(&self) -> Result<Vec<usize>> {
        if self.n == 0 || self.d < 4 {
            return Err(Error::invalid("planted workloads need n >= 1 and d >= 4"));
        }
        if self.stripe_cols.is_empty() {
            return Err(Error::invalid("stripe_cols must not be empty"));
        }
        if let Some(&c) = self.stripe_cols.iter().find(|&&c| c >= self.n) {
            return Err(Error::invalid(format!("stripe column {c} outside n = {}", self.n)));
        }
        if !(self.mass_fraction > 0.0 && self.mass_fraction < 1.0) {
            return Err(Error::invalid("mass_fraction must lie in (0, 1)"));
        }
        let mut cols = self.stripe_cols.clone();
        cols.sort_unstable();
        cols.dedup();
        Ok(cols)
    }

    fn base(&self, rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Matrix) {
        let (n, d) = (self.n, self.d);
        let c = (d as f64).powf(0.25);
        let content = ((d as f64) / (d - 2) as f64).sqrt() * self.content_scale;
        let mut q = gaussian(rng, n, d);
        let mut k = gaussian(rng, n, d);
        let v = gaussian(rng, n, d);
        for i in 0..n {
            let row = q.row_mut(i);
            row[0] = c as f32;
            row[1] = if self.gated(i) { c as f32 } else { 0.0 };
            let row = k.row_mut(i);
            row[0] = if i == 0 { (self.sink_strength * c) as f32 } else { 0.0 };
            row[1] = 0.0;
            row[2..].iter_mut().for_each(|x| *x = (f64::from(*x) * content) as f32);
        }
        (q, k, v)
    }

    /// Smallest stripe logit bonus meeting the mass target on every
    /// eligible row, from the bonus-free logits.
    fn required_bonus(&self, q: &Matrix, k: &Matrix, cols: &[usize]) -> Result<f64> {
        let scale = 1.0 / (self.d as f64).sqrt();
        let f = self.mass_fraction;
        let rows: Vec<usize> = self.eligible_rows().collect();
        if rows.is_empty() {
            return Err(Error::Construction(
                "no row sees a planted column outside the local window".into(),
            ));
        }
        let needed = rows
            .par_iter()
            .map(|&i| {
                let qi = q.row(i);
                let logits: Vec<f64> = (0..=i).map(|j| dot(qi, k.row(j)) * scale).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mut stripe, mut rest) = (0.0, 0.0);
                for (j, s) in logits.iter().enumerate() {
                    let e = (s - max).exp();
                    if cols.binary_search(&j).is_ok() {
                        stripe += e;
                    } else {
                        rest += e;
                    }
                }
                (f * rest / ((1.0 - f) * stripe)).ln()
            })
            .reduce(|| f64::NEG_INFINITY, f64::max);
        Ok(needed.max(0.0) + STRIPE_MARGIN)
    }

    /// Per eligible row, the probability mass on the planted columns.
    pub fn planted_mass(&self, w: &HeadWorkload) -> Result<Vec<(usize, f64)>> {
        let p = dense_probs(&w.q, &w.k)?;
        Ok(self
            .eligible_rows()
            .map(|i| {
                let m = self
                    .stripe_cols
                    .iter()
                    .filter(|&&c| c <= i)
                    .map(|&c| f64::from(p.get(i, c)))
                    .sum();
                (i, m)
            })
            .collect())
    }

    /// Builds the workload, sizing the stripe bonus from the logits and then
    /// confirming the mass target against the dense oracle.
    pub fn generate(&self) -> Result<HeadWorkload> {
        let cols = self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (q, mut k, v) = self.base(&mut rng);
        let bonus = self.required_bonus(&q, &k, &cols)?;
        if !bonus.is_finite() || bonus > MAX_STRIPE_LOGIT {
            return Err(Error::Construction(format!(
                "mass fraction {} needs a stripe logit of {bonus:.1}",
                self.mass_fraction
            )));
        }
        let c = (self.d as f64).powf(0.25);
        for &col in &cols {
            k.row_mut(col)[1] = (bonus * c) as f32;
        }
        let w = HeadWorkload::new(q, k, v)?;
        if !w.is_finite() {
            return Err(Error::Construction("non-finite values".into()));
        }
        if let Some((row, m)) = self
            .planted_mass(&w)?
            .into_iter()
            .find(|&(_, m)| m < self.mass_fraction)
        {
            return Err(Error::Construction(format!(
                "row {row} holds planted mass {m:.4} < {}",
                self.mass_fraction
            )));
        }
        Ok(w)
    }
}

pub fn gen_planted_stripes(
    n: usize,
    d: usize,
    stripe_cols: &[usize],
    mass_fraction: f64,
    seed: u64,
) -> Result<HeadWorkload> {
    PlantedStripes::new(n, d, stripe_cols.to_vec(), mass_fraction, seed).generate()
}
