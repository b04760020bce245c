//! Dense row-major storage, pooling helpers and the shared head/block types.

use crate::error::{Error, Result};

/// Dense 2-D `f32` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::new`] but additionally rejects NaN and infinities.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Mean over consecutive runs of `block` rows. A trailing partial run is
/// averaged over its own length.
pub fn avgpool_rows(m: &Matrix, block: usize) -> Result<Matrix> {
    if block == 0 {
        return Err(Error::invalid("pooling block must be >= 1"));
    }
    if m.rows == 0 {
        return Err(Error::invalid("cannot pool an empty matrix"));
    }
    let groups = m.rows.div_ceil(block);
    let mut out = Vec::with_capacity(groups * m.cols);
    let mut sums = vec![0f64; m.cols];
    for g in 0..groups {
        let start = g * block;
        let end = (start + block).min(m.rows);
        sums.iter_mut().for_each(|s| *s = 0.0);
        for i in start..end {
            for (s, &x) in sums.iter_mut().zip(m.row(i)) {
                *s += f64::from(x);
            }
        }
        let len = (end - start) as f64;
        out.extend(sums.iter().map(|s| (s / len) as f32));
    }
    Matrix::new(groups, m.cols, out)
}

/// Vector counterpart of [`avgpool_rows`].
pub fn avgpool_vector(v: &[f64], block: usize) -> Result<Vec<f64>> {
    if block == 0 {
        return Err(Error::invalid("pooling block must be >= 1"));
    }
    if v.is_empty() {
        return Err(Error::invalid("cannot pool an empty vector"));
    }
    Ok(v
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// One attention head: `q`, `k` and `v` all of shape `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWorkload {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl HeadWorkload {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        let shape = q.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::invalid("workload needs n >= 1 and d >= 1"));
        }
        if k.shape() != shape || v.shape() != shape {
            return Err(Error::shape(format!(
                "q {:?}, k {:?}, v {:?} must share one shape",
                shape,
                k.shape(),
                v.shape()
            )));
        }
        Ok(Self { q, k, v })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d() as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.k.is_finite() && self.v.is_finite()
    }
}

/// How queries (and anchors) are compressed before stripe identification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryPooling {
    /// One pooled row per query block; a key is kept for a step group when
    /// any block of the group passes the threshold.
    #[default]
    PerBlock,
    /// One pooled row for the whole step group.
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub b_q: usize,
    pub b_kv: usize,
    /// Number of consecutive query blocks sharing one stripe index list.
    pub step: usize,
    /// Maximum allowed gap between the anchor logit and a key's logit.
    pub theta: f64,
    pub pooling: QueryPooling,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            b_q: 128,
            b_kv: 128,
            step: 16,
            theta: 12.0,
            pooling: QueryPooling::PerBlock,
        }
    }
}

impl BlockConfig {
    pub fn new(b_q: usize, b_kv: usize, step: usize, theta: f64) -> Result<Self> {
        let cfg = Self {
            b_q,
            b_kv,
            step,
            theta,
            pooling: QueryPooling::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_pooling(mut self, pooling: QueryPooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_kv == 0 || self.step == 0 {
            return Err(Error::invalid("b_q, b_kv and step must all be >= 1"));
        }
        if !self.b_q.is_multiple_of(self.b_kv) && !self.b_kv.is_multiple_of(self.b_q) {
            return Err(Error::invalid(format!(
                "b_q={} and b_kv={} must divide one another",
                self.b_q, self.b_kv
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::invalid("theta must be finite"));
        }
        Ok(())
    }

    /// Query rows per step group.
    pub fn group_rows(&self) -> usize {
        self.b_q * self.step
    }

    /// Rows averaged into one pooled query.
    pub fn pool_rows(&self) -> usize {
        match self.pooling {
            QueryPooling::PerBlock => self.b_q,
            QueryPooling::PerGroup => self.group_rows(),
        }
    }

    pub fn query_blocks(&self, n: usize) -> usize {
        n.div_ceil(self.b_q)
    }

    pub fn kv_blocks(&self, n: usize) -> usize {
        n.div_ceil(self.b_kv)
    }

    pub fn groups(&self, n: usize) -> usize {
        n.div_ceil(self.group_rows())
    }
}
