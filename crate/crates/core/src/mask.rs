use crate::error::{Error, Result};

/// Set of causal `(row, key)` positions, stored as one sorted index list per
/// query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    n: usize,
    rows: Vec<Vec<u32>>,
}

impl SelectionMask {
    /// Validates that every list is strictly increasing and causal.
    pub fn new(n: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::shape(format!("mask has {} rows, expected {n}", rows.len())));
        }
        if n > u32::MAX as usize {
            return Err(Error::invalid("sequence too long for mask indices"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("row {i} is not sorted and unique")));
            }
            if let Some(&last) = row.last() {
                if last as usize > i {
                    return Err(Error::invalid(format!("row {i} selects non-causal key {last}")));
                }
            }
        }
        Ok(Self { n, rows })
    }

    pub(crate) fn from_rows_unchecked(n: usize, rows: Vec<Vec<u32>>) -> Self {
        debug_assert!(Self::new(n, rows.clone()).is_ok());
        Self { n, rows }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn full_causal(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn diagonal(n: usize) -> Self {
        Self::from_fn(n, |i, j| i == j)
    }

    /// Builds a mask from a predicate evaluated on every causal pair.
    pub fn from_fn(n: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let rows = (0..n)
            .map(|i| (0..=i).filter(|&j| keep(i, j)).map(|j| j as u32).collect())
            .collect();
        Self { n, rows }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        j <= i && self.rows[i].binary_search(&(j as u32)).is_ok()
    }

    /// Number of selected positions.
    pub fn count(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }

    pub fn causal_count(&self) -> u64 {
        causal_positions(self.n)
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        self.rows.iter().position(Vec::is_empty)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.n == other.n
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(i, r)| r.iter().all(|&j| other.contains(i, j as usize)))
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::shape("mask lengths differ"));
        }
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| merge_sorted(a, b))
            .collect();
        Ok(Self { n: self.n, rows })
    }
}

/// `n(n+1)/2`, the size of the causal domain.
pub fn causal_positions(n: usize) -> u64 {
    let n = n as u64;
    n * (n + 1) / 2
}

fn merge_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => {
                out.push(a[x]);
                x += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[y]);
                y += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[x]);
                x += 1;
                y += 1;
            }
        }
    }
    out.extend_from_slice(&a[x..]);
    out.extend_from_slice(&b[y..]);
    out
}
