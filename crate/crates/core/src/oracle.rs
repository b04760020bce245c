//! Dense causal attention, the ground truth for every sparse path.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::SelectionMask;
use crate::tensor::{dot, HeadWorkload, Matrix};

/// Attention output, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub o: Matrix,
}

fn check_qk(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::invalid(format!(
            "q has {} columns but k has {}",
            q.cols(),
            k.cols()
        )));
    }
    if q.rows() != k.rows() {
        return Err(Error::invalid(format!(
            "causal scores need equal lengths, got {} queries and {} keys",
            q.rows(),
            k.rows()
        )));
    }
    if q.cols() == 0 {
        return Err(Error::invalid("head dimension must be >= 1"));
    }
    Ok(())
}

/// Scaled causal scores. Entries above the diagonal are `-inf`.
pub fn dense_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_qk(q, k)?;
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::from_fn(n, n, |_, _| f32::NEG_INFINITY);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let qi = q.row(i);
            for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                *s = (dot(qi, k.row(j)) * scale) as f32;
            }
        });
    Ok(out)
}

fn row_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// Causal softmax probabilities; masked entries are exactly zero.
pub fn dense_probs(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_qk(q, k)?;
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(n, n);
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let qi = q.row(i);
            let scores: Vec<f64> = (0..=i).map(|j| dot(qi, k.row(j)) * scale).collect();
            for (dst, p) in row.iter_mut().zip(row_softmax(&scores)) {
                *dst = p as f32;
            }
        });
    Ok(out)
}

fn attend_row(w: &HeadWorkload, i: usize, keys: impl Iterator<Item = usize> + Clone, out: &mut [f32]) {
    let scale = w.scale();
    let qi = w.q.row(i);
    let scores: Vec<f64> = keys.clone().map(|j| dot(qi, w.k.row(j)) * scale).collect();
    let p = row_softmax(&scores);
    let mut acc = vec![0f64; w.d()];
    for (pj, j) in p.iter().zip(keys) {
        for (a, &x) in acc.iter_mut().zip(w.v.row(j)) {
            *a += pj * f64::from(x);
        }
    }
    for (dst, a) in out.iter_mut().zip(acc) {
        *dst = a as f32;
    }
}

pub fn dense_attention(w: &HeadWorkload) -> Result<AttentionOutput> {
    check_qk(&w.q, &w.k)?;
    let mut o = Matrix::zeros(w.n(), w.d());
    o.data_mut()
        .par_chunks_mut(w.d())
        .enumerate()
        .for_each(|(i, row)| attend_row(w, i, 0..=i, row));
    Ok(AttentionOutput { o })
}

/// Attention restricted to the positions in `mask`.
pub fn masked_attention(w: &HeadWorkload, mask: &SelectionMask) -> Result<AttentionOutput> {
    masked_attention_counted(w, mask).map(|(out, _)| out)
}

/// [`masked_attention`] that also reports how many scores it evaluated.
pub fn masked_attention_counted(
    w: &HeadWorkload,
    mask: &SelectionMask,
) -> Result<(AttentionOutput, u64)> {
    check_qk(&w.q, &w.k)?;
    if mask.n() != w.n() {
        return Err(Error::shape(format!(
            "mask covers {} rows, workload has {}",
            mask.n(),
            w.n()
        )));
    }
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::EmptyRow { row });
    }
    let mut o = Matrix::zeros(w.n(), w.d());
    let evaluated: u64 = o
        .data_mut()
        .par_chunks_mut(w.d())
        .enumerate()
        .map(|(i, row)| {
            let keys = mask.row(i).iter().map(|&j| j as usize);
            attend_row(w, i, keys, row);
            mask.row(i).len() as u64
        })
        .sum();
    Ok((AttentionOutput { o }, evaluated))
}
