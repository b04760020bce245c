//! Recall, sparsity and output error.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::SelectionMask;
use crate::oracle::AttentionOutput;
use crate::tensor::Matrix;

/// Fraction of attention probability mass captured by `mask`, averaged over
/// rows.
pub fn recall(mask: &SelectionMask, p: &Matrix) -> Result<f64> {
    let n = mask.n();
    if p.shape() != (n, n) {
        return Err(Error::shape(format!(
            "mask over {n} rows vs probability map {:?}",
            p.shape()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let captured: f64 = (0..n)
        .map(|i| {
            let row = p.row(i);
            mask.row(i).iter().map(|&j| f64::from(row[j as usize])).sum::<f64>()
        })
        .sum();
    Ok(captured / n as f64)
}

/// Fraction of causal positions left out of `mask`.
pub fn sparsity(mask: &SelectionMask) -> f64 {
    let causal = mask.causal_count();
    if causal == 0 {
        return 0.0;
    }
    1.0 - mask.count() as f64 / causal as f64
}

/// `(max_abs, mean_abs)` elementwise difference.
pub fn output_error(a: &AttentionOutput, b: &AttentionOutput) -> Result<(f64, f64)> {
    if a.o.shape() != b.o.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.o.shape(), b.o.shape())));
    }
    let len = a.o.data().len();
    if len == 0 {
        return Ok((0.0, 0.0));
    }
    let (max, sum) = a
        .o
        .data()
        .iter()
        .zip(b.o.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .fold((0f64, 0f64), |(m, s), e| (m.max(e), s + e));
    Ok((max, sum / len as f64))
}

/// One evaluated configuration. Error fields are `None` when no reference
/// output was computed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub recall: Option<f64>,
    pub sparsity: f64,
    pub max_abs_err: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub computed_positions: u64,
}

impl EvalReport {
    /// Arithmetic mean over heads. An optional field is averaged only when
    /// every report has it.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> Option<f64>| -> Option<f64> {
            reports.iter().map(f).sum::<Option<f64>>().map(|s| s / k)
        };
        Some(EvalReport {
            recall: avg(|r| r.recall),
            sparsity: reports.iter().map(|r| r.sparsity).sum::<f64>() / k,
            max_abs_err: avg(|r| r.max_abs_err),
            mean_abs_err: avg(|r| r.mean_abs_err),
            computed_positions: (reports.iter().map(|r| r.computed_positions as f64).sum::<f64>() / k).round()
                as u64,
        })
    }

    pub fn csv_row(&self, head_id: impl Into<String>, param: impl Into<String>) -> CsvRow {
        CsvRow {
            head_id: head_id.into(),
            theta_or_param: param.into(),
            sparsity: self.sparsity,
            recall: self.recall,
            max_abs_err: self.max_abs_err,
            mean_abs_err: self.mean_abs_err,
            computed_positions: self.computed_positions,
        }
    }
}

/// Stable CSV schema shared by every harness command. Missing optional
/// values are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub head_id: String,
    pub theta_or_param: String,
    pub sparsity: f64,
    pub recall: Option<f64>,
    pub max_abs_err: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub computed_positions: u64,
}

pub const CSV_HEADER: [&str; 7] = [
    "head_id",
    "theta_or_param",
    "sparsity",
    "recall",
    "max_abs_err",
    "mean_abs_err",
    "computed_positions",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_probs(n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 / (i + 1) as f32 } else { 0.0 })
    }

    #[test]
    fn recall_cases() {
        let p = uniform_probs(9);
        assert!((recall(&SelectionMask::full_causal(9), &p).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(recall(&SelectionMask::empty(9), &p).unwrap(), 0.0);
        let harmonic: f64 = (1..=9).map(|i| 1.0 / i as f64).sum::<f64>() / 9.0;
        assert!((recall(&SelectionMask::diagonal(9), &p).unwrap() - harmonic).abs() < 1e-7);
        assert!(recall(&SelectionMask::diagonal(8), &p).is_err());
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(sparsity(&SelectionMask::full_causal(7)), 0.0);
        assert_eq!(sparsity(&SelectionMask::empty(7)), 1.0);
        assert!((sparsity(&SelectionMask::diagonal(4)) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn output_error_cases() {
        let a = AttentionOutput {
            o: Matrix::from_fn(3, 2, |i, j| (i * j) as f32),
        };
        assert_eq!(output_error(&a, &a).unwrap(), (0.0, 0.0));
        let mut b = a.clone();
        b.o.data_mut().iter_mut().for_each(|x| *x += 0.5);
        assert_eq!(output_error(&a, &b).unwrap(), (0.5, 0.5));
        let c = AttentionOutput { o: Matrix::zeros(2, 2) };
        assert!(output_error(&a, &c).is_err());
    }

    #[test]
    fn report_mean() {
        let a = EvalReport {
            recall: Some(0.5),
            sparsity: 0.2,
            max_abs_err: None,
            mean_abs_err: Some(1.0),
            computed_positions: 10,
        };
        let b = EvalReport {
            recall: Some(1.0),
            sparsity: 0.4,
            max_abs_err: Some(1.0),
            mean_abs_err: Some(3.0),
            computed_positions: 20,
        };
        let m = EvalReport::mean(&[a, b]).unwrap();
        assert_eq!(m.recall, Some(0.75));
        assert!((m.sparsity - 0.3).abs() < 1e-15);
        assert_eq!(m.max_abs_err, None);
        assert_eq!(m.mean_abs_err, Some(2.0));
        assert_eq!(m.computed_positions, 15);
        assert!(EvalReport::mean(&[]).is_none());
    }
}
