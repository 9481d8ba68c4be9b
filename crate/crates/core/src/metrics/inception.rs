use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Network, Role};

pub const LOG_FLOOR: f64 = 1e-12;
pub const ROW_SUM_TOL: f64 = 1e-5;

/// `n x c` matrix of class probabilities p(y|x_i).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbBatch {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassProbBatch {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || classes == 0 || data.len() != rows * classes {
            return Err(Error::Shape(format!(
                "{} probabilities for a {rows}x{classes} batch",
                data.len()
            )));
        }
        for (i, row) in data.chunks(classes).enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::Contract(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!("row {i} sums to {s}")));
            }
        }
        Ok(ClassProbBatch {
            rows,
            classes,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("probabilities must be [n, c], got {:?}", t.shape())));
        }
        Self::new(
            t.shape()[0],
            t.shape()[1],
            t.data().iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Score form: the standard exponentiated mean KL, or the literal mean
/// cross-entropy H(p(y), p(y|x)).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IsMode {
    #[default]
    ExpKl,
    CrossEntropy,
}

/// Mean and population standard deviation over contiguous splits.
pub fn inception_score(probs: &ClassProbBatch, splits: usize) -> Result<(f64, f64)> {
    inception_score_with(probs, splits, IsMode::ExpKl)
}

pub fn inception_score_with(probs: &ClassProbBatch, splits: usize, mode: IsMode) -> Result<(f64, f64)> {
    let n = probs.rows;
    if splits == 0 || splits > n {
        return Err(Error::Contract(format!("{splits} splits for {n} rows")));
    }
    let c = probs.classes;
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            let m = (hi - lo) as f64;
            let mut marginal = vec![0.0; c];
            for i in lo..hi {
                for (acc, p) in marginal.iter_mut().zip(probs.row(i)) {
                    *acc += p;
                }
            }
            marginal.iter_mut().for_each(|v| *v /= m);
            let log_marg: Vec<f64> = marginal.iter().map(|q| (q + LOG_FLOOR).ln()).collect();
            let mean_term = (lo..hi)
                .map(|i| {
                    let row = probs.row(i);
                    match mode {
                        IsMode::ExpKl => row
                            .iter()
                            .zip(&log_marg)
                            .filter(|(p, _)| **p > 0.0)
                            .map(|(p, lq)| p * ((p + LOG_FLOOR).ln() - lq))
                            .sum::<f64>(),
                        IsMode::CrossEntropy => -marginal
                            .iter()
                            .zip(row)
                            .map(|(q, p)| q * (p + LOG_FLOOR).ln())
                            .sum::<f64>(),
                    }
                })
                .sum::<f64>()
                / m;
            match mode {
                // the mean KL is nonnegative; only rounding can push it below
                IsMode::ExpKl => mean_term.max(0.0).exp(),
                IsMode::CrossEntropy => mean_term,
            }
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Classifier softmax outputs for `images`, evaluated in batches.
pub fn class_probs(images: &Tensor<f32>, classifier: &Network) -> Result<ClassProbBatch> {
    if classifier.role() != Role::Classifier {
        return Err(Error::Contract(format!("class probabilities need a classifier, got {:?}", classifier.role())));
    }
    let mut rows = Vec::new();
    let mut n = 0;
    let mut c = 0;
    for chunk in super::batches(images)? {
        let p = classifier.infer(&chunk)?;
        n += p.shape()[0];
        c = p.shape()[1];
        rows.extend(p.data().iter().map(|&v| v as f64));
    }
    ClassProbBatch::new(n, c, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_score_one() {
        let b = ClassProbBatch::new(20, 10, vec![0.1; 200]).unwrap();
        let (m, s) = inception_score(&b, 1).unwrap();
        assert!((m - 1.0).abs() <= 1e-9);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn balanced_one_hot_scores_class_count() {
        let mut data = vec![0.0; 100];
        for i in 0..10 {
            data[i * 10 + i] = 1.0;
        }
        let b = ClassProbBatch::new(10, 10, data).unwrap();
        assert!((inception_score(&b, 1).unwrap().0 - 10.0).abs() < 1e-6);
    }

    #[test]
    fn two_row_case_matches_direct_sum() {
        let b = ClassProbBatch::new(2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        // marginal is (0.5, 0.5); both rows have KL = 0.9 ln 1.8 + 0.1 ln 0.2
        let kl = 0.9f64 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let (m, _) = inception_score(&b, 1).unwrap();
        assert!((m - kl.exp()).abs() < 1e-10, "{m} vs {}", kl.exp());
    }

    #[test]
    fn split_std_is_population() {
        // split 1 uniform (score 1), split 2 balanced one-hot over 2 classes (score 2)
        let b = ClassProbBatch::new(4, 2, vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let (m, s) = inception_score(&b, 2).unwrap();
        assert!((m - 1.5).abs() < 1e-9 && (s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_mode_on_uniform_rows() {
        let b = ClassProbBatch::new(4, 4, vec![0.25; 16]).unwrap();
        let (m, _) = inception_score_with(&b, 1, IsMode::CrossEntropy).unwrap();
        assert!((m - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_rows_and_splits() {
        assert!(ClassProbBatch::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(ClassProbBatch::new(1, 2, vec![1.1, -0.1]).is_err());
        let b = ClassProbBatch::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(inception_score(&b, 3).is_err());
        assert!(inception_score(&b, 0).is_err());
    }
}
