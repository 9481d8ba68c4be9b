//! Sample-quality metrics: Inception Score, Frechet distance, variance of
//! Laplacian and compression ratios.

mod fid;
mod inception;
mod linalg;
mod report;
mod vol;

pub use fid::{feature_stats, fid, FeatureStats};
pub use inception::{
    class_probs, inception_score, inception_score_with, ClassProbBatch, IsMode, LOG_FLOOR,
};
pub use linalg::{matrix_sqrt_psd, symmetric_eigen, Eigen, Matrix, JACOBI_TOL};
pub use report::{compression_ratio, CompressionRatio, MetricsReport, ReportRow, REPORT_HEADER};
pub use vol::{gaussian_blur, mean_vol, variance_of_laplacian};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Images per classifier forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

fn batches(images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    if images.shape().len() != 4 {
        return Err(Error::Shape(format!("expected [n, c, h, w], got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    (0..n)
        .step_by(EVAL_BATCH)
        .map(|lo| images.batch_slice(lo, (lo + EVAL_BATCH).min(n)))
        .collect()
}
