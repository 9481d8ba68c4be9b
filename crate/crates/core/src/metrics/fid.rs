use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::linalg::{matrix_sqrt_psd, symmetric_eigen, Matrix};
use crate::models::Network;

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::Shape(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        Ok(FeatureStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats from `n` rows of `f` features laid out row-major.
    pub fn from_rows(rows: &[f64], f: usize) -> Result<Self> {
        if f == 0 || !rows.len().is_multiple_of(f) {
            return Err(Error::Shape(format!("{} values are not rows of {f}", rows.len())));
        }
        let n = rows.len() / f;
        if n < 2 {
            return Err(Error::Metric(format!("covariance needs at least 2 samples, got {n}")));
        }
        let mut mean = vec![0.0; f];
        for row in rows.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Matrix::zeros(f);
        let mut centered = vec![0.0; f];
        for row in rows.chunks(f) {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
                *c = v - m;
            }
            for i in 0..f {
                for j in i..f {
                    cov.set(i, j, cov.get(i, j) + centered[i] * centered[j]);
                }
            }
        }
        for i in 0..f {
            for j in i..f {
                let v = cov.get(i, j) / (n - 1) as f64;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        Ok(FeatureStats { mean, cov })
    }
}

/// Classifier feature statistics of `images`, eval mode.
pub fn feature_stats(images: &Tensor<f32>, classifier: &Network) -> Result<FeatureStats> {
    let width = classifier
        .feature_width()
        .ok_or_else(|| Error::Contract(format!("{:?} exposes no feature layer", classifier.role())))?;
    let mut rows = Vec::new();
    for chunk in super::batches(images)? {
        rows.extend(classifier.features(&chunk)?.data().iter().map(|&v| v as f64));
    }
    FeatureStats::from_rows(&rows, width)
}

/// Frechet distance between two Gaussians, using the symmetric form
/// Tr[(S_g^1/2 S_r S_g^1/2)^1/2] for the cross term. Clamped at 0.
pub fn fid(real: &FeatureStats, gen: &FeatureStats) -> Result<f64> {
    if real.dim() != gen.dim() {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            gen.dim()
        )));
    }
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(&gen.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let root_g = matrix_sqrt_psd(&gen.cov)?;
    let inner = root_g.matmul(&real.cov)?.matmul(&root_g)?;
    let inner = symmetrize(&inner);
    let cross: f64 = symmetric_eigen(&inner)?
        .values
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + real.cov.trace() + gen.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Metric(format!("non-finite FID {d}")));
    }
    Ok(d.max(0.0))
}

fn symmetrize(m: &Matrix) -> Matrix {
    let n = m.dim();
    let mut s = m.clone();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}
