use crate::error::{Error, Result};

/// Square row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

pub const JACOBI_TOL: f64 = 1e-10;
pub const SYMMETRY_TOL: f64 = 1e-6;
const MAX_SWEEPS: usize = 100;

impl Matrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} values for a {n}x{n} matrix", data.len())));
        }
        Ok(Matrix { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.n != other.n {
            return Err(Error::Contract(format!(
                "matrix product of {0}x{0} and {1}x{1}",
                self.n, other.n
            )));
        }
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm of `self - other` relative to `other`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = other.frobenius();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    fn check_symmetric(&self) -> Result<()> {
        let scale = self.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL * scale || !asym.is_finite() {
            return Err(Error::Contract(format!(
                "matrix is not symmetric (max |A_ij - A_ji| = {asym:e})"
            )));
        }
        Ok(())
    }

    fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below
/// `JACOBI_TOL` times the matrix norm.
pub fn symmetric_eigen(a: &Matrix) -> Result<Eigen> {
    a.check_symmetric()?;
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_TOL * m.frobenius().max(f64::MIN_POSITIVE);
    let off = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > threshold {
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            return Err(Error::Numeric(format!("Jacobi did not converge in {MAX_SWEEPS} sweeps")));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Ok(Eigen {
        values: (0..n).map(|i| m.get(i, i)).collect(),
        vectors: v,
    })
}

/// Principal square root of a symmetric positive semidefinite matrix;
/// negative eigenvalues are clamped to zero.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let e = symmetric_eigen(a)?;
    let n = a.n;
    let roots: Vec<f64> = e.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut s = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..n)
                .map(|k| e.vectors.get(i, k) * roots[k] * e.vectors.get(j, k))
                .sum();
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}
