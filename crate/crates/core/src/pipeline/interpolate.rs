use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::{export_grid, load_checkpoint, LatentSampler};
use crate::error::{Error, Result};
use crate::models::{Network, Role};

/// Teacher and student renders along a straight latent path.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub ts: Vec<f64>,
    pub z0: Tensor<f32>,
    pub z1: Tensor<f32>,
    pub teacher: Vec<Tensor<f32>>,
    pub student: Vec<Tensor<f32>>,
}

impl Interpolation {
    /// Teacher row followed by student row, `[2k, c, h, w]`.
    pub fn grid_images(&self) -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = self.teacher.iter().chain(&self.student).collect();
        Tensor::concat_batch(&refs)
    }

    /// Teacher-student pixel MSE per column.
    pub fn column_mse(&self) -> Vec<f64> {
        self.teacher
            .iter()
            .zip(&self.student)
            .map(|(a, b)| {
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum();
                s / a.numel() as f64
            })
            .collect()
    }
}

fn latent_dim(net: &Network, what: &str) -> Result<usize> {
    if net.role() != Role::Generator {
        return Err(Error::Contract(format!("{what} is not a generator")));
    }
    Ok(net.input_shape()[0])
}

/// Latent point `(1 - t) z0 + t z1`.
pub fn lerp(z0: &Tensor<f32>, z1: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Render `k` evenly spaced columns from z0 (drawn from `seed`) to z1; each
/// column is generated on its own so the endpoints match direct generation.
pub fn interpolate(teacher: &Network, student: &Network, k: usize, seed: u64) -> Result<Interpolation> {
    if k < 2 {
        return Err(Error::Config(format!("interpolation needs k >= 2, got {k}")));
    }
    let dim = latent_dim(teacher, "teacher")?;
    let sdim = latent_dim(student, "student")?;
    if dim != sdim {
        return Err(Error::Config(format!(
            "latent dimensions differ: teacher {dim}, student {sdim}"
        )));
    }
    let mut sampler = LatentSampler::new(seed, dim);
    let z0 = sampler.sample(1);
    let z1 = sampler.sample(1);
    let ts: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
    let mut t_imgs = Vec::with_capacity(k);
    let mut s_imgs = Vec::with_capacity(k);
    for &t in &ts {
        let z = lerp(&z0, &z1, t)?;
        t_imgs.push(teacher.generate(&z)?);
        s_imgs.push(student.generate(&z)?);
    }
    Ok(Interpolation {
        ts,
        z0,
        z1,
        teacher: t_imgs,
        student: s_imgs,
    })
}

pub fn cmd_interpolate(
    teacher_path: &Path,
    student_path: &Path,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<Interpolation> {
    let teacher = load_checkpoint(teacher_path)?;
    let student = load_checkpoint(student_path)?;
    let interp = interpolate(&teacher, &student, k, seed)?;
    export_grid(&interp.grid_images()?, k, out)?;
    Ok(interp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetworkSpec;

    fn nets() -> (Network, Network) {
        (
            Network::build(&NetworkSpec::generator(8, 1, 4), false, 0).unwrap(),
            Network::build(&NetworkSpec::generator(8, 1, 1), false, 1).unwrap(),
        )
    }

    #[test]
    fn endpoints_match_direct_generation() {
        let (t, s) = nets();
        let it = interpolate(&t, &s, 5, 3).unwrap();
        assert_eq!(it.teacher[0], t.generate(&it.z0).unwrap());
        assert_eq!(it.teacher[4], t.generate(&it.z1).unwrap());
        assert_eq!(it.student[0], s.generate(&it.z0).unwrap());
        assert_eq!(it.student[4], s.generate(&it.z1).unwrap());
    }

    #[test]
    fn two_columns_are_the_endpoints() {
        let (t, s) = nets();
        let it = interpolate(&t, &s, 2, 3).unwrap();
        assert_eq!(it.ts, vec![0.0, 1.0]);
        assert_eq!(it.grid_images().unwrap().shape(), &[4, 1, 8, 8]);
    }

    #[test]
    fn latent_mismatch() {
        let (t, _) = nets();
        let mut spec = NetworkSpec::generator(8, 1, 1);
        spec.latent_dim = 10;
        let s = Network::build(&spec, false, 0).unwrap();
        assert!(matches!(interpolate(&t, &s, 3, 0), Err(Error::Config(_))));
        let (t, s) = nets();
        assert!(interpolate(&t, &s, 1, 0).is_err());
    }
}
