use crate::autodiff::Tensor;
use crate::data::{Dataset, SeededRng};
use crate::error::{Error, Result};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "cross"];

/// `n` grayscale `size x size` images of filled circles, squares and crosses
/// (labels 0, 1, 2 assigned round-robin) with jittered position and scale.
/// Background is -1, shapes are +1.
pub fn synth_shapes(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size != 8 && size != 16 {
        return Err(Error::Contract(format!("synthetic shapes come in 8 or 16 px, not {size}")));
    }
    if n == 0 {
        return Err(Error::Contract("empty synthetic dataset".into()));
    }
    let mut rng = SeededRng::new(seed, 0x5a9e);
    let s = size as f64;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES.len();
        let jitter = s / 8.0;
        let cx = s / 2.0 + (rng.uniform() * 2.0 - 1.0) * jitter;
        let cy = s / 2.0 + (rng.uniform() * 2.0 - 1.0) * jitter;
        let r = s * (0.2 + 0.12 * rng.uniform());
        let arm = (r / 3.0).max(0.6);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match class {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                    _ => (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r),
                };
                data.push(if inside { 1.0 } else { -1.0 });
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, size, size], data)?;
    Dataset::new(format!("shapes{size}"), images, Some(labels), SHAPE_CLASSES.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_shapes(30, 16, 9).unwrap(), synth_shapes(30, 16, 9).unwrap());
        assert_ne!(
            synth_shapes(30, 16, 9).unwrap().images(),
            synth_shapes(30, 16, 10).unwrap().images()
        );
    }

    #[test]
    fn balanced_classes() {
        let d = synth_shapes(3000, 16, 0).unwrap();
        let mut hist = [0usize; 3];
        d.labels().unwrap().iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [1000, 1000, 1000]);
    }

    #[test]
    fn every_image_has_foreground_and_background() {
        for size in [8, 16] {
            let d = synth_shapes(60, size, 3).unwrap();
            let item = size * size;
            for img in d.images().data().chunks(item) {
                assert!(img.contains(&1.0) && img.contains(&-1.0));
            }
        }
    }

    #[test]
    fn rejects_other_sizes() {
        assert!(synth_shapes(10, 32, 0).is_err());
    }
}
