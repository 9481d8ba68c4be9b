use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Channel-mean grayscale plane of a `[c, h, w]` or `[1, c, h, w]` image.
fn grayscale(image: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "expected one image [c, h, w], got {s:?}"
            )))
        }
    };
    let plane = h * w;
    let mut g = vec![0.0; plane];
    for ch in image.data().chunks(plane) {
        for (acc, &v) in g.iter_mut().zip(ch) {
            *acc += v as f64;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((h, w, g))
}

/// Population variance of the 4-neighbour Laplacian response over the
/// valid region.
pub fn variance_of_laplacian(image: &Tensor<f32>) -> Result<f64> {
    let (h, w, g) = grayscale(image)?;
    if h < 3 || w < 3 {
        return Err(Error::Contract(format!("image {h}x{w} is smaller than the 3x3 kernel")));
    }
    let mut resp = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let at = |yy: usize, xx: usize| g[yy * w + xx];
            resp.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    Ok(resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

/// Mean VoL over a `[n, c, h, w]` batch.
pub fn mean_vol(images: &Tensor<f32>) -> Result<f64> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [n, c, h, w], got {s:?}")));
    }
    let total = (0..s[0])
        .map(|i| variance_of_laplacian(&images.batch_slice(i, i + 1)?))
        .sum::<Result<f64>>()?;
    Ok(total / s[0] as f64)
}

/// Separable Gaussian blur with edge replication, per channel.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Contract(format!("blur sigma must be positive, got {sigma}")));
    }
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("cannot blur shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Vec::with_capacity(image.numel());
    for plane in image.data().chunks(h * w) {
        let mut tmp = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_zero() {
        let img = Tensor::filled(&[1, 8, 8], 0.3).unwrap();
        assert_eq!(variance_of_laplacian(&img).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard() {
        let data = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        assert_eq!(variance_of_laplacian(&img).unwrap(), 16.0);
    }

    #[test]
    fn color_reduces_by_channel_mean() {
        let data: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let mut rgb = data.clone();
        rgb.extend(&data);
        rgb.extend(&data);
        let img = Tensor::new(vec![1, 3, 4, 4], rgb).unwrap();
        assert_eq!(variance_of_laplacian(&img).unwrap(), 16.0);
    }

    #[test]
    fn too_small() {
        assert!(variance_of_laplacian(&Tensor::zeros(&[1, 2, 5]).unwrap()).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::filled(&[1, 6, 6], -0.5).unwrap();
        let b = gaussian_blur(&img, 1.0).unwrap();
        assert!(b.data().iter().all(|&v| (v + 0.5).abs() < 1e-6));
    }
}
