//! Raw convolution plumbing shared by the forward and backward rules.

use crate::autodiff::Element;

/// Geometry of a convolution viewed from its "image" side: an image of
/// `n x c x h x w` is scanned by `k x k` windows at `stride`/`pad`,
/// producing `oh x ow` window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    #[inline]
    fn src(&self, o: usize, kk: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.h.max(self.w)).then_some(i as usize)
    }
}

/// Conv output size `(size + 2p - k)/s + 1`, `None` if the window does not fit.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = size + 2 * pad;
    if stride == 0 || span < k || !(span - k).is_multiple_of(stride) {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Transposed-conv output size `(size - 1)s - 2p + k`.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    ((size - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0)
}

/// `img [n, c, h, w]` to `cols [c*k*k, n*oh*ow]`.
pub(crate) fn im2col<E: Element>(g: &ConvGeom, img: &[E], cols: &mut [E]) {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let base = (b * g.c + ch) * g.h * g.w;
                    for oy in 0..g.oh {
                        let out = &mut dst[b * plane + oy * g.ow..b * plane + (oy + 1) * g.ow];
                        match g.src(oy, ky).filter(|&iy| iy < g.h) {
                            None => out.iter_mut().for_each(|v| *v = E::zero()),
                            Some(iy) => {
                                let line = &img[base + iy * g.w..base + (iy + 1) * g.w];
                                for (ox, v) in out.iter_mut().enumerate() {
                                    *v = match g.src(ox, kx).filter(|&ix| ix < g.w) {
                                        Some(ix) => line[ix],
                                        None => E::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `img` (not cleared).
pub(crate) fn col2im<E: Element>(g: &ConvGeom, cols: &[E], img: &mut [E]) {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let base = (b * g.c + ch) * g.h * g.w;
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky).filter(|&iy| iy < g.h) else {
                            continue;
                        };
                        let inp = &src[b * plane + oy * g.ow..b * plane + (oy + 1) * g.ow];
                        let line = &mut img[base + iy * g.w..base + (iy + 1) * g.w];
                        for (ox, &v) in inp.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kx).filter(|&ix| ix < g.w) {
                                line[ix] = line[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[a, b, s]` to `[b, a, s]`.
pub(crate) fn swap_outer<E: Element>(src: &[E], a: usize, b: usize, s: usize) -> Vec<E> {
    let mut dst = vec![E::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * s;
            let to = (j * a + i) * s;
            dst[to..to + s].copy_from_slice(&src[from..from + s]);
        }
    }
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv_out(4, 3, 1, 0), Some(2));
        assert_eq!(conv_out(16, 4, 2, 1), Some(8));
        assert_eq!(conv_out(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out(4, 4, 2, 1), Some(8));
        assert_eq!(conv_transpose_out(2, 3, 1, 0), Some(4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            n: 2,
            c: 2,
            h: 5,
            w: 5,
            k: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
