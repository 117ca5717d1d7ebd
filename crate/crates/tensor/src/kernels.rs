//! Raw convolution kernels: batched im2col / col2im and layout permutations.

use crate::scalar::Scalar;

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `batch` images laid out `[N, C, H, W]` into a `[C*k*k, N*Ho*Wo]` matrix.
pub fn im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = batch * ho * wo;
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let src = &x[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    for oh in 0..ho {
                        let dst = &mut dst_row[(n * ho + oh) * wo..(n * ho + oh + 1) * wo];
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *d = if iw < 0 || iw >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters the column matrix back, accumulating into `x`.
pub fn col2im<T: Scalar>(col: &[T], batch: usize, g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = batch * ho * wo;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let dst = &mut x[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[(n * ho + oh) * wo..(n * ho + oh + 1) * wo];
                        let dst_row = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[A, B, P] -> [B, A, P]` for contiguous blocks of `p` elements.
pub fn swap_leading<T: Scalar>(src: &[T], a: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * p;
            let d = (j * a + i) * p;
            out[d..d + p].copy_from_slice(&src[s..s + p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let batch = 2;
        let x: Vec<f64> = (0..batch * 2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = batch * g.out_pixels();
        let y: Vec<f64> = (0..g.col_rows() * cols).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; g.col_rows() * cols];
        im2col(&x, batch, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, batch, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn swap_leading_round_trips() {
        let v: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let w = swap_leading(&v, 2, 3, 4);
        assert_eq!(swap_leading(&w, 3, 2, 4), v);
        assert_eq!(&w[4..8], &v[12..16]);
    }
}
