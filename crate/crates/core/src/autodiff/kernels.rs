//! Raw numeric kernels over flat row-major buffers.
//!
//! Everything here is sequential with a fixed summation order, so repeated
//! calls on the same inputs are bit-identical.

use crate::tensor::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of one 2-D convolution or pooling window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output extents `floor((in + 2p - k) / s) + 1`, or `None` when the
    /// window does not fit.
    pub fn output(&self) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let h = self.in_h + 2 * self.padding;
        let w = self.in_w + 2 * self.padding;
        if self.k_h == 0 || self.k_w == 0 || self.k_h > h || self.k_w > w {
            return None;
        }
        Some(((h - self.k_h) / self.stride + 1, (w - self.k_w) / self.stride + 1))
    }
}

/// Unfolds one `channels×H×W` image into a `(channels·k_h·k_w) × (out_h·out_w)`
/// column matrix with zero padding.
pub fn im2col<T: Scalar>(image: &[T], channels: usize, win: &Window, col: &mut [T]) {
    let (out_h, out_w) = win.output().expect("window validated by caller");
    let plane = out_h * out_w;
    debug_assert_eq!(col.len(), channels * win.k_h * win.k_w * plane);
    let pad = win.padding as isize;
    for c in 0..channels {
        let src = &image[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.k_h {
            for kj in 0..win.k_w {
                let row = (c * win.k_h + ki) * win.k_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..out_h {
                    let ii = (oi * win.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oi * out_w..(oi + 1) * out_w];
                    if ii < 0 || ii >= win.in_h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ii as usize * win.in_w..(ii as usize + 1) * win.in_w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * win.stride + kj) as isize - pad;
                        *d = if jj < 0 || jj >= win.in_w as isize {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a
/// `channels×H×W` image gradient, accumulating overlaps.
pub fn col2im<T: Scalar>(col: &[T], channels: usize, win: &Window, image: &mut [T]) {
    let (out_h, out_w) = win.output().expect("window validated by caller");
    let plane = out_h * out_w;
    let pad = win.padding as isize;
    for c in 0..channels {
        let dst = &mut image[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..win.k_h {
            for kj in 0..win.k_w {
                let row = (c * win.k_h + ki) * win.k_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..out_h {
                    let ii = (oi * win.stride + ki) as isize - pad;
                    if ii < 0 || ii >= win.in_h as isize {
                        continue;
                    }
                    for oj in 0..out_w {
                        let jj = (oj * win.stride + kj) as isize - pad;
                        if jj < 0 || jj >= win.in_w as isize {
                            continue;
                        }
                        let d = &mut dst[ii as usize * win.in_w + jj as usize];
                        *d = *d + src[oi * out_w + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_mm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c_nt[i] - want[i]).abs() < 1e-12);
            assert!((c_tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let win = Window {
            in_h: 5,
            in_w: 4,
            k_h: 3,
            k_w: 2,
            stride: 2,
            padding: 1,
        };
        let (oh, ow) = win.output().unwrap();
        let ch = 2;
        let x: Vec<f64> = (0..ch * 20).map(|i| (i as f64 * 0.3).sin()).collect();
        let rows = ch * win.k_h * win.k_w;
        let y: Vec<f64> = (0..rows * oh * ow).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut col = vec![0.0; rows * oh * ow];
        im2col(&x, ch, &win, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, ch, &win, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn window_output_formula() {
        for h in 1..9 {
            for k in 1..5 {
                for p in 0..3 {
                    for s in 1..4 {
                        let win = Window {
                            in_h: h,
                            in_w: h,
                            k_h: k,
                            k_w: k,
                            stride: s,
                            padding: p,
                        };
                        match win.output() {
                            Some((oh, _)) => {
                                assert!(k <= h + 2 * p);
                                assert_eq!(oh, (h + 2 * p - k) / s + 1);
                            }
                            None => assert!(k > h + 2 * p),
                        }
                    }
                }
            }
        }
    }
}
