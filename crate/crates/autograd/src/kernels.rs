//! Raw numeric kernels shared by the forward and backward passes.

use crate::float::Float;

/// Row-major view description of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatRef {
    /// Contiguous `rows × cols` block, optionally read transposed.
    pub fn dense(rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            // stored as cols × rows
            Self {
                rows,
                cols,
                row_stride: 1,
                col_stride: rows as isize,
            }
        } else {
            Self {
                rows,
                cols,
                row_stride: cols as isize,
                col_stride: 1,
            }
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `c = alpha·a·b + beta·c` where operands are described by [`MatRef`]s
/// relative to the given slice offsets.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<T: Float>(
    alpha: T,
    a: &[T],
    a_off: usize,
    av: MatRef,
    b: &[T],
    b_off: usize,
    bv: MatRef,
    beta: T,
    c: &mut [T],
    c_off: usize,
    cv: MatRef,
) {
    assert_eq!(av.cols, bv.rows, "inner dimension mismatch");
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // empty inner product: c = beta·c
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = c_off + i * cv.row_stride as usize + j * cv.col_stride as usize;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(a_off + av.max_offset() < a.len(), "lhs out of bounds");
    assert!(b_off + bv.max_offset() < b.len(), "rhs out of bounds");
    assert!(c_off + cv.max_offset() < c.len(), "output out of bounds");
    // SAFETY: bounds of every reachable index were asserted above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(a_off),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(b_off),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(c_off),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

/// Dense `c (m×n) = op(a)·op(b) + beta·c` with row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    gemm_view(
        T::one(),
        a,
        0,
        MatRef::dense(m, k, a_t),
        b,
        0,
        MatRef::dense(k, n, b_t),
        beta,
        c,
        0,
        MatRef::dense(m, n, false),
    );
}

/// Unfolds 3×3 zero-padded neighbourhoods of an NHWC batch into rows of
/// length `9·c`, ordered `(dy, dx, channel)`.
pub fn im2col3x3<T: Float>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); b * h * w * 9 * c];
    let row_len = 9 * c;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * row_len;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatters row gradients back onto the image.
pub fn col2im3x3<T: Float>(cols: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut x = vec![T::zero(); b * h * w * c];
    let row_len = 9 * c;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * row_len;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * 3 + dx) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[b, h, w, c] -> [b, h/f, w/f, f·f·c]`, channel order `(dy, dx, c)`.
pub fn space_to_depth<T: Float>(x: &[T], b: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let co = f * f * c;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * ho + y / f) * wo + xx / f) * co + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `x` has shape `[b, h, w, f·f·c]`.
pub fn depth_to_space<T: Float>(x: &[T], b: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let ci = f * f * c;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((bi * ho + y) * wo + xx) * c;
                let src = ((bi * h + y / f) * w + xx / f) * ci + ((y % f) * f + xx % f) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (b, h, w, c) = (2, 4, 3, 2);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| (i as f64 * 0.13).sin()).collect();
        let y: Vec<f64> = (0..b * h * w * 9 * c).map(|i| (i as f64 * 0.71).cos()).collect();
        let lhs: f64 = im2col3x3(&x, b, h, w, c).iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(col2im3x3(&y, b, h, w, c)).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn depth_to_space_inverts_space_to_depth() {
        let (b, h, w, c) = (2, 4, 6, 3);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| i as f64).collect();
        let s = space_to_depth(&x, b, h, w, c, 2);
        assert_eq!(depth_to_space(&s, b, h / 2, w / 2, c, 2), x);
    }
}
