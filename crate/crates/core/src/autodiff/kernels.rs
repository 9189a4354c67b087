//! Dense kernels shared by the tape operations.

use rayon::prelude::*;

use super::ExecMode;

/// Row-major matrix view with optional transpose.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Row and column strides of the logical (possibly transposed) matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b` (or `out += a · b` when `accumulate`).
pub fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the row-major buffers whose
    // lengths were checked against the logical shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_chunk(rows: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    rows.div_ceil(threads).max(64)
}

/// `x[m,k] · w[k,n]`. Parallel mode splits the rows of `x`; each output row
/// is still produced by the same arithmetic, so results agree bit-for-bit.
pub fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize, mode: ExecMode) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    match mode {
        ExecMode::Parallel if m > 128 && n > 0 => {
            let chunk = row_chunk(m);
            out.par_chunks_mut(chunk * n)
                .zip(x.par_chunks(chunk * k))
                .for_each(|(o, xs)| {
                    let rows = xs.len() / k.max(1);
                    gemm(Mat::new(xs, rows, k), Mat::new(w, k, n), o, false);
                });
        }
        _ => gemm(Mat::new(x, m, k), Mat::new(w, k, n), &mut out, false),
    }
    out
}

/// `xᵀ[k,m] · g[m,n]`, the weight gradient of [`matmul`]. In parallel mode the
/// reduction over `m` is split into per-thread partial sums, which changes the
/// summation order with the thread count.
pub fn matmul_tn(x: &[f64], g: &[f64], m: usize, k: usize, n: usize, mode: ExecMode) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    match mode {
        ExecMode::Parallel if m > 128 && k > 0 && n > 0 => {
            let chunk = row_chunk(m);
            let partials: Vec<Vec<f64>> = x
                .par_chunks(chunk * k)
                .zip(g.par_chunks(chunk * n))
                .map(|(xs, gs)| {
                    let rows = xs.len() / k;
                    let mut p = vec![0.0; k * n];
                    gemm(Mat::new(xs, rows, k).t(), Mat::new(gs, rows, n), &mut p, false);
                    p
                })
                .collect();
            for p in partials {
                for (o, v) in out.iter_mut().zip(p) {
                    *o += v;
                }
            }
        }
        _ => gemm(Mat::new(x, m, k).t(), Mat::new(g, m, n), &mut out, false),
    }
    out
}

/// `g[m,n] · wᵀ[n,k]`, the input gradient of [`matmul`].
pub fn matmul_nt(g: &[f64], w: &[f64], m: usize, k: usize, n: usize, mode: ExecMode) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    match mode {
        ExecMode::Parallel if m > 128 && k > 0 => {
            let chunk = row_chunk(m);
            out.par_chunks_mut(chunk * k)
                .zip(g.par_chunks(chunk * n))
                .for_each(|(o, gs)| {
                    let rows = o.len() / k;
                    gemm(Mat::new(gs, rows, n), Mat::new(w, k, n).t(), o, false);
                });
        }
        _ => gemm(Mat::new(g, m, n), Mat::new(w, k, n).t(), &mut out, false),
    }
    out
}

/// Sums over a clipped rectangular window around every pixel of an `h×w`
/// grid. The window at `(i, j)` spans rows `i-up ..= i+down` and columns
/// `j-left ..= j+right`, intersected with the grid.
pub fn box_sum(
    src: &[f64],
    h: usize,
    w: usize,
    (up, down): (usize, usize),
    (left, right): (usize, usize),
) -> Vec<f64> {
    // Integral image with a zero row/column in front.
    let stride = w + 1;
    let mut integral = vec![0.0; (h + 1) * stride];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += src[i * w + j];
            integral[(i + 1) * stride + j + 1] = integral[i * stride + j + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let r0 = i.saturating_sub(up);
        let r1 = (i + down + 1).min(h);
        for j in 0..w {
            let c0 = j.saturating_sub(left);
            let c1 = (j + right + 1).min(w);
            out[i * w + j] = integral[r1 * stride + c1] - integral[r0 * stride + c1]
                - integral[r1 * stride + c0]
                + integral[r0 * stride + c0];
        }
    }
    out
}
