//! Raw 3D convolution kernels over flat `[C, D, H, W]` buffers.
//!
//! The input is unfolded (im2col) one output depth slab at a time, so every
//! routine reduces to a small blocked matrix product. The
//! summation order is fixed, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

/// Geometry of a strided, zero-padded cross-correlation from a large grid
/// (`input`) to a small grid (`output`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// `(n - 1) s - 2p + k`, or `None` when non-positive.
pub(crate) fn conv_transpose_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (n.checked_sub(1)?) * stride + k;
    full.checked_sub(2 * pad).filter(|&v| v >= 1)
}

impl ConvGeom {
    #[inline]
    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    #[inline]
    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    /// Output positions `o` along an axis for which `o*s + kk - pad` lands in `[0, n_in)`.
    #[inline]
    fn valid(&self, kk: usize, n_in: usize, n_out: usize) -> Range<usize> {
        let s = self.stride;
        // o*s + kk >= pad
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        // o*s + kk - pad <= n_in - 1
        let hi = if n_in + self.pad > kk { ((n_in - 1 + self.pad - kk) / s + 1).min(n_out) } else { 0 };
        lo..hi.max(lo)
    }

    /// Calls `f(in_row_offset, out_row_offset, ow_range, iw_start)` for every
    /// output row with depth in `depths` that the tap (kd, kh, kw) maps into
    /// the input.
    #[inline]
    fn for_rows(
        &self,
        depths: Range<usize>,
        [kd, kh, kw]: [usize; 3],
        mut f: impl FnMut(usize, usize, Range<usize>, usize),
    ) {
        let [di, hi, wi] = self.input;
        let [dout, hout, wout] = self.output;
        let s = self.stride;
        let wr = self.valid(kw, wi, wout);
        if wr.is_empty() {
            return;
        }
        let iw0 = wr.start * s + kw - self.pad;
        let dr = self.valid(kd, di, dout);
        for od in dr.start.max(depths.start)..dr.end.min(depths.end) {
            let id = od * s + kd - self.pad;
            for oh in self.valid(kh, hi, hout) {
                let ih = oh * s + kh - self.pad;
                f((id * hi + ih) * wi, ((od - depths.start) * hout + oh) * wout, wr.clone(), iw0);
            }
        }
    }

    /// Rows of the unfolded input matrix: one per (input channel, tap).
    #[inline]
    fn taps(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    /// Output depth slabs sized so the unfolded matrix stays bounded.
    fn slabs(&self) -> impl Iterator<Item = Range<usize>> {
        let plane = self.output[1] * self.output[2];
        let step = (SLAB_BUDGET / (self.taps() * plane).max(1)).max(1);
        let d = self.output[0];
        (0..d).step_by(step).map(move |a| a..(a + step).min(d))
    }

    fn tap_iter(&self) -> impl Iterator<Item = (usize, [usize; 3])> {
        let k = self.k;
        (0..self.c_in).flat_map(move |ci| {
            (0..k * k * k).map(move |t| (ci, [t / (k * k), (t / k) % k, t % k]))
        })
    }

    /// Unfolds the input under the output slab `depths` into `col`
    /// (`taps × slab voxels`, zero where the tap falls in the padding).
    fn im2col(&self, input: &[f64], depths: Range<usize>, col: &mut [f64]) {
        let iv = self.in_vox();
        let cols = depths.len() * self.output[1] * self.output[2];
        let s = self.stride;
        col.fill(0.0);
        for (r, (ci, tap)) in self.tap_iter().enumerate() {
            let in_c = &input[ci * iv..(ci + 1) * iv];
            let row = &mut col[r * cols..(r + 1) * cols];
            self.for_rows(depths.clone(), tap, |irow, orow, wr, iw0| {
                let dst = &mut row[orow + wr.start..orow + wr.end];
                if s == 1 {
                    dst.copy_from_slice(&in_c[irow + iw0..irow + iw0 + dst.len()]);
                } else {
                    for (j, o) in dst.iter_mut().enumerate() {
                        *o = in_c[irow + iw0 + j * s];
                    }
                }
            });
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters `col` back onto `out`.
    fn col2im(&self, col: &[f64], depths: Range<usize>, out: &mut [f64]) {
        let iv = self.in_vox();
        let cols = depths.len() * self.output[1] * self.output[2];
        let s = self.stride;
        for (r, (ci, tap)) in self.tap_iter().enumerate() {
            let out_c = &mut out[ci * iv..(ci + 1) * iv];
            let row = &col[r * cols..(r + 1) * cols];
            self.for_rows(depths.clone(), tap, |irow, orow, wr, iw0| {
                let src = &row[orow + wr.start..orow + wr.end];
                if s == 1 {
                    for (d, &x) in out_c[irow + iw0..irow + iw0 + src.len()].iter_mut().zip(src) {
                        *d += x;
                    }
                } else {
                    for (j, &x) in src.iter().enumerate() {
                        out_c[irow + iw0 + j * s] += x;
                    }
                }
            });
        }
    }
}

/// Upper bound on the unfolded matrix size, in elements.
const SLAB_BUDGET: usize = 1 << 21;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major and densely packed.
///
/// Blocked 4×4 so each loaded value feeds several multiply-adds.
fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let (m4, n4) = (m - m % 4, n - n % 4);
    for i in (0..m4).step_by(4) {
        let rows: [&[f64]; 4] = core::array::from_fn(|ii| &a[(i + ii) * k..(i + ii + 1) * k]);
        for j in (0..n4).step_by(4) {
            let mut acc = [[0.0f64; 4]; 4];
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                let bv: &[f64; 4] = brow[j..j + 4].try_into().unwrap();
                for (row, ar) in acc.iter_mut().zip(&rows) {
                    let av = ar[p];
                    for (r, &x) in row.iter_mut().zip(bv) {
                        *r += av * x;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                for (cv, &r) in c[(i + ii) * n + j..(i + ii) * n + j + 4].iter_mut().zip(row) {
                    *cv += r;
                }
            }
        }
        for j in n4..n {
            for (ii, ar) in rows.iter().enumerate() {
                c[(i + ii) * n + j] += ar.iter().enumerate().map(|(p, &x)| x * b[p * n + j]).sum::<f64>();
            }
        }
    }
    for i in m4..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += ar.iter().enumerate().map(|(p, &x)| x * b[p * n + j]).sum::<f64>();
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let (m4, n4) = (m - m % 4, n - n % 4);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for i in (0..m4).step_by(4) {
        let ar: [&[f64]; 4] = core::array::from_fn(|ii| &a[(i + ii) * k..(i + ii + 1) * k]);
        for j in (0..n4).step_by(4) {
            let br: [&[f64]; 4] = core::array::from_fn(|jj| &b[(j + jj) * k..(j + jj + 1) * k]);
            let mut acc = [[0.0f64; 4]; 4];
            for p in 0..k {
                let av = [ar[0][p], ar[1][p], ar[2][p], ar[3][p]];
                let bv = [br[0][p], br[1][p], br[2][p], br[3][p]];
                for (row, &x) in acc.iter_mut().zip(&av) {
                    for (r, &y) in row.iter_mut().zip(&bv) {
                        *r += x * y;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                for (cv, &r) in c[(i + ii) * n + j..(i + ii) * n + j + 4].iter_mut().zip(row) {
                    *cv += r;
                }
            }
        }
        for j in n4..n {
            for (ii, x) in ar.iter().enumerate() {
                c[(i + ii) * n + j] += dot(x, &b[j * k..(j + 1) * k]);
            }
        }
    }
    for i in m4..m {
        for j in 0..n {
            c[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

/// Copies the `[c, d, h, w]` channel rows restricted to `depths` into a packed
/// `[c, slab]` matrix.
fn gather_slab(data: &[f64], channels: usize, vox: usize, start: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    for c in 0..channels {
        out.extend_from_slice(&data[c * vox + start..c * vox + start + cols]);
    }
}

/// `out += conv(input, kernel)`; kernel laid out `[c_out, c_in, k, k, k]`.
pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (ov, taps) = (g.out_vox(), g.taps());
    let plane = g.output[1] * g.output[2];
    let (mut col, mut acc) = (Vec::new(), Vec::new());
    for depths in g.slabs() {
        let cols = depths.len() * plane;
        col.resize(taps * cols, 0.0);
        g.im2col(input, depths.clone(), &mut col);
        let start = depths.start * plane;
        gather_slab(out, g.c_out, ov, start, cols, &mut acc);
        gemm_nn(g.c_out, cols, taps, kernel, &col, &mut acc);
        for co in 0..g.c_out {
            out[co * ov + start..co * ov + start + cols].copy_from_slice(&acc[co * cols..(co + 1) * cols]);
        }
    }
}

/// `grad_in += conv^T(grad_out, kernel)`, the data gradient of [`forward`].
pub(crate) fn backward_data(g: &ConvGeom, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    let (ov, taps) = (g.out_vox(), g.taps());
    let plane = g.output[1] * g.output[2];
    let mut kt = vec![0.0; taps * g.c_out];
    for co in 0..g.c_out {
        for r in 0..taps {
            kt[r * g.c_out + co] = kernel[co * taps + r];
        }
    }
    let (mut col, mut go) = (Vec::new(), Vec::new());
    for depths in g.slabs() {
        let cols = depths.len() * plane;
        col.clear();
        col.resize(taps * cols, 0.0);
        gather_slab(grad_out, g.c_out, ov, depths.start * plane, cols, &mut go);
        gemm_nn(taps, cols, g.c_out, &kt, &go, &mut col);
        g.col2im(&col, depths, grad_in);
    }
}

/// `grad_kernel += d(out)/d(kernel)^T grad_out`.
pub(crate) fn backward_kernel(g: &ConvGeom, input: &[f64], grad_out: &[f64], grad_kernel: &mut [f64]) {
    let (ov, taps) = (g.out_vox(), g.taps());
    let plane = g.output[1] * g.output[2];
    let (mut col, mut go) = (Vec::new(), Vec::new());
    for depths in g.slabs() {
        let cols = depths.len() * plane;
        col.resize(taps * cols, 0.0);
        g.im2col(input, depths.clone(), &mut col);
        gather_slab(grad_out, g.c_out, ov, depths.start * plane, cols, &mut go);
        gemm_nt(g.c_out, taps, cols, &go, &col, grad_kernel);
    }
}
