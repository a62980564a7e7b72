//! 2-D convolution kernels: forward, input gradient, weight gradient.
//!
//! Strategy: im2col over column chunks feeding GEMM. The patch matrix for a
//! chunk is `(cin*k*k) x chunk_width`; the weight tensor multiplies it in one
//! `matrixmultiply` call per chunk. Gradients reuse the same machinery:
//! `d_input` is computed by multiplying the transposed weights against the
//! output gradient and scatter-adding the resulting columns back (col2im),
//! `d_weight` by multiplying the output gradient against the transposed patch
//! matrix. All three run the bulk of their FLOPs inside GEMM.
//!
//! Depthwise convolution has tiny channel counts in this model, so it uses
//! plain direct loops.

use crate::tensor::Scalar;

use super::COL_CHUNK;

/// Dimensions of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }
    /// Rows of the patch matrix: one per (cin, ky, kx).
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Fill `cols` (patch x width, row-major) with the im2col unpacking of input
/// sample `x` for output columns `[col0, col0 + width)`.
fn im2col_chunk<E: Scalar>(x: &[E], d: &ConvDims, col0: usize, width: usize, cols: &mut [E]) {
    let (out_w, k, pad, stride) = (d.out_w(), d.k, d.pad, d.stride);
    let hw = d.h * d.w;
    for r in 0..d.patch() {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let row = &mut cols[r * width..(r + 1) * width];
        let plane = &x[ci * hw..(ci + 1) * hw];
        // Walk the output rows that intersect this column chunk.
        let mut col = col0;
        while col < col0 + width {
            let oy = col / out_w;
            let c0 = col - oy * out_w; // first output-x in this row
            let c1 = (col0 + width - oy * out_w).min(out_w); // one past last
            let seg = &mut row[col - col0..col - col0 + (c1 - c0)];
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= d.h as isize {
                seg.fill(E::ZERO);
            } else if stride == 1 {
                // ix = ox + kx - pad; valid where 0 <= ix < w.
                let off = kx as isize - pad as isize;
                let lo = (-off).max(c0 as isize) as usize;
                let hi = ((d.w as isize - off).min(c1 as isize)).max(lo as isize) as usize;
                let (lo, hi) = (lo.min(c1), hi.min(c1));
                seg[..lo - c0].fill(E::ZERO);
                if hi > lo {
                    let src = iy as usize * d.w + (lo as isize + off) as usize;
                    seg[lo - c0..hi - c0].copy_from_slice(&plane[src..src + (hi - lo)]);
                }
                seg[hi - c0..].fill(E::ZERO);
            } else {
                for (i, ox) in (c0..c1).enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    seg[i] = if ix >= 0 && ix < d.w as isize {
                        plane[iy as usize * d.w + ix as usize]
                    } else {
                        E::ZERO
                    };
                }
            }
            col += c1 - c0;
        }
    }
}

/// Scatter-add `cols` (patch x width) back into input-gradient sample `dx`,
/// inverting the im2col index map for columns `[col0, col0 + width)`.
fn col2im_add_chunk<E: Scalar>(cols: &[E], d: &ConvDims, col0: usize, width: usize, dx: &mut [E]) {
    let (out_w, k, pad, stride) = (d.out_w(), d.k, d.pad, d.stride);
    let hw = d.h * d.w;
    for r in 0..d.patch() {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let row = &cols[r * width..(r + 1) * width];
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        let mut col = col0;
        while col < col0 + width {
            let oy = col / out_w;
            let c0 = col - oy * out_w;
            let c1 = (col0 + width - oy * out_w).min(out_w);
            let seg = &row[col - col0..col - col0 + (c1 - c0)];
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy >= 0 && iy < d.h as isize {
                if stride == 1 {
                    let off = kx as isize - pad as isize;
                    let lo = (-off).max(c0 as isize) as usize;
                    let hi = ((d.w as isize - off).min(c1 as isize)).max(lo as isize) as usize;
                    let (lo, hi) = (lo.min(c1), hi.min(c1));
                    if hi > lo {
                        let dst = iy as usize * d.w + (lo as isize + off) as usize;
                        let dseg = &mut plane[dst..dst + (hi - lo)];
                        let sseg = &seg[lo - c0..hi - c0];
                        for (a, b) in dseg.iter_mut().zip(sseg) {
                            *a += *b;
                        }
                    }
                } else {
                    for (i, ox) in (c0..c1).enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += seg[i];
                        }
                    }
                }
            }
            col += c1 - c0;
        }
    }
}

/// Forward conv for one sample and one column chunk: GEMM weights x patches.
///
/// `y_sample` is the `cout x out_hw` output matrix of the sample (row stride
/// `out_hw`); only columns `[col0, col0 + width)` are written.
fn fwd_chunk<E: Scalar>(
    x_sample: &[E],
    weight: &[E],
    d: &ConvDims,
    col0: usize,
    width: usize,
    cols: &mut [E],
    y_sample: *mut E,
) {
    im2col_chunk(x_sample, d, col0, width, &mut cols[..d.patch() * width]);
    let out_hw = d.out_hw();
    // SAFETY: the caller guarantees y_sample points at a cout x out_hw buffer
    // and that no other writer touches columns [col0, col0 + width).
    unsafe {
        E::gemm(
            d.cout,
            d.patch(),
            width,
            E::ONE,
            weight.as_ptr(),
            d.patch() as isize,
            1,
            cols.as_ptr(),
            width as isize,
            1,
            E::ZERO,
            y_sample.add(col0),
            out_hw as isize,
            1,
        );
    }
}

fn chunks_of(total: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total.div_ceil(COL_CHUNK)).map(move |i| {
        let col0 = i * COL_CHUNK;
        (col0, COL_CHUNK.min(total - col0))
    })
}

/// y = conv2d(x, weight) + bias. `y` must have `n * cout * out_hw` elements.
pub fn conv2d_fwd<E: Scalar>(x: &[E], weight: &[E], bias: Option<&[E]>, d: &ConvDims, y: &mut [E]) {
    #[cfg(feature = "parallel")]
    {
        par::conv2d_fwd(x, weight, d, y);
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::conv2d_fwd(x, weight, d, y);
    }
    if let Some(b) = bias {
        add_bias(b, d, y);
    }
}

/// dx += conv2d input gradient.
pub fn conv2d_bwd_input<E: Scalar>(dy: &[E], weight: &[E], d: &ConvDims, dx: &mut [E]) {
    #[cfg(feature = "parallel")]
    {
        par::conv2d_bwd_input(dy, weight, d, dx);
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::conv2d_bwd_input(dy, weight, d, dx);
    }
}

/// dw += conv2d weight gradient; db += per-channel sums of dy when present.
pub fn conv2d_bwd_weight<E: Scalar>(
    x: &[E],
    dy: &[E],
    d: &ConvDims,
    dw: &mut [E],
    db: Option<&mut [E]>,
) {
    #[cfg(feature = "parallel")]
    {
        par::conv2d_bwd_weight(x, dy, d, dw);
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::conv2d_bwd_weight(x, dy, d, dw);
    }
    if let Some(db) = db {
        bias_grad(dy, d, db);
    }
}

fn add_bias<E: Scalar>(bias: &[E], d: &ConvDims, y: &mut [E]) {
    let out_hw = d.out_hw();
    for sample in y.chunks_mut(d.cout * out_hw) {
        for (co, row) in sample.chunks_mut(out_hw).enumerate() {
            let b = bias[co];
            for v in row {
                *v += b;
            }
        }
    }
}

fn bias_grad<E: Scalar>(dy: &[E], d: &ConvDims, db: &mut [E]) {
    let out_hw = d.out_hw();
    for sample in dy.chunks(d.cout * out_hw) {
        for (co, row) in sample.chunks(out_hw).enumerate() {
            let mut acc = 0.0f64;
            for v in row {
                acc += v.to_f64();
            }
            db[co] += E::from_f64(acc);
        }
    }
}

/// Sequential reference path. Also the building block the parallel path
/// reuses for per-chunk work.
pub mod seq {
    use super::*;

    pub fn conv2d_fwd<E: Scalar>(x: &[E], weight: &[E], d: &ConvDims, y: &mut [E]) {
        let out_hw = d.out_hw();
        let chw = d.cin * d.h * d.w;
        let mut cols = vec![E::ZERO; d.patch() * COL_CHUNK.min(out_hw.max(1))];
        for n in 0..d.n {
            let x_sample = &x[n * chw..(n + 1) * chw];
            let y_sample = y[n * d.cout * out_hw..].as_mut_ptr();
            for (col0, width) in chunks_of(out_hw) {
                fwd_chunk(x_sample, weight, d, col0, width, &mut cols, y_sample);
            }
        }
    }

    pub fn conv2d_bwd_input<E: Scalar>(dy: &[E], weight: &[E], d: &ConvDims, dx: &mut [E]) {
        let chw = d.cin * d.h * d.w;
        for (n, dx_sample) in dx.chunks_mut(chw).enumerate() {
            bwd_input_sample(&dy[n * d.cout * d.out_hw()..], weight, d, dx_sample);
        }
    }

    pub(super) fn bwd_input_sample<E: Scalar>(
        dy_sample: &[E],
        weight: &[E],
        d: &ConvDims,
        dx_sample: &mut [E],
    ) {
        let out_hw = d.out_hw();
        let patch = d.patch();
        let mut cols = vec![E::ZERO; patch * COL_CHUNK.min(out_hw.max(1))];
        for (col0, width) in chunks_of(out_hw) {
            // dcols = W^T (patch x cout) * dy chunk (cout x width)
            unsafe {
                E::gemm(
                    patch,
                    d.cout,
                    width,
                    E::ONE,
                    weight.as_ptr(),
                    1,
                    patch as isize,
                    dy_sample.as_ptr().add(col0),
                    out_hw as isize,
                    1,
                    E::ZERO,
                    cols.as_mut_ptr(),
                    width as isize,
                    1,
                );
            }
            col2im_add_chunk(&cols, d, col0, width, dx_sample);
        }
    }

    pub fn conv2d_bwd_weight<E: Scalar>(x: &[E], dy: &[E], d: &ConvDims, dw: &mut [E]) {
        let chw = d.cin * d.h * d.w;
        let out_hw = d.out_hw();
        for n in 0..d.n {
            bwd_weight_sample(&x[n * chw..(n + 1) * chw], &dy[n * d.cout * out_hw..], d, dw);
        }
    }

    pub(super) fn bwd_weight_sample<E: Scalar>(
        x_sample: &[E],
        dy_sample: &[E],
        d: &ConvDims,
        dw: &mut [E],
    ) {
        let out_hw = d.out_hw();
        let patch = d.patch();
        let mut cols = vec![E::ZERO; patch * COL_CHUNK.min(out_hw.max(1))];
        for (col0, width) in chunks_of(out_hw) {
            im2col_chunk(x_sample, d, col0, width, &mut cols[..patch * width]);
            // dw (cout x patch) += dy chunk (cout x width) * cols^T (width x patch)
            unsafe {
                E::gemm(
                    d.cout,
                    width,
                    patch,
                    E::ONE,
                    dy_sample.as_ptr().add(col0),
                    out_hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    width as isize,
                    E::ONE,
                    dw.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
        }
    }
}

/// Rayon twins of the hot paths. Work is split so that no two tasks write the
/// same output element and every element keeps its sequential summation
/// order, which makes the results bitwise identical to [`seq`].
#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    use super::*;

    #[derive(Copy, Clone)]
    struct SendMutPtr<E>(*mut E);
    // SAFETY: tasks address pairwise-disjoint regions through the pointer.
    unsafe impl<E> Send for SendMutPtr<E> {}
    unsafe impl<E> Sync for SendMutPtr<E> {}

    pub fn conv2d_fwd<E: Scalar>(x: &[E], weight: &[E], d: &ConvDims, y: &mut [E]) {
        let out_hw = d.out_hw();
        let chw = d.cin * d.h * d.w;
        let n_chunks = out_hw.div_ceil(COL_CHUNK).max(1);
        let y_ptr = SendMutPtr(y.as_mut_ptr());
        (0..d.n * n_chunks).into_par_iter().for_each(|job| {
            let (n, chunk) = (job / n_chunks, job % n_chunks);
            let col0 = chunk * COL_CHUNK;
            let width = COL_CHUNK.min(out_hw - col0);
            let x_sample = &x[n * chw..(n + 1) * chw];
            let mut cols = vec![E::ZERO; d.patch() * width];
            // SAFETY: job (n, chunk) writes only columns [col0, col0+width)
            // of sample n; jobs are pairwise disjoint.
            let y_sample = unsafe { y_ptr.0.add(n * d.cout * out_hw) };
            fwd_chunk(x_sample, weight, d, col0, width, &mut cols, y_sample);
        });
    }

    pub fn conv2d_bwd_input<E: Scalar>(dy: &[E], weight: &[E], d: &ConvDims, dx: &mut [E]) {
        let chw = d.cin * d.h * d.w;
        let out_hw = d.out_hw();
        // col2im scatters overlapping windows, so parallelism is per sample:
        // each task owns one dx slice outright.
        dx.par_chunks_mut(chw).enumerate().for_each(|(n, dx_sample)| {
            seq::bwd_input_sample(&dy[n * d.cout * out_hw..], weight, d, dx_sample);
        });
    }

    pub fn conv2d_bwd_weight<E: Scalar>(x: &[E], dy: &[E], d: &ConvDims, dw: &mut [E]) {
        let chw = d.cin * d.h * d.w;
        let out_hw = d.out_hw();
        // Per-sample partial gradients, reduced in index order so the sum
        // matches the sequential accumulation exactly.
        let partials: Vec<Vec<E>> = (0..d.n)
            .into_par_iter()
            .map(|n| {
                let mut part = vec![E::ZERO; dw.len()];
                seq::bwd_weight_sample(
                    &x[n * chw..(n + 1) * chw],
                    &dy[n * d.cout * out_hw..],
                    d,
                    &mut part,
                );
                part
            })
            .collect();
        for part in partials {
            for (a, b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
}

/// Depthwise dims: channel count plus spatial geometry, kernel is `c x 1 x k x k`.
#[derive(Clone, Copy, Debug)]
pub struct DepthwiseDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

/// y = depthwise_conv2d(x, weight), stride 1, one filter per channel.
pub fn depthwise_fwd<E: Scalar>(x: &[E], weight: &[E], d: &DepthwiseDims, y: &mut [E]) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    for n in 0..d.n {
        for c in 0..d.c {
            let plane = &x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
            let out = &mut y[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
            let ker = &weight[c * kk..(c + 1) * kk];
            for oy in 0..d.h {
                for ox in 0..d.w {
                    let mut acc = E::ZERO;
                    for ky in 0..d.k {
                        let iy = (oy + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                acc += ker[ky * d.k + kx] * plane[iy as usize * d.w + ix as usize];
                            }
                        }
                    }
                    out[oy * d.w + ox] = acc;
                }
            }
        }
    }
}

/// dx += depthwise input gradient; dw += depthwise weight gradient.
pub fn depthwise_bwd<E: Scalar>(
    x: &[E],
    dy: &[E],
    weight: &[E],
    d: &DepthwiseDims,
    dx: &mut [E],
    dw: &mut [E],
) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * hw;
            let plane = &x[base..base + hw];
            let dplane = &dy[base..base + hw];
            let ker = &weight[c * kk..(c + 1) * kk];
            let dker = &mut dw[c * kk..(c + 1) * kk];
            for oy in 0..d.h {
                for ox in 0..d.w {
                    let g = dplane[oy * d.w + ox];
                    for ky in 0..d.k {
                        let iy = (oy + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                let src = iy as usize * d.w + ix as usize;
                                dx[base + src] += ker[ky * d.k + kx] * g;
                                dker[ky * d.k + kx] += plane[src] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}
