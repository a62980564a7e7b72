//! Image resampling on rank-4 tensors.
//!
//! Bicubic uses the Keys cubic kernel with a = -0.5, half-pixel-center
//! coordinate mapping (`src = (dst + 0.5) * in/out - 0.5`), clamped edge
//! sampling, and separable row/column passes accumulated in `f64`. The
//! kernel's four tap weights sum to one for every phase, so constants are
//! reproduced exactly and linear ramps keep their slope away from the
//! clamped border.
//!
//! Nearest-neighbor resizing is integer-factor only: upsampling replicates
//! each pixel into an f x f block, downsampling keeps each block's top-left
//! sample, so binary maps stay binary and up-then-down by the same factor
//! is the identity.

use crate::error::{Error, Result};
use crate::kernels::resize as kernel;
use crate::tensor::{Scalar, Shape, Tensor};

/// Keys cubic kernel, a = -0.5.
fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel taps along one axis: four clamped source indices and
/// their kernel weights.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = (dst as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for (t, offset) in (-1i64..=2).enumerate() {
                let j = (base as i64 + offset).clamp(0, in_len as i64 - 1);
                idx[t] = j as usize;
                w[t] = keys(frac - offset as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Resample every channel plane to `out_h` x `out_w` with bicubic
/// interpolation. Values may overshoot the input range slightly, as cubic
/// kernels do; callers quantizing to bytes clamp at that point.
pub fn bicubic_resize<E: Scalar>(img: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "target dimensions must be positive"));
    }
    let s = img.shape();
    let col_taps = axis_taps(s.w, out_w);
    let row_taps = axis_taps(s.h, out_h);

    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    // One plane of horizontal-pass scratch, reused across channels.
    let mut mid = vec![0f64; s.h * out_w];
    for nc in 0..s.n * s.c {
        let plane = &img.data()[nc * s.hw()..(nc + 1) * s.hw()];
        for y in 0..s.h {
            let row = &plane[y * s.w..(y + 1) * s.w];
            for (x, (idx, w)) in col_taps.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += w[t] * row[idx[t]].to_f64();
                }
                mid[y * out_w + x] = acc;
            }
        }
        let dst = &mut out.data_mut()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (y, (idx, w)) in row_taps.iter().enumerate() {
            for x in 0..out_w {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += w[t] * mid[idx[t] * out_w + x];
                }
                dst[y * out_w + x] = E::from_f64(acc);
            }
        }
    }
    Ok(out)
}

/// Integer-factor nearest upsample (pixel replication).
pub fn nearest_upsample<E: Scalar>(t: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor == 0 {
        return Err(Error::invalid("nearest_resize", "factor must be >= 1"));
    }
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * factor, s.w * factor));
    kernel::upsample_nearest_fwd(t.data(), s.n * s.c, s.h, s.w, factor, out.data_mut());
    Ok(out)
}

/// Integer-factor nearest downsample (top-left sample per block).
pub fn nearest_downsample<E: Scalar>(t: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor == 0 {
        return Err(Error::invalid("nearest_resize", "factor must be >= 1"));
    }
    let s = t.shape();
    for (what, value) in [("height", s.h), ("width", s.w)] {
        if value % factor != 0 {
            return Err(Error::NotDivisible { op: "nearest_resize", what, value, divisor: factor });
        }
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h / factor, s.w / factor));
    kernel::downsample_nearest_fwd(t.data(), s.n * s.c, s.h, s.w, factor, out.data_mut());
    Ok(out)
}
