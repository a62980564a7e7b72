//! Nearest-neighbor resampling as a differentiable kernel.
//!
//! Integer factors only. Upsampling replicates each source pixel into an
//! `f x f` block; downsampling keeps the top-left pixel of each block. The
//! backward passes are the transposes: block-sum for up, top-left routing
//! for down.

use crate::tensor::Scalar;

pub fn upsample_nearest_fwd<E: Scalar>(x: &[E], nc: usize, h: usize, w: usize, f: usize, y: &mut [E]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy / f;
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / f];
            }
        }
    }
}

/// dx += block sums of dy.
pub fn upsample_nearest_bwd<E: Scalar>(dy: &[E], nc: usize, h: usize, w: usize, f: usize, dx: &mut [E]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..nc {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                d[sy * w + ox / f] += g[oy * ow + ox];
            }
        }
    }
}

pub fn downsample_nearest_fwd<E: Scalar>(x: &[E], nc: usize, h: usize, w: usize, f: usize, y: &mut [E]) {
    let (oh, ow) = (h / f, w / f);
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[oy * f * w + ox * f];
            }
        }
    }
}

/// dx[top-left of each block] += dy; other positions receive nothing.
pub fn downsample_nearest_bwd<E: Scalar>(dy: &[E], nc: usize, h: usize, w: usize, f: usize, dx: &mut [E]) {
    let (oh, ow) = (h / f, w / f);
    for p in 0..nc {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                d[oy * f * w + ox * f] += g[oy * ow + ox];
            }
        }
    }
}
