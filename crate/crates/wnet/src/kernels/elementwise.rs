//! Pointwise and broadcast kernels with their gradient counterparts.
//!
//! Gradient functions accumulate (`+=`) into their output slices; the graph
//! initializes gradient buffers to zero and may route several contributions
//! into the same tensor.

use crate::tensor::Scalar;

pub fn relu_fwd<E: Scalar>(x: &[E], y: &mut [E]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = if x > E::ZERO { x } else { E::ZERO };
    }
}

/// dx += dy where x > 0. The slope at exactly 0 is taken as 0.
pub fn relu_bwd<E: Scalar>(x: &[E], dy: &[E], dx: &mut [E]) {
    for ((dx, &x), &dy) in dx.iter_mut().zip(x).zip(dy) {
        if x > E::ZERO {
            *dx += dy;
        }
    }
}

pub fn sigmoid_fwd<E: Scalar>(x: &[E], y: &mut [E]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = sigmoid_one(x);
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_one<E: Scalar>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// dx += dy * y * (1 - y), using the saved output y.
pub fn sigmoid_bwd<E: Scalar>(y: &[E], dy: &[E], dx: &mut [E]) {
    for ((dx, &y), &dy) in dx.iter_mut().zip(y).zip(dy) {
        *dx += dy * y * (E::ONE - y);
    }
}

/// y = a*x + b with scalar constants.
pub fn affine_fwd<E: Scalar>(x: &[E], a: E, b: E, y: &mut [E]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = a * x + b;
    }
}

pub fn affine_bwd<E: Scalar>(a: E, dy: &[E], dx: &mut [E]) {
    for (dx, &dy) in dx.iter_mut().zip(dy) {
        *dx += a * dy;
    }
}

pub fn mul_fwd<E: Scalar>(a: &[E], b: &[E], y: &mut [E]) {
    for ((y, &a), &b) in y.iter_mut().zip(a).zip(b) {
        *y = a * b;
    }
}

pub fn sub_fwd<E: Scalar>(a: &[E], b: &[E], y: &mut [E]) {
    for ((y, &a), &b) in y.iter_mut().zip(a).zip(b) {
        *y = a - b;
    }
}

/// y[n,c,h,w] = x[n,c,h,w] * g[n,c,0,0] — per-channel gate.
pub fn scale_channels_fwd<E: Scalar>(x: &[E], g: &[E], hw: usize, y: &mut [E]) {
    for (nc, (yp, xp)) in y.chunks_mut(hw).zip(x.chunks(hw)).enumerate() {
        let gv = g[nc];
        for (y, &x) in yp.iter_mut().zip(xp) {
            *y = x * gv;
        }
    }
}

/// dx += dy * g (broadcast); dg[n,c] += sum_hw dy * x.
pub fn scale_channels_bwd<E: Scalar>(
    x: &[E],
    g: &[E],
    dy: &[E],
    hw: usize,
    dx: &mut [E],
    dg: &mut [E],
) {
    for (nc, ((dxp, xp), dyp)) in dx.chunks_mut(hw).zip(x.chunks(hw)).zip(dy.chunks(hw)).enumerate()
    {
        let gv = g[nc];
        let mut acc = 0.0f64;
        for ((dx, &x), &dy) in dxp.iter_mut().zip(xp).zip(dyp) {
            *dx += dy * gv;
            acc += (dy * x).to_f64();
        }
        dg[nc] += E::from_f64(acc);
    }
}

/// y[n,c,h,w] = x[n,c,h,w] * g[n,0,h,w] — per-pixel gate shared by channels.
pub fn scale_spatial_fwd<E: Scalar>(x: &[E], g: &[E], c: usize, hw: usize, y: &mut [E]) {
    for (n, (ys, xs)) in y.chunks_mut(c * hw).zip(x.chunks(c * hw)).enumerate() {
        let gs = &g[n * hw..(n + 1) * hw];
        for (yp, xp) in ys.chunks_mut(hw).zip(xs.chunks(hw)) {
            for ((y, &x), &gv) in yp.iter_mut().zip(xp).zip(gs) {
                *y = x * gv;
            }
        }
    }
}

/// dx += dy * g; dg[n,0,h,w] += sum_c dy * x.
pub fn scale_spatial_bwd<E: Scalar>(
    x: &[E],
    g: &[E],
    dy: &[E],
    c: usize,
    hw: usize,
    dx: &mut [E],
    dg: &mut [E],
) {
    let chw = c * hw;
    for n in 0..x.len() / chw {
        let gs = &g[n * hw..(n + 1) * hw];
        let dgs = &mut dg[n * hw..(n + 1) * hw];
        for ch in 0..c {
            let base = n * chw + ch * hw;
            for i in 0..hw {
                dx[base + i] += dy[base + i] * gs[i];
                dgs[i] += dy[base + i] * x[base + i];
            }
        }
    }
}

/// y = t*a + (1-t)*b where t is an (N,1,H,W) gate broadcast over channels.
pub fn lerp_spatial_fwd<E: Scalar>(a: &[E], b: &[E], t: &[E], c: usize, hw: usize, y: &mut [E]) {
    let chw = c * hw;
    for n in 0..y.len() / chw {
        let ts = &t[n * hw..(n + 1) * hw];
        for ch in 0..c {
            let base = n * chw + ch * hw;
            for i in 0..hw {
                let tv = ts[i];
                y[base + i] = tv * a[base + i] + (E::ONE - tv) * b[base + i];
            }
        }
    }
}

/// da += dy*t; db += dy*(1-t); dt[n,0,h,w] += sum_c dy*(a-b).
#[allow(clippy::too_many_arguments)]
pub fn lerp_spatial_bwd<E: Scalar>(
    a: &[E],
    b: &[E],
    t: &[E],
    dy: &[E],
    c: usize,
    hw: usize,
    da: &mut [E],
    db: &mut [E],
    dt: &mut [E],
) {
    let chw = c * hw;
    for n in 0..a.len() / chw {
        let ts = &t[n * hw..(n + 1) * hw];
        let dts = &mut dt[n * hw..(n + 1) * hw];
        for ch in 0..c {
            let base = n * chw + ch * hw;
            for i in 0..hw {
                let tv = ts[i];
                let g = dy[base + i];
                da[base + i] += g * tv;
                db[base + i] += g * (E::ONE - tv);
                dts[i] += g * (a[base + i] - b[base + i]);
            }
        }
    }
}
