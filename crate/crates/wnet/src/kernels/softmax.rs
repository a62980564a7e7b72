//! Softmax over the last (W) axis, numerically stabilized by the row max.

use crate::tensor::Scalar;

/// y[.., w] = exp(x - max) / sum(exp(x - max)) per row of length `w`.
pub fn softmax_last_fwd<E: Scalar>(x: &[E], w: usize, y: &mut [E]) {
    for (yr, xr) in y.chunks_mut(w).zip(x.chunks(w)) {
        let mut m = xr[0];
        for &v in &xr[1..] {
            m = m.maximum(v);
        }
        let mut sum = E::ZERO;
        for (y, &x) in yr.iter_mut().zip(xr) {
            let e = (x - m).exp();
            *y = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}

/// dx += y * (dy - <dy, y>) per row, using the saved output y.
pub fn softmax_last_bwd<E: Scalar>(y: &[E], dy: &[E], w: usize, dx: &mut [E]) {
    for ((dxr, yr), dyr) in dx.chunks_mut(w).zip(y.chunks(w)).zip(dy.chunks(w)) {
        let mut dot = E::ZERO;
        for (&y, &dy) in yr.iter().zip(dyr) {
            dot += y * dy;
        }
        for ((dx, &y), &dy) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dx += y * (dy - dot);
        }
    }
}
