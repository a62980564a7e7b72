//! Pixel shuffle / unshuffle: space-to-depth and back.
//!
//! `pixel_shuffle` with factor r maps `(N, C*r^2, H, W)` to `(N, C, H*r, W*r)`
//! by `out[n, c, h*r + i, w*r + j] = in[n, c*r^2 + i*r + j, h, w]`.
//! `pixel_unshuffle` is its exact inverse permutation; both are pure data
//! movement, so each is the other's gradient.

use crate::tensor::Scalar;

pub fn pixel_shuffle_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    c_out: usize,
    h: usize,
    w: usize,
    r: usize,
    y: &mut [E],
) {
    // x is (n, c_out*r^2, h, w); y is (n, c_out, h*r, w*r)
    let (oh, ow) = (h * r, w * r);
    for b in 0..n {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let cin = c * r * r + i * r + j;
                    let src_plane = &x[((b * c_out * r * r) + cin) * h * w..][..h * w];
                    for hh in 0..h {
                        let dst_row = ((b * c_out + c) * oh + hh * r + i) * ow;
                        let src_row = hh * w;
                        for ww in 0..w {
                            y[dst_row + ww * r + j] = src_plane[src_row + ww];
                        }
                    }
                }
            }
        }
    }
}

pub fn pixel_unshuffle_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    r: usize,
    y: &mut [E],
) {
    // x is (n, c_in, h, w) with h, w divisible by r; y is (n, c_in*r^2, h/r, w/r)
    let (oh, ow) = (h / r, w / r);
    for b in 0..n {
        for c in 0..c_in {
            let src_plane = &x[(b * c_in + c) * h * w..][..h * w];
            for i in 0..r {
                for j in 0..r {
                    let cout = c * r * r + i * r + j;
                    for hh in 0..oh {
                        let dst_row = ((b * c_in * r * r) + cout) * oh * ow + hh * ow;
                        let src_row = (hh * r + i) * w;
                        for ww in 0..ow {
                            y[dst_row + ww] = src_plane[src_row + ww * r + j];
                        }
                    }
                }
            }
        }
    }
}
