//! Pooling and channel-reduction kernels.

use crate::tensor::Scalar;

/// 2x2 max pool with stride 2. Writes the chosen input's flat offset (within
/// the whole tensor) into `argmax` for gradient routing; ties pick the lowest
/// flat index, i.e. scan order top-left, top-right, bottom-left, bottom-right.
pub fn maxpool2_fwd<E: Scalar>(
    x: &[E],
    nc: usize,
    h: usize,
    w: usize,
    y: &mut [E],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.reserve(nc * oh * ow);
    for p in 0..nc {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let out = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out[oy * ow + ox] = plane[best];
                argmax.push((p * h * w + best) as u32);
            }
        }
    }
}

/// dx[argmax] += dy — gradients flow only to the selected elements.
pub fn maxpool2_bwd<E: Scalar>(dy: &[E], argmax: &[u32], dx: &mut [E]) {
    for (&dy, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += dy;
    }
}

/// Global average pool: y[n,c] = mean over H*W. Accumulates in f64.
pub fn gap_fwd<E: Scalar>(x: &[E], hw: usize, y: &mut [E]) {
    for (y, plane) in y.iter_mut().zip(x.chunks(hw)) {
        let mut acc = 0.0f64;
        for v in plane {
            acc += v.to_f64();
        }
        *y = E::from_f64(acc / hw as f64);
    }
}

/// dx += dy / (H*W) broadcast back over the plane.
pub fn gap_bwd<E: Scalar>(dy: &[E], hw: usize, dx: &mut [E]) {
    let inv = E::from_f64(1.0 / hw as f64);
    for (&g, plane) in dy.iter().zip(dx.chunks_mut(hw)) {
        let g = g * inv;
        for v in plane {
            *v += g;
        }
    }
}

/// y[n,0,h,w] = mean over channels of x[n,:,h,w].
pub fn channel_mean_fwd<E: Scalar>(x: &[E], c: usize, hw: usize, y: &mut [E]) {
    let inv = E::from_f64(1.0 / c as f64);
    for (n, out) in y.chunks_mut(hw).enumerate() {
        let sample = &x[n * c * hw..(n + 1) * c * hw];
        out.fill(E::ZERO);
        for plane in sample.chunks(hw) {
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
}

pub fn channel_mean_bwd<E: Scalar>(dy: &[E], c: usize, hw: usize, dx: &mut [E]) {
    let inv = E::from_f64(1.0 / c as f64);
    for (n, g) in dy.chunks(hw).enumerate() {
        let sample = &mut dx[n * c * hw..(n + 1) * c * hw];
        for plane in sample.chunks_mut(hw) {
            for (d, &g) in plane.iter_mut().zip(g) {
                *d += g * inv;
            }
        }
    }
}

/// y[n,0,h,w] = max over channels; `argc` records the winning channel
/// (lowest channel index wins ties).
pub fn channel_max_fwd<E: Scalar>(x: &[E], c: usize, hw: usize, y: &mut [E], argc: &mut Vec<u32>) {
    argc.clear();
    argc.resize(y.len(), 0);
    for (n, out) in y.chunks_mut(hw).enumerate() {
        let sample = &x[n * c * hw..(n + 1) * c * hw];
        out.copy_from_slice(&sample[..hw]);
        for (ch, plane) in sample.chunks(hw).enumerate().skip(1) {
            for (i, (o, &v)) in out.iter_mut().zip(plane).enumerate() {
                if v > *o {
                    *o = v;
                    argc[n * hw + i] = ch as u32;
                }
            }
        }
    }
}

pub fn channel_max_bwd<E: Scalar>(dy: &[E], argc: &[u32], c: usize, hw: usize, dx: &mut [E]) {
    let _ = c;
    for (n, g) in dy.chunks(hw).enumerate() {
        for (i, &g) in g.iter().enumerate() {
            let ch = argc[n * hw + i] as usize;
            dx[(n * c + ch) * hw + i] += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ties_take_lowest_flat_index() {
        let x = vec![7.0f32, 7.0, 7.0, 7.0];
        let mut y = vec![0.0f32; 1];
        let mut arg = Vec::new();
        maxpool2_fwd(&x, 1, 2, 2, &mut y, &mut arg);
        assert_eq!(y[0], 7.0);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_gradient_routes_to_winner() {
        let x = vec![1.0f32, 9.0, 3.0, 4.0];
        let mut y = vec![0.0f32; 1];
        let mut arg = Vec::new();
        maxpool2_fwd(&x, 1, 2, 2, &mut y, &mut arg);
        assert_eq!(y[0], 9.0);
        let mut dx = vec![0.0f32; 4];
        maxpool2_bwd(&[2.5], &arg, &mut dx);
        assert_eq!(dx, vec![0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn channel_max_prefers_lower_channel_on_tie() {
        // two channels, both 5.0 at pixel 0; channel 1 wins pixel 1
        let x = vec![5.0f32, 0.0, 5.0, 8.0];
        let mut y = vec![0.0f32; 2];
        let mut arg = Vec::new();
        channel_max_fwd(&x, 2, 2, &mut y, &mut arg);
        assert_eq!(y, vec![5.0, 8.0]);
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    fn gap_is_plane_mean() {
        let x = vec![1.0f32, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let mut y = vec![0.0f32; 2];
        gap_fwd(&x, 4, &mut y);
        assert_eq!(y, vec![2.5, 10.0]);
    }
}
