//! Batch normalization over (N, H, W) per channel.
//!
//! Forward saves the per-channel mean and inverse standard deviation so the
//! backward pass can rebuild the normalized activations without storing a
//! full-size tensor. Statistics accumulate in f64 for stability; everything
//! else stays in the working precision.

use crate::tensor::Scalar;

/// Per-channel mean and variance over all samples' planes.
/// Layout: x is (n, c, hw); outputs have length c.
pub fn batch_stats<E: Scalar>(x: &[E], n: usize, c: usize, hw: usize, mean: &mut [E], var: &mut [E]) {
    let count = (n * hw) as f64;
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for v in plane {
                sum += v.to_f64();
            }
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for v in plane {
                let d = v.to_f64() - m;
                sq += d * d;
            }
        }
        mean[ch] = E::from_f64(m);
        var[ch] = E::from_f64(sq / count); // biased, as used for normalization
    }
}

/// y = gamma * (x - mean) * inv_std + beta, all per channel.
pub fn normalize_fwd<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
    y: &mut [E],
) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in 0..hw {
                y[base + i] = g * ((x[base + i] - m) * s) + bt;
            }
        }
    }
}

/// Training-mode backward through the batch statistics.
///
/// With m = N*HW elements per channel and xh the normalized activations:
///   dbeta  = sum dy
///   dgamma = sum dy * xh
///   dx     = gamma * inv_std / m * (m * dy - dbeta - xh * dgamma)
#[allow(clippy::too_many_arguments)]
pub fn normalize_bwd_train<E: Scalar>(
    x: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let m = (n * hw) as f64;
    for ch in 0..c {
        let (mu, s) = (mean[ch], inv_std[ch]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let xh = ((x[base + i] - mu) * s).to_f64();
                let g = dy[base + i].to_f64();
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        dbeta[ch] += E::from_f64(sum_dy);
        dgamma[ch] += E::from_f64(sum_dy_xh);
        let scale = gamma[ch].to_f64() * s.to_f64() / m;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let xh = ((x[base + i] - mu) * s).to_f64();
                let g = dy[base + i].to_f64();
                dx[base + i] += E::from_f64(scale * (m * g - sum_dy - xh * sum_dy_xh));
            }
        }
    }
}

/// Inference-mode backward: the statistics are constants, so the op is a
/// per-channel affine map.
#[allow(clippy::too_many_arguments)]
pub fn normalize_bwd_eval<E: Scalar>(
    x: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    for ch in 0..c {
        let (mu, s) = (mean[ch], inv_std[ch]);
        let g = gamma[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let dyv = dy[base + i];
                sum_dy += dyv.to_f64();
                sum_dy_xh += (dyv * ((x[base + i] - mu) * s)).to_f64();
                dx[base + i] += dyv * g * s;
            }
        }
        dbeta[ch] += E::from_f64(sum_dy);
        dgamma[ch] += E::from_f64(sum_dy_xh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_beta() {
        // constant input: mean = value, variance = 0, normalized = 0,
        // so the output is beta everywhere.
        let x = vec![5.0f64; 8]; // (1, 2, 4)
        let mut mean = vec![0.0; 2];
        let mut var = vec![0.0; 2];
        batch_stats(&x, 1, 2, 4, &mut mean, &mut var);
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(var, vec![0.0, 0.0]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
        let mut y = vec![0.0; 8];
        normalize_fwd(&x, 1, 2, 4, &mean, &inv_std, &[1.0, 1.0], &[0.25, -0.5], &mut y);
        assert!(y[..4].iter().all(|&v| v == 0.25));
        assert!(y[4..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn stats_are_per_channel_over_batch_and_space() {
        // two samples, one channel of 2 values each: data 1,3 | 5,7
        let x = vec![1.0f64, 3.0, 5.0, 7.0];
        let mut mean = vec![0.0];
        let mut var = vec![0.0];
        batch_stats(&x, 2, 1, 2, &mut mean, &mut var);
        assert_eq!(mean[0], 4.0);
        assert_eq!(var[0], 5.0); // ((9+1+1+9)/4)
    }
}
