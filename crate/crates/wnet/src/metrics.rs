//! Evaluation metrics: PSNR, Gaussian-windowed SSIM, and binary-map IoU.
//! All accumulation runs in f64 regardless of the tensor element type.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian sigma of the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean squared error in f64 over every element.
pub fn mse<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{} vs {}", a.shape(), b.shape())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB: `10*log10(peak^2 / mse)`. Identical
/// inputs return `f64::INFINITY` as the documented sentinel.
pub fn psnr<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Valid-mode separable Gaussian filter of one H x W plane.
fn gauss_filter(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_window();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1=0.01, K2=0.03, dynamic range 1.0, averaged over valid windows, then
/// over channels and batch. Errors if the image is smaller than the window.
pub fn ssim<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::shape("ssim", format!("{} vs {}", s, b.shape())));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s.h, s.w),
        ));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let hw = s.hw();
    let mut channel_means = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * hw;
            let xa: Vec<f64> = a.data()[base..base + hw].iter().map(|v| v.to_f64()).collect();
            let xb: Vec<f64> = b.data()[base..base + hw].iter().map(|v| v.to_f64()).collect();
            let sq_a: Vec<f64> = xa.iter().map(|v| v * v).collect();
            let sq_b: Vec<f64> = xb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
            let mu_a = gauss_filter(&xa, s.h, s.w);
            let mu_b = gauss_filter(&xb, s.h, s.w);
            let e_aa = gauss_filter(&sq_a, s.h, s.w);
            let e_bb = gauss_filter(&sq_b, s.h, s.w);
            let e_ab = gauss_filter(&ab, s.h, s.w);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
            }
            channel_means += acc / mu_a.len() as f64;
        }
    }
    Ok(channel_means / (s.n * s.c) as f64)
}

/// Intersection-over-union of thresholded predictions against a binary
/// ground truth, averaged over the batch. Multi-channel predictions are
/// channel-averaged before thresholding; two empty maps count as IoU 1.
pub fn iou<E: Scalar>(pred: &Tensor<E>, gt: &Tensor<E>, threshold: f64) -> Result<f64> {
    let p = pred.shape();
    let g = gt.shape();
    if g.c != 1 || p.n != g.n || p.h != g.h || p.w != g.w {
        return Err(Error::shape(
            "iou",
            format!("prediction {p} needs a (N,1,H,W) ground truth, got {g}"),
        ));
    }
    let hw = p.hw();
    let mut total = 0.0;
    for n in 0..p.n {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..hw {
            let mut mean = 0.0;
            for c in 0..p.c {
                mean += pred.data()[(n * p.c + c) * hw + i].to_f64();
            }
            let yes = mean / p.c as f64 > threshold;
            let truth = gt.data()[n * hw + i].to_f64() > 0.5;
            if yes && truth {
                inter += 1;
            }
            if yes || truth {
                union += 1;
            }
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / p.n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, uniform_tensor};
    use crate::tensor::Shape;

    #[test]
    fn psnr_sentinel_and_uniform_offset() {
        let a = uniform_tensor::<f64, _>(&mut seeded_rng(30), Shape::new(1, 3, 8, 8), 0.4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "{db}");
        let wrong = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        assert!(psnr(&a, &wrong, 1.0).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pair() {
        let a = uniform_tensor::<f64, _>(&mut seeded_rng(31), Shape::new(2, 3, 6, 6), 0.5);
        let b = uniform_tensor::<f64, _>(&mut seeded_rng(32), Shape::new(2, 3, 6, 6), 0.5);
        let m: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.data().len() as f64;
        let want = 10.0 * (1.0 / m).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn ssim_self_is_exactly_one_and_symmetric() {
        let a = uniform_tensor::<f64, _>(&mut seeded_rng(33), Shape::new(1, 3, 16, 16), 0.5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = uniform_tensor::<f64, _>(&mut seeded_rng(34), Shape::new(1, 3, 16, 16), 0.5);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 16));
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_window_is_normalized() {
        let w = gaussian_window();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(w[5] > w[0]);
    }

    #[test]
    fn iou_counts_overlap_correctly() {
        // pred marks the left half, gt the top half: overlap is a quarter,
        // union three quarters.
        let pred = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, _, _, w| if w < 2 { 1.0f64 } else { 0.0 });
        let gt = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, _| if h < 2 { 1.0f64 } else { 0.0 });
        let got = iou(&pred, &gt, 0.5).unwrap();
        assert!((got - (4.0 / 12.0)).abs() < 1e-12);
        let empty = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let zero_pred = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        assert_eq!(iou(&zero_pred, &empty, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&pred, &empty, 0.5).unwrap(), 0.0);
    }
}
