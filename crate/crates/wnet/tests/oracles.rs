//! The production numeric paths (im2col+GEMM convolution, separable
//! resampling, separable-window SSIM, reshaped-matmul attention) checked
//! against plain textbook loops on many seeded random cases. A reference
//! here never shares machinery with the code under test: every value is
//! computed straight from the definition.

use rand::Rng;

use wnet::graph::Graph;
use wnet::data::resample::bicubic_resize;
use wnet::layers::Mhsa;
use wnet::metrics::ssim;
use wnet::params::{seeded_rng, uniform_tensor, ParamStore, Pass};
use wnet::tensor::{Shape, Tensor};

const CASES: usize = 24;

/// Elementwise comparison with a relative-or-absolute bound.
fn assert_close(got: &Tensor<f64>, want: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(got.shape(), want.shape(), "{what}: shape mismatch");
    for (i, (&g, &w)) in got.data().iter().zip(want.data()).enumerate() {
        let bound = tol * w.abs().max(1.0);
        assert!(
            (g - w).abs() <= bound,
            "{what}: element {i}: got {g}, want {w} (diff {:.3e})",
            (g - w).abs()
        );
    }
}

// ----------------------------------------------------------------- conv2d

/// Seven nested loops, nothing else.
fn conv2d_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (cout, cin, k) = (ws.n, ws.c, ws.h);
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, cout, oh, ow), |n, co, oy, ox| {
        let mut acc = b.at(0, co, 0, 0);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && iy < xs.h as isize && ix >= 0 && ix < xs.w as isize {
                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

fn run_conv_case(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize, pad: usize, what: &str) {
    let want = conv2d_reference(&x, &w, &b, stride, pad);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x).unwrap();
    let wv = g.constant(w).unwrap();
    let bv = g.constant(b).unwrap();
    let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    assert_close(g.value(y), &want, 1e-12, what);
}

#[test]
fn conv2d_matches_naive_loops_on_seeded_cases() {
    for case in 0..CASES {
        let mut rng = seeded_rng(1000 + case as u64);
        let n = rng.gen_range(1..=3);
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=5);
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2 + 1);
        let h = rng.gen_range(k.max(3)..=9);
        let w = rng.gen_range(k.max(3)..=9);
        let x = uniform_tensor(&mut rng, Shape::new(n, cin, h, w), 1.0);
        let wt = uniform_tensor(&mut rng, Shape::new(cout, cin, k, k), 1.0);
        let b = uniform_tensor(&mut rng, Shape::new(1, cout, 1, 1), 0.5);
        run_conv_case(x, wt, b, stride, pad, &format!("conv case {case} (k{k} s{stride} p{pad} {h}x{w})"));
    }
}

#[test]
fn conv2d_matches_naive_loops_past_the_chunk_boundary() {
    // More output positions than one im2col chunk holds, so the production
    // path stitches several partial GEMMs per sample.
    let mut rng = seeded_rng(77);
    let x = uniform_tensor(&mut rng, Shape::new(1, 2, 100, 100), 1.0);
    let w = uniform_tensor(&mut rng, Shape::new(3, 2, 3, 3), 1.0);
    let b = uniform_tensor(&mut rng, Shape::new(1, 3, 1, 1), 0.5);
    run_conv_case(x, w, b, 1, 1, "conv 100x100 multi-chunk");
}

// -------------------------------------------------------------- depthwise

/// Per-channel correlation with zero padding; output keeps the input size.
fn depthwise_reference(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    Tensor::from_fn(xs, |n, c, oy, ox| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy + ky) as isize - pad as isize;
                let ix = (ox + kx) as isize - pad as isize;
                if iy >= 0 && iy < xs.h as isize && ix >= 0 && ix < xs.w as isize {
                    acc += w.at(c, 0, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

#[test]
fn depthwise_conv_matches_naive_loops_on_seeded_cases() {
    for case in 0..CASES {
        let mut rng = seeded_rng(2000 + case as u64);
        let n = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=6);
        let k = [3usize, 5, 7][rng.gen_range(0..3)];
        let pad = k / 2;
        let h = rng.gen_range(3..=9);
        let w = rng.gen_range(3..=9);
        let x = uniform_tensor(&mut rng, Shape::new(n, c, h, w), 1.0);
        let wt = uniform_tensor(&mut rng, Shape::new(c, 1, k, k), 1.0);
        let want = depthwise_reference(&x, &wt, pad);

        let mut g = Graph::<f64>::new();
        let xv = g.constant(x).unwrap();
        let wv = g.constant(wt).unwrap();
        let y = g.depthwise_conv2d(xv, wv, pad).unwrap();
        assert_close(g.value(y), &want, 1e-12, &format!("depthwise case {case} (k{k} {h}x{w})"));
    }
}

// ------------------------------------------------------------------- mhsa

/// Attention from first principles: project Q/K/V with the naive
/// convolution references, then per (sample, head) compute row-softmax
/// scaled dot-product scores and mix the value vectors position by
/// position.
fn mhsa_reference(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    prefix: &str,
    heads: usize,
) -> Tensor<f64> {
    let by_name = |name: String| -> Tensor<f64> {
        store
            .iter()
            .find(|(_, e)| e.name == name)
            .map(|(id, _)| store.value(id).clone())
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    };
    let project = |branch: &str| -> Tensor<f64> {
        let dw = by_name(format!("{prefix}.{branch}.dw.weight"));
        let pw_w = by_name(format!("{prefix}.{branch}.pw.weight"));
        let pw_b = by_name(format!("{prefix}.{branch}.pw.bias"));
        let mid = depthwise_reference(x, &dw, dw.shape().h / 2);
        conv2d_reference(&mid, &pw_w, &pw_b, 1, 0)
    };
    let q = project("q");
    let k = project("k");
    let v = project("v");

    let s = x.shape();
    let (hh, ww) = (s.h, s.w);
    let hw = hh * ww;
    let d = s.c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let flat = |t: &Tensor<f64>, n: usize, ch: usize, pos: usize| t.at(n, ch, pos / ww, pos % ww);

    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for head in 0..heads {
            for i in 0..hw {
                // Scores of query position i against every key position.
                let mut scores = vec![0.0; hw];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for dd in 0..d {
                        let ch = head * d + dd;
                        dot += flat(&q, n, ch, i) * flat(&k, n, ch, j);
                    }
                    *sc = dot * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for sc in &mut scores {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for dd in 0..d {
                    let ch = head * d + dd;
                    let mut acc = 0.0;
                    for (j, sc) in scores.iter().enumerate() {
                        acc += sc / denom * flat(&v, n, ch, j);
                    }
                    *out.at_mut(n, ch, i / ww, i % ww) = acc;
                }
            }
        }
    }
    out
}

#[test]
fn mhsa_matches_dense_reference_on_seeded_cases() {
    for case in 0..CASES {
        let mut rng = seeded_rng(3000 + case as u64);
        let heads = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=3);
        let c = heads * d;
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(2..=4);
        let w = rng.gen_range(2..=4);

        let mut store = ParamStore::<f64>::new();
        let mhsa = Mhsa::new(&mut store, &mut rng, "att", c, heads).unwrap();
        let x = uniform_tensor(&mut rng, Shape::new(n, c, h, w), 1.0);

        let want = mhsa_reference(&x, &store, "att", heads);
        let mut pass = Pass::new(&store, false);
        let xv = pass.input(x).unwrap();
        let y = mhsa.forward(&mut pass, xv).unwrap();
        assert_close(
            pass.g.value(y),
            &want,
            1e-11,
            &format!("mhsa case {case} (c{c} heads{heads} {h}x{w})"),
        );
    }
}

// ---------------------------------------------------------------- bicubic

/// Keys cubic kernel, a = -0.5 (the textbook piecewise polynomial).
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 2-D evaluation: each output pixel sums its 4x4 neighborhood with
/// product weights, clamping source coordinates at the borders. No
/// separable passes, no precomputed tap tables.
fn bicubic_reference(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let s = img.shape();
    let (sy, sx) = (s.h as f64 / out_h as f64, s.w as f64 / out_w as f64);
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, oy, ox| {
        let src_y = (oy as f64 + 0.5) * sy - 0.5;
        let src_x = (ox as f64 + 0.5) * sx - 0.5;
        let (by, bx) = (src_y.floor(), src_x.floor());
        let mut acc = 0.0;
        for ty in -1i64..=2 {
            let wy = keys(src_y - by - ty as f64);
            let iy = ((by as i64 + ty).clamp(0, s.h as i64 - 1)) as usize;
            for tx in -1i64..=2 {
                let wx = keys(src_x - bx - tx as f64);
                let ix = ((bx as i64 + tx).clamp(0, s.w as i64 - 1)) as usize;
                acc += wy * wx * img.at(n, c, iy, ix);
            }
        }
        acc
    })
}

#[test]
fn bicubic_resize_matches_direct_formula_on_seeded_cases() {
    for case in 0..CASES {
        let mut rng = seeded_rng(4000 + case as u64);
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=12);
        let w = rng.gen_range(3..=12);
        let oh = rng.gen_range(3..=12);
        let ow = rng.gen_range(3..=12);
        let img = uniform_tensor(&mut rng, Shape::new(n, c, h, w), 1.0);
        let want = bicubic_reference(&img, oh, ow);
        let got = bicubic_resize(&img, oh, ow).unwrap();
        assert_close(&got, &want, 1e-12, &format!("bicubic case {case} ({h}x{w} -> {oh}x{ow})"));
    }
}

#[test]
fn bicubic_exact_factor_paths_match_the_same_formula() {
    // The shapes training actually uses: x4 and x8 up, x4 down.
    for (case, (h, oh)) in [(8usize, 32usize), (4, 32), (16, 4), (6, 48)].iter().enumerate() {
        let mut rng = seeded_rng(4100 + case as u64);
        let img = uniform_tensor(&mut rng, Shape::new(1, 3, *h, *h), 1.0);
        let want = bicubic_reference(&img, *oh, *oh);
        let got = bicubic_resize(&img, *oh, *oh).unwrap();
        assert_close(&got, &want, 1e-12, &format!("bicubic factor case {h}->{oh}"));
    }
}

// ------------------------------------------------------------------- ssim

/// One Gaussian tap, normalized over the 11-tap window.
fn gauss_taps() -> [f64; 11] {
    let mut t = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
        sum += *v;
    }
    for v in &mut t {
        *v /= sum;
    }
    t
}

/// SSIM by sliding an explicit 11x11 window: every windowed moment is a
/// double loop with product weights, averaged over valid positions,
/// channels, then batch.
fn ssim_reference(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let taps = gauss_taps();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let mut plane_sum = 0.0;
            let mut windows = 0usize;
            for y0 in 0..=s.h - 11 {
                for x0 in 0..=s.w - 11 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, wy) in taps.iter().enumerate() {
                        for (dx, wx) in taps.iter().enumerate() {
                            let g = wy * wx;
                            let va = a.at(n, c, y0 + dy, x0 + dx);
                            let vb = b.at(n, c, y0 + dy, x0 + dx);
                            ma += g * va;
                            mb += g * vb;
                            aa += g * va * va;
                            bb += g * vb * vb;
                            ab += g * va * vb;
                        }
                    }
                    let (var_a, var_b, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    plane_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                    windows += 1;
                }
            }
            total += plane_sum / windows as f64;
        }
    }
    total / (s.n * s.c) as f64
}

#[test]
fn ssim_matches_sliding_window_reference_on_seeded_cases() {
    for case in 0..CASES {
        let mut rng = seeded_rng(5000 + case as u64);
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(11..=16);
        let w = rng.gen_range(11..=16);
        let shape = Shape::new(n, c, h, w);
        // Values in [0, 1] like real images, correlated so SSIM is not
        // stuck near zero: b is a noisy copy of a.
        let a = uniform_tensor::<f64, _>(&mut rng, shape, 0.5).map(|v| v + 0.5);
        let noise = uniform_tensor::<f64, _>(&mut rng, shape, 0.1);
        let b = Tensor::from_fn(shape, |nn, cc, hh, ww| {
            (a.at(nn, cc, hh, ww) + noise.at(nn, cc, hh, ww)).clamp(0.0, 1.0)
        });
        let want = ssim_reference(&a, &b);
        let got = ssim(&a, &b).unwrap();
        assert!(
            (got - want).abs() <= 1e-10,
            "ssim case {case} ({h}x{w}): got {got}, want {want}"
        );
        assert!(got < 1.0 && got > 0.0, "ssim case {case}: implausible value {got}");
    }
}
