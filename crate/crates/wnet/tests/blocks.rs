//! Block-level gradient verification, one tier above the per-op checks:
//! each composite layer (attention gates, residual blocks, resize blocks,
//! the hourglass, the multi-scale attention unit, the fusion block and the
//! parsing subnet) is driven through a fixed scalar projection and its
//! parameter gradients compared against central differences in f64. The
//! channel/spatial attention gates also get hand-rolled value oracles.

use rand::Rng;

use wnet::graph::Var;
use wnet::layers::{
    ChannelAttention, DownsampleBlock, Hourglass, PixelAttention, Rcab, ResidualBlock, Scab,
    SpatialAttention, UpsampleBlock,
};
use wnet::lpf::{Lpf, LpfConfig};
use wnet::params::{seeded_rng, uniform_tensor, ParamStore, Pass};
use wnet::parsing::{MultiScaleAttention, ParsingBlock, ParsingConfig};
use wnet::tensor::{Shape, Tensor};

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;
/// Analytic and numeric both below this magnitude count as agreeing: the
/// finite-difference noise floor hides anything smaller.
const ABS_FLOOR: f64 = 1e-9;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Fixed projection making any output a scalar: sum(y * p) with
/// deterministic, sign-mixed, nowhere-zero weights.
fn project(pass: &mut Pass<f64>, y: Var) -> Var {
    let s = pass.g.shape(y);
    let mut i = 0usize;
    let weights = Tensor::from_fn(s, |_, _, _, _| {
        let v = 0.4 + 0.6 * (1.7 * i as f64).sin();
        i += 1;
        v
    });
    let w = pass.input(weights).unwrap();
    let prod = pass.g.mul(y, w).unwrap();
    pass.g.sum_all(prod).unwrap()
}

/// Compare every bound parameter's analytic gradient against central
/// differences at a few spread-out coordinates. `forward` must be a pure
/// function of the store (same graph every call).
fn check_block<F>(label: &str, store: &mut ParamStore<f64>, training: bool, forward: F)
where
    F: for<'s> Fn(&mut Pass<'s, f64>) -> Var,
{
    let grads = {
        let mut pass = Pass::new(store, training);
        let y = forward(&mut pass);
        let loss = project(&mut pass, y);
        pass.g.backward_and_free(loss).unwrap();
        pass.take_grads()
    };
    assert!(!grads.is_empty(), "{label}: no trainable parameters bound");

    let loss_at = |store: &ParamStore<f64>| -> f64 {
        let mut pass = Pass::new(store, training);
        let y = forward(&mut pass);
        let loss = project(&mut pass, y);
        pass.g.value(loss).data()[0]
    };

    let mut coords_checked = 0usize;
    for (id, grad) in &grads {
        let len = grad.data().len();
        let mut coords = vec![0, len / 2, len - 1];
        coords.dedup();
        for coord in coords {
            let analytic = grad.data()[coord];
            let mut best = f64::INFINITY;
            for h in [FD_STEP, FD_STEP / 10.0] {
                let original = store.value(*id).data()[coord];
                store.value_mut(*id).data_mut()[coord] = original + h;
                let plus = loss_at(store);
                store.value_mut(*id).data_mut()[coord] = original - h;
                let minus = loss_at(store);
                store.value_mut(*id).data_mut()[coord] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let r = if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
                    0.0
                } else {
                    rel_error(analytic, numeric)
                };
                best = best.min(r);
                if best < TOL {
                    break;
                }
            }
            assert!(
                best < TOL,
                "{label}: parameter {} coord {coord}: analytic {analytic:.6e}, rel error {best:.3e}",
                store.name(*id)
            );
            coords_checked += 1;
        }
    }
    assert!(coords_checked >= 3, "{label}: too few coordinates exercised");
}

/// Input away from ReLU kinks and inside a sane feature range.
fn feature(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

// ------------------------------------------------------ value oracles

#[test]
fn channel_attention_matches_hand_rolled_oracle() {
    for case in 0..6u64 {
        let mut rng = seeded_rng(600 + case);
        let (n, c, red, h, w) = (2, 8, 4, 3, 4);
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", c, red).unwrap();
        let x = uniform_tensor(&mut rng, Shape::new(n, c, h, w), 1.0);

        // gate = sigmoid(W2 relu(W1 mean_hw(x) + b1) + b2), y = x * gate
        let by = |name: &str| -> Tensor<f64> {
            store
                .iter()
                .find(|(_, e)| e.name == name)
                .map(|(id, _)| store.value(id).clone())
                .unwrap()
        };
        let (w1, b1) = (by("ca.reduce.weight"), by("ca.reduce.bias"));
        let (w2, b2) = (by("ca.expand.weight"), by("ca.expand.bias"));
        let mid = c / red;
        let mut want = Tensor::zeros(x.shape());
        for nn in 0..n {
            let pooled: Vec<f64> = (0..c)
                .map(|cc| {
                    (0..h).flat_map(|y| (0..w).map(move |xx| (y, xx))).map(|(y, xx)| x.at(nn, cc, y, xx)).sum::<f64>()
                        / (h * w) as f64
                })
                .collect();
            let hidden: Vec<f64> = (0..mid)
                .map(|m| {
                    let z = (0..c).map(|cc| w1.at(m, cc, 0, 0) * pooled[cc]).sum::<f64>() + b1.at(0, m, 0, 0);
                    z.max(0.0)
                })
                .collect();
            for cc in 0..c {
                let z = (0..mid).map(|m| w2.at(cc, m, 0, 0) * hidden[m]).sum::<f64>() + b2.at(0, cc, 0, 0);
                let gate = 1.0 / (1.0 + (-z).exp());
                for y in 0..h {
                    for xx in 0..w {
                        *want.at_mut(nn, cc, y, xx) = x.at(nn, cc, y, xx) * gate;
                    }
                }
            }
        }

        let mut pass = Pass::new(&store, false);
        let xv = pass.input(x).unwrap();
        let yv = ca.forward(&mut pass, xv).unwrap();
        let got = pass.g.value(yv);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "ca case {case}: {g} vs {w}");
        }
    }
}

#[test]
fn spatial_attention_matches_hand_rolled_oracle() {
    for case in 0..6u64 {
        let mut rng = seeded_rng(700 + case);
        let (n, c, k, h, w) = (2, 5, 7, 4, 5);
        let mut store = ParamStore::<f64>::new();
        let sa = SpatialAttention::new(&mut store, &mut rng, "sa", k).unwrap();
        let x = uniform_tensor(&mut rng, Shape::new(n, c, h, w), 1.0);

        let (cw, cb) = {
            let by = |name: &str| -> Tensor<f64> {
                store
                    .iter()
                    .find(|(_, e)| e.name == name)
                    .map(|(id, _)| store.value(id).clone())
                    .unwrap()
            };
            (by("sa.conv.weight"), by("sa.conv.bias"))
        };
        // stacked = [mean_c, max_c]; gate = sigmoid(conv_k(stacked)); y = x * gate
        let pad = k / 2;
        let mut want = Tensor::zeros(x.shape());
        for nn in 0..n {
            let stat = |ch: usize, y: isize, xx: isize| -> f64 {
                if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                    return 0.0;
                }
                let (y, xx) = (y as usize, xx as usize);
                if ch == 0 {
                    (0..c).map(|cc| x.at(nn, cc, y, xx)).sum::<f64>() / c as f64
                } else {
                    (0..c).map(|cc| x.at(nn, cc, y, xx)).fold(f64::NEG_INFINITY, f64::max)
                }
            };
            for y in 0..h {
                for xx in 0..w {
                    let mut z = cb.at(0, 0, 0, 0);
                    for ch in 0..2 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y + ky) as isize - pad as isize;
                                let ix = (xx + kx) as isize - pad as isize;
                                z += cw.at(0, ch, ky, kx) * stat(ch, iy, ix);
                            }
                        }
                    }
                    let gate = 1.0 / (1.0 + (-z).exp());
                    for cc in 0..c {
                        *want.at_mut(nn, cc, y, xx) = x.at(nn, cc, y, xx) * gate;
                    }
                }
            }
        }

        let mut pass = Pass::new(&store, false);
        let xv = pass.input(x).unwrap();
        let yv = sa.forward(&mut pass, xv).unwrap();
        let got = pass.g.value(yv);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "sa case {case}: {g} vs {w}");
        }
    }
}

// --------------------------------------------------- gradient checks

#[test]
fn channel_attention_gradients_match_fd() {
    let mut rng = seeded_rng(41);
    let mut store = ParamStore::<f64>::new();
    let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 8, 4).unwrap();
    let x = feature(411, Shape::new(2, 8, 3, 3));
    check_block("channel_attention", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        ca.forward(p, xv).unwrap()
    });
}

#[test]
fn spatial_attention_gradients_match_fd() {
    let mut rng = seeded_rng(42);
    let mut store = ParamStore::<f64>::new();
    let sa = SpatialAttention::new(&mut store, &mut rng, "sa", 7).unwrap();
    let x = feature(421, Shape::new(2, 4, 4, 4));
    check_block("spatial_attention", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        sa.forward(p, xv).unwrap()
    });
}

#[test]
fn pixel_attention_gradients_match_fd() {
    let mut rng = seeded_rng(43);
    let mut store = ParamStore::<f64>::new();
    let pa = PixelAttention::new(&mut store, &mut rng, "pa", 6).unwrap();
    let x = feature(431, Shape::new(2, 6, 3, 4));
    check_block("pixel_attention", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        pa.forward(p, xv).unwrap()
    });
}

#[test]
fn rcab_gradients_match_fd() {
    let mut rng = seeded_rng(44);
    let mut store = ParamStore::<f64>::new();
    let rcab = Rcab::new(&mut store, &mut rng, "rcab", 8, 4).unwrap();
    let x = feature(441, Shape::new(2, 8, 3, 3));
    check_block("rcab", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        rcab.forward(p, xv).unwrap()
    });
}

#[test]
fn scab_with_self_attention_gradients_match_fd() {
    let mut rng = seeded_rng(45);
    let mut store = ParamStore::<f64>::new();
    let scab = Scab::new(&mut store, &mut rng, "scab", 8, 2, 4, true).unwrap();
    let x = feature(451, Shape::new(2, 8, 3, 3));
    check_block("scab", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        scab.forward(p, xv).unwrap()
    });
}

#[test]
fn upsample_block_gradients_match_fd_in_training_mode() {
    let mut rng = seeded_rng(46);
    let mut store = ParamStore::<f64>::new();
    let up = UpsampleBlock::new(&mut store, &mut rng, "up", 4).unwrap();
    let x = feature(461, Shape::new(2, 4, 3, 3));
    check_block("upsample_block", &mut store, true, |p| {
        let xv = p.input(x.clone()).unwrap();
        up.forward(p, xv).unwrap()
    });
}

#[test]
fn downsample_block_gradients_match_fd_in_training_mode() {
    let mut rng = seeded_rng(47);
    let mut store = ParamStore::<f64>::new();
    let down = DownsampleBlock::new(&mut store, &mut rng, "down", 4).unwrap();
    let x = feature(471, Shape::new(2, 4, 4, 4));
    check_block("downsample_block", &mut store, true, |p| {
        let xv = p.input(x.clone()).unwrap();
        down.forward(p, xv).unwrap()
    });
}

#[test]
fn residual_block_gradients_match_fd() {
    let mut rng = seeded_rng(48);
    let mut store = ParamStore::<f64>::new();
    let block = ResidualBlock::new(&mut store, &mut rng, "res", 6).unwrap();
    let x = feature(481, Shape::new(2, 6, 3, 3));
    check_block("residual_block", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        block.forward(p, xv).unwrap()
    });
}

#[test]
fn hourglass_gradients_match_fd() {
    let mut rng = seeded_rng(49);
    let mut store = ParamStore::<f64>::new();
    let hg = Hourglass::new(&mut store, &mut rng, "hg", 4, 2).unwrap();
    let x = feature(491, Shape::new(2, 4, 8, 8));
    check_block("hourglass", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        hg.forward(p, xv).unwrap()
    });
}

#[test]
fn multi_scale_attention_gradients_match_fd() {
    let mut rng = seeded_rng(50);
    let cfg = ParsingConfig {
        channels: 8,
        hourglass_depth: 2,
        ca_reduction: 4,
        sa_kernel: 7,
        plain_trunk: false,
    };
    let mut store = ParamStore::<f64>::new();
    let msau = MultiScaleAttention::new(&mut store, &mut rng, "msau", &cfg).unwrap();
    let x = feature(501, Shape::new(2, 8, 4, 4));
    check_block("multi_scale_attention", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        msau.forward(p, xv).unwrap()
    });
}

#[test]
fn lpf_full_gradients_match_fd() {
    let mut rng = seeded_rng(51);
    let cfg = LpfConfig { channels: 8, parsing_channels: 3, ca_reduction: 4, sa_kernel: 7 };
    let mut store = ParamStore::<f64>::new();
    let lpf = Lpf::new(&mut store, &mut rng, "lpf", cfg, true).unwrap();
    let f = feature(511, Shape::new(2, 8, 4, 4));
    let map = feature(512, Shape::new(2, 3, 4, 4)).map(|v| 0.5 + 0.4 * v);
    check_block("lpf_full", &mut store, false, |p| {
        let fv = p.input(f.clone()).unwrap();
        let mv = p.input(map.clone()).unwrap();
        lpf.forward(p, fv, mv).unwrap()
    });
}

#[test]
fn lpf_cascade_gradients_match_fd() {
    let mut rng = seeded_rng(52);
    let cfg = LpfConfig { channels: 8, parsing_channels: 3, ca_reduction: 4, sa_kernel: 7 };
    let mut store = ParamStore::<f64>::new();
    let lpf = Lpf::new(&mut store, &mut rng, "lpf", cfg, false).unwrap();
    let f = feature(521, Shape::new(2, 8, 4, 4));
    let map = feature(522, Shape::new(2, 3, 4, 4)).map(|v| 0.5 + 0.4 * v);
    check_block("lpf_cascade", &mut store, false, |p| {
        let fv = p.input(f.clone()).unwrap();
        let mv = p.input(map.clone()).unwrap();
        lpf.forward(p, fv, mv).unwrap()
    });
}

#[test]
fn parsing_block_gradients_match_fd() {
    let mut rng = seeded_rng(53);
    let cfg = ParsingConfig {
        channels: 8,
        hourglass_depth: 2,
        ca_reduction: 4,
        sa_kernel: 7,
        plain_trunk: false,
    };
    let mut store = ParamStore::<f64>::new();
    let block = ParsingBlock::new(&mut store, &mut rng, "parsing", cfg).unwrap();
    let x = feature(531, Shape::new(2, 3, 8, 8)).map(|v| 0.5 + 0.4 * v);
    check_block("parsing_block", &mut store, false, |p| {
        let xv = p.input(x.clone()).unwrap();
        block.forward(p, xv).unwrap()
    });
}
