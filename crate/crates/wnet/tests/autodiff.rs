//! Per-operation gradient verification: every graph op is checked against
//! central finite differences in f64, input by input, coordinate by
//! coordinate.
//!
//! Each case builds `loss = sum(op(inputs) * W)` for a fixed, varied
//! projection tensor `W`, so every output coordinate influences the loss
//! with a distinct weight and transposition/indexing mistakes in a
//! backward rule cannot cancel out.

use rand::Rng;
use wnet::params::seeded_rng;
use wnet::{Graph, Result, Shape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
/// Gradients with both analytic and numeric magnitude below this are
/// indistinguishable from finite-difference noise and count as matching.
const ABS_FLOOR: f64 = 1e-9;

fn uniform(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, mixed signs: safe for ReLU kinks.
fn off_zero(rng: &mut impl Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let mag = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Deterministic, varied, sign-mixed projection weights.
fn projection(shape: Shape) -> Tensor<f64> {
    let mut i = 0u64;
    Tensor::from_fn(shape, |_, _, _, _| {
        i += 1;
        0.4 + 0.6 * (1.7 * i as f64).sin()
    })
}

fn scalar_loss(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = projection(g.shape(y));
    let wv = g.constant(w)?;
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

/// Check d loss / d input for every input coordinate of every input.
fn check<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let y = build(&mut g, &vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    let loss = scalar_loss(&mut g, y).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.take_grad(v).unwrap_or_else(|| panic!("{name}: missing grad")))
        .collect();

    // Numeric, by perturbing one coordinate at a time.
    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
        let y = build(&mut g, &vars).unwrap();
        let loss = scalar_loss(&mut g, y).unwrap();
        g.value(loss).data()[0]
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.data().len() {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + H;
            let plus = eval(&work);
            work[i].data_mut()[k] = orig - H;
            let minus = eval(&work);
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads[i].data()[k];
            if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < TOL,
                "{name}: input {i} coord {k}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {rel:.3e})"
            );
        }
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = seeded_rng(101);
    let x = uniform(&mut rng, Shape::new(2, 3, 5, 6), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(4, 3, 3, 3), -0.5, 0.5);
    let b = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.5, 0.5);
    check("conv2d s1 p1", &[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1));

    let x = uniform(&mut rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(3, 2, 3, 3), -0.5, 0.5);
    let b = uniform(&mut rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
    check("conv2d s2 p1", &[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1));

    let x = uniform(&mut rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(2, 3, 1, 1), -0.5, 0.5);
    let b = uniform(&mut rng, Shape::new(1, 2, 1, 1), -0.5, 0.5);
    check("conv2d 1x1", &[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 1, 0));
}

#[test]
fn depthwise_conv2d_gradients() {
    let mut rng = seeded_rng(102);
    let x = uniform(&mut rng, Shape::new(2, 4, 5, 5), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(4, 1, 3, 3), -0.5, 0.5);
    check("depthwise 3x3", &[x, w], |g, v| g.depthwise_conv2d(v[0], v[1], 1));

    let x = uniform(&mut rng, Shape::new(1, 2, 7, 7), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(2, 1, 7, 7), -0.3, 0.3);
    check("depthwise 7x7", &[x, w], |g, v| g.depthwise_conv2d(v[0], v[1], 3));
}

#[test]
fn batchnorm_gradients_training_and_inference() {
    let mut rng = seeded_rng(103);
    let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -2.0, 2.0);
    let gamma = uniform(&mut rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
    let beta = uniform(&mut rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
    check("batchnorm training", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batchnorm2d(v[0], v[1], v[2], 1e-5, true, None).map(|(y, _)| y)
    });

    let mean = uniform(&mut rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
    let var = uniform(&mut rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
    check("batchnorm inference", &[x, gamma, beta], move |g, v| {
        g.batchnorm2d(v[0], v[1], v[2], 1e-5, false, Some((&mean, &var))).map(|(y, _)| y)
    });
}

#[test]
fn activation_gradients() {
    let mut rng = seeded_rng(104);
    let x = off_zero(&mut rng, Shape::new(2, 3, 4, 4));
    check("relu", &[x], |g, v| g.relu(v[0]));

    let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -3.0, 3.0);
    check("sigmoid", &[x], |g, v| g.sigmoid(v[0]));

    let x = uniform(&mut rng, Shape::new(2, 2, 3, 5), -2.0, 2.0);
    check("softmax_last", &[x], |g, v| g.softmax_last(v[0]));
}

#[test]
fn arithmetic_gradients() {
    let mut rng = seeded_rng(105);
    let s = Shape::new(2, 3, 3, 4);
    let a = uniform(&mut rng, s, -1.0, 1.0);
    let b = uniform(&mut rng, s, -1.0, 1.0);
    let c = uniform(&mut rng, s, -1.0, 1.0);
    check("add_n", &[a.clone(), b.clone(), c.clone()], |g, v| g.add_n(&[v[0], v[1], v[2]]));
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("affine", &[a.clone()], |g, v| g.affine(v[0], 1.7, 0.3));
    // An input feeding the loss twice accumulates both paths.
    check("self-sum", &[a], |g, v| g.add(v[0], v[0]));
}

#[test]
fn gating_gradients() {
    let mut rng = seeded_rng(106);
    let x = uniform(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    let gc = uniform(&mut rng, Shape::new(2, 4, 1, 1), 0.1, 0.9);
    check("scale_channels", &[x.clone(), gc], |g, v| g.scale_channels(v[0], v[1]));

    let gs = uniform(&mut rng, Shape::new(2, 1, 3, 3), 0.1, 0.9);
    check("scale_spatial", &[x, gs], |g, v| g.scale_spatial(v[0], v[1]));

    let a = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let t = uniform(&mut rng, Shape::new(2, 1, 4, 4), 0.1, 0.9);
    check("lerp_spatial", &[a, b, t], |g, v| g.lerp_spatial(v[0], v[1], v[2]));
}

#[test]
fn shape_op_gradients() {
    let mut rng = seeded_rng(107);
    let a = uniform(&mut rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let c = uniform(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    check("concat_channels", &[a, b, c], |g, v| g.concat_channels(&[v[0], v[1], v[2]]));

    let x = uniform(&mut rng, Shape::new(1, 8, 3, 3), -1.0, 1.0);
    check("pixel_shuffle", &[x], |g, v| g.pixel_shuffle(v[0], 2));

    let x = uniform(&mut rng, Shape::new(1, 2, 6, 6), -1.0, 1.0);
    check("pixel_unshuffle", &[x], |g, v| g.pixel_unshuffle(v[0], 2));

    let x = uniform(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    check("upsample_nearest", &[x.clone()], |g, v| g.upsample_nearest(v[0], 2));

    let x = uniform(&mut rng, Shape::new(2, 3, 6, 6), -1.0, 1.0);
    check("downsample_nearest", &[x], |g, v| g.downsample_nearest(v[0], 2));

    let x = uniform(&mut rng, Shape::new(2, 3, 4, 5), -1.0, 1.0);
    check("transpose_hw", &[x.clone()], |g, v| g.transpose_hw(v[0]));
    check("reshape", &[x], |g, v| g.reshape(v[0], Shape::new(2, 6, 5, 2)));
}

#[test]
fn reduction_gradients() {
    let mut rng = seeded_rng(108);
    let x = uniform(&mut rng, Shape::new(2, 5, 3, 4), -1.0, 1.0);
    check("global_avg_pool", &[x.clone()], |g, v| g.global_avg_pool(v[0]));
    check("mean_all", &[x.clone()], |g, v| g.mean_all(v[0]));
    check("sum_all", &[x], &|g: &mut Graph<f64>, v: &[Var]| g.sum_all(v[0]));

    let x = uniform(&mut rng, Shape::new(2, 4, 3, 3), -1.0, 1.0);
    check("channel_mean", &[x.clone()], |g, v| g.channel_mean(v[0]));
    check("channel_max", &[x], |g, v| g.channel_max(v[0]));

    let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    check("max_pool2", &[x], |g, v| g.max_pool2(v[0]));
}

#[test]
fn matmul_gradients() {
    let mut rng = seeded_rng(109);
    let a = uniform(&mut rng, Shape::new(2, 3, 4, 5), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(2, 3, 5, 6), -1.0, 1.0);
    check("matmul", &[a, b], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn composite_attention_style_chain() {
    // sigmoid gate applied spatially, then blended: the pattern the fusion
    // blocks use, checked end to end at small size.
    let mut rng = seeded_rng(110);
    let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let y = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);
    let pre = uniform(&mut rng, Shape::new(2, 1, 4, 4), -2.0, 2.0);
    check("gated blend", &[x, y, pre], |g, v| {
        let t = g.sigmoid(v[2])?;
        g.lerp_spatial(v[0], v[1], t)
    });
}

#[test]
fn accumulated_gradient_is_exactly_double() {
    let mut rng = seeded_rng(111);
    let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -1.0, 1.0);

    let grad_of = |double: bool| -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true).unwrap();
        let y = if double { g.add(v, v).unwrap() } else { v };
        let loss = scalar_loss(&mut g, y).unwrap();
        g.backward(loss).unwrap();
        g.take_grad(v).unwrap()
    };
    let single = grad_of(false);
    let double = grad_of(true);
    for (s, d) in single.data().iter().zip(double.data()) {
        assert_eq!(2.0 * s, *d, "accumulation must be exact");
    }
}

#[test]
fn backward_error_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)), true).unwrap();
    // Non-scalar loss is rejected.
    match g.backward(x) {
        Err(wnet::Error::NonScalarLoss { .. }) => {}
        other => panic!("expected non-scalar loss error, got {other:?}"),
    }
    let loss = g.mean_all(x).unwrap();
    g.backward(loss).unwrap();
    match g.backward(loss) {
        Err(wnet::Error::BackwardTwice) => {}
        other => panic!("expected backward-twice error, got {other:?}"),
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap(), true).unwrap();
    let c = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, 4.0]).unwrap()).unwrap();
    let p = g.mul(x, c).unwrap();
    let loss = g.sum_all(p).unwrap();
    g.backward(loss).unwrap();
    assert!(g.take_grad(c).is_none());
    assert_eq!(g.take_grad(x).unwrap().data(), &[3.0, 4.0]);
}
