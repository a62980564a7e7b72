//! Training objective: pixel MSE, parsing-map MSE, and masked pixel +
//! perceptual losses over four facial regions, combined with configurable
//! weights. All terms are built on the graph so one backward pass covers
//! the full composite.
//!
//! The perceptual term uses a small frozen conv stack as its feature
//! extractor. Its parameters are seeded, registered as non-trainable, and
//! never receive gradients; real pretrained features can be swapped in by
//! loading different values for the same parameter names.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::Conv2d;
use crate::params::{ParamStore, Pass};
use crate::tensor::{Scalar, Shape, Tensor};

/// Binary region masks, one channel each, aligned with the HR image.
#[derive(Clone, Debug)]
pub struct RegionMasks<E: Scalar> {
    pub eyes: Tensor<E>,
    pub eyebrows: Tensor<E>,
    pub nose: Tensor<E>,
    pub mouth: Tensor<E>,
}

impl<E: Scalar> RegionMasks<E> {
    pub fn named(&self) -> [(&'static str, &Tensor<E>); 4] {
        [
            ("eye", &self.eyes),
            ("eyebrow", &self.eyebrows),
            ("nose", &self.nose),
            ("mouth", &self.mouth),
        ]
    }

    pub fn cast<F: Scalar>(&self) -> RegionMasks<F> {
        RegionMasks {
            eyes: self.eyes.cast(),
            eyebrows: self.eyebrows.cast(),
            nose: self.nose.cast(),
            mouth: self.mouth.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_par: f64,
    pub lambda_key: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_pixel: 1.0, lambda_par: 1.0, lambda_key: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_par", self.lambda_par),
            ("lambda_key", self.lambda_key),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss_weights", format!("{name} must be a nonnegative real, got {v}")));
            }
        }
        Ok(())
    }
}

/// Stage widths of the frozen perceptual extractor.
pub const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 16];

/// A fixed, seeded stack of conv3x3+ReLU stages standing in for a
/// pretrained feature network. Parameters are registered frozen.
pub struct FeatureExtractor {
    stages: Vec<Conv2d>,
}

pub const EXTRACTOR_PREFIX: &str = "loss_extractor";

impl FeatureExtractor {
    pub fn new<E: Scalar, R: Rng>(store: &mut ParamStore<E>, rng: &mut R) -> Result<Self> {
        let mut stages = Vec::with_capacity(EXTRACTOR_CHANNELS.len());
        let mut cin = 3;
        for (i, &cout) in EXTRACTOR_CHANNELS.iter().enumerate() {
            stages.push(Conv2d::new(store, rng, &format!("{EXTRACTOR_PREFIX}.stage{i}"), cin, cout, 3)?);
            cin = cout;
        }
        store.freeze_prefix(EXTRACTOR_PREFIX);
        Ok(FeatureExtractor { stages })
    }

    /// Final-stage feature map of `x`.
    pub fn features<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let mut f = x;
        for conv in &self.stages {
            f = conv.forward(p, f)?;
            f = p.g.relu(f)?;
        }
        Ok(f)
    }
}

/// Mean squared error over every element: `mean((a - b)^2)`.
pub fn mse<E: Scalar>(p: &mut Pass<E>, a: Var, b: Var) -> Result<Var> {
    let d = p.g.sub(a, b)?;
    let sq = p.g.mul(d, d)?;
    p.g.mean_all(sq)
}

/// MSE between the 3-channel parsing prediction and the single-channel
/// binary ground truth replicated across channels.
pub fn mse_parsing<E: Scalar>(p: &mut Pass<E>, pred: Var, gt: &Tensor<E>) -> Result<Var> {
    let s = p.g.shape(pred);
    let g = gt.shape();
    if g.c != 1 || g.n != s.n || g.h != s.h || g.w != s.w {
        return Err(Error::shape(
            "mse_parsing",
            format!("prediction {s} needs a (N,1,H,W) ground truth, got {g}"),
        ));
    }
    let gt3 = replicate_channels(gt, s.c);
    let gtv = p.input(gt3)?;
    mse(p, pred, gtv)
}

/// Feature-space MSE at the extractor's final stage. Gradient flows into
/// `a`/`b` but never into the frozen extractor.
pub fn perceptual<E: Scalar>(p: &mut Pass<E>, ext: &FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    let fa = ext.features(p, a)?;
    let fb = ext.features(p, b)?;
    mse(p, fa, fb)
}

/// Masked pixel + perceptual loss for one facial region. The pixel term
/// normalizes by mask area rather than H*W so small regions keep their
/// weight; an empty mask contributes exactly zero.
pub fn region_loss<E: Scalar>(
    p: &mut Pass<E>,
    ext: &FeatureExtractor,
    sr: Var,
    hr: Var,
    mask: &Tensor<E>,
) -> Result<Var> {
    let s = p.g.shape(sr);
    let m = mask.shape();
    if m.c != 1 || m.n != s.n || m.h != s.h || m.w != s.w {
        return Err(Error::shape(
            "region_loss",
            format!("image {s} needs a (N,1,H,W) mask, got {m}"),
        ));
    }
    let area: f64 = mask.sum_f64();
    let norm = area.max(1.0) * s.c as f64;
    let mv = p.input(mask.clone())?;
    let srm = p.g.scale_spatial(sr, mv)?;
    let hrm = p.g.scale_spatial(hr, mv)?;
    let d = p.g.sub(srm, hrm)?;
    let sq = p.g.mul(d, d)?;
    let sum = p.g.sum_all(sq)?;
    let pixel = p.g.affine(sum, 1.0 / norm, 0.0)?;
    let perc = perceptual(p, ext, srm, hrm)?;
    p.g.add(pixel, perc)
}

/// The composite objective with its per-term breakdown. `key` is the
/// unweighted sum of the four region losses.
pub struct TotalLoss {
    pub total: Var,
    pub mse: Var,
    pub parmse: Var,
    pub eye: Var,
    pub eyebrow: Var,
    pub nose: Var,
    pub mouth: Var,
    pub key: Var,
}

impl TotalLoss {
    /// The seven named components, in log order.
    pub fn components(&self) -> [(&'static str, Var); 7] {
        [
            ("mse", self.mse),
            ("parmse", self.parmse),
            ("eye", self.eye),
            ("eyebrow", self.eyebrow),
            ("nose", self.nose),
            ("mouth", self.mouth),
            ("key", self.key),
        ]
    }
}

/// `total = lambda_pixel*mse + lambda_par*parmse + lambda_key*key`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<E: Scalar>(
    p: &mut Pass<E>,
    ext: &FeatureExtractor,
    sr: Var,
    hr: &Tensor<E>,
    parsing_pred: Var,
    parsing_gt: &Tensor<E>,
    masks: &RegionMasks<E>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let hrv = p.input(hr.clone())?;
    let mse_term = mse(p, sr, hrv)?;
    let parmse = mse_parsing(p, parsing_pred, parsing_gt)?;
    let mut regions = Vec::with_capacity(4);
    for (_, mask) in masks.named() {
        regions.push(region_loss(p, ext, sr, hrv, mask)?);
    }
    let key = p.g.add_n(&regions)?;
    let wp = p.g.affine(mse_term, weights.lambda_pixel, 0.0)?;
    let wpar = p.g.affine(parmse, weights.lambda_par, 0.0)?;
    let wkey = p.g.affine(key, weights.lambda_key, 0.0)?;
    let total = p.g.add_n(&[wp, wpar, wkey])?;
    Ok(TotalLoss {
        total,
        mse: mse_term,
        parmse,
        eye: regions[0],
        eyebrow: regions[1],
        nose: regions[2],
        mouth: regions[3],
        key,
    })
}

/// Repeat a single-channel map across `c` channels.
pub fn replicate_channels<E: Scalar>(t: &Tensor<E>, c: usize) -> Tensor<E> {
    let s = t.shape();
    debug_assert_eq!(s.c, 1);
    Tensor::from_fn(Shape::new(s.n, c, s.h, s.w), |n, _, h, w| t.at(n, 0, h, w))
}
