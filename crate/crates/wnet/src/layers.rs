//! Reusable network blocks.
//!
//! Every layer owns [`ParamId`] handles into a [`ParamStore`] rather than
//! tensors, registers its parameters under hierarchical dotted names at
//! construction time, and replays itself onto a [`Pass`] graph in
//! `forward`. Convolutions use "same" padding (`pad = k / 2`) and carry a
//! bias unless noted; weights start fan-in-scaled uniform, batch-norm
//! starts at identity (gamma 1, beta 0, running stats 0/1).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{BnUpdate, ParamId, ParamStore, Pass};
use crate::tensor::{Scalar, Shape, Tensor};

/// Default reduction ratio for channel attention.
pub const CA_REDUCTION: usize = 16;
/// Default kernel size of the spatial-attention convolution.
pub const SA_KERNEL: usize = 7;
/// Default head count for convolutional self-attention.
pub const MHSA_HEADS: usize = 4;
/// Batch-norm defaults shared by every block.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ------------------------------------------------------------------ conv

/// 2-D convolution layer with bias and "same" padding by default.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// `k` odd. Uses same padding (`k / 2`).
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        Self::with_stride(store, rng, name, cin, cout, k, 1, k / 2)
    }

    pub fn with_stride<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = crate::params::conv_bound(cin, k);
        let weight = store.add(
            format!("{name}.weight"),
            crate::params::uniform_tensor(rng, Shape::new(cout, cin, k, k), bound),
            true,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            crate::params::uniform_tensor(rng, Shape::new(1, cout, 1, 1), bound),
            true,
        )?;
        Ok(Conv2d { weight, bias, stride, pad })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let w = p.bind(self.weight)?;
        let b = p.bind(self.bias)?;
        p.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Depthwise convolution layer: one filter per channel, no bias (the
/// pointwise projection that always follows carries one).
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        k: usize,
    ) -> Result<Self> {
        let bound = crate::params::conv_bound(1, k);
        let weight = store.add(
            format!("{name}.weight"),
            crate::params::uniform_tensor(rng, Shape::new(c, 1, k, k), bound),
            true,
        )?;
        Ok(DepthwiseConv2d { weight, pad: k / 2 })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let w = p.bind(self.weight)?;
        p.g.depthwise_conv2d(x, w, self.pad)
    }
}

// ------------------------------------------------------------- batch norm

/// Batch normalization with running statistics kept as store buffers.
///
/// Forward never touches the buffers: training passes push a [`BnUpdate`]
/// onto the [`Pass`] and the training loop folds it in afterwards, so that
/// forwards stay pure functions of the store.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, name: &str, c: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(Shape::new(1, c, 1, 1), E::ONE), true)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(Shape::new(1, c, 1, 1)), true)?;
        let running_mean =
            store.add(format!("{name}.running_mean"), Tensor::zeros(Shape::new(1, c, 1, 1)), false)?;
        let running_var =
            store.add(format!("{name}.running_var"), Tensor::full(Shape::new(1, c, 1, 1), E::ONE), false)?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let gamma = p.bind(self.gamma)?;
        let beta = p.bind(self.beta)?;
        if p.training {
            let shape = p.g.shape(x);
            let (y, stats) = p.g.batchnorm2d(x, gamma, beta, self.eps, true, None)?;
            let (batch_mean, batch_var) = stats.expect("training mode returns batch stats");
            p.bn_updates.push(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                batch_mean,
                batch_var,
                count: shape.n * shape.hw(),
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let rm = p.store().value(self.running_mean).clone();
            let rv = p.store().value(self.running_var).clone();
            let (y, _) = p.g.batchnorm2d(x, gamma, beta, self.eps, false, Some((&rm, &rv)))?;
            Ok(y)
        }
    }
}

/// Fold pending batch statistics into the running buffers:
/// `running = (1 - momentum) * running + momentum * batch`, with the
/// variance converted to its unbiased form before blending.
pub fn apply_bn_updates<E: Scalar>(store: &mut ParamStore<E>, updates: Vec<BnUpdate<E>>) {
    for u in updates {
        let mom = E::from_f64(u.momentum);
        let keep = E::from_f64(1.0 - u.momentum);
        let unbias = if u.count > 1 {
            E::from_f64(u.count as f64 / (u.count as f64 - 1.0))
        } else {
            E::ONE
        };
        {
            let rm = store.value_mut(u.mean_id);
            for (r, &b) in rm.data_mut().iter_mut().zip(u.batch_mean.data()) {
                *r = keep * *r + mom * b;
            }
        }
        let rv = store.value_mut(u.var_id);
        for (r, &b) in rv.data_mut().iter_mut().zip(u.batch_var.data()) {
            *r = keep * *r + mom * b * unbias;
        }
    }
}

// -------------------------------------------------------------- residual

/// conv3x3 -> ReLU -> conv3x3 plus identity skip.
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
    ) -> Result<Self> {
        Ok(ResidualBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, 3)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(p, x)?;
        let h = p.g.relu(h)?;
        let h = self.conv2.forward(p, h)?;
        p.g.add(x, h)
    }
}

// -------------------------------------------------------------- hourglass

/// Recursive encoder/decoder: at each level, a residual skip runs beside a
/// max-pooled residual branch that recurses one level deeper and comes back
/// through nearest x2 upsampling into an additive merge.
pub struct Hourglass {
    levels: Vec<HourglassLevel>,
    base: ResidualBlock,
}

struct HourglassLevel {
    skip: ResidualBlock,
    down: ResidualBlock,
}

impl Hourglass {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(depth);
        for i in 0..depth {
            levels.push(HourglassLevel {
                skip: ResidualBlock::new(store, rng, &format!("{name}.level{i}.skip"), c)?,
                down: ResidualBlock::new(store, rng, &format!("{name}.level{i}.down"), c)?,
            });
        }
        Ok(Hourglass {
            levels,
            base: ResidualBlock::new(store, rng, &format!("{name}.base"), c)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let s = p.g.shape(x);
        let need = 1usize << self.depth();
        for (what, value) in [("height", s.h), ("width", s.w)] {
            if value % need != 0 {
                return Err(Error::NotDivisible { op: "hourglass", what, value, divisor: need });
            }
        }
        self.level_forward(p, x, 0)
    }

    fn level_forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var, i: usize) -> Result<Var> {
        if i == self.levels.len() {
            return self.base.forward(p, x);
        }
        let skip = self.levels[i].skip.forward(p, x)?;
        let pooled = p.g.max_pool2(x)?;
        let down = self.levels[i].down.forward(p, pooled)?;
        let inner = self.level_forward(p, down, i + 1)?;
        let up = p.g.upsample_nearest(inner, 2)?;
        p.g.add(skip, up)
    }
}

// -------------------------------------------------------------- attention

/// Squeeze-and-excite channel gate: GAP -> 1x1 (C -> C/r) -> ReLU ->
/// 1x1 (C/r -> C) -> sigmoid, multiplied back onto the input per channel.
pub struct ChannelAttention {
    reduce: Conv2d,
    expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || c % reduction != 0 {
            return Err(Error::NotDivisible {
                op: "channel_attention",
                what: "channels",
                value: c,
                divisor: reduction,
            });
        }
        let mid = c / reduction;
        Ok(ChannelAttention {
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), c, mid, 1)?,
            expand: Conv2d::new(store, rng, &format!("{name}.expand"), mid, c, 1)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let gate = self.gate(p, x)?;
        p.g.scale_channels(x, gate)
    }

    /// The (N, C, 1, 1) sigmoid gate alone.
    pub fn gate<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let pooled = p.g.global_avg_pool(x)?;
        let h = self.reduce.forward(p, pooled)?;
        let h = p.g.relu(h)?;
        let h = self.expand.forward(p, h)?;
        p.g.sigmoid(h)
    }
}

/// Per-pixel gate from pooled channel statistics: [mean, max] -> 7x7 conv
/// -> sigmoid, multiplied back onto the input per pixel.
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid("spatial_attention", format!("kernel {kernel} must be odd")));
        }
        Ok(SpatialAttention {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, kernel)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let mean = p.g.channel_mean(x)?;
        let max = p.g.channel_max(x)?;
        let stacked = p.g.concat_channels(&[mean, max])?;
        let h = self.conv.forward(p, stacked)?;
        let gate = p.g.sigmoid(h)?;
        p.g.scale_spatial(x, gate)
    }
}

/// Pixel attention: 1x1 conv to a single channel plus sigmoid. Returns the
/// (N, 1, H, W) gate itself; callers broadcast it.
pub struct PixelAttention {
    conv: Conv2d,
}

impl PixelAttention {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cin: usize,
    ) -> Result<Self> {
        Ok(PixelAttention {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, 1, 1)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let h = self.conv.forward(p, x)?;
        p.g.sigmoid(h)
    }
}

// ------------------------------------------------------------ up / down

/// conv3x3 (C -> 4C) -> pixel_shuffle x2 -> batch norm -> ReLU.
pub struct UpsampleBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl UpsampleBlock {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
    ) -> Result<Self> {
        Ok(UpsampleBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), c, 4 * c, 3)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let h = self.conv.forward(p, x)?;
        let h = p.g.pixel_shuffle(h, 2)?;
        let h = self.bn.forward(p, h)?;
        p.g.relu(h)
    }
}

/// pixel_unshuffle x2 (C -> 4C) -> conv3x3 (4C -> C) -> batch norm -> ReLU.
pub struct DownsampleBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl DownsampleBlock {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
    ) -> Result<Self> {
        Ok(DownsampleBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), 4 * c, c, 3)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let h = p.g.pixel_unshuffle(x, 2)?;
        let h = self.conv.forward(p, h)?;
        let h = self.bn.forward(p, h)?;
        p.g.relu(h)
    }
}

// ------------------------------------------------------------------ mhsa

/// Multi-head self-attention over spatial positions with convolutional
/// projections: Q, K, V each come from a 3x3 depthwise convolution followed
/// by a 1x1 pointwise projection; attention is scaled dot-product over the
/// H x W positions, per head, with head outputs concatenated.
pub struct Mhsa {
    q_dw: DepthwiseConv2d,
    q_pw: Conv2d,
    k_dw: DepthwiseConv2d,
    k_pw: Conv2d,
    v_dw: DepthwiseConv2d,
    v_pw: Conv2d,
    heads: usize,
}

impl Mhsa {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::NotDivisible {
                op: "mhsa",
                what: "channels",
                value: c,
                divisor: heads.max(1),
            });
        }
        Ok(Mhsa {
            q_dw: DepthwiseConv2d::new(store, rng, &format!("{name}.q.dw"), c, 3)?,
            q_pw: Conv2d::new(store, rng, &format!("{name}.q.pw"), c, c, 1)?,
            k_dw: DepthwiseConv2d::new(store, rng, &format!("{name}.k.dw"), c, 3)?,
            k_pw: Conv2d::new(store, rng, &format!("{name}.k.pw"), c, c, 1)?,
            v_dw: DepthwiseConv2d::new(store, rng, &format!("{name}.v.dw"), c, 3)?,
            v_pw: Conv2d::new(store, rng, &format!("{name}.v.pw"), c, c, 1)?,
            heads,
        })
    }

    /// The value branch alone (exposed so tests can compare against the
    /// trivial single-position case where attention must return V).
    pub fn value_branch<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let v = self.v_dw.forward(p, x)?;
        self.v_pw.forward(p, v)
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let s = p.g.shape(x);
        let (n, c, hw) = (s.n, s.c, s.hw());
        let d = c / self.heads;

        let q = self.q_dw.forward(p, x)?;
        let q = self.q_pw.forward(p, q)?;
        let k = self.k_dw.forward(p, x)?;
        let k = self.k_pw.forward(p, k)?;
        let v = self.value_branch(p, x)?;

        // (N, C, H, W) reinterpreted as (N, heads, d, HW): pure reshape
        // because channels are contiguous and c = heads * d.
        let heads_shape = Shape::new(n, self.heads, d, hw);
        let qh = p.g.reshape(q, heads_shape)?;
        let kh = p.g.reshape(k, heads_shape)?;
        let vh = p.g.reshape(v, heads_shape)?;

        let qt = p.g.transpose_hw(qh)?; // (N, heads, HW, d): rows are query positions
        let scores = p.g.matmul(qt, kh)?; // (N, heads, HW, HW)
        let scaled = p.g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0)?;
        let attn = p.g.softmax_last(scaled)?; // rows sum to 1 over key positions

        let vt = p.g.transpose_hw(vh)?; // (N, heads, HW, d)
        let mixed = p.g.matmul(attn, vt)?; // (N, heads, HW, d)
        let out = p.g.transpose_hw(mixed)?; // (N, heads, d, HW)
        p.g.reshape(out, s)
    }
}

// ------------------------------------------------------------ rcab / scab

/// Residual channel-attention block: conv3x3 -> ReLU -> conv3x3 ->
/// channel attention, added back onto the identity.
pub struct Rcab {
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelAttention,
}

impl Rcab {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(Rcab {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, 3)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3)?,
            ca: ChannelAttention::new(store, rng, &format!("{name}.ca"), c, reduction)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(p, x)?;
        let h = p.g.relu(h)?;
        let h = self.conv2.forward(p, h)?;
        let h = self.ca.forward(p, h)?;
        p.g.add(x, h)
    }
}

/// RCAB extended with spatial self-attention applied residually:
/// `scab(x) = r + mhsa(r)` where `r = rcab(x)`. With `use_mhsa = false`
/// the block degenerates to a plain RCAB (the ablation switch).
pub struct Scab {
    rcab: Rcab,
    mhsa: Option<Mhsa>,
}

impl Scab {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        heads: usize,
        reduction: usize,
        use_mhsa: bool,
    ) -> Result<Self> {
        Ok(Scab {
            rcab: Rcab::new(store, rng, &format!("{name}.rcab"), c, reduction)?,
            mhsa: if use_mhsa {
                Some(Mhsa::new(store, rng, &format!("{name}.mhsa"), c, heads)?)
            } else {
                None
            },
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, x: Var) -> Result<Var> {
        let r = self.rcab.forward(p, x)?;
        match &self.mhsa {
            Some(mhsa) => {
                let a = mhsa.forward(p, r)?;
                p.g.add(r, a)
            }
            None => Ok(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    fn seeded_input(shape: Shape, seed: u64) -> Tensor<f64> {
        crate::params::uniform_tensor(&mut seeded_rng(seed), shape, 1.0)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1);
        let block = ResidualBlock::new(&mut store, &mut rng, "rb", 4).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(2, 4, 6, 6), 2);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = block.forward(&mut p, xv).unwrap();
        assert_eq!(p.g.value(y).data(), x.data());
    }

    #[test]
    fn channel_attention_zero_weights_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(3);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 16, 16).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(1, 16, 4, 4), 4);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = ca.forward(&mut p, xv).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        assert!(close(p.g.value(y).data(), &expect, 1e-15));
    }

    #[test]
    fn channel_attention_gates_stay_in_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(5);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 8, 4).unwrap();
        let x = seeded_input(Shape::new(2, 8, 3, 3), 6);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x).unwrap();
        let gate = ca.gate(&mut p, xv).unwrap();
        for &g in p.g.value(gate).data() {
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn channel_attention_requires_reduction_to_divide() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(7);
        assert!(ChannelAttention::new(&mut store, &mut rng, "ca", 6, 16).is_err());
    }

    #[test]
    fn spatial_attention_zero_weights_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(8);
        let sa = SpatialAttention::new(&mut store, &mut rng, "sa", 7).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(1, 3, 8, 8), 9);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = sa.forward(&mut p, xv).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        assert!(close(p.g.value(y).data(), &expect, 1e-15));
    }

    #[test]
    fn pixel_attention_zero_weights_gives_half_gate_of_right_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(10);
        let pa = PixelAttention::new(&mut store, &mut rng, "pa", 5).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(2, 5, 4, 3), 11);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x).unwrap();
        let gate = pa.forward(&mut p, xv).unwrap();
        assert_eq!(p.g.shape(gate), Shape::new(2, 1, 4, 3));
        assert!(p.g.value(gate).data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn upsample_and_downsample_blocks_change_shape_by_two() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(12);
        let up = UpsampleBlock::new(&mut store, &mut rng, "up", 8).unwrap();
        let down = DownsampleBlock::new(&mut store, &mut rng, "down", 8).unwrap();
        let x: Tensor<f32> =
            crate::params::uniform_tensor(&mut seeded_rng(13), Shape::new(1, 8, 8, 8), 1.0);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x).unwrap();
        let u = up.forward(&mut p, xv).unwrap();
        assert_eq!(p.g.shape(u), Shape::new(1, 8, 16, 16));
        let d = down.forward(&mut p, u).unwrap();
        assert_eq!(p.g.shape(d), Shape::new(1, 8, 8, 8));
        assert_eq!(p.bn_updates.len(), 2);
    }

    #[test]
    fn hourglass_depth_two_triples_constant_input() {
        // Zero residual convs make every residual block the identity; max
        // pooling and nearest upsampling leave constants alone, so each of
        // the two levels adds one extra copy of the input.
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(14);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 2, 2).unwrap();
        store.zero_trainable();
        let x = Tensor::full(Shape::new(1, 2, 8, 8), 0.7);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x).unwrap();
        let y = hg.forward(&mut p, xv).unwrap();
        for &v in p.g.value(y).data() {
            assert!((v - 3.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn hourglass_depth_zero_is_one_residual_block() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(15);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 2, 0).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(1, 2, 5, 5), 16);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = hg.forward(&mut p, xv).unwrap();
        assert_eq!(p.g.value(y).data(), x.data());
    }

    #[test]
    fn hourglass_rejects_indivisible_sizes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(17);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 2, 4).unwrap();
        let x = Tensor::zeros(Shape::new(1, 2, 24, 24)); // 24 % 16 != 0
        let mut p = Pass::new(&store, true);
        let xv = p.input(x).unwrap();
        let err = hg.forward(&mut p, xv).unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn mhsa_single_position_returns_value_branch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(18);
        let mhsa = Mhsa::new(&mut store, &mut rng, "mhsa", 8, 4).unwrap();
        let x = seeded_input(Shape::new(2, 8, 1, 1), 19);

        let mut p1 = Pass::new(&store, true);
        let xv = p1.input(x.clone()).unwrap();
        let y = mhsa.forward(&mut p1, xv).unwrap();

        let mut p2 = Pass::new(&store, true);
        let xv2 = p2.input(x).unwrap();
        let v = mhsa.value_branch(&mut p2, xv2).unwrap();

        assert!(close(p1.g.value(y).data(), p2.g.value(v).data(), 1e-12));
    }

    #[test]
    fn mhsa_requires_heads_to_divide_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(20);
        assert!(Mhsa::new(&mut store, &mut rng, "m", 6, 4).is_err());
    }

    #[test]
    fn rcab_and_scab_zero_weights_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(21);
        let scab = Scab::new(&mut store, &mut rng, "scab", 16, 4, 16, true).unwrap();
        store.zero_trainable();
        let x = seeded_input(Shape::new(1, 16, 4, 4), 22);
        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = scab.forward(&mut p, xv).unwrap();
        assert!(close(p.g.value(y).data(), x.data(), 1e-15));
    }

    #[test]
    fn scab_without_mhsa_matches_bare_rcab() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        // Same seed so the shared RCAB weights coincide.
        let scab = Scab::new(&mut s1, &mut seeded_rng(23), "b", 8, 4, 4, false).unwrap();
        let rcab = Rcab::new(&mut s2, &mut seeded_rng(23), "b.rcab", 8, 4).unwrap();
        let x = seeded_input(Shape::new(1, 8, 4, 4), 24);
        let mut p1 = Pass::new(&s1, true);
        let xv1 = p1.input(x.clone()).unwrap();
        let y1 = scab.forward(&mut p1, xv1).unwrap();
        let mut p2 = Pass::new(&s2, true);
        let xv2 = p2.input(x).unwrap();
        let y2 = rcab.forward(&mut p2, xv2).unwrap();
        assert_eq!(p1.g.value(y1).data(), p2.g.value(y2).data());
    }

    #[test]
    fn batchnorm_constant_input_trains_to_beta_and_eval_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::full(Shape::new(2, 2, 3, 3), 5.0);

        let mut p = Pass::new(&store, true);
        let xv = p.input(x.clone()).unwrap();
        let y = bn.forward(&mut p, xv).unwrap();
        // gamma=1, beta=0, zero variance -> all zeros
        assert!(p.g.value(y).data().iter().all(|&v| v == 0.0));
        let updates = std::mem::take(&mut p.bn_updates);
        drop(p);
        apply_bn_updates(&mut store, updates);
        // momentum 0.1 against mean 0 / var 1 initial buffers
        let rm = store.value(bn.running_mean).data()[0];
        assert!((rm - 0.5).abs() < 1e-12, "running mean {rm}");
        let rv = store.value(bn.running_var).data()[0];
        assert!((rv - 0.9).abs() < 1e-12, "running var {rv}");

        // eval mode with identity-ish stats roughly preserves the input
        let mut store2 = ParamStore::<f64>::new();
        let bn2 = BatchNorm2d::new(&mut store2, "bn", 2).unwrap();
        let mut pe = Pass::new(&store2, false);
        let xe = pe.input(x.clone()).unwrap();
        let ye = bn2.forward(&mut pe, xe).unwrap();
        for (a, b) in pe.g.value(ye).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
