//! Reverse-mode autodiff over rank-4 tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding the eagerly
//! computed output value plus enough bookkeeping to run the chain rule
//! backwards. Handles into the tape are small [`Var`] ids. A graph is built
//! fresh for every forward pass; [`Graph::backward`] may run once per graph
//! and accumulates gradients additively, so a value feeding several
//! consumers receives the sum of their contributions.
//!
//! Interior gradients are consumed during the sweep. Leaf gradients survive
//! and are read back with [`Graph::grad`]. [`Graph::backward_and_free`]
//! additionally drops interior activation values as soon as the sweep no
//! longer needs them, which roughly halves peak memory for deep models —
//! the training loop uses it; tests that want to inspect values afterwards
//! use plain [`Graph::backward`].

use crate::error::{Error, Result};
use crate::kernels::batchnorm as bn;
use crate::kernels::conv::{self, ConvDims, DepthwiseDims};
use crate::kernels::elementwise as ew;
use crate::kernels::matmul::{self, MatMulDims};
use crate::kernels::pool;
use crate::kernels::resize;
use crate::kernels::shuffle;
use crate::kernels::softmax;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<E: Scalar> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    DepthwiseConv2d { x: usize, w: usize, pad: usize },
    /// `mean`/`inv_std` are the statistics actually used to normalize
    /// (batch stats in training, running stats in eval), saved as length-C
    /// vectors so backward can rebuild normalized activations cheaply.
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E>, training: bool },
    Relu { x: usize },
    Sigmoid { x: usize },
    SoftmaxLast { x: usize },
    AddN { xs: Vec<usize> },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, mul: E },
    ScaleChannels { x: usize, g: usize },
    ScaleSpatial { x: usize, g: usize },
    LerpSpatial { a: usize, b: usize, t: usize },
    ConcatChannels { xs: Vec<usize> },
    GlobalAvgPool { x: usize },
    ChannelMean { x: usize },
    ChannelMax { x: usize, argc: Vec<u32> },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    UpsampleNearest { x: usize, f: usize },
    DownsampleNearest { x: usize, f: usize },
    PixelShuffle { x: usize, r: usize },
    PixelUnshuffle { x: usize, r: usize },
    MatMul { a: usize, b: usize },
    TransposeHW { x: usize },
    Reshape { x: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
}

struct Node<E: Scalar> {
    value: Option<Tensor<E>>,
    grad: Option<Tensor<E>>,
    op: Op<E>,
    needs_grad: bool,
    shape: Shape,
}

/// Autodiff tape. See the module docs for the lifecycle.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
    /// (first node id, label) pairs marking model stages for diagnostics.
    labels: Vec<(usize, String)>,
    value_bytes: u64,
    budget: Option<u64>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            labels: Vec::new(),
            value_bytes: 0,
            budget: None,
        }
    }

    /// Fail any op whose output would push total activation bytes past `bytes`.
    pub fn set_memory_budget(&mut self, bytes: u64) {
        self.budget = Some(bytes);
    }

    /// Total bytes of activation values allocated so far.
    pub fn value_bytes(&self) -> u64 {
        self.value_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mark the ops recorded from here on with a stage label (diagnostics).
    pub fn label(&mut self, stage: impl Into<String>) {
        self.labels.push((self.nodes.len(), stage.into()));
    }

    /// Stage label covering node `v`, if any labels were recorded.
    fn stage_of(&self, id: usize) -> &str {
        let mut name = "unlabeled";
        for (start, label) in &self.labels {
            if *start <= id {
                name = label;
            } else {
                break;
            }
        }
        name
    }

    /// First node holding a non-finite value, reported by stage label.
    pub fn find_non_finite(&self) -> Option<String> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(v) = &node.value {
                if !v.all_finite() {
                    return Some(format!("{} (node {id}, shape {})", self.stage_of(id), node.shape));
                }
            }
        }
        None
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Value of `v`. Panics if the value was freed by `backward_and_free`.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("node value was freed during backward")
    }

    /// Gradient accumulated on a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Move a leaf gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.nodes[v.0].grad.take()
    }

    /// Check the budget, then record a computed node.
    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.value_bytes += (value.len() * std::mem::size_of::<E>()) as u64;
        let shape = value.shape();
        self.nodes.push(Node {
            value: Some(value),
            grad: None,
            op,
            needs_grad,
            shape,
        });
        Var(self.nodes.len() - 1)
    }

    /// Budget gate: called with the output length *before* allocating it.
    fn charge(&self, len: usize) -> Result<()> {
        if let Some(budget) = self.budget {
            let required = self.value_bytes + (len * std::mem::size_of::<E>()) as u64;
            if required > budget {
                return Err(Error::MemoryBudget { required, budget });
            }
        }
        Ok(())
    }

    fn val(&self, id: impl NodeId) -> &Tensor<E> {
        self.nodes[id.id()]
            .value
            .as_ref()
            .expect("input value freed before its consumers ran backward")
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---------------------------------------------------------------- leaves

    /// Insert a tensor as a leaf; `requires_grad` marks it for gradient
    /// extraction after backward.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        self.charge(value.len())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives gradients (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.leaf(value, false)
    }

    // ------------------------------------------------------------------ ops

    /// 2-D convolution with bias. Weight is `(cout, cin, k, k)` carried in a
    /// rank-4 tensor; bias is `(1, cout, 1, 1)`. Odd `k` only.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (cout, cin, k) = (ws.n, ws.c, ws.h);
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {ws}")));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if xs.c != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs.c, cin),
            ));
        }
        if bs != Shape::new(1, cout, 1, 1) {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be 1x{cout}x1x1, got {bs}"),
            ));
        }
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} does not fit input {xs} with padding {pad}"),
            ));
        }
        let d = ConvDims { n: xs.n, cin, h: xs.h, w: xs.w, cout, k, stride, pad };
        let out = Shape::new(xs.n, cout, d.out_h(), d.out_w());
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        conv::conv2d_fwd(
            self.val(x).data(),
            self.val(w).data(),
            Some(self.val(b).data()),
            &d,
            y.data_mut(),
        );
        let needs = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(y, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }, needs))
    }

    /// Depthwise 3x3-style convolution: one `k x k` filter per channel,
    /// stride 1, no bias. Weight is `(c, 1, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let k = ws.h;
        if ws.w != k || ws.c != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight must be Cx1xKxK, got {ws}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("depthwise_conv2d", format!("kernel size {k} must be odd")));
        }
        if ws.n != xs.c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {} channels, weight has {}", xs.c, ws.n),
            ));
        }
        let d = DepthwiseDims { n: xs.n, c: xs.c, h: xs.h, w: xs.w, k, pad };
        self.charge(xs.len())?;
        let mut y = Tensor::zeros(xs);
        conv::depthwise_fwd(self.val(x).data(), self.val(w).data(), &d, y.data_mut());
        let needs = self.needs(&[x.0, w.0]);
        Ok(self.push(y, Op::DepthwiseConv2d { x: x.0, w: w.0, pad }, needs))
    }

    /// Batch normalization. In training mode, normalizes by the batch
    /// statistics over (N, H, W) per channel and returns them (mean, biased
    /// variance) so the caller can maintain running stats. In eval mode,
    /// normalizes by the provided running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        training: bool,
        running: Option<(&Tensor<E>, &Tensor<E>)>,
    ) -> Result<(Var, Option<(Tensor<E>, Tensor<E>)>)> {
        let xs = self.shape(x);
        let c = xs.c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s != Shape::new(1, c, 1, 1) {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} must be 1x{c}x1x1, got {s}"),
                ));
            }
        }
        let (n, hw) = (xs.n, xs.hw());
        let (mean, var): (Vec<E>, Vec<E>) = if training {
            if n * hw == 1 {
                return Err(Error::DegenerateBatchNorm);
            }
            let mut mean = vec![E::ZERO; c];
            let mut var = vec![E::ZERO; c];
            bn::batch_stats(self.val(x).data(), n, c, hw, &mut mean, &mut var);
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::invalid("batchnorm2d", "eval mode requires running statistics")
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("running stats must have {c} channels, got {}/{}", rm.len(), rv.len()),
                ));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        };
        let inv_std: Vec<E> = var
            .iter()
            .map(|v| E::ONE / (*v + E::from_f64(eps)).sqrt())
            .collect();
        self.charge(xs.len())?;
        let mut y = Tensor::zeros(xs);
        bn::normalize_fwd(
            self.val(x).data(),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.val(gamma).data(),
            self.val(beta).data(),
            y.data_mut(),
        );
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        let stats = if training {
            let m = Tensor::from_vec(Shape::new(1, c, 1, 1), mean.clone())?;
            let v = Tensor::from_vec(Shape::new(1, c, 1, 1), var)?;
            Some((m, v))
        } else {
            None
        };
        let out = self.push(
            y,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std, training },
            needs,
        );
        Ok((out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        ew::relu_fwd(self.val(x).data(), y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::Relu { x: x.0 }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        ew::sigmoid_fwd(self.val(x).data(), y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::Sigmoid { x: x.0 }, needs))
    }

    /// Softmax over the last (W) axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        softmax::softmax_last_fwd(self.val(x).data(), s.w, y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::SoftmaxLast { x: x.0 }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of several same-shaped tensors in one node.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(Error::invalid("add_n", "needs at least one input"));
        };
        let s = self.shape(first);
        for v in rest {
            if self.shape(*v) != s {
                return Err(Error::shape(
                    "add_n",
                    format!("{} vs {}", s, self.shape(*v)),
                ));
            }
        }
        self.charge(s.len())?;
        let mut y = self.val(first).clone();
        for v in rest {
            for (y, &x) in y.data_mut().iter_mut().zip(self.nodes[v.0].value.as_ref().unwrap().data()) {
                *y += x;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(y, Op::AddN { xs: ids }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(b) != s {
            return Err(Error::shape("sub", format!("{} vs {}", s, self.shape(b))));
        }
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        ew::sub_fwd(self.val(a).data(), self.val(b).data(), y.data_mut());
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(y, Op::Sub { a: a.0, b: b.0 }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(b) != s {
            return Err(Error::shape("mul", format!("{} vs {}", s, self.shape(b))));
        }
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        ew::mul_fwd(self.val(a).data(), self.val(b).data(), y.data_mut());
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(y, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let s = self.shape(x);
        self.charge(s.len())?;
        let mut y = Tensor::zeros(s);
        ew::affine_fwd(self.val(x).data(), E::from_f64(mul), E::from_f64(add), y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::Affine { x: x.0, mul: E::from_f64(mul) }, needs))
    }

    /// Multiply by a per-channel gate of shape (N, C, 1, 1).
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::shape(
                "scale_channels",
                format!("gate must be {}x{}x1x1, got {gs}", xs.n, xs.c),
            ));
        }
        self.charge(xs.len())?;
        let mut y = Tensor::zeros(xs);
        ew::scale_channels_fwd(self.val(x).data(), self.val(g).data(), xs.hw(), y.data_mut());
        let needs = self.needs(&[x.0, g.0]);
        Ok(self.push(y, Op::ScaleChannels { x: x.0, g: g.0 }, needs))
    }

    /// Multiply by a per-pixel gate of shape (N, 1, H, W).
    pub fn scale_spatial(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if gs != Shape::new(xs.n, 1, xs.h, xs.w) {
            return Err(Error::shape(
                "scale_spatial",
                format!("gate must be {}x1x{}x{}, got {gs}", xs.n, xs.h, xs.w),
            ));
        }
        self.charge(xs.len())?;
        let mut y = Tensor::zeros(xs);
        ew::scale_spatial_fwd(self.val(x).data(), self.val(g).data(), xs.c, xs.hw(), y.data_mut());
        let needs = self.needs(&[x.0, g.0]);
        Ok(self.push(y, Op::ScaleSpatial { x: x.0, g: g.0 }, needs))
    }

    /// y = t*a + (1-t)*b with a per-pixel gate t of shape (N, 1, H, W).
    /// Each output lies between a and b whenever t is in [0, 1].
    pub fn lerp_spatial(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        let (as_, bs, ts) = (self.shape(a), self.shape(b), self.shape(t));
        if as_ != bs {
            return Err(Error::shape("lerp_spatial", format!("{as_} vs {bs}")));
        }
        if ts != Shape::new(as_.n, 1, as_.h, as_.w) {
            return Err(Error::shape(
                "lerp_spatial",
                format!("gate must be {}x1x{}x{}, got {ts}", as_.n, as_.h, as_.w),
            ));
        }
        self.charge(as_.len())?;
        let mut y = Tensor::zeros(as_);
        ew::lerp_spatial_fwd(
            self.val(a).data(),
            self.val(b).data(),
            self.val(t).data(),
            as_.c,
            as_.hw(),
            y.data_mut(),
        );
        let needs = self.needs(&[a.0, b.0, t.0]);
        Ok(self.push(y, Op::LerpSpatial { a: a.0, b: b.0, t: t.0 }, needs))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(Error::invalid("concat_channels", "needs at least one input"));
        };
        let s0 = self.shape(first);
        let mut c_total = s0.c;
        for v in rest {
            let s = self.shape(*v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s0} vs {s} differ outside the channel axis"),
                ));
            }
            c_total += s.c;
        }
        let out = Shape::new(s0.n, c_total, s0.h, s0.w);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        let hw = s0.hw();
        for n in 0..s0.n {
            let mut c_off = 0;
            for v in xs {
                let s = self.shape(*v);
                let src = self.val(*v);
                let src = &src.data()[n * s.c * hw..(n + 1) * s.c * hw];
                y.data_mut()[(n * c_total + c_off) * hw..(n * c_total + c_off + s.c) * hw]
                    .copy_from_slice(src);
                c_off += s.c;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(y, Op::ConcatChannels { xs: ids }, needs))
    }

    /// Mean over H and W per channel: (N, C, H, W) -> (N, C, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let out = Shape::new(s.n, s.c, 1, 1);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        pool::gap_fwd(self.val(x).data(), s.hw(), y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::GlobalAvgPool { x: x.0 }, needs))
    }

    /// Mean over channels per pixel: (N, C, H, W) -> (N, 1, H, W).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let out = Shape::new(s.n, 1, s.h, s.w);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        pool::channel_mean_fwd(self.val(x).data(), s.c, s.hw(), y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::ChannelMean { x: x.0 }, needs))
    }

    /// Max over channels per pixel; ties pick the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let out = Shape::new(s.n, 1, s.h, s.w);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        let mut argc = Vec::new();
        pool::channel_max_fwd(self.val(x).data(), s.c, s.hw(), y.data_mut(), &mut argc);
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::ChannelMax { x: x.0, argc }, needs))
    }

    /// 2x2 max pool, stride 2; ties route to the lowest flat index.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        for (what, value) in [("height", s.h), ("width", s.w)] {
            if value % 2 != 0 {
                return Err(Error::NotDivisible { op: "max_pool2", what, value, divisor: 2 });
            }
        }
        let out = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        let mut argmax = Vec::new();
        pool::maxpool2_fwd(self.val(x).data(), s.n * s.c, s.h, s.w, y.data_mut(), &mut argmax);
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::MaxPool2 { x: x.0, argmax }, needs))
    }

    /// Nearest-neighbor upsample by an integer factor (block replication).
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let s = self.shape(x);
        let out = Shape::new(s.n, s.c, s.h * f, s.w * f);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        resize::upsample_nearest_fwd(self.val(x).data(), s.n * s.c, s.h, s.w, f, y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::UpsampleNearest { x: x.0, f }, needs))
    }

    /// Nearest-neighbor downsample by an integer factor (keep top-left).
    pub fn downsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(Error::invalid("downsample_nearest", "factor must be >= 1"));
        }
        let s = self.shape(x);
        for (what, value) in [("height", s.h), ("width", s.w)] {
            if value % f != 0 {
                return Err(Error::NotDivisible { op: "downsample_nearest", what, value, divisor: f });
            }
        }
        let out = Shape::new(s.n, s.c, s.h / f, s.w / f);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        resize::downsample_nearest_fwd(self.val(x).data(), s.n * s.c, s.h, s.w, f, y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::DownsampleNearest { x: x.0, f }, needs))
    }

    /// (N, C*r^2, H, W) -> (N, C, H*r, W*r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        if r == 0 {
            return Err(Error::invalid("pixel_shuffle", "factor must be >= 1"));
        }
        let s = self.shape(x);
        if s.c % (r * r) != 0 {
            return Err(Error::NotDivisible {
                op: "pixel_shuffle",
                what: "channels",
                value: s.c,
                divisor: r * r,
            });
        }
        let c_out = s.c / (r * r);
        let out = Shape::new(s.n, c_out, s.h * r, s.w * r);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        shuffle::pixel_shuffle_fwd(self.val(x).data(), s.n, c_out, s.h, s.w, r, y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::PixelShuffle { x: x.0, r }, needs))
    }

    /// (N, C, H, W) -> (N, C*r^2, H/r, W/r). Exact inverse of pixel_shuffle.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        if r == 0 {
            return Err(Error::invalid("pixel_unshuffle", "factor must be >= 1"));
        }
        let s = self.shape(x);
        for (what, value) in [("height", s.h), ("width", s.w)] {
            if value % r != 0 {
                return Err(Error::NotDivisible { op: "pixel_unshuffle", what, value, divisor: r });
            }
        }
        let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
        self.charge(out.len())?;
        let mut y = Tensor::zeros(out);
        shuffle::pixel_unshuffle_fwd(self.val(x).data(), s.n, s.c, s.h, s.w, r, y.data_mut());
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::PixelUnshuffle { x: x.0, r }, needs))
    }

    /// Batched matrix multiply over the trailing two axes:
    /// (N, C, M, K) x (N, C, K, P) -> (N, C, M, P).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.c != sb.c {
            return Err(Error::shape(
                "matmul",
                format!("batch dims differ: {sa} vs {sb}"),
            ));
        }
        if sa.w != sb.h {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {sa} vs {sb}"),
            ));
        }
        let out = Shape::new(sa.n, sa.c, sa.h, sb.w);
        self.charge(out.len())?;
        let d = MatMulDims { batch: sa.n * sa.c, m: sa.h, k: sa.w, p: sb.w };
        let mut y = Tensor::zeros(out);
        matmul::matmul_fwd(self.val(a).data(), self.val(b).data(), &d, y.data_mut());
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(y, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    /// Swap the trailing two axes: (N, C, H, W) -> (N, C, W, H).
    pub fn transpose_hw(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let out = Shape::new(s.n, s.c, s.w, s.h);
        self.charge(out.len())?;
        let y = transpose_hw_tensor(self.val(x));
        let needs = self.needs(&[x.0]);
        let _ = out;
        Ok(self.push(y, Op::TransposeHW { x: x.0 }, needs))
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != shape.len() {
            return Err(Error::shape(
                "reshape",
                format!("{s} -> {shape} changes element count"),
            ));
        }
        self.charge(shape.len())?;
        let y = self.val(x).clone().reshaped(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::Reshape { x: x.0 }, needs))
    }

    /// Mean over every element -> 1x1x1x1 scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.charge(1)?;
        let mean = self.val(x).sum_f64() / s.len() as f64;
        let y = Tensor::from_vec(Shape::scalar(), vec![E::from_f64(mean)])?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::MeanAll { x: x.0 }, needs))
    }

    /// Sum over every element -> 1x1x1x1 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.charge(1)?;
        let sum = self.val(x).sum_f64();
        let y = Tensor::from_vec(Shape::scalar(), vec![E::from_f64(sum)])?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(y, Op::SumAll { x: x.0 }, needs))
    }

    // ------------------------------------------------------------- backward

    /// Run the chain rule from `loss` (must be 1x1x1x1) down to the leaves.
    /// Interior activation values are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Like [`Graph::backward`] but frees interior values and gradients as
    /// soon as the sweep is done with them. Use for big training graphs.
    pub fn backward_and_free(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: Var, free: bool) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss { shape: shape.to_string() });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::full(Shape::scalar(), E::ONE));
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                // Constant subgraphs never receive or propagate gradients.
                self.nodes[id].grad = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep leaf gradients for extraction
            }
            let Some(grad) = self.nodes[id].grad.take() else {
                continue; // not on any path from the loss
            };
            self.backprop_node(id, grad)?;
            if free {
                self.nodes[id].value = None;
            }
        }
        Ok(())
    }

    /// Add `delta` into the gradient accumulator of node `id`, moving the
    /// buffer when it is the first contribution.
    fn accum(&mut self, id: usize, delta: Tensor<E>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => g
                .add_assign(&delta)
                .expect("gradient shape mismatch is a graph bug"),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: usize, dy: Tensor<E>) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[x].shape;
                let ws = self.nodes[w].shape;
                let d = ConvDims {
                    n: xs.n,
                    cin: xs.c,
                    h: xs.h,
                    w: xs.w,
                    cout: ws.n,
                    k: ws.h,
                    stride,
                    pad,
                };
                if self.nodes[x].needs_grad {
                    let mut dx = Tensor::zeros(xs);
                    conv::conv2d_bwd_input(dy.data(), self.val(w).data(), &d, dx.data_mut());
                    self.accum(x, dx);
                }
                if self.nodes[w].needs_grad || self.nodes[b].needs_grad {
                    let mut dw = Tensor::zeros(ws);
                    let mut db = Tensor::zeros(self.nodes[b].shape);
                    conv::conv2d_bwd_weight(
                        self.val(x).data(),
                        dy.data(),
                        &d,
                        dw.data_mut(),
                        Some(db.data_mut()),
                    );
                    self.accum(w, dw);
                    self.accum(b, db);
                }
            }
            Op::DepthwiseConv2d { x, w, pad } => {
                let xs = self.nodes[x].shape;
                let ws = self.nodes[w].shape;
                let d = DepthwiseDims { n: xs.n, c: xs.c, h: xs.h, w: xs.w, k: ws.h, pad };
                let mut dx = Tensor::zeros(xs);
                let mut dw = Tensor::zeros(ws);
                conv::depthwise_bwd(
                    self.val(x).data(),
                    dy.data(),
                    self.val(w).data(),
                    &d,
                    dx.data_mut(),
                    dw.data_mut(),
                );
                self.accum(x, dx);
                self.accum(w, dw);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
                let xs = self.nodes[x].shape;
                let (n, c, hw) = (xs.n, xs.c, xs.hw());
                let mut dx = Tensor::zeros(xs);
                let mut dgamma = Tensor::zeros(self.nodes[gamma].shape);
                let mut dbeta = Tensor::zeros(self.nodes[beta].shape);
                let bwd = if training { bn::normalize_bwd_train } else { bn::normalize_bwd_eval };
                bwd(
                    self.val(x).data(),
                    dy.data(),
                    n,
                    c,
                    hw,
                    &mean,
                    &inv_std,
                    self.val(gamma).data(),
                    dx.data_mut(),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                );
                self.accum(x, dx);
                self.accum(gamma, dgamma);
                self.accum(beta, dbeta);
            }
            Op::Relu { x } => {
                let mut dx = Tensor::zeros(self.nodes[x].shape);
                ew::relu_bwd(self.val(x).data(), dy.data(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::Sigmoid { x } => {
                let y = self.val_of(id);
                let mut dx = Tensor::zeros(self.nodes[x].shape);
                ew::sigmoid_bwd(y.data(), dy.data(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::SoftmaxLast { x } => {
                let y = self.val_of(id);
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                softmax::softmax_last_bwd(y.data(), dy.data(), s.w, dx.data_mut());
                self.accum(x, dx);
            }
            Op::AddN { xs } => {
                for (i, &x) in xs.iter().enumerate() {
                    if !self.nodes[x].needs_grad {
                        continue;
                    }
                    if i == xs.len() - 1 {
                        self.accum(x, dy);
                        break;
                    }
                    self.accum(x, dy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[b].needs_grad {
                    let mut db = Tensor::zeros(dy.shape());
                    for (d, &g) in db.data_mut().iter_mut().zip(dy.data()) {
                        *d -= g;
                    }
                    self.accum(b, db);
                }
                self.accum(a, dy);
            }
            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let mut da = Tensor::zeros(dy.shape());
                    ew::mul_fwd(dy.data(), self.val(b).data(), da.data_mut());
                    self.accum(a, da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = Tensor::zeros(dy.shape());
                    ew::mul_fwd(dy.data(), self.val(a).data(), db.data_mut());
                    self.accum(b, db);
                }
            }
            Op::Affine { x, mul } => {
                let mut dx = Tensor::zeros(dy.shape());
                ew::affine_bwd(mul, dy.data(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::ScaleChannels { x, g } => {
                let xs = self.nodes[x].shape;
                let mut dx = Tensor::zeros(xs);
                let mut dg = Tensor::zeros(self.nodes[g].shape);
                ew::scale_channels_bwd(
                    self.val(x).data(),
                    self.val(g).data(),
                    dy.data(),
                    xs.hw(),
                    dx.data_mut(),
                    dg.data_mut(),
                );
                self.accum(x, dx);
                self.accum(g, dg);
            }
            Op::ScaleSpatial { x, g } => {
                let xs = self.nodes[x].shape;
                let mut dx = Tensor::zeros(xs);
                let mut dg = Tensor::zeros(self.nodes[g].shape);
                ew::scale_spatial_bwd(
                    self.val(x).data(),
                    self.val(g).data(),
                    dy.data(),
                    xs.c,
                    xs.hw(),
                    dx.data_mut(),
                    dg.data_mut(),
                );
                self.accum(x, dx);
                self.accum(g, dg);
            }
            Op::LerpSpatial { a, b, t } => {
                let s = self.nodes[a].shape;
                let mut da = Tensor::zeros(s);
                let mut db = Tensor::zeros(s);
                let mut dt = Tensor::zeros(self.nodes[t].shape);
                ew::lerp_spatial_bwd(
                    self.val(a).data(),
                    self.val(b).data(),
                    self.val(t).data(),
                    dy.data(),
                    s.c,
                    s.hw(),
                    da.data_mut(),
                    db.data_mut(),
                    dt.data_mut(),
                );
                self.accum(a, da);
                self.accum(b, db);
                self.accum(t, dt);
            }
            Op::ConcatChannels { xs } => {
                let out_s = self.nodes[id].shape;
                let hw = out_s.hw();
                let mut c_off = 0;
                for &x in &xs {
                    let s = self.nodes[x].shape;
                    if self.nodes[x].needs_grad {
                        let mut dx = Tensor::zeros(s);
                        for n in 0..s.n {
                            let src = &dy.data()
                                [(n * out_s.c + c_off) * hw..(n * out_s.c + c_off + s.c) * hw];
                            dx.data_mut()[n * s.c * hw..(n + 1) * s.c * hw].copy_from_slice(src);
                        }
                        self.accum(x, dx);
                    }
                    c_off += s.c;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                pool::gap_bwd(dy.data(), s.hw(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::ChannelMean { x } => {
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                pool::channel_mean_bwd(dy.data(), s.c, s.hw(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::ChannelMax { x, argc } => {
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                pool::channel_max_bwd(dy.data(), &argc, s.c, s.hw(), dx.data_mut());
                self.accum(x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.nodes[x].shape);
                pool::maxpool2_bwd(dy.data(), &argmax, dx.data_mut());
                self.accum(x, dx);
            }
            Op::UpsampleNearest { x, f } => {
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                resize::upsample_nearest_bwd(dy.data(), s.n * s.c, s.h, s.w, f, dx.data_mut());
                self.accum(x, dx);
            }
            Op::DownsampleNearest { x, f } => {
                let s = self.nodes[x].shape;
                let mut dx = Tensor::zeros(s);
                resize::downsample_nearest_bwd(dy.data(), s.n * s.c, s.h, s.w, f, dx.data_mut());
                self.accum(x, dx);
            }
            Op::PixelShuffle { x, r } => {
                // The gradient of a permutation is its inverse permutation.
                let s = self.nodes[x].shape;
                let ys = self.nodes[id].shape;
                let mut dx = Tensor::zeros(s);
                shuffle::pixel_unshuffle_fwd(dy.data(), ys.n, ys.c, ys.h, ys.w, r, dx.data_mut());
                self.accum(x, dx);
            }
            Op::PixelUnshuffle { x, r } => {
                let s = self.nodes[x].shape;
                let ys = self.nodes[id].shape;
                let c_out = ys.c / (r * r);
                let mut dx = Tensor::zeros(s);
                shuffle::pixel_shuffle_fwd(dy.data(), ys.n, c_out, ys.h, ys.w, r, dx.data_mut());
                self.accum(x, dx);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
                let d = MatMulDims { batch: sa.n * sa.c, m: sa.h, k: sa.w, p: sb.w };
                let mut da = Tensor::zeros(sa);
                let mut db = Tensor::zeros(sb);
                matmul::matmul_bwd(
                    self.val(a).data(),
                    self.val(b).data(),
                    dy.data(),
                    &d,
                    da.data_mut(),
                    db.data_mut(),
                );
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::TransposeHW { x } => {
                let dx = transpose_hw_tensor(&dy);
                self.accum(x, dx);
            }
            Op::Reshape { x } => {
                let s = self.nodes[x].shape;
                let dx = dy.reshaped(s)?;
                self.accum(x, dx);
            }
            Op::MeanAll { x } => {
                let s = self.nodes[x].shape;
                let g = dy.data()[0] * E::from_f64(1.0 / s.len() as f64);
                self.accum(x, Tensor::full(s, g));
            }
            Op::SumAll { x } => {
                let s = self.nodes[x].shape;
                self.accum(x, Tensor::full(s, dy.data()[0]));
            }
        }
        Ok(())
    }

    /// Own value of a node mid-backward (used by ops whose derivative is
    /// expressed through their output).
    fn val_of(&self, id: usize) -> &Tensor<E> {
        self.nodes[id]
            .value
            .as_ref()
            .expect("own value must outlive the node's backward step")
    }
}

/// Accept either a public [`Var`] handle or a raw node index internally.
trait NodeId: Copy {
    fn id(self) -> usize;
}

impl NodeId for usize {
    fn id(self) -> usize {
        self
    }
}

impl NodeId for Var {
    fn id(self) -> usize {
        self.0
    }
}

fn transpose_hw_tensor<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, s.w, s.h));
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.hw()..(nc + 1) * s.hw()];
        let dst = &mut y.data_mut()[nc * s.hw()..(nc + 1) * s.hw()];
        for h in 0..s.h {
            for w in 0..s.w {
                dst[w * s.h + h] = src[h * s.w + w];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn linear_chain_gradient_is_exact() {
        // loss = sum(w * x): d loss / d w = x exactly.
        let mut g = Graph::<f64>::new();
        let x = g.constant(t((1, 1, 1, 3), vec![2.0, -3.0, 5.0])).unwrap();
        let w = g.leaf(t((1, 1, 1, 3), vec![1.0, 1.0, 1.0]), true).unwrap();
        let y = g.mul(w, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, -3.0, 5.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn aliased_inputs_accumulate_additively() {
        // loss = sum(x * x): gradient 2x comes from two contributions.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), vec![3.0, -4.0]), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn reused_subexpression_sums_gradients() {
        // loss = sum(y + y) where y = 2x: dloss/dx = 4.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 1), vec![1.5]), true).unwrap();
        let y = g.affine(x, 2.0, 0.0).unwrap();
        let z = g.add(y, y).unwrap();
        let loss = g.sum_all(z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 1), vec![1.0]), true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 2), vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 1, 1), vec![1.0]), true).unwrap();
        let unused = g.leaf(t((1, 1, 1, 1), vec![9.0]), true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn memory_budget_blocks_before_allocating() {
        let mut g = Graph::<f32>::new();
        g.set_memory_budget(64);
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false).unwrap(); // 16 bytes
        let _y = g.relu(x).unwrap(); // 32 total
        let err = g.upsample_nearest(x, 4).unwrap_err(); // would add 256
        assert!(matches!(err, Error::MemoryBudget { .. }));
        // graph still usable afterwards
        assert!(g.relu(x).is_ok());
    }

    #[test]
    fn backward_and_free_keeps_leaves_and_loss_value_readable_before() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let y = g.relu(x).unwrap();
        let loss = g.mean_all(y).unwrap();
        let loss_value = g.value(loss).data()[0];
        assert_eq!(loss_value, 2.5);
        g.backward_and_free(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
        // leaf value still present
        assert_eq!(g.value(x).data()[3], 4.0);
    }

    #[test]
    fn concat_routes_gradients_to_the_right_slices() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t((1, 1, 1, 2), vec![1.0, 2.0]), true).unwrap();
        let b = g.leaf(t((1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]), true).unwrap();
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), Shape::new(1, 3, 1, 2));
        // weight the channels differently so routing errors show up
        let w = g.constant(t((1, 3, 1, 2), vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0])).unwrap();
        let y = g.mul(cat, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn softmax_uniform_row_has_uniform_output() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t((1, 1, 2, 4), vec![0.5; 8])).unwrap();
        let y = g.softmax_last(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn stage_labels_resolve_non_finite_values() {
        let mut g = Graph::<f32>::new();
        g.label("input");
        let x = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 1.0)).unwrap();
        g.label("explode");
        let big = g.affine(x, f64::MAX, 0.0).unwrap();
        let _sq = g.mul(big, big).unwrap(); // overflows to +inf
        let report = g.find_non_finite().unwrap();
        assert!(report.contains("explode"), "{report}");
    }
}
