//! The full W-shaped super-resolution network.
//!
//! A forward pass bicubic-interpolates the raw LR input up to HR size,
//! predicts a soft parsing map from it, builds a nearest-neighbor pyramid
//! of that map, then runs three phases whose spatial trace draws the W:
//!
//! 1. **Front**: direct fusion of image+map, then three upsample stages to
//!    8x HR and three downsample stages back, fusing the matching pyramid
//!    scale after every resize — seven fusion events in total.
//! 2. **Encoder**: four stages of cascaded SCABs, downsample, and fusion
//!    with the pyramid at the new scale, down to HR/16.
//! 3. **Decoder**: four upsample-then-SCABs stages back to HR, and a 3x3
//!    head projecting to RGB.
//!
//! Counters for the fusion/upsample events are returned with every forward
//! and are also available without weights via [`WNetConfig::shape_walk`].

use rand::Rng;

use crate::data::resample::bicubic_resize;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Conv2d, DownsampleBlock, Scab, UpsampleBlock};
use crate::lpf::{Lpf, LpfConfig};
use crate::params::{ParamStore, Pass};
use crate::parsing::{MultiScaleAttention, ParsingBlock, ParsingConfig};
use crate::tensor::{Scalar, Tensor};

/// Structure switches mirroring the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Full fusion blocks (true) or the basic concat cascade (false).
    pub use_lpf: bool,
    /// Full parsing trunk (true) or two plain convs (false).
    pub use_parsing_block: bool,
    /// Self-attention inside SCABs (true) or bare RCABs (false).
    pub use_scab: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { use_lpf: true, use_parsing_block: true, use_scab: true }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WNetConfig {
    /// HR side length; divisible by 16 and by 2^hourglass_depth.
    pub hr_size: usize,
    /// Degradation factor between HR and the raw LR input (4 or 8).
    pub scale: usize,
    /// Trunk width.
    pub channels: usize,
    /// Self-attention heads.
    pub heads: usize,
    /// Cascaded SCABs per encoder/decoder stage.
    pub scab_per_stage: usize,
    /// Parsing-trunk hourglass depth.
    pub hourglass_depth: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    pub ablation: Ablation,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl Default for WNetConfig {
    fn default() -> Self {
        WNetConfig {
            hr_size: 32,
            scale: 4,
            channels: 64,
            heads: crate::layers::MHSA_HEADS,
            scab_per_stage: 2,
            hourglass_depth: 4,
            ca_reduction: crate::layers::CA_REDUCTION,
            sa_kernel: crate::layers::SA_KERNEL,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

/// Fusion/upsample counters plus the spatial side lengths visited by each
/// phase. Computable with weights (forward) or without (shape walk).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkReport {
    pub front_fusions: usize,
    pub encoder_fusions: usize,
    pub decoder_upsamples: usize,
    /// Side length after each front fusion: H, 2H, 4H, 8H, 4H, 2H, H.
    pub front_sizes: Vec<usize>,
    /// Side length after each encoder stage: H/2 ... H/16.
    pub encoder_sizes: Vec<usize>,
    /// Side length after each decoder stage: H/8 ... H.
    pub decoder_sizes: Vec<usize>,
}

impl WNetConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.hr_size;
        if h % 16 != 0 {
            return Err(Error::NotDivisible { op: "wnet_config", what: "hr_size", value: h, divisor: 16 });
        }
        let hg = 1usize << self.hourglass_depth;
        if self.ablation.use_parsing_block && h % hg != 0 {
            return Err(Error::NotDivisible { op: "wnet_config", what: "hr_size", value: h, divisor: hg });
        }
        if self.scale != 4 && self.scale != 8 {
            return Err(Error::invalid("wnet_config", format!("scale must be 4 or 8, got {}", self.scale)));
        }
        if self.hr_size % self.scale != 0 {
            return Err(Error::NotDivisible {
                op: "wnet_config",
                what: "hr_size",
                value: h,
                divisor: self.scale,
            });
        }
        let c = self.channels;
        if c == 0 || c % 2 != 0 {
            return Err(Error::invalid("wnet_config", format!("channels must be positive and even, got {c}")));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::NotDivisible { op: "wnet_config", what: "channels", value: c, divisor: self.heads.max(1) });
        }
        if self.ca_reduction == 0 || c % self.ca_reduction != 0 {
            return Err(Error::NotDivisible {
                op: "wnet_config",
                what: "channels",
                value: c,
                divisor: self.ca_reduction.max(1),
            });
        }
        if self.ablation.use_parsing_block {
            let wide = MultiScaleAttention::wide_channels(c);
            if wide % self.ca_reduction != 0 {
                return Err(Error::NotDivisible {
                    op: "wnet_config",
                    what: "attention-unit channels",
                    value: wide,
                    divisor: self.ca_reduction,
                });
            }
        }
        if self.scab_per_stage == 0 {
            return Err(Error::invalid("wnet_config", "scab_per_stage must be >= 1"));
        }
        if self.sa_kernel % 2 == 0 {
            return Err(Error::invalid("wnet_config", format!("sa_kernel {} must be odd", self.sa_kernel)));
        }
        Ok(())
    }

    /// Peak front-end activation estimate in bytes for one tensor at the
    /// widest point: `batch * channels * (8H)^2 * 4`.
    pub fn front_bytes_estimate(&self, batch: usize) -> u64 {
        (batch * self.channels) as u64 * (8 * self.hr_size as u64).pow(2) * 4
    }

    /// Counters and spatial trace as pure arithmetic — no parameters, no
    /// activations. `hr` overrides the configured size (the audit walks
    /// H=128 without building weights for it).
    pub fn shape_walk(&self, hr: usize) -> WalkReport {
        let mut front_sizes = Vec::with_capacity(7);
        let mut size = hr;
        front_sizes.push(size); // direct fusion at H
        for _ in 0..3 {
            size *= 2;
            front_sizes.push(size);
        }
        for _ in 0..3 {
            size /= 2;
            front_sizes.push(size);
        }
        let encoder_sizes: Vec<usize> = (1..=4).map(|i| hr >> i).collect();
        let decoder_sizes: Vec<usize> = (0..4).map(|i| (hr >> 3) << i).collect();
        WalkReport {
            front_fusions: front_sizes.len(),
            encoder_fusions: encoder_sizes.len(),
            decoder_upsamples: decoder_sizes.len(),
            front_sizes,
            encoder_sizes,
            decoder_sizes,
        }
    }
}

struct FrontStage {
    pre: Conv2d,
    resize: ResizeBlock,
    lpf: Lpf,
    /// Pyramid factor relative to HR: factor 2 means the 2H map, etc.
    up_factor: usize,
}

enum ResizeBlock {
    Up(UpsampleBlock),
    Down(DownsampleBlock),
}

struct EncoderStage {
    scabs: Vec<Scab>,
    down: DownsampleBlock,
    lpf: Lpf,
    down_factor: usize,
}

struct DecoderStage {
    up: UpsampleBlock,
    scabs: Vec<Scab>,
}

/// Nearest-resampled copies of the parsing prediction, as graph vars so
/// gradients flow back into the parsing block from every fusion site.
struct Pyramid {
    base: Var,
    ups: [(usize, Var); 3],   // factors 2, 4, 8
    downs: [(usize, Var); 4], // factors 2, 4, 8, 16
}

impl Pyramid {
    fn build<E: Scalar>(p: &mut Pass<E>, base: Var) -> Result<Self> {
        Ok(Pyramid {
            base,
            ups: [
                (2, p.g.upsample_nearest(base, 2)?),
                (4, p.g.upsample_nearest(base, 4)?),
                (8, p.g.upsample_nearest(base, 8)?),
            ],
            downs: [
                (2, p.g.downsample_nearest(base, 2)?),
                (4, p.g.downsample_nearest(base, 4)?),
                (8, p.g.downsample_nearest(base, 8)?),
                (16, p.g.downsample_nearest(base, 16)?),
            ],
        })
    }

    fn up(&self, factor: usize) -> Var {
        if factor == 1 {
            return self.base;
        }
        self.ups.iter().find(|(f, _)| *f == factor).expect("front factors are 1/2/4/8").1
    }

    fn down(&self, factor: usize) -> Var {
        self.downs.iter().find(|(f, _)| *f == factor).expect("encoder factors are 2/4/8/16").1
    }
}

/// Everything one training step needs from a forward pass. The [`Pass`]
/// carries the graph (for backward) and pending batch-norm updates.
pub struct ForwardOut<'s, E: Scalar> {
    pub pass: Pass<'s, E>,
    /// Raw (unclamped) SR prediction, (N, 3, H, W).
    pub sr: Var,
    /// Soft parsing map, (N, 3, H, W).
    pub parsing: Var,
    pub report: WalkReport,
}

pub struct WNet {
    cfg: WNetConfig,
    parsing: ParsingBlock,
    fusion1: Conv2d,
    front: Vec<FrontStage>,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl WNet {
    /// Build the network, registering every parameter in `store`. All
    /// random draws come from a stream seeded with `cfg.seed`, so the same
    /// config yields bitwise-identical parameters.
    pub fn new<E: Scalar>(store: &mut ParamStore<E>, cfg: WNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::params::seeded_rng(cfg.seed);
        Self::with_rng(store, &mut rng, cfg)
    }

    fn with_rng<E: Scalar, R: Rng>(store: &mut ParamStore<E>, rng: &mut R, cfg: WNetConfig) -> Result<Self> {
        let c = cfg.channels;
        let parsing_cfg = ParsingConfig {
            channels: c,
            hourglass_depth: cfg.hourglass_depth,
            ca_reduction: cfg.ca_reduction,
            sa_kernel: cfg.sa_kernel,
            plain_trunk: !cfg.ablation.use_parsing_block,
        };
        let lpf_cfg = LpfConfig {
            channels: c,
            parsing_channels: 3,
            ca_reduction: cfg.ca_reduction,
            sa_kernel: cfg.sa_kernel,
        };
        let parsing = ParsingBlock::new(store, rng, "parsing", parsing_cfg)?;
        let fusion1 = Conv2d::new(store, rng, "front.fusion1", 6, c, 3)?;

        // Front fusions 2..=7: three upsampling stages to 8H, three
        // downsampling stages back to H, each fusing the matching scale.
        let mut front = Vec::with_capacity(6);
        for (i, &(is_up, factor)) in [
            (true, 2usize),
            (true, 4),
            (true, 8),
            (false, 4),
            (false, 2),
            (false, 1),
        ]
        .iter()
        .enumerate()
        {
            let fusion_index = i + 2;
            let name = format!("front.fusion{fusion_index}");
            let pre = Conv2d::new(store, rng, &format!("{name}.pre"), c, c, 3)?;
            let resize = if is_up {
                ResizeBlock::Up(UpsampleBlock::new(store, rng, &format!("{name}.up"), c)?)
            } else {
                ResizeBlock::Down(DownsampleBlock::new(store, rng, &format!("{name}.down"), c)?)
            };
            let lpf = Lpf::new(store, rng, &format!("{name}.lpf"), lpf_cfg, cfg.ablation.use_lpf)?;
            front.push(FrontStage { pre, resize, lpf, up_factor: factor });
        }

        let mut encoder = Vec::with_capacity(4);
        for stage in 0..4 {
            let name = format!("encoder.stage{stage}");
            let mut scabs = Vec::with_capacity(cfg.scab_per_stage);
            for j in 0..cfg.scab_per_stage {
                scabs.push(Scab::new(
                    store,
                    rng,
                    &format!("{name}.scab{j}"),
                    c,
                    cfg.heads,
                    cfg.ca_reduction,
                    cfg.ablation.use_scab,
                )?);
            }
            encoder.push(EncoderStage {
                scabs,
                down: DownsampleBlock::new(store, rng, &format!("{name}.down"), c)?,
                lpf: Lpf::new(store, rng, &format!("{name}.lpf"), lpf_cfg, cfg.ablation.use_lpf)?,
                down_factor: 1 << (stage + 1),
            });
        }

        let mut decoder = Vec::with_capacity(4);
        for stage in 0..4 {
            let name = format!("decoder.stage{stage}");
            let up = UpsampleBlock::new(store, rng, &format!("{name}.up"), c)?;
            let mut scabs = Vec::with_capacity(cfg.scab_per_stage);
            for j in 0..cfg.scab_per_stage {
                scabs.push(Scab::new(
                    store,
                    rng,
                    &format!("{name}.scab{j}"),
                    c,
                    cfg.heads,
                    cfg.ca_reduction,
                    cfg.ablation.use_scab,
                )?);
            }
            decoder.push(DecoderStage { up, scabs });
        }

        let head = Conv2d::new(store, rng, "sr_head", c, 3, 3)?;
        Ok(WNet { cfg, parsing, fusion1, front, encoder, decoder, head })
    }

    pub fn config(&self) -> &WNetConfig {
        &self.cfg
    }

    /// Full forward pass from a raw LR batch `(N, 3, h, w)`. HR size is
    /// derived from the input (`h * scale`), so one model serves any
    /// divisibility-respecting size. `budget` caps total activation bytes.
    pub fn forward<'s, E: Scalar>(
        &self,
        store: &'s ParamStore<E>,
        lr_raw: &Tensor<E>,
        training: bool,
        budget: Option<u64>,
    ) -> Result<ForwardOut<'s, E>> {
        let s = lr_raw.shape();
        if s.c != 3 {
            return Err(Error::shape("wnet_forward", format!("LR input must have 3 channels, got {s}")));
        }
        let hr_h = s.h * self.cfg.scale;
        let hr_w = s.w * self.cfg.scale;
        for (what, value) in [("height", hr_h), ("width", hr_w)] {
            if value % 16 != 0 {
                return Err(Error::NotDivisible { op: "wnet_forward", what, value, divisor: 16 });
            }
        }

        let mut pass = Pass::new(store, training);
        if let Some(b) = budget {
            pass.g.set_memory_budget(b);
        }

        pass.g.label("input");
        let interp = bicubic_resize(lr_raw, hr_h, hr_w)?;
        let i_in = pass.input(interp)?;

        pass.g.label("parsing");
        let parsing_map = self.parsing.forward(&mut pass, i_in)?;

        pass.g.label("pyramid");
        let pyramid = Pyramid::build(&mut pass, parsing_map)?;

        pass.g.label("front.fusion1");
        let mut report = WalkReport {
            front_fusions: 0,
            encoder_fusions: 0,
            decoder_upsamples: 0,
            front_sizes: Vec::with_capacity(7),
            encoder_sizes: Vec::with_capacity(4),
            decoder_sizes: Vec::with_capacity(4),
        };
        let cat = pass.g.concat_channels(&[i_in, parsing_map])?;
        let mut f = self.fusion1.forward(&mut pass, cat)?;
        report.front_fusions += 1;
        report.front_sizes.push(pass.g.shape(f).h);

        for (i, stage) in self.front.iter().enumerate() {
            pass.g.label(format!("front.fusion{}", i + 2));
            let t = stage.pre.forward(&mut pass, f)?;
            let resized = match &stage.resize {
                ResizeBlock::Up(b) => b.forward(&mut pass, t)?,
                ResizeBlock::Down(b) => b.forward(&mut pass, t)?,
            };
            let map = pyramid.up(stage.up_factor);
            f = stage.lpf.forward(&mut pass, resized, map)?;
            report.front_fusions += 1;
            report.front_sizes.push(pass.g.shape(f).h);
        }

        for (i, stage) in self.encoder.iter().enumerate() {
            pass.g.label(format!("encoder.stage{i}"));
            for scab in &stage.scabs {
                f = scab.forward(&mut pass, f)?;
            }
            let t = stage.down.forward(&mut pass, f)?;
            let map = pyramid.down(stage.down_factor);
            f = stage.lpf.forward(&mut pass, t, map)?;
            report.encoder_fusions += 1;
            report.encoder_sizes.push(pass.g.shape(f).h);
        }

        for (i, stage) in self.decoder.iter().enumerate() {
            pass.g.label(format!("decoder.stage{i}"));
            f = stage.up.forward(&mut pass, f)?;
            for scab in &stage.scabs {
                f = scab.forward(&mut pass, f)?;
            }
            report.decoder_upsamples += 1;
            report.decoder_sizes.push(pass.g.shape(f).h);
        }

        pass.g.label("sr_head");
        let sr = self.head.forward(&mut pass, f)?;

        for (name, var) in [("sr", sr), ("parsing", parsing_map)] {
            if !pass.g.value(var).all_finite() {
                let at = pass
                    .g
                    .find_non_finite()
                    .unwrap_or_else(|| format!("{name} output"));
                return Err(Error::NonFinite { context: at });
            }
        }

        let expected = self.cfg.shape_walk(hr_h);
        debug_assert_eq!(report.front_sizes, expected.front_sizes);
        debug_assert_eq!(report.encoder_sizes, expected.encoder_sizes);
        debug_assert_eq!(report.decoder_sizes, expected.decoder_sizes);

        Ok(ForwardOut { pass, sr, parsing: parsing_map, report })
    }

    /// Inference convenience: eval-mode forward returning the SR image
    /// clamped to [0, 1] plus the parsing map, as plain tensors.
    pub fn super_resolve<E: Scalar>(
        &self,
        store: &ParamStore<E>,
        lr_raw: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let out = self.forward(store, lr_raw, false, None)?;
        let sr = out.pass.g.value(out.sr).map(|v| {
            let zero = E::ZERO;
            let one = E::ONE;
            if v < zero {
                zero
            } else if v > one {
                one
            } else {
                v
            }
        });
        let parsing = out.pass.g.value(out.parsing).clone();
        Ok((sr, parsing))
    }
}
