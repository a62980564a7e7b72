//! Face-parsing prior network.
//!
//! Predicts a soft binary parsing map straight from the low-resolution
//! input: a shallow 3x3 conv lifts RGB to the trunk width, a residual block
//! plus depth-4 hourglass extract deep features, a multi-scale attention
//! unit mixes receptive fields, and a 3-channel head with sigmoid emits the
//! map. Predicted values live in (0, 1); ground-truth maps are exactly
//! {0, 1}.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::layers::{
    ChannelAttention, Conv2d, Hourglass, ResidualBlock, SpatialAttention,
};
use crate::params::{ParamStore, Pass};
use crate::tensor::Scalar;

/// Structural knobs, all defaulted to the full-size network.
#[derive(Clone, Copy, Debug)]
pub struct ParsingConfig {
    /// Trunk width (64). Must be even, and the attention unit's 3.5x-wide
    /// concat must be divisible by `ca_reduction`.
    pub channels: usize,
    pub hourglass_depth: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
    /// Ablation: replace the residual/hourglass/attention trunk with two
    /// plain conv3x3 + ReLU layers. Shallow conv and head stay.
    pub plain_trunk: bool,
}

impl Default for ParsingConfig {
    fn default() -> Self {
        ParsingConfig {
            channels: 64,
            hourglass_depth: 4,
            ca_reduction: crate::layers::CA_REDUCTION,
            sa_kernel: crate::layers::SA_KERNEL,
            plain_trunk: false,
        }
    }
}

/// Multi-scale attention unit.
///
/// Three parallel branches over the input F (1x1, 3x3, 3x3), a doubled-width
/// fuse of all three, a halved-width squeeze of the third, then channel and
/// spatial attention applied to the 3.5x-wide concat, summed, projected back
/// to the trunk width, and added onto F.
pub struct MultiScaleAttention {
    y1: Conv2d,
    y2: Conv2d,
    y3: Conv2d,
    y4: Conv2d,
    y5: Conv2d,
    ca: ChannelAttention,
    sa: SpatialAttention,
    project: Conv2d,
}

impl MultiScaleAttention {
    /// Width of the wide concat for trunk width `c`: c + 2c + c/2.
    pub fn wide_channels(c: usize) -> usize {
        c + 2 * c + c / 2
    }

    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cfg: &ParsingConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let wide = Self::wide_channels(c);
        Ok(MultiScaleAttention {
            y1: Conv2d::new(store, rng, &format!("{name}.branch1x1"), c, c, 1)?,
            y2: Conv2d::new(store, rng, &format!("{name}.branch3x3a"), c, c, 3)?,
            y3: Conv2d::new(store, rng, &format!("{name}.branch3x3b"), c, c, 3)?,
            y4: Conv2d::new(store, rng, &format!("{name}.fuse_double"), 3 * c, 2 * c, 3)?,
            y5: Conv2d::new(store, rng, &format!("{name}.squeeze_half"), c, c / 2, 3)?,
            ca: ChannelAttention::new(store, rng, &format!("{name}.ca"), wide, cfg.ca_reduction)?,
            sa: SpatialAttention::new(store, rng, &format!("{name}.sa"), cfg.sa_kernel)?,
            project: Conv2d::new(store, rng, &format!("{name}.project"), wide, c, 1)?,
        })
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, f: Var) -> Result<Var> {
        let y1 = self.y1.forward(p, f)?;
        let y1 = p.g.relu(y1)?;
        let y2 = self.y2.forward(p, f)?;
        let y2 = p.g.relu(y2)?;
        let y3 = self.y3.forward(p, f)?;
        let y3 = p.g.relu(y3)?;

        let cat123 = p.g.concat_channels(&[y1, y2, y3])?;
        let y4 = self.y4.forward(p, cat123)?;
        let y4 = p.g.relu(y4)?;

        let y5 = self.y5.forward(p, y3)?;
        let y5 = p.g.relu(y5)?;

        let z = p.g.concat_channels(&[y2, y4, y5])?;
        let ca = self.ca.forward(p, z)?;
        let sa = self.sa.forward(p, z)?;
        let mixed = p.g.add(ca, sa)?;

        let projected = self.project.forward(p, mixed)?;
        p.g.add(projected, f)
    }
}

/// Trunk between the shallow conv and the head: the full
/// residual/hourglass/attention stack, or its plain-conv ablation.
enum Trunk {
    Full {
        pre: ResidualBlock,
        hourglass: Hourglass,
        attention: MultiScaleAttention,
    },
    Plain {
        conv1: Conv2d,
        conv2: Conv2d,
    },
}

/// The full parsing prior: shallow conv, residual + hourglass trunk,
/// multi-scale attention, and the 3-channel sigmoid head.
pub struct ParsingBlock {
    shallow: Conv2d,
    trunk: Trunk,
    head: Conv2d,
    cfg: ParsingConfig,
}

impl ParsingBlock {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cfg: ParsingConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let shallow = Conv2d::new(store, rng, &format!("{name}.shallow"), 3, c, 3)?;
        let trunk = if cfg.plain_trunk {
            Trunk::Plain {
                conv1: Conv2d::new(store, rng, &format!("{name}.plain1"), c, c, 3)?,
                conv2: Conv2d::new(store, rng, &format!("{name}.plain2"), c, c, 3)?,
            }
        } else {
            Trunk::Full {
                pre: ResidualBlock::new(store, rng, &format!("{name}.pre"), c)?,
                hourglass: Hourglass::new(store, rng, &format!("{name}.hourglass"), c, cfg.hourglass_depth)?,
                attention: MultiScaleAttention::new(store, rng, &format!("{name}.attention"), &cfg)?,
            }
        };
        Ok(ParsingBlock {
            shallow,
            trunk,
            head: Conv2d::new(store, rng, &format!("{name}.head"), c, 3, 3)?,
            cfg,
        })
    }

    pub fn config(&self) -> &ParsingConfig {
        &self.cfg
    }

    /// Deep trunk features (before the head), exposed for fusion consumers.
    pub fn features<E: Scalar>(&self, p: &mut Pass<E>, input: Var) -> Result<Var> {
        let shallow = self.shallow.forward(p, input)?;
        match &self.trunk {
            Trunk::Full { pre, hourglass, attention } => {
                let deep = pre.forward(p, shallow)?;
                let deep = hourglass.forward(p, deep)?;
                attention.forward(p, deep)
            }
            Trunk::Plain { conv1, conv2 } => {
                let h = conv1.forward(p, shallow)?;
                let h = p.g.relu(h)?;
                let h = conv2.forward(p, h)?;
                p.g.relu(h)
            }
        }
    }

    /// Soft parsing map in (0,1), shape (N, 3, H, W).
    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, input: Var) -> Result<Var> {
        let features = self.features(p, input)?;
        self.map_from_features(p, features)
    }

    /// Head over already-computed trunk features.
    pub fn map_from_features<E: Scalar>(&self, p: &mut Pass<E>, features: Var) -> Result<Var> {
        let logits = self.head.forward(p, features)?;
        p.g.sigmoid(logits)
    }
}
