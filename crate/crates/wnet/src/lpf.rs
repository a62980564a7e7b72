//! Feature fusion of an LR-derived trunk map with a parsing map.
//!
//! The full block lifts the parsing map to trunk width, routes one branch
//! through channel+spatial attention and another through a pixelwise convex
//! blend gated by pixel attention, then recombines everything through two
//! fusion convs and two skip connections:
//!
//! ```text
//! f1    = conv3x3(f_lr)            f2 = conv3x3(f_lr)   fp = conv3x3(parsing)
//! f_att = conv3x3(CA(f1) + SA(f1))
//! sigma = pixel_attention(f2 + fp)
//! f_pix = sigma*f2 + (1 - sigma)*fp
//! fuse1 = conv3x3(concat(f_att, fp))
//! fuse2 = conv1x1(f_pix + f_lr + fp)
//! out   = fuse1 + fuse2 + f2 + fp
//! ```
//!
//! The ablated variant collapses all of that to a basic cascade:
//! `conv3x3(concat(f_lr, conv3x3(parsing)))`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{ChannelAttention, Conv2d, PixelAttention, SpatialAttention};
use crate::params::{ParamStore, Pass};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct LpfConfig {
    /// Trunk width (64).
    pub channels: usize,
    /// Parsing-map channels (3).
    pub parsing_channels: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
}

impl Default for LpfConfig {
    fn default() -> Self {
        LpfConfig {
            channels: 64,
            parsing_channels: 3,
            ca_reduction: crate::layers::CA_REDUCTION,
            sa_kernel: crate::layers::SA_KERNEL,
        }
    }
}

enum Body {
    Full {
        f1: Conv2d,
        f2: Conv2d,
        fp: Conv2d,
        ca: ChannelAttention,
        sa: SpatialAttention,
        att: Conv2d,
        pa: PixelAttention,
        fuse1: Conv2d,
        fuse2: Conv2d,
    },
    /// Basic cascade replacement used by the ablation.
    Cascade { lift: Conv2d, fuse: Conv2d },
}

/// LR-and-parsing fusion block operating at one scale.
pub struct Lpf {
    body: Body,
    cfg: LpfConfig,
}

impl Lpf {
    pub fn new<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        name: &str,
        cfg: LpfConfig,
        full: bool,
    ) -> Result<Self> {
        let c = cfg.channels;
        let pc = cfg.parsing_channels;
        let body = if full {
            Body::Full {
                f1: Conv2d::new(store, rng, &format!("{name}.f1"), c, c, 3)?,
                f2: Conv2d::new(store, rng, &format!("{name}.f2"), c, c, 3)?,
                fp: Conv2d::new(store, rng, &format!("{name}.fp"), pc, c, 3)?,
                ca: ChannelAttention::new(store, rng, &format!("{name}.ca"), c, cfg.ca_reduction)?,
                sa: SpatialAttention::new(store, rng, &format!("{name}.sa"), cfg.sa_kernel)?,
                att: Conv2d::new(store, rng, &format!("{name}.att"), c, c, 3)?,
                pa: PixelAttention::new(store, rng, &format!("{name}.pa"), c)?,
                fuse1: Conv2d::new(store, rng, &format!("{name}.fuse1"), 2 * c, c, 3)?,
                fuse2: Conv2d::new(store, rng, &format!("{name}.fuse2"), c, c, 1)?,
            }
        } else {
            Body::Cascade {
                lift: Conv2d::new(store, rng, &format!("{name}.lift"), pc, c, 3)?,
                fuse: Conv2d::new(store, rng, &format!("{name}.fuse"), 2 * c, c, 3)?,
            }
        };
        Ok(Lpf { body, cfg })
    }

    pub fn config(&self) -> &LpfConfig {
        &self.cfg
    }

    fn check_inputs<E: Scalar>(&self, p: &Pass<E>, f_lr: Var, parsing: Var) -> Result<()> {
        let (a, b) = (p.g.shape(f_lr), p.g.shape(parsing));
        if (a.h, a.w) != (b.h, b.w) || a.n != b.n {
            return Err(Error::shape(
                "lpf",
                format!("trunk features {a} and parsing map {b} must share N, H, W"),
            ));
        }
        if a.c != self.cfg.channels || b.c != self.cfg.parsing_channels {
            return Err(Error::shape(
                "lpf",
                format!(
                    "expected {}-channel features and {}-channel parsing, got {a} / {b}",
                    self.cfg.channels, self.cfg.parsing_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, p: &mut Pass<E>, f_lr: Var, parsing: Var) -> Result<Var> {
        self.check_inputs(p, f_lr, parsing)?;
        match &self.body {
            Body::Full { f1, f2, fp, ca, sa, att, pa, fuse1, fuse2 } => {
                let f1 = f1.forward(p, f_lr)?;
                let f2 = f2.forward(p, f_lr)?;
                let fp = fp.forward(p, parsing)?;

                let ca_out = ca.forward(p, f1)?;
                let sa_out = sa.forward(p, f1)?;
                let att_in = p.g.add(ca_out, sa_out)?;
                let f_att = att.forward(p, att_in)?;

                let gate_in = p.g.add(f2, fp)?;
                let sigma = pa.forward(p, gate_in)?;
                let f_pixel = p.g.lerp_spatial(f2, fp, sigma)?;

                let cat = p.g.concat_channels(&[f_att, fp])?;
                let f_fuse1 = fuse1.forward(p, cat)?;

                let sum = p.g.add_n(&[f_pixel, f_lr, fp])?;
                let f_fuse2 = fuse2.forward(p, sum)?;

                p.g.add_n(&[f_fuse1, f_fuse2, f2, fp])
            }
            Body::Cascade { lift, fuse } => {
                let lifted = lift.forward(p, parsing)?;
                let cat = p.g.concat_channels(&[f_lr, lifted])?;
                fuse.forward(p, cat)
            }
        }
    }
}
