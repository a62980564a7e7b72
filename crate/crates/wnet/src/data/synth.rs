//! Deterministic procedural face generator. Every sample is an analytic
//! composition of simple shapes — skin ellipse, eye ellipses, eyebrow
//! arcs, nose triangle, mouth ellipse over a smooth background gradient —
//! so the per-pixel class labels and region masks are exact by
//! construction rather than estimated.

use rand::Rng;

use crate::data::resample::bicubic_resize;
use crate::error::{Error, Result};
use crate::loss::RegionMasks;
use crate::params::seeded_rng;
use crate::tensor::{Shape, Tensor};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_SKIN: u8 = 1;
pub const CLASS_EYEBROW: u8 = 2;
pub const CLASS_EYE: u8 = 3;
pub const CLASS_NOSE: u8 = 4;
pub const CLASS_MOUTH: u8 = 5;
pub const NUM_CLASSES: u8 = 6;

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    classes: Vec<u8>,
    h: usize,
    w: usize,
}

impl LabelMap {
    pub fn from_classes(classes: Vec<u8>, h: usize, w: usize) -> Result<Self> {
        if classes.len() != h * w {
            return Err(Error::shape(
                "label_map",
                format!("{} values for {h}x{w} map", classes.len()),
            ));
        }
        if let Some((index, &class)) = classes.iter().enumerate().find(|(_, &c)| c >= NUM_CLASSES) {
            return Err(Error::InvalidClass { class, index });
        }
        Ok(LabelMap { classes, h, w })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// Binary mask of one class as a (1,1,H,W) tensor.
    pub fn mask_of(&self, class: u8) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 1, self.h, self.w), |_, _, y, x| {
            if self.at(y, x) == class {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Face-region-vs-rest map: 1 where the class is skin, 0 elsewhere.
pub fn binarize(labels: &LabelMap) -> Tensor<f32> {
    labels.mask_of(CLASS_SKIN)
}

/// One training example: HR image, exact labels, binary parsing target,
/// per-feature masks, and the bicubic-degraded LR input.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub hr: Tensor<f32>,
    pub label_map: LabelMap,
    pub parsing_gt: Tensor<f32>,
    pub masks: RegionMasks<f32>,
    pub lr: Tensor<f32>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Parabolic band: points within `thickness/2` of y = cy + bend*(x-cx)^2,
/// for |x-cx| <= half_width.
#[derive(Clone, Copy)]
struct Arc {
    cx: f64,
    cy: f64,
    half_width: f64,
    bend: f64,
    thickness: f64,
}

impl Arc {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        if dx.abs() > self.half_width {
            return false;
        }
        let mid = self.cy + self.bend * dx * dx;
        (y - mid).abs() <= self.thickness / 2.0
    }
}

/// Downward-widening nose shape; the apex is truncated to a fraction of
/// the base width so the top rows survive coarse rasterization.
#[derive(Clone, Copy)]
struct Triangle {
    apex_x: f64,
    apex_y: f64,
    base_y: f64,
    base_half_width: f64,
}

const TRIANGLE_TOP_FRAC: f64 = 0.35;

impl Triangle {
    fn contains(&self, x: f64, y: f64) -> bool {
        if y < self.apex_y || y > self.base_y {
            return false;
        }
        let t = (y - self.apex_y) / (self.base_y - self.apex_y);
        (x - self.apex_x).abs() <= t.max(TRIANGLE_TOP_FRAC) * self.base_half_width
    }
}

type Rgb = [f64; 3];

fn jitter<R: Rng>(rng: &mut R, base: f64, rel: f64) -> f64 {
    base * (1.0 + rng.gen_range(-rel..rel))
}

fn color<R: Rng>(rng: &mut R, base: Rgb, spread: f64) -> Rgb {
    [
        (base[0] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
        (base[1] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
        (base[2] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0),
    ]
}

/// Generate one face. Geometry lives in [0,1]^2 coordinates evaluated at
/// pixel centers; the same shapes paint the image and the label map.
pub fn synth_face(seed: u64, h: usize, scale: usize) -> Result<FaceSample> {
    if h < 16 {
        return Err(Error::invalid("synth_face", format!("size {h} is below the 16-pixel minimum")));
    }
    if scale == 0 || h % scale != 0 {
        return Err(Error::NotDivisible { op: "synth_face", what: "size", value: h, divisor: scale.max(1) });
    }
    let w = h;
    let mut rng = seeded_rng(seed);

    // Background: smooth two-color gradient with a seeded direction.
    let bg_a = color(&mut rng, [0.25, 0.35, 0.55], 0.2);
    let bg_b = color(&mut rng, [0.65, 0.6, 0.5], 0.2);
    let dir_x: f64 = rng.gen_range(0.0..1.0);
    let dir_y = 1.0 - dir_x;

    // Head: centered ellipse covering roughly a third of the frame. The
    // axis ranges keep the analytic skin fraction inside [0.2, 0.7] even
    // after the features punch their holes.
    let head = Ellipse {
        cx: rng.gen_range(0.45..0.55),
        cy: rng.gen_range(0.45..0.55),
        rx: rng.gen_range(0.30..0.38),
        ry: rng.gen_range(0.36..0.44),
    };
    let skin = color(&mut rng, [0.82, 0.62, 0.50], 0.08);

    let eye_dx = jitter(&mut rng, 0.42, 0.1) * head.rx;
    let eye_dy = jitter(&mut rng, 0.22, 0.1) * head.ry;
    let eye_min = 1.5 / h as f64;
    let eye = |side: f64| Ellipse {
        cx: head.cx + side * eye_dx,
        cy: head.cy - eye_dy,
        rx: (0.16 * head.rx).max(eye_min),
        ry: (0.10 * head.ry).max(eye_min),
    };
    let eyes = [eye(-1.0), eye(1.0)];
    let eye_color = color(&mut rng, [0.10, 0.10, 0.14], 0.05);

    // Thin features need at least ~2 pixel rows to survive rasterization
    // at the smallest sizes.
    let min_feat = 2.0 / h as f64;
    let brow_thickness = (0.06 * head.ry).max(min_feat);
    // Anchor each brow just above its eye so the (floor-clamped) eye can
    // never paint over it at coarse resolutions.
    let brow_gap = jitter(&mut rng, 0.05, 0.3) * head.ry + 0.5 / h as f64;
    let mut brow = |over: &Ellipse| Arc {
        cx: over.cx,
        cy: over.cy - over.ry - brow_gap - brow_thickness / 2.0,
        half_width: (0.20 * head.rx).max(over.rx),
        bend: jitter(&mut rng, 0.8, 0.2),
        thickness: brow_thickness,
    };
    let brows = [brow(&eyes[0]), brow(&eyes[1])];
    let brow_color = color(&mut rng, [0.20, 0.12, 0.08], 0.05);

    let nose = Triangle {
        apex_x: head.cx,
        apex_y: head.cy - 0.05 * head.ry,
        base_y: head.cy + jitter(&mut rng, 0.25, 0.1) * head.ry,
        base_half_width: (0.12 * head.rx).max(min_feat),
    };
    let nose_color = color(&mut rng, [0.70, 0.48, 0.38], 0.05);

    let mouth = Ellipse {
        cx: head.cx,
        cy: head.cy + jitter(&mut rng, 0.55, 0.08) * head.ry,
        rx: 0.32 * head.rx,
        ry: (0.09 * head.ry).max(eye_min),
    };
    let mouth_color = color(&mut rng, [0.65, 0.20, 0.22], 0.06);

    // Mild multiplicative shading so super-resolution has real texture to
    // recover.
    let shade_amp: f64 = rng.gen_range(0.03..0.08);
    let shade_fx: f64 = rng.gen_range(1.0..3.0);
    let shade_fy: f64 = rng.gen_range(1.0..3.0);
    let shade_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut classes = vec![CLASS_BACKGROUND; h * w];
    let mut rgb = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64;
            let fy = (y as f64 + 0.5) / h as f64;
            let t = dir_x * fx + dir_y * fy;
            let mut px = [
                bg_a[0] + (bg_b[0] - bg_a[0]) * t,
                bg_a[1] + (bg_b[1] - bg_a[1]) * t,
                bg_a[2] + (bg_b[2] - bg_a[2]) * t,
            ];
            let mut class = CLASS_BACKGROUND;
            if head.contains(fx, fy) {
                class = CLASS_SKIN;
                px = skin;
            }
            // Paint order fixes precedence; features only make sense on
            // skin, and their geometry keeps them inside the head ellipse.
            if brows.iter().any(|b| b.contains(fx, fy)) && class == CLASS_SKIN {
                class = CLASS_EYEBROW;
                px = brow_color;
            }
            if eyes.iter().any(|e| e.contains(fx, fy)) && class != CLASS_BACKGROUND {
                class = CLASS_EYE;
                px = eye_color;
            }
            if nose.contains(fx, fy) && class != CLASS_BACKGROUND && class != CLASS_EYE {
                class = CLASS_NOSE;
                px = nose_color;
            }
            if mouth.contains(fx, fy) && class != CLASS_BACKGROUND {
                class = CLASS_MOUTH;
                px = mouth_color;
            }
            let shade = 1.0 + shade_amp * (std::f64::consts::TAU * (shade_fx * fx + shade_fy * fy) + shade_phase).sin();
            let idx = y * w + x;
            classes[idx] = class;
            for c in 0..3 {
                rgb[c * h * w + idx] = (px[c] * shade).clamp(0.0, 1.0);
            }
        }
    }

    let hr = Tensor::from_vec(Shape::new(1, 3, h, w), rgb.iter().map(|&v| v as f32).collect())?;
    let label_map = LabelMap::from_classes(classes, h, w)?;
    let parsing_gt = binarize(&label_map);
    let masks = RegionMasks {
        eyes: label_map.mask_of(CLASS_EYE),
        eyebrows: label_map.mask_of(CLASS_EYEBROW),
        nose: label_map.mask_of(CLASS_NOSE),
        mouth: label_map.mask_of(CLASS_MOUTH),
    };
    let lr = bicubic_resize(&hr, h / scale, w / scale)?;
    Ok(FaceSample { hr, label_map, parsing_gt, masks, lr })
}

/// Stable per-sample seed stream for dataset generation (splitmix64 over
/// the base seed and index).
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
