//! PNG-backed storage for images, maps, and whole datasets.
//!
//! Images are 8-bit RGB; parsing and region maps are single-channel with
//! {0,255}; label maps store the raw class id per pixel. Quantization uses
//! round-half-away-from-zero, so a write-then-read round trip moves any
//! value by at most 1/255. Files are encoded fully in memory before the
//! single filesystem write, so a failed encode leaves nothing behind.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::loss::RegionMasks;
use crate::tensor::{Shape, Tensor};

use super::synth::{synth_face, sample_seed, FaceSample, LabelMap};

/// Region subdirectory names paired with mask file suffixes.
const MASK_NAMES: [&str; 4] = ["eyes", "eyebrows", "nose", "mouth"];

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), reason: e.to_string() }
}

/// f32 -> u8 with round-half-away-from-zero (`f32::round` semantics).
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a (1,3,H,W) tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("save_rgb", format!("expected (1,3,H,W), got {s}")));
    }
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = image::Rgb([
                quantize(t.at(0, 0, y, x)),
                quantize(t.at(0, 1, y, x)),
                quantize(t.at(0, 2, y, x)),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    write_atomically(path, bytes.get_ref())
}

/// Read an 8-bit RGB PNG as a (1,3,H,W) tensor in [0,1].
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    }))
}

/// Write a (1,1,H,W) map as a single-channel PNG; values are scaled by
/// 255, so binary maps land exactly on {0,255}.
pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("save_gray", format!("expected (1,1,H,W), got {s}")));
    }
    let mut img = GrayImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            img.put_pixel(x as u32, y as u32, image::Luma([quantize(t.at(0, 0, y, x))]));
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    write_atomically(path, bytes.get_ref())
}

/// Read a single-channel PNG as a (1,1,H,W) tensor in [0,1].
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    }))
}

/// Write class ids (0..=5) directly as gray pixel values.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([labels.at(y, x)]));
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    write_atomically(path, bytes.get_ref())
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let classes: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
    LabelMap::from_classes(classes, h, w)
}

fn sample_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf, [PathBuf; 4]) {
    let name = format!("{id:04}.png");
    let masks = MASK_NAMES.map(|m| dir.join("masks").join(format!("{id:04}_{m}.png")));
    (
        dir.join("hr").join(&name),
        dir.join("lr").join(&name),
        dir.join("parsing").join(&name),
        dir.join("labels").join(&name),
        masks,
    )
}

/// Write one sample under the dataset layout.
pub fn save_sample(dir: &Path, id: usize, sample: &FaceSample) -> Result<()> {
    let (hr, lr, parsing, labels, masks) = sample_paths(dir, id);
    save_rgb(&hr, &sample.hr)?;
    save_rgb(&lr, &sample.lr)?;
    save_gray(&parsing, &sample.parsing_gt)?;
    save_labels(&labels, &sample.label_map)?;
    let named = sample.masks.named();
    for (path, (_, mask)) in masks.iter().zip(named.iter()) {
        save_gray(path, mask)?;
    }
    Ok(())
}

/// Read one sample back from the dataset layout.
pub fn load_sample(dir: &Path, id: usize) -> Result<FaceSample> {
    let (hr_p, lr_p, parsing_p, labels_p, mask_p) = sample_paths(dir, id);
    let hr = load_rgb(&hr_p)?;
    let lr = load_rgb(&lr_p)?;
    let parsing_gt = load_gray(&parsing_p)?;
    let label_map = load_labels(&labels_p)?;
    let [eyes, eyebrows, nose, mouth] = mask_p;
    let masks = RegionMasks {
        eyes: load_gray(&eyes)?,
        eyebrows: load_gray(&eyebrows)?,
        nose: load_gray(&nose)?,
        mouth: load_gray(&mouth)?,
    };
    let (h, l) = (hr.shape(), lr.shape());
    if h.h % l.h != 0 || h.w % l.w != 0 {
        return Err(Error::shape(
            "load_sample",
            format!("HR {h} is not an integer multiple of LR {l}"),
        ));
    }
    Ok(FaceSample { hr, label_map, parsing_gt, masks, lr })
}

/// Generate `count` seeded faces and write them as a dataset.
pub fn write_dataset(dir: &Path, count: usize, size: usize, scale: usize, seed: u64) -> Result<()> {
    for id in 0..count {
        let sample = synth_face(sample_seed(seed, id as u64), size, scale)?;
        save_sample(dir, id, &sample)?;
    }
    Ok(())
}

/// Load every consecutively numbered sample (0000, 0001, ...).
pub fn load_dataset(dir: &Path) -> Result<Vec<FaceSample>> {
    let mut out = Vec::new();
    loop {
        let (hr, ..) = sample_paths(dir, out.len());
        if !hr.exists() {
            break;
        }
        out.push(load_sample(dir, out.len())?);
    }
    if out.is_empty() {
        return Err(Error::invalid(
            "load_dataset",
            format!("no samples found under {}", dir.display()),
        ));
    }
    Ok(out)
}
