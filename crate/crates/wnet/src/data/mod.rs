//! Dataset plumbing: resampling, synthetic face generation, image I/O.

pub mod io;
pub mod resample;
pub mod synth;

pub use resample::{bicubic_resize, nearest_downsample, nearest_upsample};
pub use synth::{binarize, synth_face, FaceSample, LabelMap};
