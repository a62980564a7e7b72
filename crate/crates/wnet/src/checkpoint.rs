//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "WNET"
//! version u32
//! count   u64      number of parameter records
//! record: name_len u32, name bytes (UTF-8),
//!         rank u32 (always 4), dims 4 x u64,
//!         tag u8 (element byte width: 4 = f32, 8 = f64),
//!         raw little-endian element bytes
//! adam    u8 flag  (0 = absent, 1 = present)
//!   step_count u64, slot_count u64,
//!   per slot: present u8, then m bytes and v bytes (shape of parameter i)
//! ```
//!
//! Values round-trip bitwise; saving a freshly loaded store reproduces the
//! file byte-for-byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

const MAGIC: [u8; 4] = *b"WNET";
const VERSION: u32 = 1;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn mismatch(path: &Path, reason: impl Into<String>) -> Error {
    Error::CheckpointMismatch(format!("{}: {}", path.display(), reason.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<E: Scalar>(&mut self, shape: Shape) -> Result<Tensor<E>> {
        let w = E::BYTE_WIDTH as usize;
        let raw = self.take(shape.len() * w)?;
        let data: Vec<E> = raw.chunks_exact(w).map(E::read_le).collect();
        Tensor::from_vec(shape, data)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_tensor<E: Scalar>(out: &mut Vec<u8>, t: &Tensor<E>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialize every parameter (trainable and buffers), optionally followed
/// by the optimizer state.
pub fn save_checkpoint<E: Scalar>(
    path: &Path,
    store: &ParamStore<E>,
    adam: Option<&Adam<E>>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&4u32.to_le_bytes());
        let s = entry.value.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(E::BYTE_WIDTH);
        push_tensor(&mut out, &entry.value);
    }
    match adam {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step_count().to_le_bytes());
            out.extend_from_slice(&(store.len() as u64).to_le_bytes());
            for (id, _) in store.iter() {
                match opt.state(id) {
                    None => out.push(0),
                    Some((m, v)) => {
                        out.push(1);
                        push_tensor(&mut out, m);
                        push_tensor(&mut out, v);
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, &out).map_err(|e| Error::io(path, e))
}

/// One parameter record as read from disk.
pub struct RawParam {
    pub name: String,
    pub shape: Shape,
    pub tag: u8,
    /// Raw little-endian element bytes (length = len * tag).
    pub bytes: Vec<u8>,
}

/// Read the parameter table without binding it to a store — used to
/// inspect a checkpoint's architecture before building the model.
pub fn read_params(path: &Path) -> Result<Vec<RawParam>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| corrupt(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()?;
        if rank != 4 {
            return Err(corrupt(path, format!("parameter {name:?} has rank {rank}, expected 4")));
        }
        let dims: Vec<u64> = (0..4).map(|_| r.u64()).collect::<Result<_>>()?;
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        let tag = r.u8()?;
        if tag != 4 && tag != 8 {
            return Err(corrupt(path, format!("parameter {name:?} has unknown element tag {tag}")));
        }
        let bytes = r.take(shape.len() * tag as usize)?.to_vec();
        out.push(RawParam { name, shape, tag, bytes });
    }
    Ok(out)
}

/// Load parameter values (and optionally Adam state) into a store whose
/// registration — produced by building the same architecture — must match
/// the file record-for-record.
pub fn load_checkpoint<E: Scalar>(
    path: &Path,
    store: &mut ParamStore<E>,
    mut adam: Option<&mut Adam<E>>,
) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(mismatch(
            path,
            format!("file has {count} parameters, model has {}", store.len()),
        ));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| corrupt(path, "parameter name is not UTF-8"))?;
        if name != store.name(id) {
            return Err(mismatch(
                path,
                format!("parameter {:?} in model, {name:?} in file", store.name(id)),
            ));
        }
        let rank = r.u32()?;
        if rank != 4 {
            return Err(corrupt(path, format!("parameter {name:?} has rank {rank}, expected 4")));
        }
        let dims: Vec<u64> = (0..4).map(|_| r.u64()).collect::<Result<_>>()?;
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        if shape != store.value(id).shape() {
            return Err(mismatch(
                path,
                format!(
                    "parameter {name:?}: file shape {shape}, model shape {}",
                    store.value(id).shape()
                ),
            ));
        }
        let tag = r.u8()?;
        if tag != E::BYTE_WIDTH {
            return Err(mismatch(
                path,
                format!("parameter {name:?}: element width {tag} in file, {} in model", E::BYTE_WIDTH),
            ));
        }
        let t = r.tensor::<E>(shape)?;
        store.set_value(id, t)?;
    }
    let flag = r.u8()?;
    match (flag, adam.as_deref_mut()) {
        (0, _) => {}
        (1, None) => {
            // Optimizer state present but not requested: skip it.
            let _step = r.u64()?;
            let slots = r.u64()? as usize;
            if slots != ids.len() {
                return Err(corrupt(path, format!("{slots} optimizer slots for {} parameters", ids.len())));
            }
            for &id in &ids {
                if r.u8()? == 1 {
                    let shape = store.value(id).shape();
                    r.take(2 * shape.len() * E::BYTE_WIDTH as usize)?;
                }
            }
        }
        (1, Some(opt)) => {
            opt.set_step_count(r.u64()?);
            let slots = r.u64()? as usize;
            if slots != ids.len() {
                return Err(corrupt(path, format!("{slots} optimizer slots for {} parameters", ids.len())));
            }
            for &id in &ids {
                if r.u8()? == 1 {
                    let shape = store.value(id).shape();
                    let m = r.tensor::<E>(shape)?;
                    let v = r.tensor::<E>(shape)?;
                    opt.set_state(id, m, v)?;
                }
            }
        }
        (other, _) => return Err(corrupt(path, format!("unknown optimizer flag {other}"))),
    }
    if !r.done() {
        return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(())
}
