//! Binary checkpoint container.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "TLA1"
//! image_size patch_size channels depth dim heads mlp_ratio num_classes
//! pooling (0 = class_token, 1 = global_pool)
//! value_bytes (4 = f32, 8 = f64)
//! tensor_count
//! repeated: name_len name rows cols values...
//! ```

use std::path::Path;

use super::{ModelConfig, ModelParams, Pooling};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

pub const MAGIC: &[u8; 4] = b"TLA1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + params.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.depth,
        c.dim,
        c.heads,
        c.mlp_ratio,
        c.num_classes,
    ] {
        put_u32(&mut out, v);
    }
    put_u32(
        &mut out,
        match c.pooling {
            Pooling::ClassToken => 0,
            Pooling::GlobalPool => 1,
        },
    );
    put_u32(&mut out, T::BYTES);
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows());
        put_u32(&mut out, t.cols());
        for &v in t.as_slice() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte offset {} (need {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Decodes a checkpoint, converting stored values to `T` when the stored
/// precision differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected TLA1".into()));
    }
    let mut f = [0usize; 8];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let pooling = match r.u32()? {
        0 => Pooling::ClassToken,
        1 => Pooling::GlobalPool,
        other => return Err(Error::Checkpoint(format!("unknown pooling code {other}"))),
    };
    let config = ModelConfig {
        image_size: f[0],
        patch_size: f[1],
        channels: f[2],
        depth: f[3],
        dim: f[4],
        heads: f[5],
        mlp_ratio: f[6],
        num_classes: f[7],
        pooling,
    };
    let width = r.u32()?;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!(
            "unsupported value width {width}"
        )));
    }
    let mut params = ModelParams::<T>::zeros(&config)?;
    let count = r.u32()?;
    let expected: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for ((want_name, want_shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let shape = (r.u32()?, r.u32()?);
        if shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let raw = r.take(shape.0 * shape.1 * width)?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::from_f64(f32::read_le(c) as f64)
                } else {
                    T::from_f64(f64::read_le(c))
                }
            })
            .collect();
        *slot = Matrix::from_vec(shape.0, shape.1, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    decode(&std::fs::read(path)?)
}
