//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `FSTB`, `u32` version, `u32` feature
//! dimension, length-prefixed architecture descriptor, `u64` step counter,
//! `u32` tensor count, then per tensor a length-prefixed name, `u32` rank,
//! `u32` dims and `f32` payload.

use std::fs;
use std::path::Path;

use super::models::{Arch, FusionModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSTB";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &FusionModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.arch.feat_dim as u32).to_le_bytes());
    put_str(&mut out, &model.arch.descriptor());
    out.extend_from_slice(&model.step.to_le_bytes());
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, shape, data) in params {
        put_str(&mut out, &name);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Size(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not utf-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FusionModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let d = r.u32()? as usize;
    let arch = Arch::parse(&r.string()?)?;
    if arch.feat_dim != d {
        return Err(Error::Shape(format!(
            "header feature dimension {d} disagrees with descriptor {}",
            arch.feat_dim
        )));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Size(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }

    let mut model = FusionModel::<f32>::zeros(arch);
    model.step = step;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    for ((name, shape), dst) in expected.into_iter().zip(model.params_mut()) {
        let (got_shape, data) = tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if got_shape != shape {
            return Err(Error::Shape(format!(
                "tensor {name}: expected shape {shape:?}, found {got_shape:?}"
            )));
        }
        dst.copy_from_slice(&data);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &FusionModel<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut m = FusionModel::<f32>::init(Arch::compact(), 5);
        m.step = 42;
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn tampered_magic_and_version() {
        let mut bytes = encode_checkpoint(&FusionModel::<f32>::init(Arch::compact(), 0));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_checkpoint(&FusionModel::<f32>::init(Arch::compact(), 0));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn descriptor_shape_mismatch_is_a_shape_error() {
        // payload written for D=16, descriptor claims D=32
        let small = FusionModel::<f32>::init(
            Arch {
                feat_dim: 16,
                ..Arch::default()
            },
            0,
        );
        let bytes = encode_checkpoint(&small);
        let old = Arch {
            feat_dim: 16,
            ..Arch::default()
        }
        .descriptor();
        let new = Arch::default().descriptor();
        assert_eq!(old.len(), new.len());
        let mut tampered = bytes.clone();
        let at = tampered
            .windows(old.len())
            .position(|w| w == old.as_bytes())
            .unwrap();
        tampered[at..at + new.len()].copy_from_slice(new.as_bytes());
        tampered[8..12].copy_from_slice(&32u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&tampered), Err(Error::Shape(_))));
    }
}
