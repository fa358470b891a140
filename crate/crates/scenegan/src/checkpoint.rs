//! Shared checkpoint chunk format.
//!
//! Layout: magic `CGTN`, version u16, count of named tensors, then per
//! tensor: name length + UTF-8 name, rank, dims (u32 each), dtype tag,
//! little-endian payload. Dtype 0 = f32, 1 = f64, 2 = raw bytes (used for
//! embedded JSON blobs).

use crate::error::Error;
use crate::tensor::{DType, Scalar, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CGTN";
const VERSION: u16 = 1;

/// One named entry of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Chunk {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    Bytes(Vec<u8>),
}

impl Chunk {
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Chunk {
        match F::DTYPE {
            DType::F32 => Chunk::F32(
                t.shape().to_vec(),
                t.data().iter().map(|v| v.as_f64() as f32).collect(),
            ),
            _ => Chunk::F64(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Reads the chunk as a tensor of the requested element type. Fails only
    /// on byte chunks.
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>, Error> {
        match self {
            Chunk::F32(shape, data) => Ok(Tensor::from_vec(
                shape,
                data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            )),
            Chunk::F64(shape, data) => {
                Ok(Tensor::from_vec(shape, data.iter().map(|&v| F::from_f64(v)).collect()))
            }
            Chunk::Bytes(_) => Err(Error::Checkpoint("expected tensor, found byte blob".into())),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8], Error> {
        match self {
            Chunk::Bytes(b) => Ok(b),
            _ => Err(Error::Checkpoint("expected byte blob, found tensor".into())),
        }
    }
}

/// Writes named chunks; entries are sorted by name so files are canonical.
pub fn write_chunks(path: &Path, entries: &BTreeMap<String, Chunk>) -> Result<(), Error> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, chunk) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match chunk {
            Chunk::F32(shape, data) => {
                buf.push(shape.len() as u8);
                for d in shape {
                    buf.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                buf.push(0u8);
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Chunk::F64(shape, data) => {
                buf.push(shape.len() as u8);
                for d in shape {
                    buf.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                buf.push(1u8);
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Chunk::Bytes(data) => {
                buf.push(1u8);
                buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
                buf.push(2u8);
                buf.extend_from_slice(data);
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a chunk file written by [`write_chunks`].
pub fn read_chunks(path: &Path) -> Result<BTreeMap<String, Chunk>, Error> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], Error> {
        if *pos + n > data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected CGTN)".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let dtype = take(&mut pos, 1)?[0];
        let chunk = match DType::from_tag(dtype) {
            Some(DType::F32) => {
                let raw = take(&mut pos, numel * 4)?;
                Chunk::F32(
                    shape,
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            Some(DType::F64) => {
                let raw = take(&mut pos, numel * 8)?;
                Chunk::F64(
                    shape,
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            Some(DType::U8) => Chunk::Bytes(take(&mut pos, numel)?.to_vec()),
            None => return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}"))),
        };
        out.insert(name, chunk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng64;

    #[test]
    fn chunks_round_trip_bit_exactly() {
        let mut rng = Rng64::new(8);
        let t32 = Tensor::<f32>::randn(&[3, 4], &mut rng);
        let t64 = Tensor::<f64>::randn(&[5], &mut rng);
        let mut entries = BTreeMap::new();
        entries.insert("a.weight".to_string(), Chunk::from_tensor(&t32));
        entries.insert("b.bias".to_string(), Chunk::from_tensor(&t64));
        entries.insert("config".to_string(), Chunk::Bytes(b"{\"x\":1}".to_vec()));

        let dir = std::env::temp_dir().join(format!("scenegan_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.cgtn");
        write_chunks(&path, &entries).unwrap();
        let loaded = read_chunks(&path).unwrap();
        assert_eq!(loaded.len(), 3);

        let r32: Tensor<f32> = loaded["a.weight"].to_tensor().unwrap();
        for (a, b) in r32.data().iter().zip(t32.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let r64: Tensor<f64> = loaded["b.bias"].to_tensor().unwrap();
        for (a, b) in r64.data().iter().zip(t64.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded["config"].as_bytes().unwrap(), b"{\"x\":1}");

        // corrupted magic is a format error
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_chunks(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
