//! AQKV workload files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset size field
//!      0    4 magic "AQKV"
//!      4    4 version (u32, = 1)
//!      8    4 head_count (u32)
//!     12    8 n (u64)
//!     20    4 d (u32)
//!     24    1 dtype (u8, 0 = f32)
//!     25    3 reserved (zero)
//!     28      per head: Q rows, K rows, V rows as row-major f32
//! ```
//!
//! Attention outputs use the same header with magic "AQKO" and one `n x d`
//! matrix per head.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{HeadWorkload, Matrix};

pub const WORKLOAD_MAGIC: [u8; 4] = *b"AQKV";
pub const OUTPUT_MAGIC: [u8; 4] = *b"AQKO";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    magic: [u8; 4],
    heads: u32,
    n: u64,
    d: u32,
}

impl Header {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.heads.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0u8; 3]);
    }

    fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != magic {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let heads = u32_at(8);
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let d = u32_at(20);
        if bytes[24] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[24]));
        }
        if heads == 0 {
            return Err(Error::EmptyWorkload);
        }
        if n == 0 || d == 0 {
            return Err(Error::shape(format!("header declares n={n}, d={d}")));
        }
        Ok(Self { magic, heads, n, d })
    }

    fn payload_len(&self, matrices_per_head: usize) -> Result<usize> {
        let n = usize::try_from(self.n).map_err(|_| Error::shape("n does not fit in memory"))?;
        n.checked_mul(self.d as usize)
            .and_then(|x| x.checked_mul(self.heads as usize))
            .and_then(|x| x.checked_mul(matrices_per_head * 4))
            .ok_or_else(|| Error::shape("payload size overflows"))
    }
}

fn common_shape<'a>(mut shapes: impl Iterator<Item = (usize, usize)> + 'a) -> Result<(usize, usize)> {
    let first = shapes.next().ok_or(Error::EmptyWorkload)?;
    if let Some(other) = shapes.find(|s| *s != first) {
        return Err(Error::shape(format!(
            "all heads must share one shape: {first:?} vs {other:?}"
        )));
    }
    Ok(first)
}

fn header_for(magic: [u8; 4], heads: usize, (n, d): (usize, usize)) -> Result<Header> {
    Ok(Header {
        magic,
        heads: u32::try_from(heads).map_err(|_| Error::invalid("too many heads"))?,
        n: n as u64,
        d: u32::try_from(d).map_err(|_| Error::invalid("head dimension exceeds u32"))?,
    })
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_matrices(bytes: &[u8], header: &Header, per_head: usize) -> Result<Vec<Matrix>> {
    let expected = HEADER_LEN + header.payload_len(per_head)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let (n, d) = (header.n as usize, header.d as usize);
    let floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let values: Vec<f32> = floats.collect();
    values
        .chunks_exact(n * d)
        .enumerate()
        .map(|(m, chunk)| {
            Matrix::new_finite(n, d, chunk.to_vec()).map_err(|e| match e {
                Error::NonFinite { index } => Error::NonFinite {
                    index: m * n * d + index,
                },
                other => other,
            })
        })
        .collect()
}

pub fn encode_workload(heads: &[HeadWorkload]) -> Result<Vec<u8>> {
    let shape = common_shape(heads.iter().map(|h| h.q.shape()))?;
    let header = header_for(WORKLOAD_MAGIC, heads.len(), shape)?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len(3)?);
    header.encode(&mut out);
    for h in heads {
        push_matrix(&mut out, &h.q);
        push_matrix(&mut out, &h.k);
        push_matrix(&mut out, &h.v);
    }
    Ok(out)
}

pub fn decode_workload(bytes: &[u8]) -> Result<Vec<HeadWorkload>> {
    let header = Header::decode(bytes, WORKLOAD_MAGIC)?;
    let mut mats = read_matrices(bytes, &header, 3)?.into_iter();
    let mut heads = Vec::with_capacity(header.heads as usize);
    while let (Some(q), Some(k), Some(v)) = (mats.next(), mats.next(), mats.next()) {
        heads.push(HeadWorkload::new(q, k, v)?);
    }
    Ok(heads)
}

pub fn write_workload(path: impl AsRef<Path>, heads: &[HeadWorkload]) -> Result<()> {
    fs::write(path, encode_workload(heads)?)?;
    Ok(())
}

pub fn read_workload(path: impl AsRef<Path>) -> Result<Vec<HeadWorkload>> {
    decode_workload(&fs::read(path)?)
}

pub fn encode_outputs(outputs: &[Matrix]) -> Result<Vec<u8>> {
    let shape = common_shape(outputs.iter().map(Matrix::shape))?;
    let header = header_for(OUTPUT_MAGIC, outputs.len(), shape)?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len(1)?);
    header.encode(&mut out);
    outputs.iter().for_each(|m| push_matrix(&mut out, m));
    Ok(out)
}

pub fn decode_outputs(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let header = Header::decode(bytes, OUTPUT_MAGIC)?;
    read_matrices(bytes, &header, 1)
}

pub fn write_outputs(path: impl AsRef<Path>, outputs: &[Matrix]) -> Result<()> {
    fs::write(path, encode_outputs(outputs)?)?;
    Ok(())
}

pub fn read_outputs(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    decode_outputs(&fs::read(path)?)
}
