//! Self-describing tensor container.
//!
//! Layout: the 4-byte magic `CEDT`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"shape": [...], "dtype": "f32"|"f64", "byte_order":
//! "little"}`, then the raw little-endian element buffer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CEDT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_order: String,
}

impl DumpHeader {
    pub fn payload_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

fn dump_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dump(msg.into()))
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let header = DumpHeader { shape: t.shape().to_vec(), dtype: T::DTYPE, byte_order: "little".into() };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses one container from the front of `bytes`; returns the tensor and
/// the number of bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return dump_err("missing CEDT magic");
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let Some(hbytes) = bytes.get(8..8 + hlen) else {
        return dump_err("truncated header");
    };
    let header: DumpHeader =
        serde_json::from_slice(hbytes).map_err(|e| TensorError::Dump(format!("bad header: {e}")))?;
    if header.byte_order != "little" {
        return dump_err(format!("unsupported byte order {}", header.byte_order));
    }
    if header.dtype != T::DTYPE {
        return dump_err(format!("dtype {:?} does not match requested {:?}", header.dtype, T::DTYPE));
    }
    let start = 8 + hlen;
    let end = start + header.payload_len();
    let Some(payload) = bytes.get(start..end) else {
        return dump_err("truncated payload");
    };
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Ok((Tensor::from_vec(header.shape, data)?, end))
}

pub fn write_tensor<T: Element>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Element>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return dump_err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_json_and_little_endian() {
        let t = Tensor::<f32>::from_vec(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["byte_order"], "little");
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dtype_mismatch_and_truncation_rejected() {
        let t = Tensor::<f64>::ones(vec![3]);
        let bytes = encode(&t);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_tensor::<f64>(&bytes[..]).is_ok());
    }
}
