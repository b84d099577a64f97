//! `EPCT` tensor serialization: magic, u32 rank, u32 dims, then f32 values,
//! all little-endian and row-major.

use std::io::{Read, Write};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"EPCT";

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Header {
            what,
            detail: "unexpected end of file".into(),
        },
        _ => Error::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `count` little-endian f32 values, reporting how many were actually
/// present when the payload is short.
pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, what: &'static str) -> Result<Vec<f32>> {
    let mut bytes = Vec::with_capacity(count * 4);
    r.take((count * 4) as u64).read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::Truncated {
            what,
            expected: count,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Header {
        what,
        detail: "missing magic bytes".into(),
    })?;
    if &b != magic {
        return Err(Error::Header {
            what,
            detail: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&b)
            ),
        });
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    expect_magic(r, TENSOR_MAGIC, "tensor")?;
    let rank = read_u32(r, "tensor")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Header {
            what: "tensor",
            detail: format!("unsupported rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "tensor")? as usize);
    }
    let numel: usize = shape.iter().product();
    let data = read_f32s(r, numel, "tensor")?;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"EPCT".to_vec();
        for v in [2u32, 1, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor::new(vec![4], vec![1.0f32; 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 4);
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 4, found: 3, .. }));
    }

    #[test]
    fn bad_magic() {
        let err = read_tensor(&mut &b"NOPE\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Header { .. }));
    }
}
