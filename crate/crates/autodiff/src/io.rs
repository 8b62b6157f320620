//! Binary tensor format: `rank: u32`, `dims: u32 * rank`, then row-major
//! little-endian `f64` values.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 * shape.len() + 8 * shape.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; 8 * n];
    r.read_exact(&mut bytes).map_err(|e| truncated(e, &shape))?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

/// Decodes exactly one tensor; trailing bytes are an error.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes after tensor", cursor.len())));
    }
    Ok(t)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(e, &[]))?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error, shape: &[usize]) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format(format!("truncated tensor data (shape so far {shape:?})"))
    } else {
        TensorError::Io(e)
    }
}
