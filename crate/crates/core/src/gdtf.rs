//! GDTF: the on-disk tensor format.
//!
//! Layout (all little-endian):
//!   magic   4 bytes  "GDTF"
//!   version u32      (1)
//!   dtype   u8       (1 = f32, 2 = f64)
//!   rank    u32
//!   shape   rank * u64
//!   payload product(shape) * dtype size, row-major

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDTF";
pub const VERSION: u32 = 1;

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut buf = Vec::with_capacity(t.len() * S::DTYPE.size() + 64);
    encode_tensor(&mut buf, t);
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let t = decode_tensor(&bytes, &mut off, &path.display().to_string())?;
    if off != bytes.len() {
        return Err(corrupt(path, "trailing bytes after payload"));
    }
    Ok(t)
}

fn corrupt(path: &Path, reason: &str) -> Error {
    Error::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Append one tensor record to `buf`; shared with the checkpoint format.
pub fn encode_tensor<S: Scalar>(buf: &mut Vec<u8>, t: &Tensor<S>) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(S::DTYPE.code());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes_vec());
    }
}

/// Decode one tensor record starting at `*off`, advancing it.
pub fn decode_tensor<S: Scalar>(bytes: &[u8], off: &mut usize, ctx: &str) -> Result<Tensor<S>> {
    let path = Path::new(ctx);
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > bytes.len() {
            Err(corrupt(path, "truncated record"))
        } else {
            Ok(())
        }
    };
    need(*off, 9)?;
    if &bytes[*off..*off + 4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[*off + 4..*off + 8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(path, &format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[*off + 8])
        .ok_or_else(|| corrupt(path, &format!("unknown dtype code {}", bytes[*off + 8])))?;
    if dtype != S::DTYPE {
        return Err(corrupt(
            path,
            &format!("dtype {:?} does not match expected {:?}", dtype, S::DTYPE),
        ));
    }
    *off += 9;
    need(*off, 4)?;
    let rank = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap()) as usize;
    *off += 4;
    need(*off, rank * 8)?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u64::from_le_bytes(bytes[*off + i * 8..*off + i * 8 + 8].try_into().unwrap()) as usize);
    }
    *off += rank * 8;
    let count: usize = shape.iter().product();
    let payload = count * S::DTYPE.size();
    need(*off, payload)?;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        data.push(S::from_le_slice(&bytes[*off + i * S::DTYPE.size()..]));
    }
    *off += payload;
    Ok(Tensor::from_vec(&shape, data))
}
