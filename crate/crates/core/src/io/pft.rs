//! PFT1 tensor container: `"PFT1"`, dtype `u8` (1 = f64 LE), ndim `u8`
//! (1..=4), `ndim × u32` LE dims, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PFT1";
pub const DTYPE_F64: u8 = 1;
pub const MAX_NDIM: usize = 4;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    // Scalars are stored as one-element vectors.
    let dims: Vec<usize> = if t.rank() == 0 { vec![1] } else { t.shape().to_vec() };
    if dims.len() > MAX_NDIM {
        return Err(Error::Data(format!("PFT1 holds at most {MAX_NDIM} dimensions, got {}", dims.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for &d in &dims {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 6 {
        return Err(bad(format!("file is {} bytes, too short for a PFT1 header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(bad(format!("unsupported dtype code {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(bad(format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let expect = numel.checked_mul(8).and_then(|p| p.checked_add(header));
    if expect != Some(bytes.len()) {
        return Err(bad(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            numel.saturating_mul(8)
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(dims, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
