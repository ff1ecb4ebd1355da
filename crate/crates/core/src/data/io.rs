//! Raw little-endian tensor files: magic "LFBT", u32 version, u8 dtype code,
//! u32 rank, u64 dims, payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"LFBT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_U8: u8 = 1;

fn encode(dtype: u8, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * dims.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode<'a>(bytes: &'a [u8], want: u8, what: &'a str) -> Result<(Vec<usize>, &'a [u8])> {
    let mut c = Cursor { buf: bytes, pos: 0, what };
    if c.take(4)? != MAGIC {
        return Err(Error::Format(format!("{what}: bad magic")));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("{what}: unsupported version {version}")));
    }
    let dtype = c.take(1)?[0];
    if dtype != want {
        return Err(Error::Format(format!("{what}: dtype code {dtype}, expected {want}")));
    }
    let rank = c.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("{what}: implausible rank {rank}")));
    }
    let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let elem = if want == DTYPE_F64 { 8 } else { 1 };
    let bytes_needed = count
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| Error::Format(format!("{what}: dims {dims:?} overflow")))?;
    let payload = c.take(bytes_needed)?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{what}: {} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((dims, payload))
}

pub fn encode_image(t: &Tensor4) -> Vec<u8> {
    let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(DTYPE_F64, &t.dims(), &payload)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor4> {
    let (dims, payload) = decode(bytes, DTYPE_F64, "image file")?;
    let dims: [usize; 4] = dims
        .try_into()
        .map_err(|d: Vec<usize>| Error::Format(format!("image file: rank {} (expected 4)", d.len())))?;
    let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Tensor4::from_vec(dims, data)
}

pub fn encode_labels(labels: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::InvalidArgument(format!("{} labels for {height}x{width}", labels.len())));
    }
    Ok(encode(DTYPE_U8, &[height, width], labels))
}

/// Returns (labels, height, width).
pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (dims, payload) = decode(bytes, DTYPE_U8, "label file")?;
    match dims[..] {
        [h, w] => Ok((payload.to_vec(), h, w)),
        _ => Err(Error::Format(format!("label file: rank {} (expected 2)", dims.len()))),
    }
}

pub fn write_image(path: &Path, t: &Tensor4) -> Result<()> {
    fs::write(path, encode_image(t))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor4> {
    decode_image(&fs::read(path)?)
}

pub fn write_labels(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_labels(labels, height, width)?)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_labels(&fs::read(path)?)
}
