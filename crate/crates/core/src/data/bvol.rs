//! BVOL: a 26-byte little-endian header (magic, four u32 dims, dtype byte,
//! three reserved zero bytes) followed by the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BVOL_MAGIC: &[u8; 6] = b"BVOL1\0";
pub const BVOL_HEADER_LEN: usize = 26;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BvolPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl BvolPayload {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bvol {
    pub dims: [usize; 4],
    pub payload: BvolPayload,
}

impl Bvol {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n: usize = self.dims.iter().product();
        if n != self.payload.len() {
            return Err(Error::Shape(format!("BVOL dims {:?} vs {} values", self.dims, self.payload.len())));
        }
        let mut out = Vec::with_capacity(BVOL_HEADER_LEN + n * 4);
        out.extend_from_slice(BVOL_MAGIC);
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            BvolPayload::F32(v) => {
                out.push(DTYPE_F32);
                out.extend_from_slice(&[0; 3]);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            BvolPayload::U8(v) => {
                out.push(DTYPE_U8);
                out.extend_from_slice(&[0; 3]);
                out.extend_from_slice(v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BVOL_HEADER_LEN {
            return Err(Error::Format(format!("BVOL header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..6] != BVOL_MAGIC {
            return Err(Error::Format("bad BVOL magic".into()));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = 6 + 4 * i;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("BVOL dims {dims:?} overflow")))?;
        let body = &bytes[BVOL_HEADER_LEN..];
        let (width, dtype) = match bytes[22] {
            DTYPE_F32 => (4, DTYPE_F32),
            DTYPE_U8 => (1, DTYPE_U8),
            other => return Err(Error::Format(format!("unknown BVOL dtype code {other}"))),
        };
        if body.len() != n * width {
            return Err(Error::Format(format!(
                "BVOL payload is {} bytes, dims {dims:?} need {}",
                body.len(),
                n * width
            )));
        }
        let payload = if dtype == DTYPE_F32 {
            BvolPayload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        } else {
            BvolPayload::U8(body.to_vec())
        };
        Ok(Bvol { dims, payload })
    }
}

pub fn write_bvol(path: &Path, b: &Bvol) -> Result<()> {
    fs::write(path, b.to_bytes()?)?;
    Ok(())
}

pub fn read_bvol(path: &Path) -> Result<Bvol> {
    Bvol::from_bytes(&fs::read(path)?)
}
