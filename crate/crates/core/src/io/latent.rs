//! `LAT1`: magic, version, `u32` header length, JSON header
//! `{"shape": [T, H, W, C], "dtype": "f32le"}`, then `4·T·H·W·C` data bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_f32s, put_json, put_preamble, read_file, write_atomic, IoError, Reader};
use crate::latent::LatentVideo;

const MAGIC: &[u8; 4] = b"LAT1";
const DTYPE: &str = "f32le";

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    dtype: String,
}

pub fn encode_latent(z: &LatentVideo) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    put_preamble(&mut out, MAGIC);
    put_json(
        &mut out,
        &Header {
            shape: z.shape(),
            dtype: DTYPE.into(),
        },
    );
    put_f32s(&mut out, z.data())?;
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentVideo, IoError> {
    let mut r = Reader::new(bytes, "LAT1");
    r.preamble(MAGIC)?;
    let h: Header = r.json()?;
    if h.dtype != DTYPE {
        return Err(IoError::Malformed(format!("unsupported dtype {:?}", h.dtype)));
    }
    let n = h
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| IoError::Malformed(format!("shape {:?} overflows", h.shape)))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(LatentVideo::new(h.shape, data)?)
}

pub fn write_latent(path: &Path, z: &LatentVideo) -> Result<(), IoError> {
    write_atomic(path, &encode_latent(z)?)
}

pub fn read_latent(path: &Path) -> Result<LatentVideo, IoError> {
    decode_latent(&read_file(path)?)
}
