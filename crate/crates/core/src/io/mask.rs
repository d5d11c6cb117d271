//! `STM1`: 16-byte header (`"STM1"`, version, 8 reserved zero bytes), dims
//! `T, H, W` as `u32`, one resolution byte (0 pixel, 1 latent), then runs of
//! `(u32 length, u8 value)` covering the mask in `(t, h, w)` order.

use std::path::Path;

use super::{put_preamble, read_file, write_atomic, IoError, Reader};
use crate::mask::{MaskResolution, SpatioTemporalMask};

const MAGIC: &[u8; 4] = b"STM1";
/// Bytes before the first run.
pub const MASK_HEADER_LEN: usize = 16 + 12 + 1;

pub fn encode_mask(mask: &SpatioTemporalMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + 5);
    put_preamble(&mut out, MAGIC);
    out.extend_from_slice(&[0; 8]);
    for d in mask.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(mask.resolution().tag());
    for run in mask.data().chunk_by(|a, b| a == b) {
        out.extend_from_slice(&(run.len() as u32).to_le_bytes());
        out.push(run[0]);
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SpatioTemporalMask, IoError> {
    let mut r = Reader::new(bytes, "STM1");
    let mask = read_body(&mut r)?;
    r.finish()?;
    Ok(mask)
}

pub(crate) fn read_body(r: &mut Reader<'_>) -> Result<SpatioTemporalMask, IoError> {
    r.preamble(MAGIC)?;
    if r.take(8)? != [0; 8] {
        return Err(IoError::Malformed("reserved header bytes are not zero".into()));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let tag = r.u8()?;
    let resolution =
        MaskResolution::from_tag(tag).ok_or_else(|| IoError::Malformed(format!("unknown resolution tag {tag}")))?;
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| IoError::Malformed(format!("invalid dims {dims:?}")))?;
    let mut data = Vec::new();
    while data.len() < total {
        let len = r.u32()? as usize;
        let value = r.u8()?;
        if len == 0 {
            return Err(IoError::Malformed(format!("zero-length run at voxel {}", data.len())));
        }
        if value > 1 {
            return Err(IoError::Malformed(format!("run value {value} is not binary")));
        }
        if len > total - data.len() {
            return Err(IoError::Malformed(format!("run lengths sum past {total} voxels")));
        }
        data.resize(data.len() + len, value);
    }
    Ok(SpatioTemporalMask::new(dims, resolution, data)?)
}

pub fn write_mask(path: &Path, mask: &SpatioTemporalMask) -> Result<(), IoError> {
    write_atomic(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<SpatioTemporalMask, IoError> {
    decode_mask(&read_file(path)?)
}
