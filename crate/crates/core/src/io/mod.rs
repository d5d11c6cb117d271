//! On-disk formats. All integers and floats are little-endian; every binary
//! format starts with a 4-byte magic and a `u32` version.
//!
//! | magic  | content                                                    |
//! |--------|------------------------------------------------------------|
//! | `STM1` | run-length encoded binary mask                             |
//! | `LAT1` | JSON header + raw `f32` latent                             |
//! | `LPT1` | JSON manifest + winner + loser + embedded `STM1` mask      |
//! | `CKP1` | JSON header + raw `f32` parameter vector                   |
//!
//! Latents and parameters are held as `f64` in memory and stored as `f32`;
//! values produced by this crate's generators are `f32`-representable, so
//! round-trips of them are bit-exact.

mod checkpoint;
mod dataset;
mod latent;
mod mask;
mod tuple;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::corruption::CorruptionError;
use crate::latent::LatentError;
use crate::mask::MaskError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader};
pub use dataset::{
    epoch_permutation, load_dataset, read_index, write_dataset, write_index, DatasetIndex, IndexEntry, LoadMode,
    LoadedDataset, Rejection, INDEX_FILE,
};
pub use latent::{decode_latent, encode_latent, read_latent, write_latent};
pub use mask::{decode_mask, encode_mask, read_mask, write_mask, MASK_HEADER_LEN};
pub use tuple::{decode_tuple, encode_tuple, read_tuple, write_tuple};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {found}")]
    Version { format: &'static str, found: u32 },
    #[error("truncated {format} stream: needed {needed} bytes at offset {offset}, have {have}")]
    Truncated {
        format: &'static str,
        offset: usize,
        needed: usize,
        have: usize,
    },
    #[error("{0} trailing bytes after end of stream")]
    TrailingBytes(usize),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("header JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot write non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Tuple(#[from] CorruptionError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

/// Parse a config file as TOML when the extension is `.toml`, JSON otherwise.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| IoError::Config(format!("{}: {e}", path.display())))
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self { bytes, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let have = self.bytes.len() - self.pos;
        if n > have {
            return Err(IoError::Truncated {
                format: self.format,
                offset: self.pos,
                needed: n,
                have,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Check the magic and version.
    pub(crate) fn preamble(&mut self, magic: &[u8; 4]) -> Result<(), IoError> {
        let found = self.take(4)?;
        if found != magic {
            return Err(IoError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(IoError::Version {
                format: self.format,
                found: version,
            });
        }
        Ok(())
    }

    /// A `u32` length followed by that many bytes of JSON.
    pub(crate) fn json<T: DeserializeOwned>(&mut self) -> Result<T, IoError> {
        let len = self.u32()? as usize;
        Ok(serde_json::from_slice(self.take(len)?)?)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| IoError::Malformed("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn finish(self) -> Result<(), IoError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(IoError::TrailingBytes(n)),
        }
    }
}

pub(crate) fn put_preamble(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

pub(crate) fn put_json(out: &mut Vec<u8>, value: &impl serde::Serialize) {
    let json = serde_json::to_vec(value).expect("header serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
}

/// Append values as `f32`, rejecting non-finite ones.
pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<(), IoError> {
    out.reserve(values.len() * 4);
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(IoError::NonFinite(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}
