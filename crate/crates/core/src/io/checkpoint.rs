//! `CKP1`: magic, version, `u32` header length, JSON header
//! `{config, seed, step, num_params}`, then the parameters as raw `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{put_f32s, put_json, put_preamble, read_file, write_atomic, IoError, Reader};
use crate::models::{Parametric, TinyConfig, TinyDenoiser};

const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TinyConfig,
    pub seed: u64,
    pub step: usize,
    pub num_params: usize,
}

pub fn encode_checkpoint(model: &TinyDenoiser, seed: u64, step: usize) -> Result<Vec<u8>, IoError> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        seed,
        step,
        num_params: model.params().len(),
    };
    let mut out = Vec::new();
    put_preamble(&mut out, MAGIC);
    put_json(&mut out, &header);
    put_f32s(&mut out, model.params())?;
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TinyDenoiser, CheckpointHeader), IoError> {
    let mut r = Reader::new(bytes, "CKP1");
    r.preamble(MAGIC)?;
    let header: CheckpointHeader = r.json()?;
    let params = r.f32s(header.num_params)?;
    r.finish()?;
    let model = TinyDenoiser::from_params(header.config.clone(), params).map_err(IoError::Malformed)?;
    Ok((model, header))
}

pub fn write_checkpoint(path: &Path, model: &TinyDenoiser, seed: u64, step: usize) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(model, seed, step)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(TinyDenoiser, CheckpointHeader), IoError> {
    decode_checkpoint(&read_file(path)?)
}
