//! `LPT1`: magic, version, `u32` manifest length, JSON manifest, winner and
//! loser as raw `f32`, then the latent mask as an embedded `STM1` stream of
//! `mask_bytes` bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::read_body;
use super::{encode_mask, put_f32s, put_json, put_preamble, read_file, write_atomic, IoError, Reader};
use crate::corruption::PreferenceTuple;
use crate::diffusion::ScheduleKind;
use crate::latent::{Conditioning, LatentVideo};

const MAGIC: &[u8; 4] = b"LPT1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: [usize; 4],
    noise_strength: f64,
    noise_low: f64,
    noise_high: f64,
    seed: u64,
    schedule: ScheduleKind,
    conditioning: Conditioning,
    mask_bytes: usize,
}

/// Serialize a tuple, produced under a `schedule` of this kind, after
/// checking its invariants.
pub fn encode_tuple(t: &PreferenceTuple, schedule: ScheduleKind) -> Result<Vec<u8>, IoError> {
    t.validate()?;
    let mask = encode_mask(&t.mask);
    let mut out = Vec::new();
    put_preamble(&mut out, MAGIC);
    put_json(
        &mut out,
        &Manifest {
            shape: t.winner.shape(),
            noise_strength: t.noise_strength,
            noise_low: t.noise_range.0,
            noise_high: t.noise_range.1,
            seed: t.seed,
            schedule,
            conditioning: t.conditioning.clone(),
            mask_bytes: mask.len(),
        },
    );
    put_f32s(&mut out, t.winner.data())?;
    put_f32s(&mut out, t.loser.data())?;
    out.extend_from_slice(&mask);
    Ok(out)
}

/// Parse a tuple and re-check its invariants.
pub fn decode_tuple(bytes: &[u8]) -> Result<(PreferenceTuple, ScheduleKind), IoError> {
    let mut r = Reader::new(bytes, "LPT1");
    r.preamble(MAGIC)?;
    let m: Manifest = r.json()?;
    let n = m
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| IoError::Malformed(format!("shape {:?} overflows", m.shape)))?;
    let winner = LatentVideo::new(m.shape, r.f32s(n)?)?;
    let loser = LatentVideo::new(m.shape, r.f32s(n)?)?;
    let mut mr = Reader::new(r.take(m.mask_bytes)?, "STM1");
    let mask = read_body(&mut mr)?;
    mr.finish()?;
    r.finish()?;
    let t = PreferenceTuple {
        conditioning: m.conditioning,
        winner,
        loser,
        mask,
        noise_strength: m.noise_strength,
        noise_range: (m.noise_low, m.noise_high),
        seed: m.seed,
    };
    t.validate()?;
    Ok((t, m.schedule))
}

pub fn write_tuple(path: &Path, t: &PreferenceTuple, schedule: ScheduleKind) -> Result<(), IoError> {
    write_atomic(path, &encode_tuple(t, schedule)?)
}

pub fn read_tuple(path: &Path) -> Result<(PreferenceTuple, ScheduleKind), IoError> {
    decode_tuple(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{MaskResolution, SpatioTemporalMask};
    use crate::rng::seeded;

    fn tuple() -> PreferenceTuple {
        let mut rng = seeded(3);
        let winner = LatentVideo::standard_normal([2, 2, 2, 2], &mut rng);
        let mut mask = SpatioTemporalMask::zeros([2, 2, 2], MaskResolution::Latent);
        mask.set(1, 0, 1, true);
        let mut loser = winner.clone();
        let i = loser.index(1, 0, 1, 1);
        loser.data_mut()[i] = 0.25;
        PreferenceTuple {
            conditioning: Conditioning::standard_normal(3, &mut rng),
            winner,
            loser,
            mask,
            noise_strength: 0.8125,
            noise_range: (0.75, 0.95),
            seed: 99,
        }
    }

    #[test]
    fn round_trip() {
        let t = tuple();
        assert_eq!(
            decode_tuple(&encode_tuple(&t, ScheduleKind::RectifiedFlow).unwrap()).unwrap(),
            (t, ScheduleKind::RectifiedFlow)
        );
    }

    #[test]
    fn outside_mask_mutation_is_rejected() {
        let t = tuple();
        let mut b = encode_tuple(&t, ScheduleKind::Ddpm).unwrap();
        let header = 12 + u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        // First loser value lies outside the mask.
        let off = header + 4 * t.winner.len();
        b[off] ^= 1;
        assert!(matches!(decode_tuple(&b), Err(IoError::Tuple(_))));
    }

    #[test]
    fn invalid_tuples_do_not_encode() {
        let mut t = tuple();
        t.noise_strength = 0.5;
        assert!(encode_tuple(&t, ScheduleKind::Ddpm).is_err());
    }
}
