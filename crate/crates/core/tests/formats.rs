//! Round trips and corruption handling for the on-disk formats.

use localdpo::dataset::{build_dataset, DatasetConfig};
use localdpo::io::{
    decode_checkpoint, decode_latent, decode_mask, decode_tuple, encode_checkpoint, encode_latent, encode_mask,
    encode_tuple, load_dataset, read_index, IoError, LoadMode, INDEX_FILE,
};
use localdpo::models::{Parametric, TinyConfig, TinyDenoiser};
use localdpo::rng::seeded;
use localdpo::{LatentVideo, MaskResolution, PreferenceTuple, ScheduleKind, SpatioTemporalMask};
use proptest::prelude::*;
use rand::Rng;

fn random_mask(rng: &mut impl Rng) -> SpatioTemporalMask {
    let dims = [rng.random_range(1..5), rng.random_range(1..12), rng.random_range(1..12)];
    let p: f64 = rng.random();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| u8::from(rng.random::<f64>() < p))
        .collect();
    let res = if rng.random() {
        MaskResolution::Pixel
    } else {
        MaskResolution::Latent
    };
    SpatioTemporalMask::new(dims, res, data).unwrap()
}

#[test]
fn masks_round_trip() {
    let mut rng = seeded(1);
    for _ in 0..100 {
        let m = random_mask(&mut rng);
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }
}

#[test]
fn tuples_round_trip() {
    let cfg = DatasetConfig {
        latent_shape: [2, 4, 4, 4],
        ..DatasetConfig::default()
    };
    let (tuples, _) = build_dataset(&cfg, 100, 8).unwrap();
    for (i, t) in tuples.iter().enumerate() {
        let kind = if i % 2 == 0 {
            ScheduleKind::Ddpm
        } else {
            ScheduleKind::RectifiedFlow
        };
        let (back, k) = decode_tuple(&encode_tuple(t, kind).unwrap()).unwrap();
        assert_eq!(&back, t);
        assert_eq!(k, kind);
    }
}

#[test]
fn checkpoints_round_trip() {
    let cfg = TinyConfig {
        latent_shape: [2, 4, 4, 2],
        cond_dim: 3,
        hidden: 8,
        ..TinyConfig::default()
    };
    for seed in 0..100 {
        let m = TinyDenoiser::init(cfg.clone(), seed);
        let (back, header) = decode_checkpoint(&encode_checkpoint(&m, seed, seed as usize * 3).unwrap()).unwrap();
        let expected: Vec<f64> = m.params().iter().map(|&p| p as f32 as f64).collect();
        assert_eq!(back.params(), &expected[..]);
        assert_eq!(
            (header.seed, header.step, header.config),
            (seed, seed as usize * 3, cfg.clone())
        );
    }
}

#[test]
fn truncated_and_padded_streams_are_rejected() {
    let m = random_mask(&mut seeded(4));
    let b = encode_mask(&m);
    assert!(decode_mask(&b[..b.len() - 1]).is_err());
    let mut padded = b.clone();
    padded.push(0);
    assert!(matches!(decode_mask(&padded), Err(IoError::TrailingBytes { .. })));
    let z = LatentVideo::filled([1, 2, 2, 1], 0.5);
    let lb = encode_latent(&z).unwrap();
    assert!(decode_latent(&lb[..lb.len() - 2]).is_err());
    assert!(encode_latent(&LatentVideo::filled([1, 1, 1, 1], f64::NAN)).is_err());
}

/// Byte offset of the first loser value outside the mask.
fn outside_loser_offset(bytes: &[u8], t: &PreferenceTuple) -> usize {
    let header = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let ch = t.winner.channels();
    let voxel = t
        .mask
        .data()
        .iter()
        .position(|&v| v == 0)
        .expect("mask leaves something outside");
    header + 4 * t.winner.len() + 4 * voxel * ch
}

#[test]
fn dataset_loading_checks_every_tuple() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        latent_shape: [2, 4, 4, 4],
        ..DatasetConfig::default()
    };
    let (tuples, schedule) = build_dataset(&cfg, 6, 2).unwrap();
    localdpo::io::write_dataset(dir.path(), &tuples, &schedule).unwrap();

    let loaded = load_dataset(dir.path(), LoadMode::Strict).unwrap();
    assert_eq!(loaded.tuples, tuples);
    assert_eq!(loaded.index.schedule, schedule);
    assert!(loaded.rejected.is_empty());

    let victim = &read_index(dir.path()).unwrap().entries[3].path;
    let path = dir.path().join(victim);
    let mut bytes = std::fs::read(&path).unwrap();
    let off = outside_loser_offset(&bytes, &tuples[3]);
    bytes[off] ^= 1;
    std::fs::write(&path, &bytes).unwrap();

    assert!(load_dataset(dir.path(), LoadMode::Strict).is_err());
    let skipped = load_dataset(dir.path(), LoadMode::Skip).unwrap();
    assert_eq!(skipped.tuples.len(), 5);
    assert_eq!(skipped.rejected.len(), 1);
    assert_eq!(&skipped.rejected[0].path, victim);
    assert!(
        skipped.rejected[0].reason.contains("outside"),
        "{}",
        skipped.rejected[0].reason
    );
}

#[test]
fn index_and_tuple_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        latent_shape: [2, 4, 4, 4],
        ..DatasetConfig::default()
    };
    let (tuples, schedule) = build_dataset(&cfg, 2, 2).unwrap();
    localdpo::io::write_dataset(dir.path(), &tuples, &schedule).unwrap();
    let index_path = dir.path().join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).unwrap();
    let mut index: serde_json::Value = serde_json::from_str(&text).unwrap();
    index["entries"][1]["seed"] = serde_json::json!(12345);
    std::fs::write(&index_path, serde_json::to_vec(&index).unwrap()).unwrap();
    assert!(load_dataset(dir.path(), LoadMode::Strict).is_err());
    assert_eq!(load_dataset(dir.path(), LoadMode::Skip).unwrap().rejected.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_mask_round_trips(seed in any::<u64>()) {
        let m = random_mask(&mut seeded(seed));
        prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }

    #[test]
    fn f32_latents_round_trip_bit_exactly(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
        let n = values.len();
        let z = LatentVideo::new([1, 1, n, 1], values.iter().map(|&v| v as f64).collect()).unwrap();
        let back = decode_latent(&encode_latent(&z).unwrap()).unwrap();
        prop_assert!(back.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_mask(&bytes);
        let _ = decode_latent(&bytes);
        let _ = decode_tuple(&bytes);
        let _ = decode_checkpoint(&bytes);
    }
}
