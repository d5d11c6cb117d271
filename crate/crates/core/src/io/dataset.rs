//! Dataset directories: one `LPT1` file per tuple plus an `index.json`.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, read_file, read_tuple, write_atomic, write_tuple, IoError, FORMAT_VERSION};
use crate::corruption::PreferenceTuple;
use crate::diffusion::DiffusionSchedule;
use crate::rng::{derive_seed, seeded};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub alpha: f64,
    pub coverage: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub schedule: DiffusionSchedule,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.version != FORMAT_VERSION {
            return Err(IoError::Version {
                format: "index",
                found: self.version,
            });
        }
        if self.entries.is_empty() {
            return Err(IoError::Malformed("dataset index has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            let p = Path::new(&e.path);
            if !p.components().all(|c| matches!(c, Component::Normal(_))) {
                return Err(IoError::Malformed(format!(
                    "index path {:?} is not a plain relative path",
                    e.path
                )));
            }
            if !seen.insert(&e.path) {
                return Err(IoError::Malformed(format!("duplicate index path {:?}", e.path)));
            }
        }
        Ok(())
    }
}

pub fn write_index(dir: &Path, index: &DatasetIndex) -> Result<(), IoError> {
    index.validate()?;
    let json = serde_json::to_vec_pretty(index)?;
    write_atomic(&dir.join(INDEX_FILE), &json)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex, IoError> {
    let index: DatasetIndex = serde_json::from_slice(&read_file(&dir.join(INDEX_FILE))?)?;
    index.validate()?;
    Ok(index)
}

/// Write `tuples` as `tuple_NNNNN.lpt` files and an index, in tuple order.
pub fn write_dataset(
    dir: &Path,
    tuples: &[PreferenceTuple],
    schedule: &DiffusionSchedule,
) -> Result<DatasetIndex, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries = tuples
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let name = format!("tuple_{i:05}.lpt");
            write_tuple(&dir.join(&name), t, schedule.kind())?;
            Ok(IndexEntry {
                path: name,
                alpha: t.noise_strength,
                coverage: t.mask.coverage(),
                seed: t.seed,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let index = DatasetIndex {
        version: FORMAT_VERSION,
        schedule: schedule.clone(),
        entries,
    };
    write_index(dir, &index)?;
    Ok(index)
}

/// What to do with a tuple that fails validation on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Fail the whole load.
    #[default]
    Strict,
    /// Drop the tuple and report it.
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub path: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    /// Accepted tuples in index order.
    pub tuples: Vec<PreferenceTuple>,
    pub rejected: Vec<Rejection>,
}

fn load_entry(dir: &Path, e: &IndexEntry, schedule: &DiffusionSchedule) -> Result<PreferenceTuple, IoError> {
    let (t, kind) = read_tuple(&dir.join(&e.path))?;
    if kind != schedule.kind() {
        return Err(IoError::Malformed(format!(
            "tuple schedule {kind} disagrees with index schedule {}",
            schedule.kind()
        )));
    }
    if t.noise_strength.to_bits() != e.alpha.to_bits() || t.seed != e.seed {
        return Err(IoError::Malformed(format!(
            "tuple (alpha {}, seed {}) disagrees with index (alpha {}, seed {})",
            t.noise_strength, t.seed, e.alpha, e.seed
        )));
    }
    Ok(t)
}

pub fn load_dataset(dir: &Path, mode: LoadMode) -> Result<LoadedDataset, IoError> {
    let index = read_index(dir)?;
    let results: Vec<_> = index
        .entries
        .par_iter()
        .map(|e| load_entry(dir, e, &index.schedule))
        .collect();
    let mut tuples = Vec::with_capacity(results.len());
    let mut rejected = Vec::new();
    for (e, r) in index.entries.iter().zip(results) {
        match (r, mode) {
            (Ok(t), _) => tuples.push(t),
            (Err(err), LoadMode::Strict) => {
                return Err(IoError::Malformed(format!("{}: {err}", e.path)));
            }
            (Err(err), LoadMode::Skip) => rejected.push(Rejection {
                path: e.path.clone(),
                reason: err.to_string(),
            }),
        }
    }
    Ok(LoadedDataset {
        index,
        tuples,
        rejected,
    })
}

/// Iteration order of `n` items in `epoch`, a pure function of its inputs.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, epoch)));
    order
}
