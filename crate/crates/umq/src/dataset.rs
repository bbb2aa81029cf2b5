//! Manifest-plus-raw-binary dataset layout.
//!
//! A manifest is JSON; every feature file holds `n · seq_len · dim`
//! little-endian `f32` values, row-major, with no header. The labels file
//! holds `n` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umq_core::dataio::{Dataset, ModalityInfo, Splits, Task, DEFAULT_SPLIT_RATIOS};

use crate::error::{io, Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: Vec<ModalityEntry>,
    pub n: usize,
    pub task: Task,
    pub labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
}

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(io(path))?;
    let expected = (expected_len * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io(path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let path = manifest_path(path);
    let m = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut infos = Vec::with_capacity(m.modalities.len());
    let mut features = Vec::with_capacity(m.modalities.len());
    for e in &m.modalities {
        let seq_len = e.seq_len.unwrap_or(1);
        features.push(read_f32(&dir.join(&e.file), m.n * seq_len * e.dim)?);
        infos.push(ModalityInfo {
            name: e.name.clone(),
            dim: e.dim,
            seq_len,
        });
    }
    let labels = read_f32(&dir.join(&m.labels_file), m.n)?;
    let splits = m
        .splits
        .clone()
        .unwrap_or_else(|| Splits::derive(m.n, DEFAULT_SPLIT_RATIOS, 0));
    Ok(Dataset::new(infos, m.task, features, labels, splits)?)
}

/// Writes `ds` under `dir` with explicit splits; returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::new();
    for (info, f) in ds.modalities.iter().zip(&ds.features) {
        let file = format!("{}.f32", info.name);
        write_f32(&dir.join(&file), f)?;
        entries.push(ModalityEntry {
            name: info.name.clone(),
            dim: info.dim,
            seq_len: (info.seq_len != 1).then_some(info.seq_len),
            file,
        });
    }
    write_f32(&dir.join("labels.f32"), &ds.labels)?;
    let manifest = Manifest {
        modalities: entries,
        n: ds.len(),
        task: ds.task,
        labels_file: "labels.f32".into(),
        splits: Some(ds.splits.clone()),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(path)
}

/// SHA-256 over the manifest bytes followed by every data file in manifest
/// order, as lowercase hex.
pub fn dataset_digest(path: &Path) -> Result<String> {
    let path = manifest_path(path);
    let m = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(fs::read(&path).map_err(io(&path))?);
    for file in m.modalities.iter().map(|e| &e.file).chain([&m.labels_file]) {
        let p = dir.join(file);
        h.update(fs::read(&p).map_err(io(&p))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Total size in bytes of the data files (manifest excluded).
pub fn data_bytes(path: &Path) -> Result<u64> {
    let path = manifest_path(path);
    let m = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut total = 0;
    for file in m.modalities.iter().map(|e| &e.file).chain([&m.labels_file]) {
        let p = dir.join(file);
        total += fs::metadata(&p).map_err(io(&p))?.len();
    }
    Ok(total)
}
