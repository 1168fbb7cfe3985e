//! Run outputs: CSV tables, JSON documents, little-endian field dumps with JSON
//! sidecars, and a manifest with SHA-256 digests of every file written.

use crate::error::{LabError, Result};
use crate::torus::{RealField, SpectralField, TorusGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub replica_seeds: Vec<u64>,
    pub wall_clock_secs: f64,
    pub files: Vec<FileEntry>,
}

/// Header of a binary field dump.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldDumpHeader {
    pub label: String,
    pub dtype: String,
    pub dim: usize,
    pub points_per_axis: usize,
    /// `[frames, N^dim]`, frame-major; within a frame the last axis varies fastest.
    pub shape: [usize; 2],
    pub times: Vec<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory that records every file it writes.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
    started: Instant,
}

impl OutputDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(OutputDir { root, files: Vec::new(), started: Instant::now() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_text(name, &s)
    }

    /// CSV with a header row; numbers are written with full round-trip precision.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf> {
        self.write_text(name, &csv_table(header, rows))
    }

    /// `<name>.bin` (little-endian f64) plus `<name>.json`.
    pub fn write_fields(&mut self, name: &str, label: &str, times: &[f64], fields: &[RealField]) -> Result<()> {
        let (header, bytes) = encode_fields(label, times, fields)?;
        self.write_bytes(&format!("{name}.bin"), &bytes)?;
        self.write_json(&format!("{name}.json"), &header)?;
        Ok(())
    }

    pub fn write_spectral_path(&mut self, name: &str, label: &str, times: &[f64], path: &[SpectralField]) -> Result<()> {
        let fields: Vec<RealField> = path.iter().map(|f| f.real()).collect();
        self.write_fields(name, label, times, &fields)
    }

    /// Writes `manifest.json` (the one file not listed in itself).
    pub fn finish<C: Serialize>(self, command: &str, config: &C, master_seed: u64, replica_seeds: Vec<u64>) -> Result<RunManifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            config: serde_json::to_value(config)?,
            master_seed,
            replica_seeds,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            files,
        };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        fs::write(self.root.join("manifest.json"), s)?;
        Ok(manifest)
    }
}

pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn encode_fields(label: &str, times: &[f64], fields: &[RealField]) -> Result<(FieldDumpHeader, Vec<u8>)> {
    if times.len() != fields.len() {
        return Err(LabError::InvalidInput("times and fields differ in length".into()));
    }
    let grid = match fields.first() {
        Some(f) => f.grid,
        None => return Err(LabError::InvalidInput("no fields to write".into())),
    };
    if fields.iter().any(|f| f.grid != grid) {
        return Err(LabError::GridMismatch("field dump mixes grids".into()));
    }
    let mut bytes = Vec::with_capacity(8 * grid.len() * fields.len());
    for f in fields {
        for v in &f.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = FieldDumpHeader {
        label: label.to_string(),
        dtype: "<f8".into(),
        dim: grid.dim(),
        points_per_axis: grid.n(),
        shape: [fields.len(), grid.len()],
        times: times.to_vec(),
    };
    Ok((header, bytes))
}

pub fn decode_fields(header: &FieldDumpHeader, bytes: &[u8]) -> Result<Vec<RealField>> {
    let grid = TorusGrid::new(header.dim, header.points_per_axis)?;
    let [frames, len] = header.shape;
    if header.dtype != "<f8" || len != grid.len() || bytes.len() != 8 * frames * len {
        return Err(LabError::InvalidInput("field dump does not match its header".into()));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(vals.chunks(len).map(|c| RealField { grid, values: c.to_vec() }).collect())
}

/// Reads `<stem>.json` and `<stem>.bin`.
pub fn read_fields(stem: &Path) -> Result<(FieldDumpHeader, Vec<RealField>)> {
    let header: FieldDumpHeader = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = fs::read(stem.with_extension("bin"))?;
    let fields = decode_fields(&header, &bytes)?;
    Ok((header, fields))
}
