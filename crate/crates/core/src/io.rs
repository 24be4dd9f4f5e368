//! On-disk artifact formats.
//!
//! Arrays are stored as `<stem>.bin` (raw little-endian `f64`, row-major)
//! next to a `<stem>.json` sidecar:
//!
//! ```json
//! {"shape": [rows, cols], "dtype": "f64", "order": "row-major"}
//! ```
//!
//! Sidecars may carry an extra `provenance` object; readers ignore unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where an artifact came from. Contains nothing time- or host-dependent so
/// reruns stay byte-identical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Provenance {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            version: TOOLKIT_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySidecar {
    shape: [usize; 2],
    dtype: String,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_array(stem: &Path, m: &DenseMatrix, provenance: Option<&Provenance>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&bin_path(stem), &bytes)?;
    let sidecar = ArraySidecar {
        shape: [m.rows(), m.cols()],
        dtype: "f64".into(),
        order: "row-major".into(),
        provenance: provenance.cloned(),
    };
    write_json(&sidecar_path(stem), &sidecar)
}

pub fn write_vector(stem: &Path, v: &[f64], provenance: Option<&Provenance>) -> Result<()> {
    write_array(stem, &DenseMatrix::from_raw(1, v.len(), v.to_vec()), provenance)
}

pub fn read_array(stem: &Path) -> Result<DenseMatrix> {
    let side_path = sidecar_path(stem);
    let sidecar: ArraySidecar = read_json(&side_path)?;
    if sidecar.dtype != "f64" || sidecar.order != "row-major" {
        return Err(Error::format(
            &side_path,
            format!("unsupported dtype/order {}/{}", sidecar.dtype, sidecar.order),
        ));
    }
    let path = bin_path(stem);
    let bytes = read_bytes(&path)?;
    let [rows, cols] = sidecar.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::format(
            &path,
            format!("{} bytes for shape [{rows}, {cols}]", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DenseMatrix::new(rows, cols, data)
}

/// Reads an array and flattens it; accepts `1 × n` and `n × 1` shapes.
pub fn read_vector(stem: &Path) -> Result<Vec<f64>> {
    let m = read_array(stem)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(Error::format(
            sidecar_path(stem),
            format!("expected a vector, found shape [{}, {}]", m.rows(), m.cols()),
        ));
    }
    Ok(m.into_data())
}
