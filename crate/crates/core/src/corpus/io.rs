//! On-disk corpora: a JSON-lines manifest next to binary feature files.
//!
//! Feature file layout: `u32 frames`, `u32 dim` (little-endian), then
//! `frames × dim` little-endian `f64` values in row-major order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::nn::Matrix;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub token_ids: Vec<TokenId>,
    /// Relative to the manifest's directory.
    pub feature_file: String,
    pub frame_count: usize,
}

pub fn write_features(path: &Path, features: &Matrix) -> Result<()> {
    let (rows, cols) = features.shape();
    let header = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Data(format!("{} too large for a u32 header", v)))
    };
    let mut buf = Vec::with_capacity(8 + rows * cols * 8);
    buf.extend_from_slice(&header(rows)?);
    buf.extend_from_slice(&header(cols)?);
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{}: truncated feature header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Data(format!(
            "{}: header says {rows}x{cols} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Data(format!("manifest encoding: {err}")))?;
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Writes `utterances` under `dir` (manifest plus `feats/NNNNNN.bin`).
pub fn save_corpus(dir: &Path, utterances: &[Utterance]) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut entries = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let rel = format!("feats/{i:06}.bin");
        write_features(&dir.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            domain: u.domain.clone(),
            token_ids: u.tokens.clone(),
            feature_file: rel,
            frame_count: u.features.rows(),
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a corpus from a directory or a manifest path.
pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let manifest = manifest_path(path);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            let features = read_features(&base.join(&e.feature_file))?;
            if features.rows() != e.frame_count {
                return Err(Error::Data(format!(
                    "utterance {}: manifest frame_count {} but feature file has {}",
                    e.id,
                    e.frame_count,
                    features.rows()
                )));
            }
            Ok(Utterance {
                id: e.id,
                domain: e.domain,
                features,
                tokens: e.token_ids,
                raw_frame_count: None,
            })
        })
        .collect()
}
