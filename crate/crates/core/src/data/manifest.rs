//! JSON-lines manifests: one record per line. Relative volume paths are
//! resolved against the manifest's directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth lesion sphere of a phantom, in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub path: PathBuf,
    pub label: u8,
    pub subject_id: String,
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion: Option<Lesion>,
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<VolumeRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: VolumeRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
        if rec.label > 1 {
            return Err(Error::Data(format!(
                "manifest line {}: label {} outside {{0, 1}}",
                i + 1,
                rec.label
            )));
        }
        if rec.path.is_relative() {
            rec.path = base_dir.join(&rec.path);
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<VolumeRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

/// Writes records; paths inside the manifest's directory are stored relative.
pub fn write_manifest(path: impl AsRef<Path>, records: &[VolumeRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut buf = Vec::new();
    for r in records {
        let mut r = r.clone();
        if let Ok(rel) = r.path.strip_prefix(base) {
            r.path = rel.to_path_buf();
        }
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
