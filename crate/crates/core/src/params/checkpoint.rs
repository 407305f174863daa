//! Binary checkpoint files with a human-readable sidecar manifest.
//!
//! Layout on disk:
//!
//! ```text
//! magic      8 bytes  "MODELAB\0"
//! header_len u64 LE
//! header     JSON {format_version, layout, seeds, metadata}
//! count      u64 LE
//! values     count × f64 LE
//! ```
//!
//! The manifest (`<file>.manifest.toml`) repeats the header as TOML.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ParamLayout, ParamVector, Segment};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MODELAB\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layout: Vec<Segment>,
    seeds: BTreeMap<String, u64>,
    metadata: BTreeMap<String, String>,
}

/// A parameter vector together with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub seeds: BTreeMap<String, u64>,
    pub metadata: BTreeMap<String, String>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    path.with_file_name(name)
}

impl Checkpoint {
    pub fn new(params: ParamVector) -> Self {
        Checkpoint {
            params,
            seeds: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_seed(mut self, key: impl Into<String>, seed: u64) -> Self {
        self.seeds.insert(key.into(), seed);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    fn header(&self) -> Header {
        Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layout: self.params.layout().segments().to_vec(),
            seeds: self.seeds.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let values = self.params.values();
        let mut out = Vec::with_capacity(8 + 8 + header.len() + 8 + values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let header_len =
            read_u64(&mut cursor).ok_or_else(|| bad("truncated header length"))? as usize;
        if cursor.len() < header_len {
            return Err(bad("truncated header"));
        }
        let (header_bytes, rest) = cursor.split_at(header_len);
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(&format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut cursor = rest;
        let count = read_u64(&mut cursor).ok_or_else(|| bad("truncated value count"))? as usize;
        if cursor.len() != count * 8 {
            return Err(bad("value payload length does not match count"));
        }
        let values = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let layout = Arc::new(ParamLayout::new(header.layout)?);
        Ok(Checkpoint {
            params: ParamVector::new(layout, values)?,
            seeds: header.seeds,
            metadata: header.metadata,
        })
    }

    pub fn manifest_text(&self) -> Result<String> {
        toml::to_string(&self.header()).map_err(|e| Error::config(e.to_string()))
    }

    /// Writes the binary file and its manifest; returns the manifest path.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        let manifest = manifest_path(path);
        fs::write(&manifest, self.manifest_text()?)?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u64(cursor: &mut &[u8]) -> Option<u64> {
    let mut buf = [0u8; 8];
    cursor.read_exact(&mut buf).ok()?;
    Some(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModuleKind;

    fn sample() -> Checkpoint {
        let layout = ParamLayout::builder()
            .push("layer0.ff.weight", 3, 0, ModuleKind::Feedforward, 0, false)
            .push("head.weight", 2, 1, ModuleKind::Head, 0, true)
            .build()
            .unwrap();
        let params =
            ParamVector::new(Arc::new(layout), vec![1.5, -0.0, 1e-300, f64::MAX, -2.25]).unwrap();
        Checkpoint::new(params)
            .with_seed("seed", 7)
            .with_meta("step", 100)
    }

    #[test]
    fn save_and_load_preserve_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = sample();
        let manifest = ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        for (x, y) in back.params.values().iter().zip(ckpt.params.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let text = fs::read_to_string(manifest).unwrap();
        assert!(text.contains("format_version = 1"));
        assert!(text.contains("head.weight"));
        assert!(text.contains("step = \"100\""));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&wrong, p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn layout_is_little_endian_f64_after_header() {
        let bytes = sample().to_bytes().unwrap();
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), -2.25);
    }
}
