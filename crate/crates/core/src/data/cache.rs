use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{gen_task, Dataset, GenArgs, Sample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLDSET\0\x01";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    args: GenArgs,
    name: String,
    task_id: String,
    distribution_id: String,
    dim: usize,
    n: usize,
}

/// Binary dataset cache keyed by a digest of the generation arguments.
#[derive(Clone, Debug)]
pub struct DatasetCache {
    dir: PathBuf,
}

impl DatasetCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetCache { dir: dir.into() }
    }

    pub fn key(args: &GenArgs) -> Result<String> {
        let canonical = serde_json::to_vec(args)?;
        Ok(hex::encode(&Sha256::digest(&canonical)[..12]))
    }

    pub fn path_for(&self, args: &GenArgs) -> Result<PathBuf> {
        Ok(self.dir.join(format!("{}.bin", Self::key(args)?)))
    }

    pub fn load_or_generate(&self, args: &GenArgs) -> Result<Dataset> {
        let path = self.path_for(args)?;
        if path.exists() {
            let (cached_args, dataset) = read(&path)?;
            if cached_args == *args {
                return Ok(dataset);
            }
        }
        let dataset = gen_task(args)?;
        fs::create_dir_all(&self.dir)?;
        write(&path, args, &dataset)?;
        Ok(dataset)
    }
}

fn write(path: &Path, args: &GenArgs, d: &Dataset) -> Result<()> {
    let dim = d.feature_dim().unwrap_or(0);
    let header = serde_json::to_vec(&CacheHeader {
        args: args.clone(),
        name: d.name.clone(),
        task_id: d.task_id.clone(),
        distribution_id: d.distribution_id.clone(),
        dim,
        n: d.len(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + d.len() * (4 + 8 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &d.samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn read(path: &Path) -> Result<(GenArgs, Dataset)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset cache file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: CacheHeader = serde_json::from_slice(&body[..header_len])?;
    let payload = &body[header_len..];
    let record = 4 + 8 * header.dim;
    if payload.len() != record * header.n {
        return Err(bad("payload length does not match header"));
    }
    let task: Arc<str> = Arc::from(header.task_id.as_str());
    let samples = payload
        .chunks_exact(record)
        .map(|rec| Sample {
            label: u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")) as usize,
            features: rec[4..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            task_id: Arc::clone(&task),
        })
        .collect();
    let dataset = Dataset::new(header.name, samples, header.task_id, header.distribution_id)?;
    Ok((header.args, dataset))
}
