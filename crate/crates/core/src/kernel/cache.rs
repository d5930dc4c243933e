//! On-disk kernel cache.
//!
//! File layout: the 8-byte magic `NTKGRAM1`, a little-endian `u64` header
//! length, the JSON [`KernelFileHeader`], then the values as row-major
//! little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{KernelKind, KernelMatrix, KernelMeta};
use crate::error::{Error, Result};
use crate::real::Precision;

/// Environment variable naming the cache directory.
pub const CACHE_DIR_ENV: &str = "NTKLAB_CACHE_DIR";

const MAGIC: &[u8; 8] = b"NTKGRAM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFileHeader {
    pub kind: KernelKind,
    pub spec_hash: String,
    pub meta: KernelMeta,
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    pub precision: Precision,
}

impl KernelMatrix {
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let header = KernelFileHeader {
            kind: self.kind.clone(),
            spec_hash: self.meta.spec_hash.clone(),
            meta: self.meta.clone(),
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
            precision: Precision::F64,
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            for v in self.values.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<KernelMatrix> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Data(format!("{} is not a kernel file", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Data("truncated kernel header".into()))?;
        let header: KernelFileHeader = serde_json::from_slice(body)?;
        let (r, c) = (header.row_ids.len(), header.col_ids.len());
        let payload = &bytes[16 + hlen..];
        if payload.len() != r * c * 8 {
            return Err(Error::Data(format!(
                "kernel payload has {} bytes, expected {}",
                payload.len(),
                r * c * 8
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        Ok(KernelMatrix {
            values: Array2::from_shape_vec((r, c), values).expect("payload shape"),
            row_ids: header.row_ids,
            col_ids: header.col_ids,
            kind: header.kind,
            meta: header.meta,
        })
    }
}

/// Kernel files keyed by (spec hash, anchor hash, dataset slice hash).
#[derive(Clone, Debug)]
pub struct KernelCache {
    dir: PathBuf,
}

impl KernelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(KernelCache { dir })
    }

    /// Cache rooted at `$NTKLAB_CACHE_DIR`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) => Ok(Some(Self::new(PathBuf::from(d))?)),
            None => Ok(None),
        }
    }

    pub fn key(spec_hash: &str, anchor_hash: &str, slice_hash: &str) -> String {
        let digest = Sha256::digest(format!("{spec_hash}\n{anchor_hash}\n{slice_hash}").as_bytes());
        hex::encode(&digest[..12])
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.ntk"))
    }

    pub fn get(&self, key: &str) -> Result<Option<KernelMatrix>> {
        let p = self.path(key);
        if p.exists() {
            KernelMatrix::read_from(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn get_or_compute(&self, key: &str, compute: impl FnOnce() -> Result<KernelMatrix>) -> Result<KernelMatrix> {
        if let Some(k) = self.get(key)? {
            return Ok(k);
        }
        let k = compute()?;
        k.write_to(&self.path(key))?;
        Ok(k)
    }
}

/// Hash of a sample-id slice, for cache keys.
pub(crate) fn ids_hash(row_ids: &[u64], col_ids: &[u64]) -> String {
    let mut h = Sha256::new();
    for id in row_ids {
        h.update(id.to_le_bytes());
    }
    h.update(b"|");
    for id in col_ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(&h.finalize()[..12])
}
