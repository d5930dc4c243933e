//! Weight vectors on disk: flat little-endian binary plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, WeightVector};
use crate::error::{Error, Result};
use crate::real::{Precision, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub spec_hash: String,
    pub seed: Option<u64>,
    pub precision: Precision,
    pub len: usize,
    pub anchor_tag: Option<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_weights<T: Real>(path: &Path, spec: &NetworkSpec, w: &WeightVector<T>, seed: Option<u64>) -> Result<()> {
    let meta = WeightSidecar {
        spec_hash: spec.spec_hash(),
        seed,
        precision: T::PRECISION,
        len: w.len(),
        anchor_tag: w.anchor_tag.clone(),
    };
    fs::write(path, T::to_le_bytes_vec(&w.flat))?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads weights written by [`write_weights`], checking the spec hash,
/// precision and length against `spec`.
pub fn read_weights<T: Real>(path: &Path, spec: &NetworkSpec) -> Result<(WeightVector<T>, WeightSidecar)> {
    let meta: WeightSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if meta.spec_hash != spec.spec_hash() {
        return Err(Error::Data(format!(
            "weight file was written for spec {}, not {}",
            meta.spec_hash,
            spec.spec_hash()
        )));
    }
    if meta.precision != T::PRECISION {
        return Err(Error::Data(format!("weight file precision is {:?}", meta.precision)));
    }
    let bytes = fs::read(path)?;
    let width = T::PRECISION.bytes();
    if bytes.len() != meta.len * width {
        return Err(Error::Data(format!(
            "weight payload has {} bytes, expected {}",
            bytes.len(),
            meta.len * width
        )));
    }
    let network = Network::new(spec)?;
    if meta.len != network.num_params() {
        return Err(Error::Length {
            expected: network.num_params(),
            got: meta.len,
        });
    }
    let flat = bytes.chunks_exact(width).map(T::from_le_chunk).collect();
    let w = WeightVector {
        flat,
        layer_views: network.layer_views().to_vec(),
        anchor_tag: meta.anchor_tag.clone(),
    };
    Ok((w, meta))
}
