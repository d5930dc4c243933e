//! On-disk corpus format and converters.
//!
//! A corpus directory holds three files:
//!
//! * `manifest.json`: `{"height", "width", "channels", "count", "dtype": "f32", "classes": [...]}`
//! * `inputs.f32`: `count × height × width × channels` little-endian `f32`, HWC per sample
//! * `classes.u8`: one class id byte per sample

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::InputShape;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INPUT_FILE: &str = "inputs.f32";
pub const CLASS_FILE: &str = "classes.u8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub dtype: String,
    pub classes: Vec<String>,
}

/// How integer classes become ±1 labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LabelRule {
    /// `positive` maps to +1, `negative` to −1, everything else is dropped.
    /// Classes are given by name or by numeric id.
    ClassPair { positive: String, negative: String },
    /// Class id is the digit; odd digits map to +1, even to −1.
    ParityOfDigit,
}

impl CorpusManifest {
    fn class_id(&self, name: &str) -> Result<u8> {
        if let Some(i) = self.classes.iter().position(|c| c == name) {
            return Ok(i as u8);
        }
        match name.parse::<usize>() {
            Ok(i) if i < 256 && (self.classes.is_empty() || i < self.classes.len()) => Ok(i as u8),
            _ => Err(Error::Data(format!("unknown class {name:?}"))),
        }
    }

    fn shape(&self) -> InputShape {
        InputShape::Image { height: self.height, width: self.width, channels: self.channels }
    }
}

/// Reads a corpus directory and relabels it.
pub fn load_corpus(path: &Path, rule: &LabelRule, balanced: bool, seed: u64) -> Result<LabeledDataset> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(path.join(MANIFEST_FILE))?)?;
    if manifest.dtype != "f32" {
        return Err(Error::Data(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let numel = manifest.height * manifest.width * manifest.channels;
    let raw = fs::read(path.join(INPUT_FILE))?;
    let classes = fs::read(path.join(CLASS_FILE))?;
    if raw.len() != manifest.count * numel * 4 || classes.len() != manifest.count {
        return Err(Error::Data(format!(
            "file sizes do not match manifest count {} (inputs {} bytes, classes {} bytes)",
            manifest.count,
            raw.len(),
            classes.len()
        )));
    }
    if let Some(bad) = classes.iter().find(|&&c| !manifest.classes.is_empty() && c as usize >= manifest.classes.len()) {
        return Err(Error::Data(format!("class id {bad} outside the manifest's {} classes", manifest.classes.len())));
    }
    let label_of = |c: u8| -> Result<Option<f64>> {
        match rule {
            LabelRule::ClassPair { positive, negative } => {
                let (p, n) = (manifest.class_id(positive)?, manifest.class_id(negative)?);
                Ok(if c == p {
                    Some(1.0)
                } else if c == n {
                    Some(-1.0)
                } else {
                    None
                })
            }
            LabelRule::ParityOfDigit => {
                if c > 9 {
                    return Err(Error::Data(format!("class id {c} is not a digit")));
                }
                Ok(Some(if c % 2 == 1 { 1.0 } else { -1.0 }))
            }
        }
    };
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, &c) in classes.iter().enumerate() {
        if let Some(y) = label_of(c)? {
            keep.push(i);
            labels.push(y);
        }
    }
    if !labels.iter().any(|y| *y > 0.0) || !labels.iter().any(|y| *y < 0.0) {
        return Err(Error::Data("a label side is empty after filtering".into()));
    }
    let mut inputs = Array2::zeros((keep.len(), numel));
    for (mut row, &i) in inputs.rows_mut().into_iter().zip(&keep) {
        let bytes = &raw[i * numel * 4..(i + 1) * numel * 4];
        for (v, b) in row.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
    }
    let data = LabeledDataset::new(
        inputs,
        manifest.shape(),
        labels,
        keep.iter().map(|&i| i as u64).collect(),
        Provenance::Corpus { path: path.display().to_string(), rule: rule.clone() },
    )?;
    if balanced {
        data.balanced(seed)
    } else {
        Ok(data)
    }
}

fn write_corpus(out: &Path, manifest: &CorpusManifest, pixels: &[f32], classes: &[u8]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut bytes = Vec::with_capacity(pixels.len() * 4);
    for p in pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(out.join(INPUT_FILE), bytes)?;
    fs::write(out.join(CLASS_FILE), classes)?;
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Converts CIFAR-10 binary batches (`label byte + 3×32×32 CHW planes` per
/// record) into a corpus directory. Pixels are scaled to `[0, 1]`.
pub fn convert_cifar10_bin(batches: &[&Path], out: &Path, classes: Vec<String>) -> Result<CorpusManifest> {
    const PLANE: usize = 32 * 32;
    const RECORD: usize = 1 + 3 * PLANE;
    let mut pixels = Vec::new();
    let mut ids = Vec::new();
    for path in batches {
        let raw = fs::read(path)?;
        if raw.len() % RECORD != 0 {
            return Err(Error::Data(format!("{} is not a whole number of records", path.display())));
        }
        for rec in raw.chunks_exact(RECORD) {
            ids.push(rec[0]);
            for p in 0..PLANE {
                for c in 0..3 {
                    pixels.push(rec[1 + c * PLANE + p] as f32 / 255.0);
                }
            }
        }
    }
    let manifest = CorpusManifest {
        height: 32,
        width: 32,
        channels: 3,
        count: ids.len(),
        dtype: "f32".into(),
        classes,
    };
    write_corpus(out, &manifest, &pixels, &ids)?;
    Ok(manifest)
}

/// Converts a raw `u8` HWC image file plus a class-id byte file.
/// Pixels are scaled to `[0, 1]`.
pub fn convert_raw_hwc(
    images: &Path,
    class_ids: &Path,
    (height, width, channels): (usize, usize, usize),
    out: &Path,
    classes: Vec<String>,
) -> Result<CorpusManifest> {
    let raw = fs::read(images)?;
    let ids = fs::read(class_ids)?;
    let numel = height * width * channels;
    if numel == 0 || raw.len() != ids.len() * numel {
        return Err(Error::Data(format!(
            "{} bytes of pixels do not hold {} images of {height}×{width}×{channels}",
            raw.len(),
            ids.len()
        )));
    }
    let pixels: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let manifest = CorpusManifest { height, width, channels, count: ids.len(), dtype: "f32".into(), classes };
    write_corpus(out, &manifest, &pixels, &ids)?;
    Ok(manifest)
}
