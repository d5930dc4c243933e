use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentKind, ModelKind};
use crate::error::Result;

/// Coordinates of one cell of a sweep. Its hash names the cell's files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub model: ModelKind,
    pub width: Option<usize>,
    pub n: usize,
    pub m: Option<usize>,
    pub t: Option<u64>,
    pub learning_rate: f64,
    pub seed: u64,
    /// `fresh` or `subset` for after-kernel cells.
    pub mode: Option<String>,
}

impl CellId {
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("cell id serializes");
        hex::encode(&Sha256::digest(&json)[..10])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    /// Stopped by the divergence guard; kept as a result, with no errors.
    Diverged,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell_key: String,
    #[serde(flatten)]
    pub cell: CellId,
    pub status: CellStatus,
    /// Error under the configured stopping policy.
    pub test_error: Option<f64>,
    pub best_step: Option<u64>,
    pub best_test_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub steps_run: u64,
    pub optimizer_fingerprint: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell_key: String,
    pub cell: CellId,
    pub error: String,
}

/// Output directory of one experiment.
#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.json";

impl RunStore {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["rows", "logs", "snapshots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunStore { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Self {
        RunStore { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn row_path(&self, key: &str) -> PathBuf {
        self.root.join("rows").join(format!("{key}.json"))
    }

    pub fn log_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn snapshot_path(&self, key: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{key}.w"))
    }

    pub fn has_row(&self, key: &str) -> bool {
        self.row_path(key).exists()
    }

    pub fn write_row(&self, row: &ResultRow) -> Result<()> {
        write_atomic(&self.row_path(&row.cell_key), &serde_json::to_vec_pretty(row)?)
    }

    pub fn read_row(&self, key: &str) -> Result<ResultRow> {
        Ok(serde_json::from_slice(&fs::read(self.row_path(key))?)?)
    }

    /// Every committed row, ordered by cell key.
    pub fn rows(&self) -> Result<Vec<ResultRow>> {
        let dir = self.root.join("rows");
        let mut rows = Vec::new();
        if dir.exists() {
            for entry in fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    rows.push(serde_json::from_slice::<ResultRow>(&fs::read(&p)?)?);
                }
            }
        }
        rows.sort_by(|a, b| a.cell_key.cmp(&b.cell_key));
        Ok(rows)
    }

    pub fn write_failures(&self, failures: &[CellFailure]) -> Result<()> {
        let p = self.root.join(FAILURES_FILE);
        if failures.is_empty() {
            if p.exists() {
                fs::remove_file(p)?;
            }
            return Ok(());
        }
        write_atomic(&p, &serde_json::to_vec_pretty(failures)?)
    }

    /// Rewrites `results.csv` from the committed rows.
    pub fn write_results_table(&self) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "cell_key",
            "experiment_id",
            "kind",
            "model",
            "width",
            "n",
            "m",
            "t",
            "learning_rate",
            "seed",
            "mode",
            "status",
            "test_error",
            "best_step",
            "final_test_error",
            "steps_run",
            "optimizer_fingerprint",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in self.rows()? {
            let c = &r.cell;
            w.write_record([
                r.cell_key.clone(),
                c.experiment_id.clone(),
                c.kind.name().to_string(),
                c.model.name().to_string(),
                opt(c.width.map(|v| v.to_string())),
                c.n.to_string(),
                opt(c.m.map(|v| v.to_string())),
                opt(c.t.map(|v| v.to_string())),
                c.learning_rate.to_string(),
                c.seed.to_string(),
                opt(c.mode.clone()),
                format!("{:?}", r.status).to_lowercase(),
                opt(r.test_error.map(|v| v.to_string())),
                opt(r.best_step.map(|v| v.to_string())),
                opt(r.final_test_error.map(|v| v.to_string())),
                r.steps_run.to_string(),
                r.optimizer_fingerprint.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Data(e.to_string()))?;
        write_atomic(&self.root.join(RESULTS_FILE), &bytes)
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Data(e.to_string())
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Seed for one purpose within an experiment, e.g. `("init", 3)`.
pub fn derive_seed(experiment_id: &str, purpose: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(format!("{experiment_id}\n{purpose}\n{seed}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
