//! Tables, fits and a summary derived from a run directory. Output depends
//! only on the committed rows and logs, so repeated reports are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind, ModelKind};
use super::store::{write_atomic, CellStatus, ResultRow, RunStore, CONFIG_FILE, FAILURES_FILE};
use crate::error::{Error, Result};
use crate::scaling::{bootstrap_beta, fit_overlay, fit_scaling_law_with, mean_stderr, LearningCurve, ScalingFit};

pub const REPORT_DIR: &str = "report";
const OVERLAY_POINTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentEntry {
    #[serde(flatten)]
    pub fit: Option<ScalingFit>,
    pub beta_bootstrap_stderr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub rows: usize,
    pub completed: usize,
    pub diverged: usize,
    pub failures: usize,
    pub exponents: BTreeMap<String, ExponentEntry>,
    pub files: Vec<String>,
}

/// Per-x seed values of one series.
type Series = BTreeMap<u64, Vec<(u64, f64)>>;

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, text: String) -> Result<()> {
        write_atomic(&self.dir.join(&name), text.as_bytes())?;
        self.files.push(name);
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `x,error,stderr,seeds` rows, `x` rendered by `label`.
fn series_csv(header: &str, series: &Series, label: impl Fn(u64) -> String) -> String {
    let mut s = format!("{header},error,stderr,seeds\n");
    for (x, vals) in series {
        let v: Vec<f64> = vals.iter().map(|p| p.1).collect();
        let (mean, se) = mean_stderr(&v);
        s.push_str(&format!("{},{},{},{}\n", label(*x), mean, fmt_opt(se), v.len()));
    }
    s
}

/// Builds the report under `<run_dir>/report/`.
pub fn emit_report(run_dir: &Path) -> Result<ReportSummary> {
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(run_dir.join(CONFIG_FILE)).map_err(|e| {
        Error::Config(format!("{} is not a run directory: {e}", run_dir.display()))
    })?)?;
    let store = RunStore::open(run_dir);
    let rows = store.rows()?;
    let failures = match fs::read(run_dir.join(FAILURES_FILE)) {
        Ok(b) => serde_json::from_slice::<Vec<serde_json::Value>>(&b)?.len(),
        Err(_) => 0,
    };
    let out_dir = run_dir.join(REPORT_DIR);
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    fs::create_dir_all(&out_dir)?;
    let mut w = Writer { dir: &out_dir, files: Vec::new() };
    let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.status == CellStatus::Completed).collect();
    let mut exponents = BTreeMap::new();

    let group = |filter: &dyn Fn(&ResultRow) -> bool, x: &dyn Fn(&ResultRow) -> u64| -> Series {
        let mut s = Series::new();
        for r in ok.iter().filter(|r| filter(r)) {
            if let Some(e) = r.test_error {
                s.entry(x(r)).or_default().push((r.cell.seed, e));
            }
        }
        s
    };
    let models: Vec<ModelKind> = {
        let mut m: Vec<ModelKind> = ok.iter().map(|r| r.cell.model).collect();
        m.sort();
        m.dedup();
        m
    };
    let lr_label = |bits: u64| f64::from_bits(bits).to_string();

    match cfg.kind {
        ExperimentKind::DataScaling => {
            for &model in &models {
                let series = group(&|r| r.cell.model == model, &|r| r.cell.n as u64);
                scaling_outputs(&cfg, &mut w, model.name(), &series, &mut exponents)?;
            }
        }
        ExperimentKind::WidthSweep => {
            for &model in &models {
                if model == ModelKind::InfiniteNtk {
                    let series = group(&|r| r.cell.model == model, &|_| 0);
                    let text = series_csv("width", &series, |_| "inf".into());
                    w.put(format!("width_{}.csv", model.name()), text)?;
                } else {
                    let series = group(&|r| r.cell.model == model, &|r| r.cell.width.unwrap_or(0) as u64);
                    w.put(format!("width_{}.csv", model.name()), series_csv("width", &series, |x| x.to_string()))?;
                }
            }
        }
        ExperimentKind::LrSweep => {
            let ns: Vec<usize> = {
                let mut v: Vec<usize> = rows.iter().map(|r| r.cell.n).collect();
                v.sort();
                v.dedup();
                v
            };
            for &model in &models {
                for &n in &ns {
                    let series = group(&|r| r.cell.model == model && r.cell.n == n, &|r| r.cell.learning_rate.to_bits());
                    let mut text = series_csv("learning_rate", &series, lr_label);
                    let diverged: Vec<String> = rows
                        .iter()
                        .filter(|r| r.cell.model == model && r.cell.n == n && r.status == CellStatus::Diverged)
                        .map(|r| format!("{},{}", r.cell.learning_rate, r.cell.seed))
                        .collect();
                    if !diverged.is_empty() {
                        text.push_str(&format!("# diverged (learning_rate,seed): {}\n", diverged.join(" ")));
                    }
                    w.put(format!("lr_{}_n{n}.csv", model.name()), text)?;
                }
                if ns.len() > 1 {
                    let lrs: Vec<u64> = {
                        let mut v: Vec<u64> = ok.iter().filter(|r| r.cell.model == model).map(|r| r.cell.learning_rate.to_bits()).collect();
                        v.sort();
                        v.dedup();
                        v
                    };
                    for bits in lrs {
                        let series = group(&|r| r.cell.model == model && r.cell.learning_rate.to_bits() == bits, &|r| r.cell.n as u64);
                        let tag = format!("{}_lr{}", model.name(), lr_label(bits));
                        scaling_outputs(&cfg, &mut w, &tag, &series, &mut exponents)?;
                    }
                }
            }
        }
        ExperimentKind::AfterKernel => {
            let net = group(&|r| r.cell.model == ModelKind::Network, &|r| r.cell.m.unwrap_or(0) as u64);
            w.put("after_kernel_network.csv".into(), series_csv("m", &net, |x| x.to_string()))?;
            let mut keys: Vec<(String, usize)> = ok
                .iter()
                .filter(|r| r.cell.model == ModelKind::AfterKernel)
                .map(|r| (r.cell.mode.clone().unwrap_or_default(), r.cell.n))
                .collect();
            keys.sort();
            keys.dedup();
            for (mode, n) in keys {
                let series = group(
                    &|r| r.cell.model == ModelKind::AfterKernel && r.cell.n == n && r.cell.mode.as_deref() == Some(mode.as_str()),
                    &|r| r.cell.m.unwrap_or(0) as u64,
                );
                w.put(format!("after_kernel_{mode}_n{n}.csv"), series_csv("m", &series, |x| x.to_string()))?;
            }
        }
        ExperimentKind::TimeDynamics => {
            let series = group(&|r| r.cell.model == ModelKind::TimeKernel, &|r| r.cell.t.unwrap_or(0));
            w.put("time_kernel.csv".into(), series_csv("t", &series, |x| x.to_string()))?;
            for model in [ModelKind::Network, ModelKind::EntkInit] {
                let traj = trajectory(&store, ok.iter().copied().filter(|r| r.cell.model == model))?;
                w.put(format!("trajectory_{}.csv", model.name()), series_csv("step", &traj, |x| x.to_string()))?;
                let end = group(&|r| r.cell.model == model, &|_| 0);
                w.put(format!("{}.csv", model.name()), series_csv("stopping", &end, |_| format!("{:?}", cfg.stopping).to_lowercase()))?;
            }
        }
    }

    let summary = ReportSummary {
        experiment_id: cfg.id.clone(),
        kind: cfg.kind,
        rows: rows.len(),
        completed: ok.len(),
        diverged: rows.iter().filter(|r| r.status == CellStatus::Diverged).count(),
        failures,
        exponents,
        files: w.files.clone(),
    };
    write_atomic(&out_dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Test error at every logged step, across the seeds of `rows`.
fn trajectory<'a>(store: &RunStore, rows: impl Iterator<Item = &'a ResultRow>) -> Result<Series> {
    let mut s = Series::new();
    for r in rows {
        let path = store.log_dir().join(format!("{}.csv", r.cell_key));
        let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let parse = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().map_err(|e| Error::Data(e.to_string()));
            s.entry(parse(0)? as u64).or_default().push((r.cell.seed, parse(3)?));
        }
    }
    Ok(s)
}

/// Learning curve, fit, overlay and bootstrap for one series over `n`.
fn scaling_outputs(
    cfg: &ExperimentConfig,
    w: &mut Writer<'_>,
    tag: &str,
    series: &Series,
    exponents: &mut BTreeMap<String, ExponentEntry>,
) -> Result<()> {
    let ns: Vec<u64> = series.keys().copied().collect();
    let per_point: Vec<Vec<f64>> = series.values().map(|v| v.iter().map(|p| p.1).collect()).collect();
    let points = ns
        .iter()
        .zip(&per_point)
        .map(|(&n, v)| {
            let (error, stderr) = mean_stderr(v);
            crate::scaling::CurvePoint { n, error, stderr, seeds: v.len() }
        })
        .collect();
    let curve = LearningCurve::new(tag, points)?;
    w.put(format!("series_{tag}.csv"), curve.to_csv())?;
    let entry = match fit_scaling_law_with(&curve, cfg.fit.options()) {
        Ok(fit) => {
            let mut overlay = String::from("n,fitted_error\n");
            for (n, e) in fit_overlay(&fit, OVERLAY_POINTS) {
                overlay.push_str(&format!("{n},{e}\n"));
            }
            w.put(format!("fit_{tag}.csv"), overlay)?;
            ExponentEntry {
                beta_bootstrap_stderr: bootstrap(cfg, tag, &ns, series),
                fit: Some(fit),
                error: None,
            }
        }
        Err(e) => ExponentEntry {
            fit: None,
            beta_bootstrap_stderr: None,
            error: Some(e.to_string()),
        },
    };
    exponents.insert(tag.to_string(), entry);
    Ok(())
}

/// Bootstrap over the seeds present at every `n`.
fn bootstrap(cfg: &ExperimentConfig, tag: &str, ns: &[u64], series: &Series) -> Option<f64> {
    if cfg.fit.bootstrap_replicates == 0 {
        return None;
    }
    let seeds: Vec<u64> = cfg
        .seeds
        .iter()
        .copied()
        .filter(|s| series.values().all(|v| v.iter().any(|p| p.0 == *s)))
        .collect();
    let per_seed: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| series.values().map(|v| v.iter().find(|p| p.0 == *s).expect("filtered").1).collect())
        .collect();
    let boot_seed = super::store::derive_seed(&cfg.id, &format!("bootstrap-{tag}"), 0);
    bootstrap_beta(ns, &per_seed, cfg.fit.bootstrap_replicates, boot_seed)
        .ok()
        .map(|b| b.beta_stderr)
}
