//! Config-driven sweeps. Every cell of a sweep commits one JSON row under
//! `rows/`, named by a hash of the cell's coordinates, so an interrupted
//! sweep resumes by skipping the rows it finds.
//!
//! All models of one seed share the training set, the test set, the
//! initial weights and the batch order.

mod cells;
mod config;
mod report;
mod store;

use std::fs;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    AfterKernelConfig, AfterKernelMode, ArchitectureConfig, DataConfig, DataSource, ExperimentConfig, ExperimentKind,
    FitConfig, InfiniteMethod, KernelConfig, LrSweepConfig, ModelKind, StoppingPolicy, TaylorConfig,
    TimeDynamicsConfig,
};
pub use report::{emit_report, ReportSummary};
pub use store::{derive_seed, CellFailure, CellId, CellStatus, ResultRow, RunStore};

use cells::{
    cell_optimizer, commit, fit_kernel, init_weights, kernel_pair, load_source, seed_data, train_parametric,
    training_set, CellData, KernelSource,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernel::{KernelCache, KernelMatrix};
use crate::nn::{read_weights, write_weights, Network, NetworkSpec, WeightVector};
use crate::real::{Precision, Real};
use crate::trainer::{CheckpointSchedule, SnapshotPolicy, TrainOptions};

/// Outcome of one invocation of a sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment_id: String,
    pub total_cells: usize,
    /// Cells run by this invocation.
    pub ran: usize,
    /// Cells whose rows already existed.
    pub resumed: usize,
    /// Cells stopped by the divergence guard (counted in `ran` or `resumed`).
    pub diverged: usize,
    pub failures: Vec<CellFailure>,
}

impl RunSummary {
    /// True when every cell has a committed row.
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty() && self.ran + self.resumed == self.total_cells
    }
}

pub fn run_data_scaling(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_kind(cfg, ExperimentKind::DataScaling)
}

pub fn run_width_sweep(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_kind(cfg, ExperimentKind::WidthSweep)
}

pub fn run_lr_sweep(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_kind(cfg, ExperimentKind::LrSweep)
}

pub fn run_after_kernel(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_kind(cfg, ExperimentKind::AfterKernel)
}

pub fn run_time_dynamics(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_kind(cfg, ExperimentKind::TimeDynamics)
}

fn run_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<RunSummary> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config {:?} is a {} experiment, not {}",
            cfg.id,
            cfg.kind.name(),
            kind.name()
        )));
    }
    run_experiment(cfg)
}

/// Runs whichever sweep `cfg.kind` names.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let store = RunStore::create(&cfg.output_dir)?;
    let config_path = store.root().join(store::CONFIG_FILE);
    let text = cfg.to_toml();
    if config_path.exists() {
        let mut old = ExperimentConfig::from_toml(&fs::read_to_string(&config_path)?)?;
        old.output_dir.clone_from(&cfg.output_dir);
        if old != *cfg {
            return Err(Error::Config(format!(
                "{} holds a different experiment; use a fresh output_dir",
                cfg.output_dir.display()
            )));
        }
    } else {
        store::write_atomic(&config_path, text.as_bytes())?;
    }
    let ctx = Ctx {
        cfg,
        corpus: load_source(cfg)?,
        cache: KernelCache::from_env()?,
        store,
        tally: Mutex::new(RunSummary {
            experiment_id: cfg.id.clone(),
            ..RunSummary::default()
        }),
    };
    let groups = ctx.groups();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match cfg.network_precision {
        Precision::F32 => groups.par_iter().for_each(|g| ctx.run_group::<f32>(g)),
        Precision::F64 => groups.par_iter().for_each(|g| ctx.run_group::<f64>(g)),
    });
    let mut summary = ctx.tally.into_inner().expect("tally lock");
    summary.failures.sort_by(|a, b| a.cell_key.cmp(&b.cell_key));
    ctx.store.write_failures(&summary.failures)?;
    ctx.store.write_results_table()?;
    Ok(summary)
}

/// Cells that share data and anchors, run in sequence by one worker.
#[derive(Clone, Debug)]
enum Group {
    /// Models at one training size; `width` is `None` for the width-free
    /// infinite kernel.
    Standard {
        seed: u64,
        n: usize,
        width: Option<usize>,
        learning_rates: Vec<f64>,
        models: Vec<ModelKind>,
    },
    AfterKernel { seed: u64, m: usize },
    TimeDynamics { seed: u64 },
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    store: RunStore,
    cache: Option<KernelCache>,
    corpus: Option<LabeledDataset>,
    tally: Mutex<RunSummary>,
}

impl Ctx<'_> {
    fn groups(&self) -> Vec<Group> {
        let cfg = self.cfg;
        let lr = cfg.optimizer.learning_rate;
        let finite: Vec<ModelKind> = cfg.models.iter().copied().filter(|m| *m != ModelKind::InfiniteNtk).collect();
        let has_infinite = cfg.models.contains(&ModelKind::InfiniteNtk);
        let mut out = Vec::new();
        for &seed in &cfg.seeds {
            let standard = |n: usize, lrs: Vec<f64>, out: &mut Vec<Group>, widths: &[usize]| {
                for &c in widths {
                    if !finite.is_empty() {
                        out.push(Group::Standard { seed, n, width: Some(c), learning_rates: lrs.clone(), models: finite.clone() });
                    }
                }
                if has_infinite {
                    out.push(Group::Standard { seed, n, width: None, learning_rates: lrs, models: vec![ModelKind::InfiniteNtk] });
                }
            };
            match cfg.kind {
                ExperimentKind::DataScaling => {
                    for &n in &cfg.data.n_grid {
                        standard(n, vec![lr], &mut out, &cfg.widths());
                    }
                }
                ExperimentKind::WidthSweep => standard(cfg.data.n, vec![lr], &mut out, &cfg.widths()),
                ExperimentKind::LrSweep => {
                    let lrs = cfg.lr_sweep.as_ref().expect("validated").learning_rates.clone();
                    for n in self.lr_sizes() {
                        standard(n, lrs.clone(), &mut out, &cfg.widths());
                    }
                }
                ExperimentKind::AfterKernel => {
                    for &m in &cfg.after_kernel.as_ref().expect("validated").m_list {
                        out.push(Group::AfterKernel { seed, m });
                    }
                }
                ExperimentKind::TimeDynamics => out.push(Group::TimeDynamics { seed }),
            }
        }
        out
    }

    /// An lr sweep runs at every size of `n_grid` when one is given.
    fn lr_sizes(&self) -> Vec<usize> {
        if self.cfg.data.n_grid.is_empty() {
            vec![self.cfg.data.n]
        } else {
            self.cfg.data.n_grid.clone()
        }
    }

    /// Largest number of pool samples any cell of a seed draws.
    fn pool_size(&self) -> usize {
        let cfg = self.cfg;
        match cfg.kind {
            ExperimentKind::DataScaling => *cfg.data.n_grid.iter().max().expect("validated"),
            ExperimentKind::LrSweep => self.lr_sizes().into_iter().max().expect("nonempty"),
            ExperimentKind::AfterKernel => {
                let a = cfg.after_kernel.as_ref().expect("validated");
                a.m_list.iter().max().unwrap() + a.probe_n.iter().max().unwrap()
            }
            _ => cfg.data.n,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn cell(
        &self,
        model: ModelKind,
        width: Option<usize>,
        n: usize,
        m: Option<usize>,
        t: Option<u64>,
        learning_rate: f64,
        seed: u64,
        mode: Option<&str>,
    ) -> CellId {
        CellId {
            experiment_id: self.cfg.id.clone(),
            kind: self.cfg.kind,
            model,
            width,
            n,
            m,
            t,
            learning_rate,
            seed,
            mode: mode.map(str::to_string),
        }
    }

    /// Counts the cell; false when its row is already committed.
    fn pending(&self, cell: &CellId) -> bool {
        let done = self.store.has_row(&cell.key());
        let mut t = self.tally.lock().expect("tally lock");
        t.total_cells += 1;
        if done {
            t.resumed += 1;
            if self
                .store
                .read_row(&cell.key())
                .is_ok_and(|r| r.status == CellStatus::Diverged)
            {
                t.diverged += 1;
            }
        }
        !done
    }

    fn record<R>(&self, cell: &CellId, outcome: Result<Option<R>>) -> Option<R> {
        let mut t = self.tally.lock().expect("tally lock");
        match outcome {
            Ok(Some(r)) => {
                t.ran += 1;
                Some(r)
            }
            Ok(None) => {
                t.ran += 1;
                t.diverged += 1;
                None
            }
            Err(e) => {
                t.failures.push(CellFailure {
                    cell_key: cell.key(),
                    cell: cell.clone(),
                    error: e.to_string(),
                });
                None
            }
        }
    }

    fn fail_all(&self, cells: &[CellId], err: &Error) {
        let mut t = self.tally.lock().expect("tally lock");
        for c in cells {
            t.failures.push(CellFailure {
                cell_key: c.key(),
                cell: c.clone(),
                error: err.to_string(),
            });
        }
    }

    fn run_group<T: Real>(&self, group: &Group) {
        match group {
            Group::Standard { seed, n, width, learning_rates, models } => {
                self.run_standard::<T>(*seed, *n, *width, learning_rates, models)
            }
            Group::AfterKernel { seed, m } => self.run_after_kernel::<T>(*seed, *m),
            Group::TimeDynamics { seed } => self.run_time_dynamics::<T>(*seed),
        }
    }

    fn cell_data(&self, seed: u64, n: usize) -> Result<(cells::SeedData, CellData)> {
        let data = seed_data(self.cfg, self.corpus.as_ref(), seed, self.pool_size())?;
        let train = training_set(self.cfg, &data, n, seed)?;
        let cd = CellData::new(self.cfg, train, &data.test);
        Ok((data, cd))
    }

    fn run_standard<T: Real>(&self, seed: u64, n: usize, width: Option<usize>, lrs: &[f64], models: &[ModelKind]) {
        let cfg = self.cfg;
        // The learning rate does not change a kernel, so lr sweeps fit
        // kernels once, at the configured rate, as reference lines.
        let base = [cfg.optimizer.learning_rate];
        let mut cells = Vec::new();
        for &model in models {
            let is_kernel = matches!(model, ModelKind::EntkInit | ModelKind::InfiniteNtk);
            let rates = if is_kernel && cfg.kind == ExperimentKind::LrSweep { &base[..] } else { lrs };
            for &lr in rates {
                let c = self.cell(model, width, n, None, None, lr, seed, None);
                if self.pending(&c) {
                    cells.push(c);
                }
            }
        }
        if cells.is_empty() {
            return;
        }
        let setup = || -> Result<_> {
            let spec = cfg.spec(width.unwrap_or(cfg.architecture.width))?;
            let network = Network::new(&spec)?;
            let (_, cd) = self.cell_data(seed, n)?;
            Ok((spec, network, cd))
        };
        let (spec, network, cd) = match setup() {
            Ok(s) => s,
            Err(e) => return self.fail_all(&cells, &e),
        };
        let w0 = init_weights::<T>(cfg, &network, seed);
        let mut entk: Option<Result<(KernelMatrix, KernelMatrix)>> = None;
        let mut inf: Option<Result<(KernelMatrix, KernelMatrix)>> = None;
        for cell in &cells {
            let opt = cell_optimizer(cfg, seed, cell.learning_rate, n);
            let outcome = match cell.model {
                ModelKind::EntkInit => {
                    let k = entk.get_or_insert_with(|| {
                        let w = init_weights::<f64>(cfg, &network, seed);
                        kernel_pair(cfg, self.cache.as_ref(), &KernelSource::Empirical { network: &network, w: &w }, &cd)
                    });
                    self.kernel_cell(cell, k, &cd, &opt)
                }
                ModelKind::InfiniteNtk => {
                    let k = inf.get_or_insert_with(|| {
                        let source = KernelSource::Infinite { spec: &spec, method: &cfg.kernel.infinite, seed };
                        kernel_pair(cfg, self.cache.as_ref(), &source, &cd)
                    });
                    self.kernel_cell(cell, k, &cd, &opt)
                }
                model => commit(cfg, &self.store, cell.clone(), &opt, || {
                    train_parametric(cfg, model, &spec, &w0, seed, &cd, &opt, &TrainOptions::default())
                })
                .map(|r| r.map(|_| ())),
            };
            self.record(cell, outcome);
        }
    }

    fn kernel_cell(
        &self,
        cell: &CellId,
        k: &Result<(KernelMatrix, KernelMatrix)>,
        cd: &CellData,
        opt: &crate::trainer::OptimizerConfig,
    ) -> Result<Option<()>> {
        let k = k.as_ref().map_err(|e| Error::Data(format!("kernel unavailable: {e}")))?;
        commit(self.cfg, &self.store, cell.clone(), opt, || fit_kernel(k, cd, opt)).map(|r| r.map(|_| ()))
    }

    fn run_after_kernel<T: Real>(&self, seed: u64, m: usize) {
        let cfg = self.cfg;
        let ak = cfg.after_kernel.as_ref().expect("validated");
        let width = cfg.architecture.width;
        let lr = cfg.optimizer.learning_rate;
        let modes: &[(&str, AfterKernelMode)] = match ak.mode {
            AfterKernelMode::Fresh => &[("fresh", AfterKernelMode::Fresh)],
            AfterKernelMode::Subset => &[("subset", AfterKernelMode::Subset)],
            AfterKernelMode::Both => &[("fresh", AfterKernelMode::Fresh), ("subset", AfterKernelMode::Subset)],
        };
        let net_cell = (m > 0).then(|| self.cell(ModelKind::Network, Some(width), m, Some(m), None, lr, seed, None));
        let net_pending = net_cell.as_ref().is_some_and(|c| self.pending(c));
        let mut cells = Vec::new();
        for &n in &ak.probe_n {
            for &(name, mode) in modes {
                if mode == AfterKernelMode::Subset && n > m {
                    continue;
                }
                let c = self.cell(ModelKind::AfterKernel, Some(width), n, Some(m), None, lr, seed, Some(name));
                if self.pending(&c) {
                    cells.push((c, mode));
                }
            }
        }
        if cells.is_empty() && !net_pending {
            return;
        }
        let kernel_cells: Vec<CellId> = cells.iter().map(|(c, _)| c.clone()).collect();
        let setup = || -> Result<_> {
            let spec = cfg.spec(width)?;
            let network = Network::new(&spec)?;
            let data = seed_data(cfg, self.corpus.as_ref(), seed, self.pool_size())?;
            Ok((spec, network, data))
        };
        let (spec, network, data) = match setup() {
            Ok(s) => s,
            Err(e) => {
                let mut all = kernel_cells;
                all.extend(net_cell.filter(|_| net_pending));
                return self.fail_all(&all, &e);
            }
        };

        // Anchor weights: initialization for m = 0, else the network trained
        // on the first m pool samples, at its optimal early-stopping step.
        let anchor: Result<WeightVector<f64>> = match &net_cell {
            None => Ok(init_weights::<f64>(cfg, &network, seed)),
            Some(nc) => {
                let snap_path = self.store.snapshot_path(&nc.key());
                let cached = (!net_pending && snap_path.exists())
                    .then(|| read_weights::<f64>(&snap_path, &spec).map(|(w, _)| w))
                    .and_then(|r| r.ok());
                match cached {
                    Some(w) => Ok(w),
                    _ => self.train_anchor::<T>(nc, net_pending, &spec, &network, &data, seed, m, &snap_path),
                }
            }
        };
        if cells.is_empty() {
            return;
        }
        let anchor = match anchor {
            Ok(w) => w,
            Err(e) => return self.fail_all(&kernel_cells, &e),
        };
        let seen = data.pool.prefix(m).map(|p| p.id_set());
        let max_m = *ak.m_list.iter().max().expect("validated");
        let excluded = data.pool.prefix(max_m).map(|p| p.id_set());
        for (cell, mode) in &cells {
            let n = cell.n;
            let opt = cell_optimizer(cfg, seed, lr, n);
            let outcome = (|| -> Result<Option<()>> {
                let train = match mode {
                    AfterKernelMode::Subset => {
                        seen.as_ref().map_err(clone_err)?;
                        data.pool.prefix(m)?.subset(n, derive_seed(&cfg.id, &format!("seen-{m}-{n}"), seed), None)?
                    }
                    _ => data.pool.subset(
                        n,
                        derive_seed(&cfg.id, &format!("fresh-{n}"), seed),
                        Some(excluded.as_ref().map_err(clone_err)?),
                    )?,
                };
                let cd = CellData::new(cfg, train, &data.test);
                let k = kernel_pair(cfg, self.cache.as_ref(), &KernelSource::Empirical { network: &network, w: &anchor }, &cd);
                self.kernel_cell(cell, &k, &cd, &opt)
            })();
            self.record(cell, outcome);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn train_anchor<T: Real>(
        &self,
        cell: &CellId,
        pending: bool,
        spec: &NetworkSpec,
        network: &Network,
        data: &cells::SeedData,
        seed: u64,
        m: usize,
        snap_path: &std::path::Path,
    ) -> Result<WeightVector<f64>> {
        let cfg = self.cfg;
        let cd = CellData::new(cfg, data.pool.prefix(m)?, &data.test);
        let w0 = init_weights::<T>(cfg, network, seed);
        let opt = cell_optimizer(cfg, seed, cfg.optimizer.learning_rate, m);
        let opts = TrainOptions {
            snapshots: SnapshotPolicy::Best,
            ..TrainOptions::default()
        };
        let run = || train_parametric(cfg, ModelKind::Network, spec, &w0, seed, &cd, &opt, &opts);
        let result = if pending {
            let r = commit(cfg, &self.store, cell.clone(), &opt, run);
            let copy = match &r {
                Ok(Some(t)) => Ok(t.clone()),
                Ok(None) => Err(Error::Data("anchor network diverged".into())),
                Err(e) => Err(Error::Data(format!("anchor network failed: {e}"))),
            };
            self.record(cell, r);
            copy?
        } else {
            run()?
        };
        let best = result.snapshots.last().ok_or(Error::MissingSnapshot(result.best.0))?;
        let w = init_weights::<f64>(cfg, network, seed)
            .with_values(best.weights.iter().map(|v| v.f64()).collect())?
            .with_tag(format!("after:{m}:step={}", best.step));
        write_weights(snap_path, spec, &w, Some(seed))?;
        Ok(w)
    }

    fn run_time_dynamics<T: Real>(&self, seed: u64) {
        let cfg = self.cfg;
        let width = cfg.architecture.width;
        let n = cfg.data.n;
        let lr = cfg.optimizer.learning_rate;
        let anchors = time_anchors(cfg);
        let net_cell = self.cell(ModelKind::Network, Some(width), n, None, None, lr, seed, None);
        let entk_cell = self.cell(ModelKind::EntkInit, Some(width), n, None, None, lr, seed, None);
        let net_pending = self.pending(&net_cell);
        let entk_pending = self.pending(&entk_cell);
        let mut cells = Vec::new();
        for &t in &anchors {
            let c = self.cell(ModelKind::TimeKernel, Some(width), n, None, Some(t), lr, seed, None);
            if self.pending(&c) {
                cells.push(c);
            }
        }
        if cells.is_empty() && !net_pending && !entk_pending {
            return;
        }
        let setup = || -> Result<_> {
            let spec = cfg.spec(width)?;
            let network = Network::new(&spec)?;
            let (_, cd) = self.cell_data(seed, n)?;
            Ok((spec, network, cd))
        };
        let (spec, network, cd) = match setup() {
            Ok(s) => s,
            Err(e) => {
                let mut all = cells;
                all.extend([net_cell, entk_cell].into_iter().zip([net_pending, entk_pending]).filter(|p| p.1).map(|p| p.0));
                return self.fail_all(&all, &e);
            }
        };
        let opt = cell_optimizer(cfg, seed, lr, n);
        let w0_f64 = init_weights::<f64>(cfg, &network, seed);
        if entk_pending {
            let k = kernel_pair(cfg, self.cache.as_ref(), &KernelSource::Empirical { network: &network, w: &w0_f64 }, &cd);
            let outcome = self.kernel_cell(&entk_cell, &k, &cd, &opt);
            self.record(&entk_cell, outcome);
        }
        if !net_pending && cells.is_empty() {
            return;
        }
        let w0 = init_weights::<T>(cfg, &network, seed);
        let opts = TrainOptions {
            snapshots: SnapshotPolicy::Steps(anchors.clone()),
            ..TrainOptions::default()
        };
        let run = || train_parametric(cfg, ModelKind::Network, &spec, &w0, seed, &cd, &opt, &opts);
        let trained = if net_pending {
            let r = commit(cfg, &self.store, net_cell.clone(), &opt, run);
            let copy = match &r {
                Ok(Some(t)) => Ok(t.clone()),
                Ok(None) => Err(Error::Data("network diverged".into())),
                Err(e) => Err(Error::Data(format!("network failed: {e}"))),
            };
            self.record(&net_cell, r);
            copy
        } else {
            run()
        };
        let trained = match trained {
            Ok(t) => t,
            Err(e) => return self.fail_all(&cells, &e),
        };
        for cell in &cells {
            let t = cell.t.expect("time cell");
            let outcome = (|| -> Result<Option<()>> {
                let snap = trained.snapshot(t)?;
                let w = w0_f64
                    .with_values(snap.weights.iter().map(|v| v.f64()).collect())?
                    .with_tag(format!("time:{t}"));
                let k = kernel_pair(cfg, self.cache.as_ref(), &KernelSource::Empirical { network: &network, w: &w }, &cd);
                self.kernel_cell(cell, &k, &cd, &opt)
            })();
            self.record(cell, outcome);
        }
    }
}

fn clone_err(e: &Error) -> Error {
    Error::Data(e.to_string())
}

/// Checkpoints at which kernels over time are anchored: evenly spaced
/// entries of the logged schedule, always including step 0 and the last
/// step.
pub fn time_anchors(cfg: &ExperimentConfig) -> Vec<u64> {
    let k = cfg.time_dynamics.as_ref().map_or(12, |t| t.anchors);
    let mut steps = CheckpointSchedule::new(cfg.optimizer.checkpoint_ratio).steps_up_to(cfg.optimizer.max_steps);
    if steps.last() != Some(&cfg.optimizer.max_steps) {
        steps.push(cfg.optimizer.max_steps);
    }
    if steps.len() <= k {
        return steps;
    }
    let mut out: Vec<u64> = (0..k)
        .map(|i| steps[(i * (steps.len() - 1) + (k - 1) / 2) / (k - 1)])
        .collect();
    out.dedup();
    out
}
