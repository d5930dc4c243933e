//! Data preparation and single-model training for one sweep cell.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig, InfiniteMethod, ModelKind, StoppingPolicy};
use super::store::{derive_seed, CellId, CellStatus, ResultRow, RunStore};
use crate::data::{load_corpus, synthetic_parity, LabeledDataset};
use crate::error::{Error, Result};
use crate::kernel::{empirical_ntk_gram_with, infinite_ntk, mc_ntk_estimate, GramOptions, KernelCache, KernelMatrix};
use crate::nn::{wrap_zero_output, Network, NetworkSpec, WeightVector};
use crate::real::Real;
use crate::taylor::{AnchorProvenance, TaylorKind, TaylorModel};
use crate::trainer::{train, train_kernel_system, OptimizerConfig, TrainOptions, TrainResult, ZeroOutputModel};

/// Training pool and test split for one seed. The pool is in random order,
/// so its prefixes are uniform draws.
pub(crate) struct SeedData {
    pub pool: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads the corpus once per experiment; synthetic tasks need nothing.
pub(crate) fn load_source(cfg: &ExperimentConfig) -> Result<Option<LabeledDataset>> {
    match &cfg.data.source {
        DataSource::Synthetic { .. } => Ok(None),
        DataSource::Corpus { path, rule, balanced } => {
            load_corpus(path, rule, *balanced, derive_seed(&cfg.id, "balance", 0)).map(Some)
        }
    }
}

pub(crate) fn seed_data(
    cfg: &ExperimentConfig,
    corpus: Option<&LabeledDataset>,
    seed: u64,
    pool_size: usize,
) -> Result<SeedData> {
    let id = &cfg.id;
    match (&cfg.data.source, corpus) {
        (DataSource::Synthetic { dim, noise_var }, _) => Ok(SeedData {
            pool: synthetic_parity(pool_size, *dim, *noise_var, derive_seed(id, "train", seed))?,
            test: synthetic_parity(cfg.data.test_size, *dim, *noise_var, derive_seed(id, "test", seed))?,
        }),
        (DataSource::Corpus { .. }, Some(all)) => {
            let test = all.subset(cfg.data.test_size, derive_seed(id, "test", seed), None)?;
            let rest = all.len() - test.len();
            if rest < pool_size {
                return Err(Error::InsufficientSamples {
                    requested: pool_size + test.len(),
                    available: all.len(),
                });
            }
            let pool = all.subset(rest, derive_seed(id, "train", seed), Some(&test.id_set()))?;
            Ok(SeedData { pool, test })
        }
        (DataSource::Corpus { .. }, None) => Err(Error::Config("corpus was not loaded".into())),
    }
}

/// A training set of `n` drawn from the pool.
pub(crate) fn training_set(cfg: &ExperimentConfig, data: &SeedData, n: usize, seed: u64) -> Result<LabeledDataset> {
    if cfg.data.nested {
        data.pool.prefix(n)
    } else {
        data.pool.subset(n, derive_seed(&cfg.id, &format!("subset-{n}"), seed), None)
    }
}

/// Train and test inputs as the models see them: image channels are
/// standardized with statistics of the training set.
pub(crate) struct CellData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub normalized: bool,
}

impl CellData {
    pub fn new(cfg: &ExperimentConfig, mut train: LabeledDataset, test: &LabeledDataset) -> Self {
        let mut test = test.clone();
        let normalized = cfg.data.normalize && matches!(cfg.data.source, DataSource::Corpus { .. });
        if normalized {
            let stats = train.channel_stats();
            train.normalize_with(&stats);
            test.normalize_with(&stats);
        }
        CellData { train, test, normalized }
    }

    fn slice_keys(&self) -> (String, String) {
        let tr = self.train.slice_hash();
        let te = self.test.slice_hash();
        let norm = if self.normalized { "|normalized" } else { "" };
        (format!("{tr}|{tr}{norm}"), format!("{te}|{tr}{norm}"))
    }
}

fn weights_hash<T: Real>(w: &[T]) -> String {
    hex::encode(&Sha256::digest(T::to_le_bytes_vec(w))[..12])
}

/// Where a kernel comes from.
pub(crate) enum KernelSource<'a> {
    Empirical { network: &'a Network, w: &'a WeightVector<f64> },
    Infinite { spec: &'a NetworkSpec, method: &'a InfiniteMethod, seed: u64 },
}

/// Train gram and test-by-train gram, through the cache when one is set.
pub(crate) fn kernel_pair(
    cfg: &ExperimentConfig,
    cache: Option<&KernelCache>,
    source: &KernelSource<'_>,
    data: &CellData,
) -> Result<(KernelMatrix, KernelMatrix)> {
    let opts = GramOptions {
        block_size: cfg.kernel.block_size,
        memory_budget_bytes: cfg.kernel.memory_budget_bytes,
    };
    let (spec_hash, anchor) = match source {
        KernelSource::Empirical { network, w } => (network.spec().spec_hash(), weights_hash(&w.flat)),
        KernelSource::Infinite { spec, method, seed } => (
            spec.spec_hash(),
            match method {
                InfiniteMethod::Exact => "infinite-exact".to_string(),
                InfiniteMethod::MonteCarlo { width, seeds } => format!("mc-{width}-{seeds}-{seed}"),
            },
        ),
    };
    let compute = |x: &LabeledDataset, y: &LabeledDataset| -> Result<KernelMatrix> {
        let k = match source {
            KernelSource::Empirical { network, w } => {
                empirical_ntk_gram_with(network, w, x.inputs.view(), y.inputs.view(), opts)?
            }
            KernelSource::Infinite { spec, method, seed } => match method {
                InfiniteMethod::Exact => infinite_ntk(spec, x.inputs.view(), y.inputs.view())?,
                InfiniteMethod::MonteCarlo { width, seeds } => {
                    let list: Vec<u64> = (0..*seeds as u64)
                        .map(|k| derive_seed(&cfg.id, &format!("mc-{k}"), *seed))
                        .collect();
                    mc_ntk_estimate(spec, *width, &list, x.inputs.view(), y.inputs.view())?.mean
                }
            },
        };
        Ok(k.with_ids(x.ids.clone(), y.ids.clone()))
    };
    let (train_key, test_key) = data.slice_keys();
    let get = |slice: &str, x: &LabeledDataset, y: &LabeledDataset| match cache {
        Some(c) => c.get_or_compute(&KernelCache::key(&spec_hash, &anchor, slice), || compute(x, y)),
        None => compute(x, y),
    };
    let k_train = get(&train_key, &data.train, &data.train)?;
    let k_test = get(&test_key, &data.test, &data.train)?;
    Ok((k_train, k_test))
}

/// Weights at initialization for `seed`, shared by every model of the seed.
pub(crate) fn init_weights<T: Real>(cfg: &ExperimentConfig, network: &Network, seed: u64) -> WeightVector<T> {
    network.init_weights::<T>(derive_seed(&cfg.id, "init", seed))
}

/// Optimizer settings of one cell: the configured ones with a per-seed
/// shuffle stream, shared by every model of the seed.
pub(crate) fn cell_optimizer(cfg: &ExperimentConfig, seed: u64, learning_rate: f64, n: usize) -> OptimizerConfig {
    let mut opt = cfg.optimizer.clone();
    opt.learning_rate = learning_rate;
    opt.shuffle_seed = derive_seed(&cfg.id, &format!("shuffle-{}", cfg.optimizer.shuffle_seed), seed);
    if let Some(b) = opt.batch_size {
        opt.batch_size = Some(b.min(n));
    }
    opt
}

/// Trains a network (optionally zero-output) or a Taylor model from `w0`.
pub(crate) fn train_parametric<T: Real>(
    cfg: &ExperimentConfig,
    model: ModelKind,
    spec: &NetworkSpec,
    w0: &WeightVector<T>,
    seed: u64,
    data: &CellData,
    opt: &OptimizerConfig,
    opts: &TrainOptions,
) -> Result<TrainResult<T>> {
    if model == ModelKind::Network && cfg.zero_output {
        let mut m = ZeroOutputModel::new(wrap_zero_output(spec, w0.clone())?);
        return train(&mut m, &data.train, &data.test, opt, opts);
    }
    let kind = match model {
        ModelKind::Network => TaylorKind::Network,
        ModelKind::G2Full => TaylorKind::G2Full,
        ModelKind::G2Only => TaylorKind::G2Only,
        other => return Err(Error::Config(format!("{} is not a parametric model", other.name()))),
    };
    let mut m = TaylorModel::new(kind, spec, w0.clone(), AnchorProvenance::Init { seed })?;
    if kind == TaylorKind::G2Only {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&cfg.id, "g2-start", seed));
        let scale = cfg.taylor.g2_only_init_scale;
        let start = w0
            .flat
            .iter()
            .map(|w| *w + {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(scale * z)
            })
            .collect::<Vec<T>>();
        m.set_weights(start)?;
    }
    train(&mut m, &data.train, &data.test, opt, opts)
}

/// Runs `body`, turning its outcome into a committed row. Divergence is a
/// result; any other error is returned for the failure list.
pub(crate) fn commit<T>(
    cfg: &ExperimentConfig,
    store: &RunStore,
    cell: CellId,
    opt: &OptimizerConfig,
    body: impl FnOnce() -> Result<TrainResult<T>>,
) -> Result<Option<TrainResult<T>>> {
    let key = cell.key();
    let start = Instant::now();
    let outcome = body();
    let wall_time_s = start.elapsed().as_secs_f64();
    let base = |status| ResultRow {
        cell_key: key.clone(),
        cell: cell.clone(),
        status,
        test_error: None,
        best_step: None,
        best_test_error: None,
        final_test_error: None,
        final_train_loss: None,
        steps_run: 0,
        optimizer_fingerprint: opt.fingerprint(),
        wall_time_s,
    };
    match outcome {
        Ok(r) => {
            let last = r.log.entries.last().expect("log is never empty");
            let row = ResultRow {
                test_error: Some(match cfg.stopping {
                    StoppingPolicy::Optimal => r.best.1,
                    StoppingPolicy::Final => last.test_error,
                }),
                best_step: Some(r.best.0),
                best_test_error: Some(r.best.1),
                final_test_error: Some(last.test_error),
                final_train_loss: Some(last.train_loss),
                steps_run: r.steps_run,
                ..base(CellStatus::Completed)
            };
            r.log.write(&store.log_dir(), &key)?;
            store.write_row(&row)?;
            Ok(Some(r))
        }
        Err(Error::Diverged { step, .. }) => {
            store.write_row(&ResultRow {
                steps_run: step,
                ..base(CellStatus::Diverged)
            })?;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Fits a kernel model with the shared optimizer.
pub(crate) fn fit_kernel(k: &(KernelMatrix, KernelMatrix), data: &CellData, opt: &OptimizerConfig) -> Result<TrainResult<f64>> {
    train_kernel_system(&k.0, &k.1, &data.train.labels, &data.test.labels, opt, &TrainOptions::default())
}
