use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabelRule;
use crate::error::{Error, Result};
use crate::nn::{Architecture, InputShape, NetworkSpec};
use crate::real::Precision;
use crate::scaling::FitOptions;
use crate::trainer::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DataScaling,
    WidthSweep,
    LrSweep,
    AfterKernel,
    TimeDynamics,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DataScaling => "data_scaling",
            ExperimentKind::WidthSweep => "width_sweep",
            ExperimentKind::LrSweep => "lr_sweep",
            ExperimentKind::AfterKernel => "after_kernel",
            ExperimentKind::TimeDynamics => "time_dynamics",
        }
    }
}

/// Models a sweep can train. After-kernels and kernels over time have
/// their own experiment kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Network,
    EntkInit,
    InfiniteNtk,
    G2Full,
    G2Only,
    /// Empirical NTK at the weights of a network trained on `m` samples.
    AfterKernel,
    /// Empirical NTK at the weights after `t` SGD batches, fit on the full
    /// training set.
    TimeKernel,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Network => "network",
            ModelKind::EntkInit => "entk_init",
            ModelKind::InfiniteNtk => "infinite_ntk",
            ModelKind::G2Full => "g2_full",
            ModelKind::G2Only => "g2_only",
            ModelKind::AfterKernel => "after_kernel",
            ModelKind::TimeKernel => "time_kernel",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::Config(format!("unknown model {name:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingPolicy {
    /// Minimum test error over the checkpoint schedule.
    #[default]
    Optimal,
    /// Test error at the last step.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub name: String,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Width grid for width sweeps.
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub use_bias: bool,
    #[serde(default = "one")]
    pub bias_std: f64,
}

fn default_width() -> usize {
    256
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_noise")]
        noise_var: f64,
    },
    Corpus {
        path: PathBuf,
        rule: LabelRule,
        #[serde(default)]
        balanced: bool,
    },
}

fn default_dim() -> usize {
    30
}

fn default_noise() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Training sizes for data-scaling sweeps.
    #[serde(default)]
    pub n_grid: Vec<usize>,
    /// Fixed training size for the other sweeps.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Smaller training sets are prefixes of larger ones.
    #[serde(default = "yes")]
    pub nested: bool,
    /// Per-channel standardization of image inputs over the training set.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn default_test_size() -> usize {
    2000
}

fn default_n() -> usize {
    1000
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfterKernelMode {
    /// Fit on `n` samples disjoint from the `m` the network saw.
    #[default]
    Fresh,
    /// Fit on `n` of the `m` samples the network saw.
    Subset,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfterKernelConfig {
    /// Network training sizes; `0` means the kernel at initialization.
    pub m_list: Vec<usize>,
    /// Sizes the after-kernels are fit on.
    pub probe_n: Vec<usize>,
    #[serde(default)]
    pub mode: AfterKernelMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeDynamicsConfig {
    /// Number of checkpoints, spread evenly over the logged schedule, at
    /// which a kernel is anchored. Step 0 and the last step are included.
    #[serde(default = "default_anchors")]
    pub anchors: usize,
}

fn default_anchors() -> usize {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSweepConfig {
    pub learning_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InfiniteMethod {
    Exact,
    MonteCarlo { width: usize, seeds: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default = "default_budget")]
    pub memory_budget_bytes: u64,
    #[serde(default = "default_infinite")]
    pub infinite: InfiniteMethod,
}

fn default_block() -> usize {
    256
}

fn default_budget() -> u64 {
    1 << 30
}

fn default_infinite() -> InfiniteMethod {
    InfiniteMethod::Exact
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            block_size: default_block(),
            memory_budget_bytes: default_budget(),
            infinite: default_infinite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaylorConfig {
    /// `g2_only` has zero gradient at its anchor, so its weights start at
    /// `w0 + scale·N(0, I)` instead.
    #[serde(default = "default_g2_scale")]
    pub g2_only_init_scale: f64,
}

fn default_g2_scale() -> f64 {
    1e-2
}

impl Default for TaylorConfig {
    fn default() -> Self {
        TaylorConfig {
            g2_only_init_scale: default_g2_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: usize,
    /// Weight the fit by per-point standard errors.
    #[serde(default)]
    pub stderr_weighted: bool,
}

impl FitConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            stderr_weighted: self.stderr_weighted,
        }
    }
}

fn default_replicates() -> usize {
    200
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            bootstrap_replicates: default_replicates(),
            stderr_weighted: false,
        }
    }
}

/// One declarative experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub stopping: StoppingPolicy,
    /// Precision of network and Taylor-model training; kernels are always
    /// 64-bit.
    #[serde(default = "default_precision")]
    pub network_precision: Precision,
    /// Train networks with their initial outputs subtracted.
    #[serde(default)]
    pub zero_output: bool,
    #[serde(default = "one_worker")]
    pub workers: usize,
    pub architecture: ArchitectureConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_sweep: Option<LrSweepConfig>,
    #[serde(default)]
    pub after_kernel: Option<AfterKernelConfig>,
    #[serde(default)]
    pub time_dynamics: Option<TimeDynamicsConfig>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub taylor: TaylorConfig,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Network, ModelKind::EntkInit, ModelKind::InfiniteNtk]
}

fn default_precision() -> Precision {
    Precision::F32
}

fn one_worker() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::parse(&self.architecture.name)
    }

    /// Network spec at width `c` for the configured data shape.
    pub fn spec(&self, c: usize) -> Result<NetworkSpec> {
        let shape = self.input_shape()?;
        let mut spec = self.architecture()?.build(c, shape);
        if self.architecture.use_bias {
            spec = spec.with_bias(self.architecture.bias_std);
        }
        spec.num_params()?;
        Ok(spec)
    }

    fn input_shape(&self) -> Result<InputShape> {
        match &self.data.source {
            DataSource::Synthetic { dim, .. } => Ok(InputShape::Vector { dim: *dim }),
            DataSource::Corpus { path, .. } => {
                let m: crate::data::CorpusManifest =
                    serde_json::from_slice(&fs::read(path.join(crate::data::MANIFEST_FILE))?)?;
                Ok(InputShape::Image {
                    height: m.height,
                    width: m.width,
                    channels: m.channels,
                })
            }
        }
    }

    /// Widths the sweep visits.
    pub fn widths(&self) -> Vec<usize> {
        match self.kind {
            ExperimentKind::WidthSweep => self.architecture.widths.clone(),
            _ => vec![self.architecture.width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.id.is_empty() {
            return bad("id must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let mut seen = std::collections::HashSet::new();
        if self.seeds.iter().any(|s| !seen.insert(*s)) {
            return bad("seeds must be distinct".into());
        }
        if self.models.is_empty() && matches!(self.kind, ExperimentKind::DataScaling) {
            return bad("model set is empty".into());
        }
        self.optimizer.validate(usize::MAX)?;
        match self.kind {
            ExperimentKind::DataScaling => {
                if self.data.n_grid.is_empty() {
                    return bad("data-scaling needs a nonempty n_grid".into());
                }
                if self.data.n_grid.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("n_grid must be strictly increasing".into());
                }
            }
            ExperimentKind::WidthSweep => {
                if self.architecture.widths.is_empty() {
                    return bad("width sweep needs a nonempty widths grid".into());
                }
            }
            ExperimentKind::LrSweep => match &self.lr_sweep {
                Some(l) if !l.learning_rates.is_empty() => {
                    if l.learning_rates.iter().any(|v| !(*v > 0.0)) {
                        return bad("learning rates must be positive".into());
                    }
                }
                _ => return bad("lr sweep needs [lr_sweep] learning_rates".into()),
            },
            ExperimentKind::AfterKernel => match &self.after_kernel {
                Some(a) if !a.m_list.is_empty() && !a.probe_n.is_empty() => {}
                _ => return bad("after-kernel needs [after_kernel] m_list and probe_n".into()),
            },
            ExperimentKind::TimeDynamics => {
                if self.time_dynamics.as_ref().is_some_and(|t| t.anchors < 2) {
                    return bad("time dynamics needs at least two anchors".into());
                }
            }
        }
        if self.models.contains(&ModelKind::AfterKernel) || self.models.contains(&ModelKind::TimeKernel) {
            return bad("after_kernel and time_kernel are produced by their experiment kinds, not listed as models".into());
        }
        for c in self.widths() {
            self.spec(c)?;
        }
        Ok(())
    }
}
