//! `ntklab`: run sweeps from a config file, build reports, convert corpora.
//!
//! Exit status is 0 only when every cell of the sweep has a committed row,
//! 1 when some cells failed, and 2 for unusable input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ntklab::data::{convert_cifar10_bin, convert_raw_hwc};
use ntklab::experiment::{emit_report, run_experiment, ExperimentConfig, ExperimentKind, ReportSummary, RunSummary};
use ntklab::kernel::CACHE_DIR_ENV;

const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

#[derive(Parser)]
#[command(name = "ntklab", version, about = "Networks versus their tangent kernels, at desk scale")]
#[command(after_help = "Kernel matrices are cached under $NTKLAB_CACHE_DIR when it is set.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test error against training-set size, with fitted scaling laws.
    DataScaling(SweepArgs),
    /// Test error against width at a fixed training-set size.
    WidthSweep(SweepArgs),
    /// Network test error against learning rate, with kernel references.
    LrSweep(SweepArgs),
    /// Kernels anchored at networks trained on m samples, fit on n.
    AfterKernel(SweepArgs),
    /// Kernels anchored along one training run, fit on the full train set.
    TimeDynamics(SweepArgs),
    /// Rebuild plot data and the summary of a run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Convert raw image batches into the corpus format.
    ConvertCorpus(ConvertArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Skip building the report after the sweep.
    #[arg(long)]
    no_report: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// CIFAR-10 binary batches: a class byte then 3072 CHW pixel bytes per record.
    Cifar10Bin,
    /// Raw HWC pixel bytes plus a separate class-id byte file.
    RawHwc,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    format: InputFormat,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Input files: the batches for cifar10-bin, or the pixel file for raw-hwc.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Class-id bytes (raw-hwc).
    #[arg(long)]
    class_ids: Option<PathBuf>,
    /// Image shape as HxWxC (raw-hwc).
    #[arg(long)]
    shape: Option<String>,
    /// Comma-separated class names, in class-id order.
    #[arg(long, value_delimiter = ',')]
    class_names: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::DataScaling(a) => sweep(ExperimentKind::DataScaling, a),
        Command::WidthSweep(a) => sweep(ExperimentKind::WidthSweep, a),
        Command::LrSweep(a) => sweep(ExperimentKind::LrSweep, a),
        Command::AfterKernel(a) => sweep(ExperimentKind::AfterKernel, a),
        Command::TimeDynamics(a) => sweep(ExperimentKind::TimeDynamics, a),
        Command::Report { run_dir } => report(&run_dir).map(|_| true),
        Command::ConvertCorpus(a) => convert(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn sweep(kind: ExperimentKind, args: SweepArgs) -> ntklab::Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.kind != kind {
        return Err(ntklab::Error::Config(format!(
            "{} describes a {} experiment",
            args.config.display(),
            cfg.kind.name()
        )));
    }
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        eprintln!("kernel cache: {}", Path::new(&dir).display());
    }
    let summary = run_experiment(&cfg)?;
    print_summary(&summary);
    if !args.no_report {
        report(&cfg.output_dir)?;
    }
    Ok(summary.all_completed())
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: {} cells, {} run, {} resumed, {} diverged, {} failed",
        s.experiment_id,
        s.total_cells,
        s.ran,
        s.resumed,
        s.diverged,
        s.failures.len()
    );
    for f in &s.failures {
        eprintln!("failed {} ({} n={} seed={}): {}", f.cell_key, f.cell.model.name(), f.cell.n, f.cell.seed, f.error);
    }
}

fn report(dir: &Path) -> ntklab::Result<ReportSummary> {
    let r = emit_report(dir)?;
    println!("report: {}", dir.join("report").display());
    for (tag, e) in &r.exponents {
        match (&e.fit, &e.error) {
            (Some(f), _) => {
                let se = e.beta_bootstrap_stderr.map(|s| format!(" ± {s:.3}")).unwrap_or_default();
                println!("  {tag}: beta = {:.4}{se}, alpha = {:.3e}, A = {:.4}", f.beta, f.alpha, f.a);
            }
            (None, Some(msg)) => println!("  {tag}: no fit ({msg})"),
            (None, None) => {}
        }
    }
    Ok(r)
}

fn parse_shape(s: &str) -> ntklab::Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| ntklab::Error::Config(format!("shape {s:?}: {e}")))?;
    match dims[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(ntklab::Error::Config(format!("shape {s:?} is not HxWxC"))),
    }
}

fn convert(a: ConvertArgs) -> ntklab::Result<()> {
    let manifest = match a.format {
        InputFormat::Cifar10Bin => {
            let names = if a.class_names.is_empty() {
                CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()
            } else {
                a.class_names
            };
            let batches: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
            convert_cifar10_bin(&batches, &a.out, names)?
        }
        InputFormat::RawHwc => {
            let [images] = &a.inputs[..] else {
                return Err(ntklab::Error::Config("raw-hwc takes exactly one pixel file".into()));
            };
            let ids = a
                .class_ids
                .ok_or_else(|| ntklab::Error::Config("raw-hwc needs --class-ids".into()))?;
            let shape = parse_shape(
                a.shape
                    .as_deref()
                    .ok_or_else(|| ntklab::Error::Config("raw-hwc needs --shape".into()))?,
            )?;
            convert_raw_hwc(images, &ids, shape, &a.out, a.class_names)?
        }
    };
    println!(
        "wrote {} images of {}x{}x{} to {}",
        manifest.count,
        manifest.height,
        manifest.width,
        manifest.channels,
        a.out.display()
    );
    Ok(())
}
