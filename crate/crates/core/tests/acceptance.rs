//! One pass/fail line per acceptance criterion, at the stated tolerances.
//!
//! Criteria 6 to 9 run the desk-scale sweeps in `configs/`. Their run
//! directories live under cargo's test scratch directory, so an interrupted
//! or repeated run resumes from the committed rows.
//!
//! Failing criteria are reported but only fail the test when
//! `NTKLAB_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use common::*;
use ndarray::{s, Array2};
use ntklab::data::synthetic_parity;
use ntklab::experiment::{run_experiment, time_anchors, CellStatus, ExperimentConfig, ModelKind, ResultRow, RunStore};
use ntklab::kernel::{empirical_ntk_gram, infinite_ntk, infinite_ntk_mlp, mc_ntk_estimate};
use ntklab::nn::{cnn5, init_weights, mlp4, InputShape, Network, NetworkSpec};
use ntklab::scaling::{bootstrap_beta, fit_scaling_law, mean_stderr, CurvePoint, LearningCurve};
use ntklab::taylor::{AnchorProvenance, TaylorKind, TaylorModel};
use ntklab::trainer::{direct_solve, train, train_kernel_system, CheckpointSchedule, OptimizerConfig, TrainOptions};
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Writes past the test harness's output capture.
fn emit(line: &str) {
    use std::os::fd::FromRawFd;
    let mut out = std::mem::ManuallyDrop::new(unsafe { fs::File::from_raw_fd(1) });
    writeln!(out, "{line}").unwrap();
}

fn row(x: &[f64]) -> ndarray::ArrayView2<'_, f64> {
    ndarray::ArrayView2::from_shape((1, x.len()), x).unwrap()
}

/// `(w, x)` pairs at least `margin` away from every Relu kink.
fn probes(spec: &NetworkSpec, count: usize, seed: u64, margin: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let net = Network::new(spec).unwrap();
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let w = normals(&mut r, net.num_params());
        let x = normals(&mut r, net.input_len());
        if reference_forward(spec, &w, &x).min_preactivation > margin {
            out.push((w, x));
        }
    }
    out
}

fn differentiation() -> Outcome {
    let specs = [mlp4(4), cnn5(2).with_input_shape(InputShape::Image { height: 4, width: 4, channels: 3 })];
    let (mut grad_worst, mut hvp_worst) = (0.0f64, 0.0f64);
    for spec in &specs {
        let net = Network::new(spec).unwrap();
        let mut r = rng(5);
        for (w, x) in probes(spec, 100, 17, 1e-2) {
            let g = net.vjp(&w, row(&x), &[1.0]).unwrap();
            let fd = fd_gradient(|w| reference_forward(spec, w, &x).output, &w, 1e-4);
            grad_worst = grad_worst.max(max_rel_vec_err(&g, &fd));

            let v = normals(&mut r, w.len());
            let (_, hv) = net.hvp(&w, row(&x), &v, &[1.0]).unwrap();
            let eps = 1e-4;
            let shift = |s: f64| -> Vec<f64> { w.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
            let gp = net.vjp(&shift(eps), row(&x), &[1.0]).unwrap();
            let gm = net.vjp(&shift(-eps), row(&x), &[1.0]).unwrap();
            let dg: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            hvp_worst = hvp_worst.max(max_rel_vec_err(&hv, &dg));
        }
    }
    outcome(
        grad_worst < 1e-4 && hvp_worst < 1e-3,
        format!("mlp4(4), cnn5(2), 100 probes each: gradient rel err {grad_worst:.2e} (< 1e-4), HVP rel err {hvp_worst:.2e} (< 1e-3)"),
    )
}

fn kernel_limit() -> Outcome {
    let pairs = synthetic_parity(40, 30, 0.25, 99).unwrap();
    let idx_x: Vec<usize> = (0..20).map(|i| 2 * i).collect();
    let idx_y: Vec<usize> = (0..20).map(|i| 2 * i + 1).collect();
    let x = pairs.select(&idx_x).inputs;
    let y = pairs.select(&idx_y).inputs;
    let spec = mlp4(1);
    let exact = infinite_ntk(&spec, x.view(), y.view()).unwrap();
    let seeds: Vec<u64> = (100..116).collect();
    let mut errs = Vec::new();
    let mut z_last = 0.0f64;
    for width in [64, 256, 1024] {
        let mc = mc_ntk_estimate(&spec, width, &seeds, x.view(), y.view()).unwrap();
        let worst = (0..20)
            .map(|i| rel_err(mc.mean.values[[i, i]], exact.values[[i, i]]))
            .fold(0.0, f64::max);
        errs.push(worst);
        z_last = (0..20)
            .map(|i| ((mc.mean.values[[i, i]] - exact.values[[i, i]]) / mc.stderr[[i, i]]).abs())
            .fold(0.0, f64::max);
    }
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);

    let d = 30;
    let mut probe = Array2::zeros((3, d));
    probe.row_mut(0).fill(1.0);
    probe.slice_mut(s![1, ..15]).fill(2f64.sqrt());
    probe.slice_mut(s![2, 15..]).fill(2f64.sqrt());
    let k = infinite_ntk_mlp(1, probe.view(), probe.view(), None).unwrap();
    let three_sf = |v: f64, t: f64| rel_err(v, t) < 5e-4;
    let aligned = k.values[[0, 0]];
    let orth = k.values[[1, 2]];
    let spots = three_sf(aligned, 1.0) && three_sf(orth, 1.0 / (2.0 * std::f64::consts::PI));
    outcome(
        monotone && errs[2] < 0.05 && spots,
        format!(
            "max rel err over 20 pairs at widths 64/256/1024: {:.4}/{:.4}/{:.4} (decreasing, last < 0.05), largest deviation at 1024 is {z_last:.2} MC stderr; spot values {aligned:.6} and {orth:.6} (1 and 1/2π to 3 s.f.)",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn linear_dynamics() -> Outcome {
    let spec = mlp4(16);
    let data = synthetic_parity(200, 30, 0.25, 31).unwrap();
    let test = synthetic_parity(100, 30, 0.25, 32).unwrap();
    let w0 = init_weights::<f64>(&spec, 33).unwrap();
    let k = empirical_ntk_gram(&spec, &w0, data.inputs.view(), data.inputs.view()).unwrap();
    let kt = empirical_ntk_gram(&spec, &w0, test.inputs.view(), data.inputs.view()).unwrap();
    let lr = 0.5 * data.len() as f64 / k.trace();
    let mut cfg = OptimizerConfig::new(lr, 0.9, Some(20), 400_000);
    cfg.shuffle_seed = 34;
    cfg.target_train_loss = Some(1e-11);
    let opts = TrainOptions { record_test_predictions: true, ..Default::default() };
    let mut g1 = TaylorModel::new(TaylorKind::G1, &spec, w0.clone(), AnchorProvenance::Init { seed: 33 }).unwrap();
    let a = train(&mut g1, &data, &test, &cfg, &opts).unwrap();
    let b = train_kernel_system(&k, &kt, &data.labels, &test.labels, &cfg, &opts).unwrap();
    let same_steps = a.log.steps() == b.log.steps();
    let mut worst: f64 = 0.0;
    for (ea, eb) in a.log.entries.iter().zip(&b.log.entries).skip(1) {
        let (pa, pb) = (ea.test_predictions.as_ref().unwrap(), eb.test_predictions.as_ref().unwrap());
        for (u, v) in pa.iter().zip(pb) {
            worst = worst.max(rel_err(*u, *v));
        }
    }
    let direct = direct_solve(&k, &kt, &data.labels, &test.labels, &[0.0]).unwrap();
    let exact = direct.outcomes[0].test_predictions.clone().unwrap_or_default();
    let last = b.log.entries.last().unwrap();
    let pred = last.test_predictions.as_ref().unwrap();
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let solve_err = pred.iter().zip(&exact).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max) / scale;
    outcome(
        same_steps && worst < 1e-6 && last.train_loss < 1e-10 && solve_err < 1e-4,
        format!(
            "200 samples: checkpoint-wise rel err {worst:.2e} (< 1e-6); at train loss {:.1e} after {} steps, max err vs direct solve {solve_err:.2e} of max |pred| (< 1e-4)",
            last.train_loss, b.steps_run
        ),
    )
}

fn taylor_identity() -> Outcome {
    let spec = mlp4(4);
    let net = Network::new(&spec).unwrap();
    let w0 = init_weights::<f64>(&spec, 41).unwrap();
    let kinds = [TaylorKind::G1, TaylorKind::G2Only, TaylorKind::G2Full];
    let mut models: Vec<TaylorModel<f64>> = kinds
        .iter()
        .map(|&k| TaylorModel::new(k, &spec, w0.clone(), AnchorProvenance::Init { seed: 41 }).unwrap())
        .collect();
    let mut r = rng(42);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w: Vec<f64> = w0.flat.iter().zip(normals(&mut r, w0.len())).map(|(a, d)| a + 0.3 * d).collect();
        let x = batch(&mut r, 1, 30);
        for m in models.iter_mut() {
            m.set_weights(w.clone()).unwrap();
        }
        let f0 = net.forward(&w0.flat, x.view()).unwrap()[0];
        let p: Vec<f64> = models.iter().map(|m| m.predict(x.view()).unwrap()[0]).collect();
        worst = worst.max(rel_err(f0 + p[0] + p[1], p[2]));
    }
    outcome(worst < 1e-10, format!("1000 probes on mlp4(4): max rel err {worst:.2e} (< 1e-10)"))
}

fn law_curve(ns: &[u64], errors: impl Iterator<Item = f64>) -> LearningCurve {
    let points = ns.iter().zip(errors).map(|(&n, error)| CurvePoint { n, error, stderr: None, seeds: 1 }).collect();
    LearningCurve::new("t", points).unwrap()
}

fn scaling_recovery() -> Outcome {
    let ns: Vec<u64> = (0..8).map(|i| (500.0 * 2f64.powi(i)).round() as u64).collect();
    let mut worst: f64 = 0.0;
    for (a, alpha, beta) in [(2.0, 0.01, 0.3), (1.0, 1e-4, 0.5), (3.0, 2e-5, 0.2)] {
        let fit = fit_scaling_law(&law_curve(&ns, ns.iter().map(|&n| a * (1.0 / n as f64 + alpha).powf(beta)))).unwrap();
        worst = worst.max(rel_err(fit.a, a)).max(rel_err(fit.alpha, alpha)).max(rel_err(fit.beta, beta));
    }
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut r = rng(51);
    let mut beta_errs: Vec<f64> = (0..100)
        .map(|_| {
            let errors: Vec<f64> = ns
                .iter()
                .map(|&n| (1.0 / n as f64 + 1e-5).powf(0.3) * f64::exp(noise.sample(&mut r)))
                .collect();
            (fit_scaling_law(&law_curve(&ns, errors.into_iter())).unwrap().beta - 0.3).abs()
        })
        .collect();
    beta_errs.sort_by(f64::total_cmp);
    let median = (beta_errs[49] + beta_errs[50]) / 2.0;
    outcome(
        worst < 1e-4 && median <= 0.03,
        format!("noiseless max rel err {worst:.2e} (< 1e-4); 5% log-normal noise, median |Δβ| over 100 trials {median:.4} (≤ 0.03)"),
    )
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Loads a shipped config and runs it in the scratch directory.
fn run_shipped(file: &str) -> (ExperimentConfig, Vec<ResultRow>, Result<(), String>) {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs").join(file)).unwrap();
    cfg.output_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&cfg.id);
    let status = match run_experiment(&cfg) {
        Ok(s) if s.all_completed() => Ok(()),
        Ok(s) => Err(format!("{} of {} cells failed", s.failures.len(), s.total_cells)),
        Err(e) => Err(e.to_string()),
    };
    let rows = RunStore::open(&cfg.output_dir).rows().unwrap_or_default();
    (cfg, rows, status)
}

/// Per-seed errors of `model` keyed by `x`.
fn per_seed(rows: &[ResultRow], keep: impl Fn(&ResultRow) -> Option<u64>) -> BTreeMap<u64, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<u64, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == CellStatus::Completed) {
        if let (Some(x), Some(e)) = (keep(r), r.test_error) {
            out.entry(x).or_default().insert(r.cell.seed, e);
        }
    }
    out
}

fn stats(by_seed: &BTreeMap<u64, f64>) -> (f64, f64) {
    let v: Vec<f64> = by_seed.values().copied().collect();
    let (m, se) = mean_stderr(&v);
    (m, se.unwrap_or(f64::INFINITY))
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

fn data_scaling_trend() -> Outcome {
    let (cfg, rows, status) = run_shipped("data-scaling.toml");
    if let Err(e) = status {
        return outcome(false, format!("sweep incomplete: {e}"));
    }
    let ns: Vec<u64> = cfg.data.n_grid.iter().map(|&n| n as u64).collect();
    let mut fits = BTreeMap::new();
    let mut matrices = BTreeMap::new();
    for model in [ModelKind::Network, ModelKind::InfiniteNtk, ModelKind::EntkInit] {
        let series = per_seed(&rows, |r| (r.cell.model == model).then_some(r.cell.n as u64));
        let matrix: Vec<Vec<f64>> = cfg.seeds.iter().map(|s| ns.iter().map(|n| series[n][s]).collect()).collect();
        let curve = LearningCurve::from_seeds(model.name(), &ns, &matrix).unwrap();
        let beta = fit_scaling_law(&curve).unwrap().beta;
        let se = bootstrap_beta(&ns, &matrix, cfg.fit.bootstrap_replicates, 61).unwrap().beta_stderr;
        fits.insert(model, (beta, se));
        matrices.insert(model, matrix);
    }
    let (bn, sn) = fits[&ModelKind::Network];
    let (bi, si) = fits[&ModelKind::InfiniteNtk];
    let (be, se) = fits[&ModelKind::EntkInit];
    let gap_i = bn - bi;
    let gap_e = bn - be;
    let pass = gap_i > combined(sn, si) && gap_e > combined(sn, se);
    outcome(
        pass,
        format!(
            "beta network {bn:.3} ± {sn:.3}, infinite NTK {bi:.3} ± {si:.3}, ENTK init {be:.3} ± {se:.3}; gaps {gap_i:.3} (> {:.3}) and {gap_e:.3} (> {:.3})",
            combined(sn, si),
            combined(sn, se)
        ),
    )
}

fn width_trend() -> Outcome {
    let (cfg, rows, status) = run_shipped("width-sweep.toml");
    if let Err(e) = status {
        return outcome(false, format!("sweep incomplete: {e}"));
    }
    let widths: Vec<u64> = cfg.architecture.widths.iter().map(|&w| w as u64).collect();
    let curve = |model: ModelKind| -> Vec<(f64, f64)> {
        let s = per_seed(&rows, |r| (r.cell.model == model).then(|| r.cell.width.unwrap() as u64));
        widths.iter().map(|w| stats(&s[w])).collect()
    };
    let entk = curve(ModelKind::EntkInit);
    let net = curve(ModelKind::Network);
    let entk_ok = entk.windows(2).all(|p| p[1].0 <= p[0].0 + 2.0 * combined(p[0].1, p[1].1));
    let (imin, min) = net.iter().enumerate().fold((0, net[0]), |b, (i, v)| if v.0 < b.1 .0 { (i, *v) } else { b });
    let last = *net.last().unwrap();
    let rise = last.0 - min.0;
    let net_ok = rise > 2.0 * combined(last.1, min.1);
    let fmt = |c: &[(f64, f64)]| c.iter().map(|(m, _)| format!("{m:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        entk_ok && net_ok,
        format!(
            "widths {widths:?}: ENTK {} (non-increasing within 2 se: {entk_ok}); network {} (width {} exceeds the minimum at width {} by {rise:.3}, 2 se = {:.3})",
            fmt(&entk),
            fmt(&net),
            widths.last().unwrap(),
            widths[imin],
            2.0 * combined(last.1, min.1)
        ),
    )
}

fn after_kernel_trend() -> Outcome {
    let (_, rows, status) = run_shipped("after-kernel.toml");
    if let Err(e) = status {
        return outcome(false, format!("sweep incomplete: {e}"));
    }
    let fresh = per_seed(&rows, |r| {
        (r.cell.model == ModelKind::AfterKernel && r.cell.mode.as_deref() == Some("fresh") && r.cell.n == 500)
            .then(|| r.cell.m.unwrap() as u64)
    });
    let ms = [500u64, 2000, 8000];
    let curve: Vec<(f64, f64)> = ms.iter().map(|m| stats(&fresh[m])).collect();
    let mono = curve.windows(2).all(|p| p[1].0 <= p[0].0 + 2.0 * combined(p[0].1, p[1].1));
    let kn = per_seed(&rows, |r| {
        (r.cell.model == ModelKind::AfterKernel && r.cell.mode.as_deref() == Some("subset") && r.cell.m == Some(2000))
            .then_some(r.cell.n as u64)
    });
    let net = per_seed(&rows, |r| (r.cell.model == ModelKind::Network).then(|| r.cell.m.unwrap() as u64));
    let (k, ks) = stats(&kn[&2000]);
    let (nn, ns) = stats(&net[&2000]);
    let close = (k - nn).abs() <= 2.0 * combined(ks, ns);
    outcome(
        mono && close,
        format!(
            "K_m^F(500) for m = 500/2000/8000: {:.4}/{:.4}/{:.4} (non-increasing within 2 se: {mono}); K_2000(2000) {k:.4} ± {ks:.4} vs network {nn:.4} ± {ns:.4} (within 2 se: {close})",
            curve[0].0, curve[1].0, curve[2].0
        ),
    )
}

/// Mean test error per logged step across the seeds of one model.
fn trajectory(dir: &Path, rows: &[ResultRow], model: ModelKind) -> BTreeMap<u64, (f64, f64)> {
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.cell.model == model && r.status == CellStatus::Completed) {
        let text = fs::read_to_string(dir.join("logs").join(format!("{}.csv", r.cell_key))).unwrap();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            by_step.entry(f[0].parse().unwrap()).or_default().push(f[3].parse().unwrap());
        }
    }
    by_step
        .into_iter()
        .map(|(s, v)| {
            let (m, se) = mean_stderr(&v);
            (s, (m, se.unwrap_or(f64::INFINITY)))
        })
        .collect()
}

fn time_trend() -> Outcome {
    let (cfg, rows, status) = run_shipped("time-dynamics.toml");
    if let Err(e) = status {
        return outcome(false, format!("sweep incomplete: {e}"));
    }
    let anchors = time_anchors(&cfg);
    let kt = per_seed(&rows, |r| (r.cell.model == ModelKind::TimeKernel).then(|| r.cell.t.unwrap()));
    let (first, fs_) = stats(&kt[&0]);
    let t_last = *anchors.last().unwrap();
    let (last, ls) = stats(&kt[&t_last]);
    let improves = first - last > 2.0 * combined(fs_, ls);

    // the window: anchors within the first epoch
    let epoch = (cfg.data.n / cfg.optimizer.batch_size.unwrap_or(cfg.data.n)) as u64;
    let window: Vec<u64> = anchors.iter().copied().filter(|&t| t <= epoch).collect();
    let flat = window.len() >= 2
        && window.iter().all(|t| {
            let (m, se) = stats(&kt[t]);
            (m - first).abs() < 2.0 * combined(se, fs_)
        });
    let net = trajectory(&cfg.output_dir, &rows, ModelKind::Network);
    let entk = trajectory(&cfg.output_dir, &rows, ModelKind::EntkInit);
    let w_end = *window.last().unwrap_or(&0);
    let mut worst_gap = 0.0f64;
    let coincide = net.iter().filter(|(s, _)| **s <= w_end).all(|(s, (m, se))| {
        let (me, see) = entk[s];
        worst_gap = worst_gap.max((m - me).abs());
        (m - me).abs() < 2.0 * combined(*se, see).max(1e-12)
    });
    outcome(
        improves && flat && coincide,
        format!(
            "K^t_fit {first:.4} at t=0, {last:.4} at t={t_last} (drop > 2 se: {improves}); window t ≤ {w_end} over anchors {window:?}: flat within noise {flat}, network and ENTK trajectories agree within 2 se {coincide} (max gap {worst_gap:.4})"
        ),
    )
}

fn protocol() -> Outcome {
    // iterated ceiling of 1.1·t, in exact integer arithmetic
    let mut expected = vec![0u64, 1];
    while *expected.last().unwrap() < 1_000_000 {
        let t = *expected.last().unwrap();
        expected.push(((t * 11).div_ceil(10)).max(t + 1));
    }
    let max = *expected.last().unwrap();
    let schedule_ok = CheckpointSchedule::new(1.1).steps_up_to(max) == expected;

    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-protocol");
    let _ = fs::remove_dir_all(&tmp);
    let body = |dir: &Path| {
        format!(
            r#"
id = "protocol"
kind = "data_scaling"
output_dir = "{}"
seeds = [0, 1]
models = ["network", "entk_init", "infinite_ntk", "g2_full", "g2_only"]
workers = 1
[architecture]
name = "mlp4"
width = 16
[data]
source = "synthetic"
test_size = 200
n_grid = [50, 100, 200]
[optimizer]
learning_rate = 0.5
momentum = 0.9
batch_size = 25
max_steps = 80
"#,
            dir.display()
        )
    };
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.join(run);
        let cfg = ExperimentConfig::from_toml(&body(&dir)).unwrap();
        run_experiment(&cfg).unwrap();
        let mut r = RunStore::open(&dir).rows().unwrap();
        r.iter_mut().for_each(|row| row.wall_time_s = 0.0);
        rows.push(r);
        let mut l: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("logs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        l.sort();
        logs.push(l);
    }
    let identical = rows[0] == rows[1] && logs[0] == logs[1] && !rows[0].is_empty();

    let mut prints: BTreeMap<(u64, usize), Vec<String>> = BTreeMap::new();
    for r in &rows[0] {
        prints.entry((r.cell.seed, r.cell.n)).or_default().push(r.optimizer_fingerprint.clone());
    }
    let shared = prints.values().all(|v| v.iter().all(|p| *p == v[0]) && v.len() == 5);
    outcome(
        schedule_ok && identical && shared,
        format!(
            "schedule matches iterated ceiling to step {max}: {schedule_ok}; one optimizer fingerprint per (seed, n) across 5 models: {shared}; two single-worker runs bit-identical ({} rows, {} logs): {identical}",
            rows[0].len(),
            logs[0].len()
        ),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Outcome;
    let criteria: [(u32, &str, Check); 10] = [
        (1, "differentiation oracle", differentiation),
        (2, "kernel-limit convergence", kernel_limit),
        (3, "linear-dynamics equivalence", linear_dynamics),
        (4, "Taylor identity", taylor_identity),
        (5, "scaling-fit recovery", scaling_recovery),
        (6, "desk-scale data scaling", data_scaling_trend),
        (7, "desk-scale width sweep", width_trend),
        (8, "desk-scale after-kernels", after_kernel_trend),
        (9, "desk-scale time dynamics", time_trend),
        (10, "protocol invariants", protocol),
    ];
    let only: Option<Vec<u32>> = std::env::var("NTKLAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = std::time::Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        emit(&format!(
            "criterion {id:>2} {verdict} [{name}, {:.1}s] {}",
            start.elapsed().as_secs_f64(),
            o.detail
        ));
        if !o.pass {
            failed.push(id);
        }
    }
    emit(&format!("acceptance: {} of {} criteria passed", ran - failed.len(), ran));
    if std::env::var_os("NTKLAB_ACCEPTANCE_STRICT").is_some() {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
