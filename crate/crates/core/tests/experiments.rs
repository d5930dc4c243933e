use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ntklab::experiment::{
    emit_report, run_after_kernel, run_data_scaling, run_experiment, run_lr_sweep, run_time_dynamics, run_width_sweep,
    time_anchors, CellStatus, ExperimentConfig, ModelKind, ResultRow, RunStore,
};

fn config(dir: &Path, body: &str) -> ExperimentConfig {
    config_with(dir, body, "")
}

fn config_with(dir: &Path, body: &str, arch: &str) -> ExperimentConfig {
    let text = format!(
        r#"
id = "t"
output_dir = "{}"
seeds = [0, 1]
{body}

[architecture]
name = "mlp4"
width = 16
{arch}
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

const DATA: &str = r#"
[data]
source = "synthetic"
dim = 8
test_size = 100
n = 80
n_grid = [40, 80, 160]

[optimizer]
learning_rate = 0.5
momentum = 0.9
batch_size = 20
max_steps = 60
"#;

fn rows(dir: &Path) -> Vec<ResultRow> {
    RunStore::open(dir).rows().unwrap()
}

fn strip_time(mut rows: Vec<ResultRow>) -> Vec<ResultRow> {
    for r in &mut rows {
        r.wall_time_s = 0.0;
    }
    rows
}

#[test]
fn data_scaling_runs_every_cell_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "kind = \"data_scaling\"\nmodels = [\"network\", \"entk_init\", \"infinite_ntk\", \"g2_full\", \"g2_only\"]\n{DATA}\n[fit]\nbootstrap_replicates = 20"
    );
    let cfg = config(tmp.path(), &body);
    let s = run_data_scaling(&cfg).unwrap();
    assert!(s.all_completed(), "{:?}", s.failures);
    assert_eq!(s.total_cells, 2 * 3 * 5);
    assert_eq!(s.ran, 30);

    let first = rows(tmp.path());
    assert_eq!(first.len(), 30);
    for r in &first {
        let e = r.test_error.unwrap();
        assert!((0.0..=1.0).contains(&e));
        assert_eq!(r.status, CellStatus::Completed);
    }

    // one optimizer per (seed, n), whatever the model
    let mut prints: HashMap<(u64, usize), String> = HashMap::new();
    for r in &first {
        let p = prints.entry((r.cell.seed, r.cell.n)).or_insert(r.optimizer_fingerprint.clone());
        assert_eq!(*p, r.optimizer_fingerprint);
    }

    let again = run_data_scaling(&cfg).unwrap();
    assert_eq!((again.ran, again.resumed), (0, 30));
    assert_eq!(rows(tmp.path()), first);

    let report = emit_report(tmp.path()).unwrap();
    assert_eq!(report.exponents.len(), 5);
    for (tag, e) in &report.exponents {
        assert!(e.fit.is_some() || e.error.is_some(), "{tag}");
    }
    let snapshot = fs::read(tmp.path().join("report/summary.json")).unwrap();
    emit_report(tmp.path()).unwrap();
    assert_eq!(fs::read(tmp.path().join("report/summary.json")).unwrap(), snapshot);
}

#[test]
fn reruns_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let body = format!("kind = \"data_scaling\"\nmodels = [\"network\", \"entk_init\"]\n{DATA}");
    run_experiment(&config(a.path(), &body)).unwrap();
    run_experiment(&config(b.path(), &body)).unwrap();
    assert_eq!(strip_time(rows(a.path())), strip_time(rows(b.path())));
    let logs = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d.join("logs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    assert_eq!(logs(a.path()), logs(b.path()));
}

#[test]
fn interrupted_sweep_completes_on_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"data_scaling\"\nmodels = [\"network\", \"infinite_ntk\"]\n{DATA}");
    let cfg = config(tmp.path(), &body);
    run_experiment(&cfg).unwrap();
    let full = strip_time(rows(tmp.path()));
    // drop a third of the rows, as if the run had been killed
    let store = RunStore::open(tmp.path());
    for r in full.iter().step_by(3) {
        fs::remove_file(store.row_path(&r.cell_key)).unwrap();
    }
    let s = run_experiment(&cfg).unwrap();
    assert_eq!(s.ran, full.len().div_ceil(3));
    assert_eq!(strip_time(rows(tmp.path())), full);
}

#[test]
fn changed_config_is_refused_in_the_same_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"data_scaling\"\nmodels = [\"network\"]\n{DATA}");
    run_experiment(&config(tmp.path(), &body)).unwrap();
    let other = config(tmp.path(), &body.replace("max_steps = 60", "max_steps = 61"));
    assert!(run_experiment(&other).is_err());
}

#[test]
fn wrong_kind_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &format!("kind = \"data_scaling\"\n{DATA}"));
    assert!(run_width_sweep(&cfg).is_err());
}

#[test]
fn width_sweep_has_a_width_free_infinite_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), &format!("kind = \"width_sweep\"\n{DATA}"), "widths = [8, 16, 32]");
    let s = run_width_sweep(&cfg).unwrap();
    assert!(s.all_completed());
    assert_eq!(s.total_cells, 2 * (3 * 2 + 1));
    let rows = rows(tmp.path());
    for r in rows.iter().filter(|r| r.cell.model == ModelKind::InfiniteNtk) {
        assert_eq!(r.cell.width, None);
    }
    let report = emit_report(tmp.path()).unwrap();
    assert!(report.files.contains(&"width_network.csv".to_string()));
    let text = fs::read_to_string(tmp.path().join("report/width_network.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn lr_sweep_records_divergence_and_finishes() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"lr_sweep\"\nmodels = [\"network\", \"entk_init\"]\n{DATA}\n[lr_sweep]\nlearning_rates = [0.1, 0.5, 1000.0]");
    let mut cfg = config(tmp.path(), &body);
    cfg.data.n_grid.clear();
    let s = run_lr_sweep(&cfg).unwrap();
    assert!(s.all_completed(), "{:?}", s.failures);
    assert_eq!(s.diverged, 2, "{s:?}");
    let rows = rows(tmp.path());
    // per seed: three network rows, one kernel reference row
    assert_eq!(rows.len(), 2 * 4);
    for r in rows.iter().filter(|r| r.cell.model == ModelKind::EntkInit) {
        assert_eq!(r.cell.learning_rate, 0.5);
    }
    for r in rows.iter().filter(|r| r.cell.learning_rate == 1000.0) {
        assert_eq!(r.status, CellStatus::Diverged);
        assert_eq!(r.test_error, None);
    }
    emit_report(tmp.path()).unwrap();
    let text = fs::read_to_string(tmp.path().join("report/lr_network_n80.csv")).unwrap();
    assert!(text.contains("# diverged"));
}

#[test]
fn after_kernel_rows_cover_modes_and_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "kind = \"after_kernel\"\n{DATA}\n[after_kernel]\nm_list = [0, 40, 80]\nprobe_n = [40]\nmode = \"both\""
    );
    let cfg = config(tmp.path(), &body);
    let s = run_after_kernel(&cfg).unwrap();
    assert!(s.all_completed(), "{:?}", s.failures);
    let rows = rows(tmp.path());
    let kernels: Vec<_> = rows.iter().filter(|r| r.cell.model == ModelKind::AfterKernel).collect();
    // fresh for every m; subset only where n ≤ m
    assert_eq!(kernels.len(), 2 * (3 + 2));
    assert_eq!(rows.iter().filter(|r| r.cell.model == ModelKind::Network).count(), 2 * 2);

    // a resumed run reuses the stored anchors and reproduces the rows
    let store = RunStore::open(tmp.path());
    for r in &kernels {
        fs::remove_file(store.row_path(&r.cell_key)).unwrap();
    }
    let again = run_after_kernel(&cfg).unwrap();
    assert_eq!(again.ran, kernels.len());
    let after: Vec<_> = crate::rows(tmp.path());
    assert_eq!(strip_time(after), strip_time(rows.clone()));
    let report = emit_report(tmp.path()).unwrap();
    assert!(report.files.contains(&"after_kernel_fresh_n40.csv".to_string()));
}

#[test]
fn time_dynamics_starts_at_the_initial_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"time_dynamics\"\nzero_output = true\n{DATA}\n[time_dynamics]\nanchors = 4");
    let cfg = config(tmp.path(), &body);
    let anchors = time_anchors(&cfg);
    assert_eq!(anchors.first(), Some(&0));
    assert_eq!(anchors.last(), Some(&60));
    assert_eq!(anchors.len(), 4);
    let s = run_time_dynamics(&cfg).unwrap();
    assert!(s.all_completed(), "{:?}", s.failures);
    let rows = rows(tmp.path());
    for seed in [0, 1] {
        let entk = rows.iter().find(|r| r.cell.seed == seed && r.cell.model == ModelKind::EntkInit).unwrap();
        let t0 = rows
            .iter()
            .find(|r| r.cell.seed == seed && r.cell.model == ModelKind::TimeKernel && r.cell.t == Some(0))
            .unwrap();
        assert_eq!(entk.test_error, t0.test_error);
        assert_eq!(entk.best_step, t0.best_step);
    }
    let report = emit_report(tmp.path()).unwrap();
    for f in ["time_kernel.csv", "trajectory_network.csv", "trajectory_entk_init.csv"] {
        assert!(report.files.contains(&f.to_string()), "{f}");
    }
}

#[test]
fn corpus_sweeps_normalize_and_run() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let (h, w, c, count) = (4, 4, 3, 120);
    let pixels: Vec<u8> = (0..count * h * w * c).map(|i| ((i * 37) % 251) as u8).collect();
    let classes: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
    fs::write(tmp.path().join("px.bin"), &pixels).unwrap();
    fs::write(tmp.path().join("cls.bin"), &classes).unwrap();
    ntklab::data::convert_raw_hwc(
        &tmp.path().join("px.bin"),
        &tmp.path().join("cls.bin"),
        (h, w, c),
        &corpus,
        (0..10).map(|d| d.to_string()).collect(),
    )
    .unwrap();
    let out = tmp.path().join("run");
    let text = format!(
        r#"
id = "corpus"
kind = "width_sweep"
output_dir = "{}"
seeds = [3]
models = ["network", "entk_init", "infinite_ntk"]

[architecture]
name = "cnn5"
widths = [2, 4]

[data]
source = "corpus"
path = "{}"
rule = {{ rule = "parity_of_digit" }}
test_size = 40
n = 60

[optimizer]
learning_rate = 0.5
momentum = 0.9
batch_size = 20
max_steps = 30
"#,
        out.display(),
        corpus.display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let s = run_experiment(&cfg).unwrap();
    assert!(s.all_completed(), "{:?}", s.failures);
    assert_eq!(s.total_cells, 5);

    let mut short = cfg.clone();
    short.id = "short".into();
    short.output_dir = tmp.path().join("short");
    short.data.n = 100;
    let s = run_experiment(&short).unwrap();
    assert!(!s.all_completed());
    assert_eq!(s.failures.len(), 5);
    assert!(tmp.path().join("short/failures.json").exists());
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = |body: &str| {
        let text = format!(
            "id = \"x\"\noutput_dir = \"{}\"\nseeds = [0]\n{body}\n[architecture]\nname = \"mlp4\"\n{DATA}",
            tmp.path().display()
        );
        ExperimentConfig::from_toml(&text)
    };
    assert!(bad("kind = \"data_scaling\"").is_ok());
    assert!(bad("kind = \"lr_sweep\"").is_err());
    assert!(bad("kind = \"width_sweep\"").is_err());
    assert!(bad("kind = \"after_kernel\"").is_err());
    assert!(bad("kind = \"data_scaling\"\nmodels = [\"after_kernel\"]").is_err());
    assert!(bad("kind = \"data_scaling\"\nmodels = [\"bogus\"]").is_err());
    assert!(bad("kind = \"data_scaling\"\nunknown_key = 1").is_err());
}

#[test]
fn single_point_grid_reports_fit_errors_only() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"data_scaling\"\nmodels = [\"network\", \"infinite_ntk\"]\n{DATA}")
        .replace("n_grid = [40, 80, 160]", "n_grid = [40]");
    let s = run_data_scaling(&config(tmp.path(), &body)).unwrap();
    assert!(s.all_completed());
    let report = emit_report(tmp.path()).unwrap();
    assert_eq!(report.exponents.len(), 2);
    for e in report.exponents.values() {
        assert!(e.fit.is_none());
        assert!(e.error.as_deref().unwrap().contains("at least 3"));
    }
    assert!(report.files.iter().all(|f| !f.starts_with("fit_")));
}

#[test]
fn exponents_pass_fits_through_at_full_precision() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("kind = \"data_scaling\"\nmodels = [\"infinite_ntk\"]\n{DATA}\n[fit]\nbootstrap_replicates = 0");
    run_data_scaling(&config(tmp.path(), &body)).unwrap();
    let report = emit_report(tmp.path()).unwrap();
    let series = fs::read_to_string(tmp.path().join("report/series_infinite_ntk.csv")).unwrap();
    let curve = ntklab::scaling::LearningCurve::from_csv("infinite_ntk", &series).unwrap();
    let fit = ntklab::scaling::fit_scaling_law(&curve).unwrap();
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("report/summary.json")).unwrap()).unwrap();
    let beta = json["exponents"]["infinite_ntk"]["beta"].as_f64().unwrap();
    assert_eq!(beta.to_bits(), fit.beta.to_bits());
    assert_eq!(report.exponents["infinite_ntk"].fit.as_ref().unwrap().beta.to_bits(), fit.beta.to_bits());
}
