use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diagchart::chart::{self, ParamSource, ProcessParameters};
use diagchart::io::{self as dio, ChartRow, ParamsFile};
use diagchart::parallel::substream;
use diagchart::simulation::Scenario;
use diagchart::stats::{self, DataMatrix, TraceEstimates};

fn diagchart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diagchart")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_data(dir: &Path, name: &str, data: &DataMatrix) -> PathBuf {
    let headers: Vec<String> = (0..data.ncols()).map(|j| format!("x{j}")).collect();
    let p = dir.join(name);
    dio::write_matrix_csv(File::create(&p).unwrap(), &headers, data).unwrap();
    p
}

fn sample(p: usize, n: usize, seed: u64) -> DataMatrix {
    let s = Scenario::ar1(p, 0.4).unwrap();
    DataMatrix::new(s.sample_matrix(&mut substream(seed, 0), n)).unwrap()
}

fn read_chart(path: &Path) -> Vec<ChartRow> {
    dio::read_chart_csv(File::open(path).unwrap()).unwrap()
}

#[test]
fn phase1_params_reproduce_in_process_chart() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = write_data(dir.path(), "p1.csv", &sample(8, 120, 1));
    let mut p2 = sample(8, 60, 2).into_matrix();
    for i in 40..60 {
        for j in 0..4 {
            p2[(i, j)] += 2.5;
        }
    }
    let phase2 = write_data(dir.path(), "p2.csv", &DataMatrix::new(p2).unwrap());
    let params_path = dir.path().join("params.json");
    let chart_path = dir.path().join("chart.csv");

    let o = diagchart(&["phase1", "--input", path_str(&phase1), "--alpha", "0.01", "--out", path_str(&params_path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = diagchart(&["chart", "--params", path_str(&params_path), "--input", path_str(&phase2), "--out", path_str(&chart_path)]);
    let rows = read_chart(&chart_path);
    assert_eq!(rows.len(), 60);
    let any_signal = rows.iter().any(|r| r.signal);
    assert!(any_signal);
    assert_eq!(code(&o), 2);

    let (_, x1) = dio::read_matrix_csv(&phase1).unwrap();
    let (_, x2) = dio::read_matrix_csv(&phase2).unwrap();
    let cov = stats::sample_covariance(&x1).unwrap();
    let traces = TraceEstimates::estimate(&stats::correlation(&cov).unwrap(), x1.nrows()).unwrap();
    let params = ProcessParameters::new(stats::sample_mean(&x1), cov.d_s, traces, ParamSource::Classical).unwrap();
    let cfg = ParamsFile::read(&params_path).unwrap().config().unwrap();
    for (i, (x, row)) in x2.rows().zip(&rows).enumerate() {
        let pt = chart::evaluate(i + 1, &x, &params, &cfg).unwrap();
        assert_eq!(pt.signal, row.signal, "row {i}");
        for (a, b) in [(pt.m2, row.m2), (pt.u, row.u), (pt.z, row.z), (pt.ucl, row.ucl)] {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn chart_exit_codes_follow_signals() {
    let dir = tempfile::tempdir().unwrap();
    let x1 = sample(6, 80, 3);
    let phase1 = write_data(dir.path(), "p1.csv", &x1);
    let params = dir.path().join("params.json");
    assert_eq!(code(&diagchart(&["phase1", "--input", path_str(&phase1), "--out", path_str(&params)])), 0);

    let mean = stats::sample_mean(&x1);
    let center: Vec<Vec<f64>> = (0..10).map(|_| mean.iter().copied().collect()).collect();
    let centered = write_data(dir.path(), "center.csv", &DataMatrix::from_rows(&center).unwrap());
    let out = dir.path().join("c.csv");
    let o = diagchart(&["chart", "--params", path_str(&params), "--input", path_str(&centered), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read_chart(&out).iter().all(|r| !r.signal));

    let mut far = center.clone();
    far[5] = far[5].iter().map(|v| v + 50.0).collect();
    let far_path = write_data(dir.path(), "far.csv", &DataMatrix::from_rows(&far).unwrap());
    let o = diagchart(&["chart", "--params", path_str(&params), "--input", path_str(&far_path), "--out", path_str(&out)]);
    assert_eq!(code(&o), 2);
    let rows = read_chart(&out);
    assert_eq!(rows.iter().filter(|r| r.signal).map(|r| r.index).collect::<Vec<_>>(), vec![6]);
}

#[test]
fn selfstart_runs_from_two_rows_in_high_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = write_data(dir.path(), "p1.csv", &sample(100, 2, 4));
    let stream = write_data(dir.path(), "s.csv", &sample(100, 30, 5));
    let out = dir.path().join("ss.csv");
    let o = diagchart(&["selfstart", "--phase1", path_str(&phase1), "--stream", path_str(&stream), "--out", path_str(&out)]);
    assert_ne!(code(&o), 1, "{}", stderr(&o));
    let rows = read_chart(&out);
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.m2.is_finite() && r.z.is_finite()));
}

#[test]
fn selfstart_state_resume_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = write_data(dir.path(), "p1.csv", &sample(5, 10, 6));
    let all = sample(5, 40, 7);
    let stream = write_data(dir.path(), "all.csv", &all);
    let first = write_data(dir.path(), "a.csv", &all.select_rows(&(0..25).collect::<Vec<_>>()).unwrap());
    let second = write_data(dir.path(), "b.csv", &all.select_rows(&(25..40).collect::<Vec<_>>()).unwrap());
    let (full, a, b, state) = (dir.path().join("full.csv"), dir.path().join("a_out.csv"), dir.path().join("b_out.csv"), dir.path().join("state.json"));
    let base = ["selfstart", "--alpha", "0.05", "--refresh-every", "3"];

    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let o = diagchart(&args);
        assert_ne!(code(&o), 1, "{}", stderr(&o));
    };
    run(&["--phase1", path_str(&phase1), "--stream", path_str(&stream), "--out", path_str(&full)]);
    run(&["--phase1", path_str(&phase1), "--stream", path_str(&first), "--out", path_str(&a), "--state-out", path_str(&state)]);
    run(&["--state-in", path_str(&state), "--stream", path_str(&second), "--out", path_str(&b)]);

    let split: Vec<ChartRow> = read_chart(&a).into_iter().chain(read_chart(&b)).collect();
    assert_eq!(split, read_chart(&full));
}

#[test]
fn robust_phase1_requires_seed_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = write_data(dir.path(), "p1.csv", &sample(6, 60, 8));
    let o = diagchart(&["phase1", "--robust", "--input", path_str(&phase1)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let a = diagchart(&["--seed", "11", "phase1", "--robust", "--input", path_str(&phase1)]);
    let b = diagchart(&["--seed", "11", "phase1", "--robust", "--input", path_str(&phase1)]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let file: ParamsFile = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(file.source, ParamSource::Robust);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"x\"\nkind = \"arl\"\nseed = 1\np = [10]\nalpha = [0.01]\nn_reps = \"many\"\n").unwrap();
    let o = diagchart(&["simulate", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_reps"), "{}", stderr(&o));

    fs::write(&cfg, "name = \"x\"\nkind = \"arl\"\nseed = 1\np = [10]\nalpha = [0.01]\nn_reps = 10\nreps = 3\n").unwrap();
    let o = diagchart(&["simulate", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("reps"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, "name = \"small\"\nkind = \"arl\"\nseed = 3\np = [10]\nalpha = [0.05]\ncf_order = [1, 0]\nn_reps = 300\n").unwrap();
    let out = dir.path().join("small.csv");
    let o = diagchart(&["--threads", "1", "simulate", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "arl_hat").unwrap();
    let arls: Vec<f64> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(arls.len(), 2);
    assert!(arls[0] > arls[1], "CF limit should raise ARL0: {arls:?}");
    let manifest: serde_json::Value = serde_json::from_reader(File::open(dir.path().join("small.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["n_rows"], 2);
}

#[test]
fn ecdf_compares_labelled_groups() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = write_data(dir.path(), "p1.csv", &sample(6, 80, 9));
    let params = dir.path().join("params.json");
    assert_eq!(code(&diagchart(&["phase1", "--input", path_str(&phase1), "--out", path_str(&params)])), 0);
    let p2 = write_data(dir.path(), "p2.csv", &sample(6, 30, 10));
    let labels = dir.path().join("labels.csv");
    let text: String = std::iter::once("label\n".to_string()).chain((0..30).map(|i| format!("{}\n", if i % 3 == 0 { "fail" } else { "pass" }))).collect();
    fs::write(&labels, text).unwrap();
    let chart_out = dir.path().join("chart.csv");
    let o = diagchart(&["chart", "--params", path_str(&params), "--input", path_str(&p2), "--labels", path_str(&labels), "--out", path_str(&chart_out)]);
    assert_ne!(code(&o), 1, "{}", stderr(&o));

    let ecdf_out = dir.path().join("ecdf.csv");
    let o = diagchart(&["ecdf", "--input", path_str(&chart_out), "--out", path_str(&ecdf_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(&ecdf_out).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 4);
    let rows: Vec<Vec<f64>> = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 30);
    assert_eq!((rows[29][1], rows[29][2]), (1.0, 1.0));

    let o = diagchart(&["ecdf", "--input", path_str(&chart_out), "--statistic", "median"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("statistic"));
}

#[test]
fn prepare_cleans_splits_and_transforms() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let mut text = String::from("a,b,sparse,flat,label\n");
    for i in 0..50 {
        let sparse = if i % 4 == 0 { "7".to_string() } else { "NA".to_string() };
        text.push_str(&format!("{},{},{sparse},3.0,{}\n", (i * 13) % 17, (i * 7) % 11, if i % 5 == 0 { 1 } else { -1 }));
    }
    fs::write(&raw, text).unwrap();
    let out = dir.path().join("prepared");
    let o = diagchart(&["prepare", "--input", path_str(&raw), "--label-column", "label", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let (h1, d1) = dio::read_matrix_csv(out.join("phase1.csv")).unwrap();
    let (h2, d2) = dio::read_matrix_csv(out.join("phase2.csv")).unwrap();
    assert_eq!(h1, vec!["a", "b"]);
    assert_eq!(h2, h1);
    assert_eq!((d1.nrows(), d2.nrows()), (40, 10));
    assert_eq!(csv::Reader::from_path(out.join("phase2_labels.csv")).unwrap().records().count(), 10);
    let report: serde_json::Value = serde_json::from_reader(File::open(out.join("cleaning_report.json")).unwrap()).unwrap();
    assert_eq!(report["dropped_missing"], serde_json::json!(["sparse"]));
    assert_eq!(report["dropped_near_constant"], serde_json::json!(["flat"]));
    // Normal scores of the Phase I split are centred.
    for j in 0..2 {
        let mean = d1.matrix().column(j).mean();
        assert!(mean.abs() < 0.1, "column {j} mean {mean}");
    }
}
