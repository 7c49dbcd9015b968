//! `diagchart` command-line interface.
//!
//! Exit codes: 0 ran cleanly, 2 ran and at least one point signalled, 1 error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diagchart::chart::{self, CfOrder, ChartConfig, ParamSource, ProcessParameters};
use diagchart::experiment::{self, ExperimentConfig};
use diagchart::io::{self as dio, ChartRow, CleaningThresholds, ParamsFile, RankConvention, RawTable, TransformModel};
use diagchart::robust::{self, RobustConfig};
use diagchart::selfstart::{PhaseOne, SelfStartState, StateSnapshot};
use diagchart::stats::{self, TraceEstimates};
use diagchart::{parallel, Error, Result};

#[derive(Parser)]
#[command(name = "diagchart", version, about = "Diagonal-distance control charts for high-dimensional mean monitoring")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for randomized steps (robust estimation, simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path; stdout when omitted (a directory for `prepare`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ChartArgs {
    /// False-alarm rate per point.
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
    /// Cornish-Fisher order: 0 (none), 1 or 2.
    #[arg(long, default_value_t = 1)]
    cf_order: u8,
    /// Do not inflate the scale of U by the finite-sample factor.
    #[arg(long)]
    no_correction: bool,
}

impl ChartArgs {
    fn config(&self) -> Result<ChartConfig> {
        let order = CfOrder::try_from(self.cf_order).map_err(|m| Error::Config { field: "cf-order".into(), message: m })?;
        Ok(ChartConfig::new(self.alpha, order)?.with_correction(!self.no_correction))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Weibull,
    Hazen,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate in-control parameters from Phase I data.
    Phase1 {
        #[arg(long)]
        input: PathBuf,
        /// Use the reweighted minimum diagonal product estimator.
        #[arg(long)]
        robust: bool,
        #[command(flatten)]
        chart: ChartArgs,
    },
    /// Chart Phase II observations against a parameter file.
    Chart {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// One label per input row (single-column CSV with header), carried into the output.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Self-starting monitoring: chart each point, absorb it when in control.
    Selfstart {
        #[arg(long, required_unless_present = "state_in")]
        phase1: Option<PathBuf>,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        robust: bool,
        #[command(flatten)]
        chart: ChartArgs,
        #[arg(long, default_value_t = 1)]
        refresh_every: usize,
        /// Stop at the first signal instead of excluding it and continuing.
        #[arg(long)]
        stop_at_signal: bool,
        /// Resume from a saved state instead of estimating from --phase1.
        #[arg(long, conflicts_with = "phase1")]
        state_in: Option<PathBuf>,
        /// Write the final state snapshot here.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Run a declarative ARL experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Empirical CDFs of a chart statistic for two labelled groups.
    Ecdf {
        #[arg(long)]
        input: PathBuf,
        /// Statistic column: z, u or m2.
        #[arg(long, default_value = "z")]
        statistic: String,
    },
    /// Clean raw data, split it by time and apply the normal-score transform.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// Column holding labels; excluded from cleaning and written alongside Phase II.
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        missing_threshold: f64,
        #[arg(long, default_value_t = 1e-6)]
        variance_threshold: f64,
        /// Fraction of rows (in file order) used as Phase I.
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        /// External reference rows for the transform instead of the Phase I split.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Convention::Weibull)]
        rank_convention: Convention,
    },
}

enum Outcome {
    Clean,
    Signals,
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| Error::Config { field: "seed".into(), message: format!("`{command}` is randomized and needs --seed") })
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<String>> {
    let t = csv::Reader::from_path(path)?
        .records()
        .map(|r| Ok(r?.get(0).unwrap_or_default().to_owned()))
        .collect::<Result<Vec<_>>>()?;
    if t.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} observations", t.len())));
    }
    Ok(t)
}

fn phase1(common: &Common, input: &Path, robust_mode: bool, chart: &ChartArgs) -> Result<Outcome> {
    let config = chart.config()?;
    let (headers, data) = dio::read_matrix_csv(input)?;
    let file = if robust_mode {
        let seed = require_seed(common.seed, "phase1 --robust")?;
        let est = robust::rmdp_estimate(&data, &RobustConfig::with_seed(seed))?;
        let mut f = ParamsFile::new(&est.params()?, &config, headers);
        f.flagged_rows = est.outlier_flags.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        f
    } else {
        let cov = stats::sample_covariance(&data)?;
        let r = stats::correlation(&cov)?;
        let traces = TraceEstimates::estimate(&r, data.nrows())?;
        let params = ProcessParameters::new(stats::sample_mean(&data), cov.d_s, traces, ParamSource::Classical)?;
        ParamsFile::new(&params, &config, headers)
    };
    let mut w = open_out(&common.out)?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    w.flush()?;
    Ok(Outcome::Clean)
}

fn chart_cmd(common: &Common, params: &Path, input: &Path, labels: Option<&Path>) -> Result<Outcome> {
    let file = ParamsFile::read(params)?;
    let (p, cfg) = (file.params()?, file.config()?);
    let (_, data) = dio::read_matrix_csv(input)?;
    let labels = labels.map(|l| read_labels(l, data.nrows())).transpose()?;
    let mut rows = Vec::with_capacity(data.nrows());
    for (i, x) in data.rows().enumerate() {
        let mut row = ChartRow::from(chart::evaluate(i + 1, &x, &p, &cfg)?);
        row.label = labels.as_ref().map(|l| l[i].clone());
        rows.push(row);
    }
    dio::write_chart_csv(open_out(&common.out)?, &rows)?;
    Ok(if rows.iter().any(|r| r.signal) { Outcome::Signals } else { Outcome::Clean })
}

#[allow(clippy::too_many_arguments)]
fn selfstart_cmd(
    common: &Common,
    phase1: Option<&Path>,
    stream: &Path,
    robust_mode: bool,
    chart: &ChartArgs,
    refresh_every: usize,
    stop_at_signal: bool,
    state_in: Option<&Path>,
    state_out: Option<&Path>,
) -> Result<Outcome> {
    let mut state = match state_in {
        Some(path) => {
            let snap: StateSnapshot = serde_json::from_reader(File::open(path)?)?;
            SelfStartState::from_snapshot(snap)?
        }
        None => {
            let phase1 = phase1.ok_or_else(|| Error::Config { field: "phase1".into(), message: "required without --state-in".into() })?;
            let (_, data) = dio::read_matrix_csv(phase1)?;
            let est = if robust_mode {
                PhaseOne::Robust(RobustConfig::with_seed(require_seed(common.seed, "selfstart --robust")?))
            } else {
                PhaseOne::Classical
            };
            SelfStartState::init(&data, &est, chart.config()?)?.with_refresh_every(refresh_every)
        }
    };
    let (_, data) = dio::read_matrix_csv(stream)?;
    let mut rows = Vec::new();
    let mut signalled = false;
    for x in data.rows() {
        if state.is_frozen() {
            state.resume();
        }
        let out = state.monitor_step(&x)?;
        rows.push(ChartRow::from(out.point));
        if out.point.signal {
            signalled = true;
            if stop_at_signal {
                break;
            }
        }
    }
    dio::write_chart_csv(open_out(&common.out)?, &rows)?;
    if let Some(path) = state_out {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(f, &state.snapshot())?;
    }
    Ok(if signalled { Outcome::Signals } else { Outcome::Clean })
}

fn simulate(common: &Common, config: &Path) -> Result<Outcome> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    let (rows, manifest) = experiment::run_experiment(&cfg)?;
    experiment::write_rows_csv(open_out(&cfg.output)?, &rows)?;
    let manifest_path = match &cfg.output {
        Some(p) => p.with_extension("manifest.json"),
        None => PathBuf::from(format!("{}.manifest.json", cfg.name)),
    };
    let f = File::create(manifest_path)?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(Outcome::Clean)
}

fn ecdf(common: &Common, input: &Path, statistic: &str) -> Result<Outcome> {
    let rows = dio::read_chart_csv(File::open(input)?)?;
    let pick = |r: &ChartRow| match statistic {
        "z" => Ok(r.z),
        "u" => Ok(r.u),
        "m2" => Ok(r.m2),
        other => Err(Error::Config { field: "statistic".into(), message: format!("unknown statistic `{other}`") }),
    };
    let mut groups: Vec<String> = rows.iter().filter_map(|r| r.label.clone()).collect();
    groups.sort();
    groups.dedup();
    if groups.len() != 2 {
        return Err(Error::Config {
            field: "label".into(),
            message: format!("need exactly two label values, found {}", groups.len()),
        });
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in &rows {
        match r.label.as_deref() {
            Some(l) if l == groups[0] => a.push(pick(r)?),
            Some(_) => b.push(pick(r)?),
            None => {}
        }
    }
    eprintln!("group A = {:?} ({} points), group B = {:?} ({} points)", groups[0], a.len(), groups[1], b.len());
    dio::write_ecdf_csv(open_out(&common.out)?, &dio::ecdf_comparison(&a, &b)?)?;
    Ok(Outcome::Clean)
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    common: &Common,
    input: &Path,
    label_column: Option<&str>,
    missing: f64,
    variance: f64,
    split: f64,
    reference: Option<&Path>,
    convention: Convention,
) -> Result<Outcome> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config { field: "out".into(), message: "`prepare` needs --out <directory>".into() })?;
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config { field: "split".into(), message: "must be in (0, 1)".into() });
    }
    let mut table = RawTable::from_path(input)?;
    let labels = match label_column {
        Some(name) => {
            let j = table.headers.iter().position(|h| h == name).ok_or_else(|| Error::Config {
                field: "label-column".into(),
                message: format!("no column named `{name}`"),
            })?;
            table.headers.remove(j);
            Some(table.rows.iter_mut().map(|r| r.remove(j)).collect::<Vec<_>>())
        }
        None => None,
    };
    let (headers, data, report) = dio::clean(&table, CleaningThresholds { missing, variance })?;
    let m1 = ((data.nrows() as f64) * split).round() as usize;
    if m1 < 2 || m1 >= data.nrows() {
        return Err(Error::Config { field: "split".into(), message: "both phases need rows".into() });
    }
    let p1 = data.select_rows(&(0..m1).collect::<Vec<_>>())?;
    let p2 = data.select_rows(&(m1..data.nrows()).collect::<Vec<_>>())?;
    let conv = match convention {
        Convention::Weibull => RankConvention::Weibull,
        Convention::Hazen => RankConvention::Hazen,
    };
    let model = match reference {
        Some(path) => {
            let (rh, rdata) = dio::read_matrix_csv(path)?;
            let idx = headers
                .iter()
                .map(|h| {
                    rh.iter().position(|x| x == h).ok_or_else(|| Error::Dimension(format!("reference lacks column `{h}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let cols = stats::DataMatrix::new(rdata.matrix().select_columns(&idx))?;
            TransformModel::fit(&cols, conv)
        }
        None => TransformModel::fit(&p1, conv),
    };
    fs::create_dir_all(&out)?;
    dio::write_matrix_csv(File::create(out.join("phase1.csv"))?, &headers, &model.apply(&p1)?)?;
    dio::write_matrix_csv(File::create(out.join("phase2.csv"))?, &headers, &model.apply(&p2)?)?;
    if let Some(l) = labels {
        let mut w = csv::Writer::from_path(out.join("phase2_labels.csv"))?;
        w.write_record([label_column.unwrap_or("label")])?;
        for v in &l[m1..] {
            w.write_record([v.map(|x| x.to_string()).unwrap_or_default()])?;
        }
        w.flush()?;
    }
    serde_json::to_writer_pretty(File::create(out.join("cleaning_report.json"))?, &report)?;
    eprintln!(
        "kept {} of {} columns ({} sparse, {} near-constant); phase I {} rows, phase II {} rows",
        report.cols_out,
        report.cols_in,
        report.dropped_missing.len(),
        report.dropped_near_constant.len(),
        p1.nrows(),
        p2.nrows()
    );
    Ok(Outcome::Clean)
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.common.threads {
        parallel::set_threads(n).map_err(|m| Error::Config { field: "threads".into(), message: m })?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::Phase1 { input, robust, chart } => phase1(c, input, *robust, chart),
        Command::Chart { params, input, labels } => chart_cmd(c, params, input, labels.as_deref()),
        Command::Selfstart { phase1, stream, robust, chart, refresh_every, stop_at_signal, state_in, state_out } => {
            selfstart_cmd(
                c,
                phase1.as_deref(),
                stream,
                *robust,
                chart,
                *refresh_every,
                *stop_at_signal,
                state_in.as_deref(),
                state_out.as_deref(),
            )
        }
        Command::Simulate { config } => simulate(c, config),
        Command::Ecdf { input, statistic } => ecdf(c, input, statistic),
        Command::Prepare { input, label_column, missing_threshold, variance_threshold, split, reference, rank_convention } => {
            prepare(
                c,
                input,
                label_column.as_deref(),
                *missing_threshold,
                *variance_threshold,
                *split,
                reference.as_deref(),
                *rank_convention,
            )
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Signals) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
