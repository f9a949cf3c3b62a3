//! Command-line front end: `synth`, `build-graphs`, `train`, `evaluate` and
//! `predict`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime};
use clap::{Parser, Subcommand};

use crate::checkpoint::{Checkpoint, ModelSpec};
use crate::config::{parse_protocols, parse_seeds, Protocol, RunConfig};
use crate::data::{self, build_od_matrix, read_edges_csv, read_observation_csv, read_ridership_csv, read_transactions_csv, split_dataset, Series, Splits};
use crate::eval::{run_conventional, run_irregular, run_peak, EvalReport, HistoricalAverage, Persistence, Predictor};
use crate::graph::{build_correlation, build_physical, build_similarity, zscore_per_station, RelationGraph, RelationKind, TriGraph};
use crate::model::Forecaster;
use crate::synth::{generate, SynthConfig};
use crate::tensor::Tensor;
use crate::training::{fit_with, render_log, TrainError, TrainOutcome};

pub const THREADS_ENV: &str = "STRGODE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "strgode", version, about = "Graph-ODE ridership forecasting")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default 1, or $STRGODE_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle.
    Synth {
        #[arg(long, default_value_t = 10)]
        stations: usize,
        #[arg(long, default_value_t = 40)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the physical, similarity and correlation graphs.
    BuildGraphs {
        #[arg(long, value_name = "CSV")]
        ridership: Option<PathBuf>,
        /// Trip records; only trips entering in the training days count.
        #[arg(long, value_name = "CSV")]
        transactions: Option<PathBuf>,
        /// Origin-destination count matrix, instead of transactions.
        #[arg(long, value_name = "CSV")]
        od: Option<PathBuf>,
        /// Undirected `i,j` track connections.
        #[arg(long, value_name = "CSV")]
        edges: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint, an epoch log and the config used.
    Train {
        /// Dataset directory holding ridership.csv and the graph files.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        ridership: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        graphs: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint (or a baseline) on the test split.
    Evaluate {
        /// Dataset directory holding ridership.csv and the graph files.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        ridership: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        graphs: Option<PathBuf>,
        /// Model checkpoint; its run.conf is the default configuration.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// conventional, peak, irregular, a comma list, or all.
        #[arg(long)]
        protocol: Option<String>,
        /// Observations per irregular sample.
        #[arg(long)]
        observed: Option<usize>,
        /// Comma-separated irregular sampling seeds.
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// model, persistence or historical.
        #[arg(long, default_value = "model")]
        baseline: String,
        /// Report directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Forecast from an observation CSV.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        graphs: PathBuf,
        #[arg(long, value_name = "CSV")]
        observations: PathBuf,
        /// Bins to forecast (default n_out).
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

type Result<T> = std::result::Result<T, CliError>;

fn at(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError(format!("{}: {e}", path.display()))
}

fn err(msg: impl std::fmt::Display) -> CliError {
    CliError(msg.to_string())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| at(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| at(path, e))
}

pub fn graph_path(dir: &Path, kind: RelationKind) -> PathBuf {
    dir.join(format!("{kind}.graph"))
}

pub fn write_graphs(dir: &Path, graphs: &TriGraph) -> Result<()> {
    for g in graphs.relations() {
        let path = graph_path(dir, g.kind());
        let mut w = create(&path)?;
        g.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| at(&path, e))?;
    }
    Ok(())
}

pub fn read_graphs(dir: &Path) -> Result<TriGraph> {
    let read = |kind| {
        let path = graph_path(dir, kind);
        let g = RelationGraph::read_from(open(&path)?).map_err(|e| at(&path, e))?;
        if g.kind() != kind {
            return Err(at(&path, format!("holds a {} graph", g.kind())));
        }
        Ok(g)
    };
    TriGraph::new(read(RelationKind::Physical)?, read(RelationKind::Similarity)?, read(RelationKind::Correlation)?).map_err(|e| at(dir, e))
}

/// Square matrix as comma-separated rows.
pub fn write_matrix_csv<W: Write>(m: &Tensor, mut w: W) -> std::io::Result<()> {
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| at(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| at(path, format!("line {}: {e}", k + 1)))?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(at(path, "expected a square matrix"));
    }
    Ok(Tensor::new(n, n, rows.concat()).expect("square"))
}

/// Base configuration: `--config` if given, else the `run.conf` written next
/// to an evaluated checkpoint, else the defaults.
fn base_config_path(cli: &Cli) -> Option<PathBuf> {
    if cli.config.is_some() {
        return cli.config.clone();
    }
    match &cli.command {
        Command::Evaluate { checkpoint: Some(c), .. } => Some(c.with_file_name("run.conf")).filter(|p| p.is_file()),
        _ => None,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &base_config_path(cli) {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| at(p, e))?;
            RunConfig::parse(&text).map_err(|e| at(p, e))?
        }
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.set("threads", &v).map_err(|e| err(format!("{THREADS_ENV}: {e}")))?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv).map_err(|e| err(format!("--set {kv}: {e}")))?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", &t.to_string()).map_err(|e| err(format!("--threads: {e}")))?;
    }
    Ok(cfg)
}

fn required(v: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    v.clone().ok_or_else(|| err(format!("missing {what} (flag or config key)")))
}

fn load_series(path: &Path, cfg: &RunConfig, n: Option<usize>) -> Result<Series> {
    read_ridership_csv(open(path)?, n, cfg.interval_minutes, (cfg.service_start, cfg.service_end)).map_err(|e| at(path, e))
}

fn load_splits(cfg: &RunConfig, n: usize) -> Result<Splits> {
    let path = required(&cfg.ridership, "ridership CSV")?;
    let series = load_series(&path, cfg, Some(n))?;
    split_dataset(&series, cfg.split_spec(series.days.len())).map_err(|e| at(&path, e))
}

fn apply_data_dir(cfg: &mut RunConfig, data: &Option<PathBuf>, ridership: &Option<PathBuf>, graphs: &Option<PathBuf>) {
    if let Some(d) = data {
        cfg.ridership = Some(d.join("ridership.csv"));
        cfg.graph_dir = Some(d.clone());
    }
    if ridership.is_some() {
        cfg.ridership.clone_from(ridership);
    }
    if graphs.is_some() {
        cfg.graph_dir.clone_from(graphs);
    }
}

fn synth(stations: usize, days: usize, seed: u64, out: &Path, cfg: &RunConfig) -> Result<String> {
    let sc = SynthConfig { interval_minutes: cfg.interval_minutes, train_fraction: cfg.train_fraction, ..SynthConfig::new(stations, days, seed) };
    let d = generate(&sc).map_err(err)?;
    let mut buf = Vec::new();
    data::write_ridership_csv(&d.series, &mut buf).map_err(err)?;
    write_file(&out.join("ridership.csv"), &buf)?;
    buf.clear();
    data::write_edges_csv(&d.pairs, &mut buf).map_err(err)?;
    write_file(&out.join("edges.csv"), &buf)?;
    buf.clear();
    write_matrix_csv(&d.od, &mut buf).map_err(err)?;
    write_file(&out.join("od.csv"), &buf)?;
    write_graphs(out, &d.graphs)?;
    Ok(format!("wrote {} stations x {} days to {}", stations, days, out.display()))
}

fn build_graphs(cfg: &RunConfig) -> Result<String> {
    let rpath = required(&cfg.ridership, "ridership CSV")?;
    let epath = required(&cfg.edges, "edge list CSV")?;
    let out = required(&cfg.out_dir, "output directory")?;
    let pairs = read_edges_csv(open(&epath)?).map_err(|e| at(&epath, e))?;
    let max_edge = pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
    let series = load_series(&rpath, cfg, None)?;
    let n = series.n_stations.max(max_edge);
    let series = if n == series.n_stations { series } else { load_series(&rpath, cfg, Some(n))? };
    let split = cfg.split_spec(series.days.len());
    if split.train_days == 0 || split.train_days > series.days.len() {
        return Err(at(&rpath, format!("training split of {} days is not usable", split.train_days)));
    }
    let train = series.sub_days(0, split.train_days);
    let od = match (&cfg.od, &cfg.transactions) {
        (Some(p), _) => {
            let od = read_matrix_csv(p)?;
            if od.rows() != n {
                return Err(at(p, format!("matrix is {0}x{0}, expected {n}x{n}", od.rows())));
            }
            od
        }
        (None, Some(p)) => {
            let records = read_transactions_csv(open(p)?).map_err(|e| at(p, e))?;
            let from: NaiveDateTime = train.grid.first_day.and_hms_opt(0, 0, 0).expect("midnight");
            let to = from + Duration::days(split.train_days as i64);
            build_od_matrix(&records, n, from, to).map_err(|e| at(p, e))?
        }
        (None, None) => return Err(err("missing transactions or od matrix (flag or config key)")),
    };
    let points: Vec<Vec<[f64; 2]>> = (0..n).map(|i| train.station_points(i)).collect();
    let graphs = TriGraph::new(
        build_physical(&pairs, n).map_err(|e| at(&epath, e))?,
        build_similarity(&zscore_per_station(&points), cfg.similarity_selection, cfg.dtw_band).map_err(|e| err(format!("similarity graph: {e}")))?,
        build_correlation(&od, cfg.correlation_selection).map_err(|e| err(format!("correlation graph: {e}")))?,
    )
    .map_err(err)?;
    write_graphs(&out, &graphs)?;
    Ok(format!("wrote graphs for {n} stations to {}", out.display()))
}

fn train(cfg: &RunConfig) -> Result<String> {
    let gdir = required(&cfg.graph_dir, "graph directory")?;
    let out = required(&cfg.out_dir, "output directory")?;
    let graphs = read_graphs(&gdir)?;
    let splits = load_splits(cfg, graphs.n_stations())?;
    let spec = cfg.model_spec();
    let digest = spec.digest();
    let save = |o: &TrainOutcome| -> Result<()> {
        let ckpt = Checkpoint { spec, params: o.params.clone(), norm: o.norm };
        write_file(&out.join("model.ckpt"), &ckpt.to_bytes())?;
        write_file(&out.join("train.log"), format!("# digest={digest}\n{}", render_log(&o.history)).as_bytes())?;
        write_file(&out.join("run.conf"), cfg.render().as_bytes())
    };
    match fit_with(&splits, &graphs, &cfg.train, |_| {}) {
        Ok(o) => {
            save(&o)?;
            Ok(format!(
                "trained {} epochs; best validation MAE {:.6} at epoch {}; wrote {}",
                o.history.len(),
                o.best_val_mae,
                o.best_epoch,
                out.join("model.ckpt").display()
            ))
        }
        Err(TrainError::Diverged { epoch, best }) => {
            save(&best)?;
            Err(err(format!("training diverged in epoch {epoch}; last finite checkpoint written to {}", out.display())))
        }
        Err(e) => Err(err(e)),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read_from(open(path)?).map_err(|e| at(path, e))
}

fn evaluate(cfg: &RunConfig, checkpoint: &Option<PathBuf>, baseline: &str) -> Result<String> {
    let gdir = required(&cfg.graph_dir, "graph directory")?;
    let out = required(&cfg.out_dir, "output directory")?;
    let graphs = read_graphs(&gdir)?;
    let splits = load_splits(cfg, graphs.n_stations())?;
    let spec = cfg.model_spec();
    let (n_in, n_out) = (spec.n_in, spec.n_out);
    let model: Box<dyn Predictor> = match baseline {
        "model" => {
            let path = checkpoint.as_ref().ok_or_else(|| err("missing --checkpoint"))?;
            let ckpt = load_checkpoint(path)?;
            ckpt.ensure_spec(&spec).map_err(|e| at(path, e))?;
            Box::new(Forecaster::new(ckpt.params, ckpt.spec.model, ckpt.norm, &graphs).map_err(|e| at(path, e))?)
        }
        "persistence" => Box::new(Persistence),
        "historical" => Box::new(HistoricalAverage::fit(&splits.train).map_err(err)?),
        other => return Err(err(format!("unknown baseline `{other}` (expected model, persistence or historical)"))),
    };
    let mut summary = String::new();
    for &p in &cfg.protocols {
        let report = match p {
            Protocol::Conventional => run_conventional(model.as_ref(), &splits.test, n_in, n_out),
            Protocol::Peak => run_peak(model.as_ref(), &splits.test, n_in, n_out),
            Protocol::Irregular => run_irregular(model.as_ref(), &splits.test, &cfg.irregular_spec()),
        }
        .map_err(err)?;
        let report = report.with_meta("digest", spec.digest()).with_meta("predictor", baseline).with_meta("seed", cfg.train.seed);
        write_reports(&out, &report)?;
        summary.push_str(&report.to_text());
    }
    Ok(summary.trim_end().to_string())
}

pub fn write_reports(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join(format!("report_{}.txt", report.protocol)), report.to_text().as_bytes())?;
    write_file(&dir.join(format!("report_{}.csv", report.protocol)), report.to_csv().as_bytes())
}

fn predict(checkpoint: &Path, gdir: &Path, obs: &Path, horizon: Option<usize>, out: &Path) -> Result<String> {
    let ckpt = load_checkpoint(checkpoint)?;
    let graphs = read_graphs(gdir)?;
    let spec: ModelSpec = ckpt.spec;
    let (origin, window) = read_observation_csv(open(obs)?, graphs.n_stations(), spec.interval_minutes).map_err(|e| at(obs, e))?;
    let last = *window.times().last().expect("non-empty window");
    let h = horizon.unwrap_or(spec.n_out);
    let times: Vec<f64> = (1..=h).map(|k| last + k as f64).collect();
    let digest = ckpt.digest();
    let f = Forecaster::new(ckpt.params, spec.model, ckpt.norm, &graphs).map_err(|e| at(checkpoint, e))?;
    let preds = f.forecast(&window, &times).map_err(|e| at(obs, e))?;
    let mut w = create(out)?;
    let mut body = format!("# digest={digest}\ntime,station_id,inflow,outflow\n");
    for (t, p) in times.iter().zip(&preds) {
        let ts = origin + Duration::seconds((t * spec.interval_minutes as f64 * 60.0).round() as i64);
        for s in 0..p.rows() {
            body.push_str(&format!("{},{s},{:.6},{:.6}\n", ts.format(data::DATETIME_FORMAT), p.get(s, 0), p.get(s, 1)));
        }
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| at(out, e))?;
    Ok(format!("wrote {h} forecast bins to {}", out.display()))
}

fn dispatch(cli: &Cli, mut cfg: RunConfig) -> Result<String> {
    match &cli.command {
        Command::Synth { stations, days, seed, out } => synth(*stations, *days, *seed, out, &cfg),
        Command::BuildGraphs { ridership, transactions, od, edges, out } => {
            for (slot, v) in [(&mut cfg.ridership, ridership), (&mut cfg.transactions, transactions), (&mut cfg.od, od), (&mut cfg.edges, edges), (&mut cfg.out_dir, out)] {
                if v.is_some() {
                    slot.clone_from(v);
                }
            }
            build_graphs(&cfg)
        }
        Command::Train { data, ridership, graphs, out, seed } => {
            apply_data_dir(&mut cfg, data, ridership, graphs);
            if out.is_some() {
                cfg.out_dir.clone_from(out);
            }
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
            train(&cfg)
        }
        Command::Evaluate { data, ridership, graphs, checkpoint, protocol, observed, seeds, baseline, out } => {
            apply_data_dir(&mut cfg, data, ridership, graphs);
            if out.is_some() {
                cfg.out_dir.clone_from(out);
            }
            if let Some(p) = protocol {
                cfg.protocols = parse_protocols(p).map_err(|e| err(format!("--protocol: {e}")))?;
            }
            if let Some(o) = observed {
                cfg.set("observed", &o.to_string()).map_err(|e| err(format!("--observed: {e}")))?;
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(s).map_err(|e| err(format!("--seeds: {e}")))?;
            }
            evaluate(&cfg, checkpoint, baseline)
        }
        Command::Predict { checkpoint, graphs, observations, horizon, out } => predict(checkpoint, graphs, observations, *horizon, out),
    }
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code. Failures print a one-line diagnostic to stderr.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    let result = load_config(&cli).and_then(|cfg| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build().map_err(err)?;
        pool.install(|| dispatch(&cli, cfg))
    });
    match result {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.0.lines().next().unwrap_or_default());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_fails() {
        assert_eq!(main_with(["strgode", "train", "--bogus"]), 2);
        assert_eq!(main_with(["strgode"]), 2);
        assert_eq!(main_with(["strgode", "--help"]), 0);
    }

    #[test]
    fn missing_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with(["strgode", "train", "--data", dir.path().join("nope").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_rows(&[[0.0, 3.0], [7.5, 0.0]]);
        let p = dir.path().join("od.csv");
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        fs::write(&p, buf).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&p).is_err());
    }
}
