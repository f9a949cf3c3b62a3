//! Python module `strgode_py`.

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use strgode::checkpoint::{Checkpoint, ModelSpec};
use strgode::data::{make_windows, split_dataset, SeriesWindow, SplitSpec, Splits};
use strgode::eval::{self, run_conventional, run_injection, run_irregular, run_peak, EvalReport, IrregularSpec, Persistence};
use strgode::graph::{self as g, RelationGraph, Selection};
use strgode::model::{Forecaster, ModelConfig};
use strgode::ode::Method;
use strgode::synth::{self, SynthConfig};
use strgode::tensor::Tensor;
use strgode::training::{fit, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(value_err("ragged matrix"));
    }
    Tensor::new(rows.len(), cols, rows.concat()).map_err(value_err)
}

/// Sequence of `N x 2` frames.
type Frames = Vec<Vec<Vec<f64>>>;

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn to_points(rows: Vec<(f64, f64)>) -> Vec<[f64; 2]> {
    rows.into_iter().map(|(a, b)| [a, b]).collect()
}

fn selection(top_k: Option<usize>, threshold: Option<f64>) -> PyResult<Selection> {
    match (top_k, threshold) {
        (Some(k), None) => Ok(Selection::TopK(k)),
        (None, Some(t)) => Ok(Selection::Threshold(t)),
        _ => Err(value_err("give exactly one of top_k or threshold")),
    }
}

/// Weighted directed relation graph over stations.
#[pyclass(name = "RelationGraph", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGraph(RelationGraph);

#[pymethods]
impl PyGraph {
    #[getter]
    fn kind(&self) -> String {
        self.0.kind().to_string()
    }

    #[getter]
    fn n_stations(&self) -> usize {
        self.0.n_stations()
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.0.weight(i, j)
    }

    fn weight_matrix(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.weight_matrix())
    }

    /// Row sums, `None` for rows without edges.
    fn row_sums(&self) -> Vec<Option<f64>> {
        self.0.row_sums()
    }

    fn __repr__(&self) -> String {
        format!("RelationGraph(kind={}, n_stations={}, edges={})", self.0.kind(), self.0.n_stations(), self.0.edges().len())
    }
}

#[pyfunction]
fn dtw_distance(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    g::dtw_distance(&to_points(a), &to_points(b)).map_err(value_err)
}

#[pyfunction]
fn build_physical(pairs: Vec<(usize, usize)>, n_stations: usize) -> PyResult<PyGraph> {
    g::build_physical(&pairs, n_stations).map(PyGraph).map_err(value_err)
}

/// Similarity graph from per-station `(inflow, outflow)` series.
#[pyfunction]
#[pyo3(signature = (series, top_k=None, threshold=None, band=None))]
fn build_similarity(series: Vec<Vec<(f64, f64)>>, top_k: Option<usize>, threshold: Option<f64>, band: Option<usize>) -> PyResult<PyGraph> {
    let points: Vec<Vec<[f64; 2]>> = series.into_iter().map(to_points).collect();
    g::build_similarity(&g::zscore_per_station(&points), selection(top_k, threshold)?, band).map(PyGraph).map_err(value_err)
}

/// Correlation graph from an OD matrix with `od[i][j]` trips from j to i.
#[pyfunction]
#[pyo3(signature = (od, top_k=None, threshold=None))]
fn build_correlation(od: Vec<Vec<f64>>, top_k: Option<usize>, threshold: Option<f64>) -> PyResult<PyGraph> {
    g::build_correlation(&to_tensor(&od)?, selection(top_k, threshold)?).map(PyGraph).map_err(value_err)
}

/// MAE, RMSE and zero-masked MAPE between two equally shaped matrices.
#[pyfunction]
fn metrics(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<HashMap<&'static str, Option<f64>>> {
    let m = eval::metrics(&to_tensor(&pred)?, &to_tensor(&target)?).map_err(value_err)?;
    Ok(HashMap::from([("mae", Some(m.mae)), ("rmse", Some(m.rmse)), ("mape", m.mape)]))
}

/// Ridership series with its three relation graphs and a day-aligned split.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    data: synth::SynthData,
    splits: Splits,
}

#[pymethods]
impl PyDataset {
    /// Synthetic network: diffusion over a random topology with daily peaks.
    #[staticmethod]
    #[pyo3(signature = (stations=10, days=40, seed=0, train_fraction=0.7, val_fraction=0.1))]
    fn synthetic(stations: usize, days: usize, seed: u64, train_fraction: f64, val_fraction: f64) -> PyResult<Self> {
        let cfg = SynthConfig { train_fraction, ..SynthConfig::new(stations, days, seed) };
        let data = synth::generate(&cfg).map_err(value_err)?;
        let splits = split_dataset(&data.series, SplitSpec::from_fractions(days, train_fraction, val_fraction)).map_err(value_err)?;
        Ok(Self { data, splits })
    }

    #[getter]
    fn n_stations(&self) -> usize {
        self.data.series.n_stations
    }

    #[getter]
    fn n_days(&self) -> usize {
        self.data.series.days.len()
    }

    #[getter]
    fn bins_per_day(&self) -> usize {
        self.data.series.grid.bins_per_day()
    }

    /// Day counts of the train, validation and test splits.
    #[getter]
    fn split_days(&self) -> (usize, usize, usize) {
        (self.splits.train.days.len(), self.splits.val.days.len(), self.splits.test.days.len())
    }

    /// `N x 2` counts of one bin.
    fn frame(&self, day: usize, bin: usize) -> PyResult<Vec<Vec<f64>>> {
        let f = self.data.series.days.get(day).and_then(|d| d.get(bin)).ok_or_else(|| value_err("bin out of range"))?;
        Ok(to_rows(f))
    }

    fn station_series(&self, station: usize) -> PyResult<Vec<(f64, f64)>> {
        if station >= self.n_stations() {
            return Err(value_err("station out of range"));
        }
        Ok(self.data.series.station_points(station).into_iter().map(|[a, b]| (a, b)).collect())
    }

    fn graphs(&self) -> Vec<PyGraph> {
        self.data.graphs.relations().into_iter().map(|r| PyGraph(r.clone())).collect()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.data.pairs.clone()
    }

    fn od_matrix(&self) -> Vec<Vec<f64>> {
        to_rows(&self.data.od)
    }

    fn ridership_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        strgode::data::write_ridership_csv(&self.data.series, &mut buf).map_err(runtime_err)?;
        String::from_utf8(buf).map_err(runtime_err)
    }

    /// Persistence-baseline conventional report on the test split.
    #[pyo3(signature = (n_in=4, n_out=4))]
    fn persistence_report(&self, n_in: usize, n_out: usize) -> PyResult<Vec<HashMap<String, ReportValue>>> {
        run_conventional(&Persistence, &self.splits.test, n_in, n_out).map(|r| report_rows(&r)).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n_stations={}, n_days={}, split_days={:?})", self.n_stations(), self.n_days(), self.split_days())
    }
}

#[derive(IntoPyObject)]
enum ReportValue {
    Text(String),
    Number(f64),
    Count(usize),
    Optional(Option<f64>),
}

fn report_rows(r: &EvalReport) -> Vec<HashMap<String, ReportValue>> {
    r.rows
        .iter()
        .map(|row| {
            HashMap::from([
                ("protocol".to_string(), ReportValue::Text(r.protocol.clone())),
                ("horizon".to_string(), ReportValue::Text(row.horizon.clone())),
                ("mae".to_string(), ReportValue::Number(row.metrics.mae)),
                ("rmse".to_string(), ReportValue::Number(row.metrics.rmse)),
                ("mape".to_string(), ReportValue::Optional(row.metrics.mape)),
                ("count".to_string(), ReportValue::Count(row.count)),
            ])
        })
        .collect()
}

/// A trained graph-ODE forecaster.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    spec: ModelSpec,
    forecaster: Forecaster,
    history: Vec<(usize, f64, f64, f64)>,
}

fn window(times: Vec<f64>, frames: Frames) -> PyResult<SeriesWindow> {
    let values = frames.iter().map(|f| to_tensor(f)).collect::<PyResult<Vec<_>>>()?;
    SeriesWindow::new(times, values).map_err(value_err)
}

#[pymethods]
impl PyModel {
    /// Fits a model on the dataset's train split, selecting on validation.
    #[staticmethod]
    #[pyo3(signature = (dataset, d=16, epochs=50, seed=0, lr=1e-3, batch_size=32, solver="rk4", n_intermediate=3, irregular_span=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        d: usize,
        epochs: usize,
        seed: u64,
        lr: f64,
        batch_size: usize,
        solver: &str,
        n_intermediate: usize,
        irregular_span: usize,
    ) -> PyResult<Self> {
        let method: Method = solver.parse().map_err(value_err)?;
        let cfg = TrainConfig {
            model: ModelConfig { d, method, n_intermediate, ..Default::default() },
            max_epochs: epochs,
            seed,
            lr,
            batch_size,
            irregular_span,
            ..Default::default()
        };
        let out = py.detach(|| fit(&dataset.splits, &dataset.data.graphs, &cfg)).map_err(runtime_err)?;
        let spec = ModelSpec { model: cfg.model, n_in: cfg.n_in, n_out: cfg.n_out, interval_minutes: dataset.data.series.grid.interval_minutes };
        let history = out.history.iter().map(|r| (r.epoch, r.train_mae, r.val_mae, r.lr)).collect();
        let forecaster = Forecaster::new(out.params, cfg.model, out.norm, &dataset.data.graphs).map_err(runtime_err)?;
        Ok(Self { spec, forecaster, history })
    }

    /// Loads a checkpoint written by `save` or the command-line tool.
    #[staticmethod]
    fn load(path: &str, dataset: &PyDataset) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(runtime_err)?;
        let ckpt = Checkpoint::read_from(&bytes[..]).map_err(value_err)?;
        let forecaster = Forecaster::new(ckpt.params, ckpt.spec.model, ckpt.norm, &dataset.data.graphs).map_err(value_err)?;
        Ok(Self { spec: ckpt.spec, forecaster, history: Vec::new() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = &self.forecaster;
        let ckpt = Checkpoint { spec: self.spec, params: f.params.clone(), norm: f.norm };
        std::fs::write(path, ckpt.to_bytes()).map_err(runtime_err)
    }

    /// Hash of the model configuration stored with checkpoints and reports.
    #[getter]
    fn digest(&self) -> String {
        self.spec.digest()
    }

    /// `(epoch, train_mae, val_mae, lr)` per epoch; empty for loaded models.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.history.clone()
    }

    /// Forecasts `N x 2` frames at `horizon_times` (bin units, after the
    /// last observation) from observations at `times`.
    fn forecast(&self, py: Python<'_>, times: Vec<f64>, frames: Frames, horizon_times: Vec<f64>) -> PyResult<Frames> {
        let obs = window(times, frames)?;
        let preds = py.detach(|| self.forecaster.forecast(&obs, &horizon_times)).map_err(value_err)?;
        Ok(preds.iter().map(to_rows).collect())
    }

    /// `(forecast, target)` frames of test window `index`.
    fn forecast_window(&self, dataset: &PyDataset, index: usize) -> PyResult<(Frames, Frames)> {
        let pairs = make_windows(&dataset.splits.test, self.spec.n_in, self.spec.n_out).map_err(value_err)?;
        let w = pairs.get(index).ok_or_else(|| value_err("window index out of range"))?;
        let preds = self.forecaster.forecast(&w.observed, w.target.times()).map_err(runtime_err)?;
        Ok((preds.iter().map(to_rows).collect(), w.target.values().iter().map(to_rows).collect()))
    }

    /// Per-horizon test metrics for `conventional`, `peak` or `irregular`.
    #[pyo3(signature = (dataset, protocol="conventional", observed=4, seeds=vec![0, 1, 2, 3, 4], span=16))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, protocol: &str, observed: usize, seeds: Vec<u64>, span: usize) -> PyResult<Vec<HashMap<String, ReportValue>>> {
        let (test, n_in, n_out) = (&dataset.splits.test, self.spec.n_in, self.spec.n_out);
        let report = py.detach(|| match protocol {
            "conventional" => Ok(run_conventional(&self.forecaster, test, n_in, n_out)),
            "peak" => Ok(run_peak(&self.forecaster, test, n_in, n_out)),
            "irregular" => {
                let spec = IrregularSpec { n_observed: observed, m_target: n_out, span, interleaved: false, seeds };
                Ok(run_irregular(&self.forecaster, test, &spec))
            }
            other => Err(value_err(format!("unknown protocol `{other}`"))),
        })?;
        report.map(|r| report_rows(&r)).map_err(runtime_err)
    }

    /// Per-horizon test MAE `(injected, rollout)`: decoding `horizons` bins
    /// with and without ground truth fed back at the first `inject`.
    #[pyo3(signature = (dataset, horizons=8, inject=4))]
    fn injection_study(&self, dataset: &PyDataset, horizons: usize, inject: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let s = run_injection(&self.forecaster, &dataset.splits.test, self.spec.n_in, horizons, inject).map_err(runtime_err)?;
        Ok((s.injected, s.rollout))
    }
}

/// Runs the command-line tool with `args` and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| strgode::cli::main_with(std::iter::once("strgode".to_string()).chain(args)))
}

#[pymodule]
fn strgode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dtw_distance, m)?)?;
    m.add_function(wrap_pyfunction!(build_physical, m)?)?;
    m.add_function(wrap_pyfunction!(build_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(build_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
