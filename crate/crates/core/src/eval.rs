//! Metrics, baselines and the conventional, peak and irregular protocols.

use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{day_windows, irregular_sample, make_windows, minutes_of_day, DataError, Series, SeriesWindow};
use crate::model::{Forecaster, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no {0} windows to evaluate")]
    Empty(&'static str),
    #[error("predictor returned {got} frames for {want} targets")]
    PredictionCount { got: usize, want: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reports come from different configurations ({0} vs {1})")]
    DigestMismatch(String, String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// MAE, RMSE and zero-masked MAPE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every target is zero.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    n_pct: usize,
}

impl Accumulator {
    pub fn add(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if target != 0.0 {
            self.pct += (e / target).abs();
            self.n_pct += 1;
        }
    }

    pub fn add_frames(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if !pred.same_shape(target) {
            return Err(EvalError::Shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
        }
        for (p, t) in pred.data().iter().zip(target.data()) {
            self.add(*p, *t);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Option<Metrics> {
        (self.n > 0).then(|| Metrics {
            mae: self.abs / self.n as f64,
            rmse: (self.sq / self.n as f64).sqrt(),
            mape: (self.n_pct > 0).then(|| self.pct / self.n_pct as f64),
        })
    }
}

pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    let mut acc = Accumulator::default();
    acc.add_frames(pred, target)?;
    acc.finish().ok_or_else(|| EvalError::Shape("empty tensors".into()))
}

/// Peak periods as half-open `[start, end)` minute-of-day ranges.
pub const PEAK_PERIODS: [(u32, u32); 2] = [(7 * 60 + 30, 9 * 60 + 30), (17 * 60 + 30, 19 * 60 + 30)];

pub fn is_peak(t: NaiveTime) -> bool {
    let m = minutes_of_day(t);
    PEAK_PERIODS.iter().any(|&(a, b)| m >= a && m < b)
}

/// What a predictor sees for one window.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub observed: &'a SeriesWindow,
    pub times: &'a [f64],
    /// Observations falling between targets (interleaved irregular sampling).
    pub late: Option<&'a SeriesWindow>,
    pub date: NaiveDate,
}

pub trait Predictor: Sync {
    /// One `N x 2` frame per entry of `q.times`, in original units.
    fn predict(&self, q: &Query<'_>) -> Result<Vec<Tensor>>;
}

/// Repeats the latest observation known before each target.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn predict(&self, q: &Query<'_>) -> Result<Vec<Tensor>> {
        let last = q.observed.values().last().ok_or(EvalError::Empty("observation"))?;
        Ok(q
            .times
            .iter()
            .map(|&t| {
                q.late
                    .and_then(|late| late.times().iter().zip(late.values()).rev().find(|(lt, _)| **lt < t).map(|(_, v)| v))
                    .unwrap_or(last)
                    .clone()
            })
            .collect())
    }
}

/// Training mean per station and time-of-day bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    by_bin: Vec<Tensor>,
}

impl HistoricalAverage {
    pub fn fit(train: &Series) -> Result<Self> {
        if train.days.is_empty() {
            return Err(EvalError::Empty("training"));
        }
        let bins = train.grid.bins_per_day();
        let mut by_bin = vec![Tensor::zeros(train.n_stations, 2); bins];
        for day in &train.days {
            for (acc, f) in by_bin.iter_mut().zip(day) {
                acc.add_assign(f);
            }
        }
        let k = 1.0 / train.days.len() as f64;
        Ok(Self { by_bin: by_bin.into_iter().map(|t| t.scale(k)).collect() })
    }

    pub fn at(&self, bin: usize) -> &Tensor {
        &self.by_bin[bin.min(self.by_bin.len() - 1)]
    }
}

impl Predictor for HistoricalAverage {
    fn predict(&self, q: &Query<'_>) -> Result<Vec<Tensor>> {
        Ok(q.times.iter().map(|&t| self.at(t.round().max(0.0) as usize).clone()).collect())
    }
}

impl Predictor for Forecaster {
    fn predict(&self, q: &Query<'_>) -> Result<Vec<Tensor>> {
        let Some(late) = q.late.filter(|l| !l.is_empty()) else {
            return Ok(self.forecast(q.observed, q.times)?);
        };
        // decode through targets and late observations together, injecting
        // the latter and reporting only the former
        let mut merged: Vec<(f64, Option<&Tensor>)> = q.times.iter().map(|&t| (t, None)).collect();
        merged.extend(late.times().iter().copied().zip(late.values().iter().map(Some)));
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let times: Vec<f64> = merged.iter().map(|m| m.0).collect();
        let avail: Vec<Option<Tensor>> = merged.iter().map(|m| m.1.cloned()).collect();
        let preds = Forecaster::predict(self, q.observed, &times, &avail)?;
        Ok(preds.into_iter().zip(&merged).filter(|(_, m)| m.1.is_none()).map(|(p, _)| p).collect())
    }
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRow {
    pub horizon: String,
    pub metrics: Metrics,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub rows: Vec<HorizonRow>,
    pub metadata: Vec<(String, String)>,
}

fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_mape(m: Option<f64>) -> String {
    m.map_or_else(|| "NA".to_string(), fmt_metric)
}

impl EvalReport {
    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Mean MAE over rows.
    pub fn mean_mae(&self) -> f64 {
        self.rows.iter().map(|r| r.metrics.mae).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol: {}", self.protocol);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>12}", "horizon", "MAE", "RMSE", "MAPE");
        for r in &self.rows {
            let mape = r.metrics.mape.map_or_else(|| "NA".to_string(), |m| format!("{:.2}%", m * 100.0));
            let _ = writeln!(s, "{:<10} {:>12.4} {:>12.4} {:>12}", r.horizon, r.metrics.mae, r.metrics.rmse, mape);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("protocol,horizon,mae,rmse,mape\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", self.protocol, r.horizon, fmt_metric(r.metrics.mae), fmt_metric(r.metrics.rmse), fmt_mape(r.metrics.mape));
        }
        s
    }

    /// Element-wise mean of reports sharing protocol and horizons.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or(EvalError::Empty("report"))?;
        let digest = first.meta("digest");
        if let Some(r) = reports.iter().find(|r| r.protocol != first.protocol || r.meta("digest") != digest) {
            if r.protocol != first.protocol {
                return Err(EvalError::Shape(format!("protocols {} and {}", first.protocol, r.protocol)));
            }
            let show = |d: Option<&str>| d.unwrap_or("none").to_string();
            return Err(EvalError::DigestMismatch(show(digest), show(r.meta("digest"))));
        }
        let k = reports.len() as f64;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (i, row) in first.rows.iter().enumerate() {
            let mut mae = 0.0;
            let mut rmse = 0.0;
            let mut mape = Some(0.0);
            let mut count = 0;
            for r in reports {
                let other = r.rows.get(i).filter(|o| o.horizon == row.horizon).ok_or_else(|| EvalError::Shape("reports have different horizons".into()))?;
                mae += other.metrics.mae;
                rmse += other.metrics.rmse;
                mape = mape.zip(other.metrics.mape).map(|(a, b)| a + b);
                count += other.count;
            }
            rows.push(HorizonRow { horizon: row.horizon.clone(), metrics: Metrics { mae: mae / k, rmse: rmse / k, mape: mape.map(|m| m / k) }, count });
        }
        let metadata = digest.map(|d| vec![("digest".to_string(), d.to_string())]).unwrap_or_default();
        Ok(EvalReport { protocol: first.protocol.clone(), rows, metadata })
    }
}

pub fn horizon_label(k: usize, interval_minutes: u32) -> String {
    format!("{}min", k as u32 * interval_minutes)
}

fn finish_rows(accs: &[Accumulator], label: impl Fn(usize) -> String) -> Vec<HorizonRow> {
    accs.iter()
        .enumerate()
        .map(|(k, a)| HorizonRow {
            horizon: label(k + 1),
            metrics: a.finish().unwrap_or(Metrics { mae: 0.0, rmse: 0.0, mape: None }),
            count: a.count(),
        })
        .collect()
}

fn predict_all<P: Predictor + ?Sized>(model: &P, queries: &[Query<'_>]) -> Result<Vec<Vec<Tensor>>> {
    let out: Vec<Vec<Tensor>> = queries.par_iter().map(|q| model.predict(q)).collect::<Result<_>>()?;
    for (q, p) in queries.iter().zip(&out) {
        if p.len() != q.times.len() {
            return Err(EvalError::PredictionCount { got: p.len(), want: q.times.len() });
        }
    }
    Ok(out)
}

fn windowed<P: Predictor + ?Sized>(model: &P, test: &Series, n_in: usize, n_out: usize, peak_only: bool, protocol: &str) -> Result<EvalReport> {
    let windows = make_windows(test, n_in, n_out)?;
    if windows.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    let queries: Vec<Query<'_>> = windows.iter().map(|w| Query { observed: &w.observed, times: w.target.times(), late: None, date: w.date }).collect();
    let preds = predict_all(model, &queries)?;
    let mut accs = vec![Accumulator::default(); n_out];
    for (w, p) in windows.iter().zip(&preds) {
        for (k, ((t, target), pred)) in w.target.times().iter().zip(w.target.values()).zip(p).enumerate() {
            if peak_only && !is_peak(w.clock_at(*t)) {
                continue;
            }
            accs[k].add_frames(pred, target)?;
        }
    }
    if peak_only && accs.iter().all(|a| a.count() == 0) {
        return Err(EvalError::Empty("peak-period"));
    }
    let interval = test.grid.interval_minutes;
    Ok(EvalReport { protocol: protocol.into(), rows: finish_rows(&accs, |k| horizon_label(k, interval)), metadata: vec![("mape".into(), "zero targets masked".into())] })
}

/// Per-horizon metrics over every sliding test window.
pub fn run_conventional<P: Predictor + ?Sized>(model: &P, test: &Series, n_in: usize, n_out: usize) -> Result<EvalReport> {
    windowed(model, test, n_in, n_out, false, "conventional")
}

/// As [`run_conventional`], scoring only target bins that start in a peak period.
pub fn run_peak<P: Predictor + ?Sized>(model: &P, test: &Series, n_in: usize, n_out: usize) -> Result<EvalReport> {
    windowed(model, test, n_in, n_out, true, "peak")
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSpec {
    pub n_observed: usize,
    pub m_target: usize,
    /// Consecutive bins the sample is drawn from.
    pub span: usize,
    pub interleaved: bool,
    pub seeds: Vec<u64>,
}

/// Single-seed irregular report.
pub fn run_irregular_seed<P: Predictor + ?Sized>(model: &P, test: &Series, spec: &IrregularSpec, seed: u64) -> Result<EvalReport> {
    let slots = day_windows(test, spec.span);
    if slots.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = slots.iter().map(|w| irregular_sample(&w.window, spec.n_observed, spec.m_target, spec.interleaved, &mut rng)).collect::<std::result::Result<Vec<_>, _>>()?;
    let queries: Vec<Query<'_>> = samples
        .iter()
        .zip(&slots)
        .map(|(s, w)| Query { observed: &s.observed, times: s.target.times(), late: Some(&s.late_observed), date: w.date })
        .collect();
    let preds = predict_all(model, &queries)?;
    let mut accs = vec![Accumulator::default(); spec.m_target];
    for (s, p) in samples.iter().zip(&preds) {
        for (k, (target, pred)) in s.target.values().iter().zip(p).enumerate() {
            accs[k].add_frames(pred, target)?;
        }
    }
    Ok(EvalReport {
        protocol: "irregular".into(),
        rows: finish_rows(&accs, |k| format!("t+{k}")),
        metadata: vec![("mape".into(), "zero targets masked".into()), ("seeds".into(), seed.to_string())],
    })
}

/// Irregular protocol averaged over `spec.seeds`.
pub fn run_irregular<P: Predictor + ?Sized>(model: &P, test: &Series, spec: &IrregularSpec) -> Result<EvalReport> {
    let per_seed = spec.seeds.iter().map(|&s| run_irregular_seed(model, test, spec, s)).collect::<Result<Vec<_>>>()?;
    let mut avg = EvalReport::average(&per_seed)?;
    let seeds: Vec<String> = spec.seeds.iter().map(u64::to_string).collect();
    avg.metadata = vec![
        ("mape".into(), "zero targets masked".into()),
        ("seeds".into(), seeds.join(",")),
        ("observed".into(), spec.n_observed.to_string()),
        ("span".into(), spec.span.to_string()),
        ("interleaved".into(), spec.interleaved.to_string()),
    ];
    Ok(avg)
}

/// Per-horizon MAE of free rollout and of decoding with ground truth
/// injected at the first `inject` horizons, over every test window.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionStudy {
    pub rollout: Vec<f64>,
    pub injected: Vec<f64>,
}

pub fn run_injection(model: &Forecaster, test: &Series, n_in: usize, horizons: usize, inject: usize) -> Result<InjectionStudy> {
    let windows = make_windows(test, n_in, horizons)?;
    if windows.is_empty() {
        return Err(EvalError::Empty("test"));
    }
    let outputs: Vec<(Vec<Tensor>, Vec<Tensor>)> = windows
        .par_iter()
        .map(|w| {
            let free = model.forecast(&w.observed, w.target.times())?;
            let avail: Vec<Option<Tensor>> = w.target.values().iter().enumerate().map(|(k, v)| (k < inject).then(|| v.clone())).collect();
            let fed = model.predict(&w.observed, w.target.times(), &avail)?;
            Ok((free, fed))
        })
        .collect::<Result<_>>()?;
    let mut free_acc = vec![Accumulator::default(); horizons];
    let mut fed_acc = vec![Accumulator::default(); horizons];
    for (w, (free, fed)) in windows.iter().zip(&outputs) {
        for k in 0..horizons {
            free_acc[k].add_frames(&free[k], &w.target.values()[k])?;
            fed_acc[k].add_frames(&fed[k], &w.target.values()[k])?;
        }
    }
    let mae = |a: &[Accumulator]| a.iter().map(|x| x.finish().map_or(0.0, |m| m.mae)).collect();
    Ok(InjectionStudy { rollout: mae(&free_acc), injected: mae(&fed_acc) })
}
