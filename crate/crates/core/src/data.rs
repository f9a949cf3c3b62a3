//! Ridership series, transaction ingestion and windowing.
//!
//! Series live on a bin grid: each service day is cut into left-closed,
//! right-open bins of `interval_minutes` starting at `service_start`. Inside a
//! window, time is the bin index within the day (one interval = 1.0).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use rand::Rng;

use crate::tensor::Tensor;

pub const DATETIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{count} record(s) reference stations outside 0..{n}")]
    UnknownStations { count: usize, n: usize },
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("times must be strictly increasing")]
    UnsortedTimes,
    #[error("window frames must all be {n}x2")]
    FrameShape { n: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split of {given} days does not cover the {total} days of the series")]
    SplitCoverage { given: usize, total: usize },
    #[error("n_in and n_out must be at least 1")]
    BadWindowLength,
    #[error("cannot draw {want} slots from a window of {have}")]
    InsufficientSlots { want: usize, have: usize },
    #[error("service window {start}..{end} holds no {interval}-minute bin")]
    BadServiceWindow { start: NaiveTime, end: NaiveTime, interval: u32 },
    #[error("no data rows")]
    NoData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, DATETIME_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
}

/// Daily bin layout shared by every series of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinGrid {
    pub first_day: NaiveDate,
    pub n_days: usize,
    pub interval_minutes: u32,
    pub service_start: NaiveTime,
    pub service_end: NaiveTime,
}

impl BinGrid {
    pub fn new(first_day: NaiveDate, n_days: usize, interval_minutes: u32, service_start: NaiveTime, service_end: NaiveTime) -> Result<Self, DataError> {
        let g = Self { first_day, n_days, interval_minutes, service_start, service_end };
        if interval_minutes == 0 || g.bins_per_day() == 0 {
            return Err(DataError::BadServiceWindow { start: service_start, end: service_end, interval: interval_minutes });
        }
        Ok(g)
    }

    pub fn default_service() -> (NaiveTime, NaiveTime) {
        (NaiveTime::from_hms_opt(5, 30, 0).unwrap(), NaiveTime::from_hms_opt(23, 30, 0).unwrap())
    }

    pub fn bins_per_day(&self) -> usize {
        if self.service_end <= self.service_start || self.interval_minutes == 0 {
            return 0;
        }
        let minutes = (self.service_end - self.service_start).num_minutes();
        (minutes / self.interval_minutes as i64) as usize
    }

    pub fn day(&self, k: usize) -> NaiveDate {
        self.first_day + Duration::days(k as i64)
    }

    /// Start of bin `bin` on day `day`.
    pub fn bin_start(&self, day: usize, bin: usize) -> NaiveDateTime {
        self.day(day).and_time(self.service_start) + Duration::minutes(bin as i64 * self.interval_minutes as i64)
    }

    /// `(day, bin)` holding `t`, or `None` outside the grid.
    pub fn locate(&self, t: NaiveDateTime) -> Option<(usize, usize)> {
        let day = (t.date() - self.first_day).num_days();
        if day < 0 || day as usize >= self.n_days {
            return None;
        }
        let since = t - t.date().and_time(self.service_start);
        if since < Duration::zero() {
            return None;
        }
        let bin = (since.num_seconds() / (self.interval_minutes as i64 * 60)) as usize;
        (bin < self.bins_per_day()).then_some((day as usize, bin))
    }

    pub fn sub_range(&self, first: usize, n_days: usize) -> BinGrid {
        BinGrid { first_day: self.day(first), n_days, ..*self }
    }
}

/// Per-station `(inflow, outflow)` counts on a [`BinGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub grid: BinGrid,
    pub n_stations: usize,
    /// `days[d][b]` is the `N x 2` frame of bin `b` on day `d`.
    pub days: Vec<Vec<Tensor>>,
}

impl Series {
    pub fn zeros(grid: BinGrid, n_stations: usize) -> Self {
        let days = (0..grid.n_days).map(|_| vec![Tensor::zeros(n_stations, 2); grid.bins_per_day()]).collect();
        Self { grid, n_stations, days }
    }

    pub fn frames(&self) -> impl Iterator<Item = &Tensor> {
        self.days.iter().flatten()
    }

    /// Concatenated `(inflow, outflow)` sequence of one station.
    pub fn station_points(&self, station: usize) -> Vec<[f64; 2]> {
        self.frames().map(|f| [f.get(station, 0), f.get(station, 1)]).collect()
    }

    pub fn sub_days(&self, first: usize, n_days: usize) -> Series {
        Series {
            grid: self.grid.sub_range(first, n_days),
            n_stations: self.n_stations,
            days: self.days[first..first + n_days].to_vec(),
        }
    }

    /// Sum of inflow and of outflow over every bin and station.
    pub fn totals(&self) -> [f64; 2] {
        let mut t = [0.0; 2];
        for f in self.frames() {
            for s in 0..self.n_stations {
                t[0] += f.get(s, 0);
                t[1] += f.get(s, 1);
            }
        }
        t
    }
}

/// Timestamped `N x 2` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    times: Vec<f64>,
    values: Vec<Tensor>,
}

impl SeriesWindow {
    pub fn new(times: Vec<f64>, values: Vec<Tensor>) -> Result<Self, DataError> {
        if times.len() != values.len() {
            return Err(DataError::Csv { line: 0, msg: format!("{} times for {} frames", times.len(), values.len()) });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(DataError::UnsortedTimes);
        }
        if let Some(first) = values.first() {
            let n = first.rows();
            if values.iter().any(|v| v.rows() != n || v.cols() != 2) {
                return Err(DataError::FrameShape { n });
            }
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_stations(&self) -> Option<usize> {
        self.values.first().map(Tensor::rows)
    }

    /// Same frames with every time shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> Self {
        Self { times: self.times.iter().map(|t| t + dt).collect(), values: self.values.clone() }
    }

    pub fn map_values(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self { times: self.times.clone(), values: self.values.iter().map(f).collect() }
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self { times: idx.iter().map(|&i| self.times[i]).collect(), values: idx.iter().map(|&i| self.values[i].clone()).collect() }
    }
}

/// A run of consecutive bins inside one service day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayWindow {
    pub window: SeriesWindow,
    pub date: NaiveDate,
    pub service_start: NaiveTime,
    pub interval_minutes: u32,
}

/// Observed history and the bins to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub observed: SeriesWindow,
    pub target: SeriesWindow,
    pub date: NaiveDate,
    pub service_start: NaiveTime,
    pub interval_minutes: u32,
}

fn clock_at(service_start: NaiveTime, interval_minutes: u32, t: f64) -> NaiveTime {
    let secs = (t * interval_minutes as f64 * 60.0).round() as i64;
    service_start + Duration::seconds(secs)
}

impl WindowPair {
    /// Wall-clock start of the bin at window time `t`.
    pub fn clock_at(&self, t: f64) -> NaiveTime {
        clock_at(self.service_start, self.interval_minutes, t)
    }
}

impl DayWindow {
    pub fn clock_at(&self, t: f64) -> NaiveTime {
        clock_at(self.service_start, self.interval_minutes, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransactionRecord {
    pub entry: NaiveDateTime,
    pub exit: NaiveDateTime,
    pub origin: usize,
    pub destination: usize,
}

/// Counts entries into inflow and exits into outflow on `grid`. Events
/// outside the grid's days or service window are dropped.
pub fn bin_transactions(records: &[TransactionRecord], n_stations: usize, grid: BinGrid) -> Result<Series, DataError> {
    let unknown = records.iter().filter(|r| r.origin >= n_stations || r.destination >= n_stations).count();
    if unknown > 0 {
        return Err(DataError::UnknownStations { count: unknown, n: n_stations });
    }
    let mut series = Series::zeros(grid, n_stations);
    for r in records {
        if let Some((d, b)) = grid.locate(r.entry) {
            let f = &mut series.days[d][b];
            f.set(r.origin, 0, f.get(r.origin, 0) + 1.0);
        }
        if let Some((d, b)) = grid.locate(r.exit) {
            let f = &mut series.days[d][b];
            f.set(r.destination, 1, f.get(r.destination, 1) + 1.0);
        }
    }
    Ok(series)
}

/// `od(i, j)` = trips from `j` to `i` whose entry falls in `[from, to)`.
pub fn build_od_matrix(records: &[TransactionRecord], n_stations: usize, from: NaiveDateTime, to: NaiveDateTime) -> Result<Tensor, DataError> {
    let unknown = records.iter().filter(|r| r.origin >= n_stations || r.destination >= n_stations).count();
    if unknown > 0 {
        return Err(DataError::UnknownStations { count: unknown, n: n_stations });
    }
    let mut od = Tensor::zeros(n_stations, n_stations);
    for r in records.iter().filter(|r| r.entry >= from && r.entry < to) {
        od.set(r.destination, r.origin, od.get(r.destination, r.origin) + 1.0);
    }
    Ok(od)
}

/// Whole-day chronological split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,
}

impl SplitSpec {
    /// Floors the train and validation shares; the remainder is test.
    pub fn from_fractions(total: usize, train: f64, val: f64) -> Self {
        let train_days = (total as f64 * train).floor() as usize;
        let val_days = ((total as f64 * val).floor() as usize).min(total - train_days);
        Self { train_days, val_days, test_days: total - train_days - val_days }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Series,
    pub val: Series,
    pub test: Series,
}

pub fn split_dataset(series: &Series, spec: SplitSpec) -> Result<Splits, DataError> {
    let given = spec.train_days + spec.val_days + spec.test_days;
    if given != series.days.len() {
        return Err(DataError::SplitCoverage { given, total: series.days.len() });
    }
    for (n, name) in [(spec.train_days, "train"), (spec.val_days, "validation"), (spec.test_days, "test")] {
        if n == 0 {
            return Err(DataError::EmptySplit(name));
        }
    }
    Ok(Splits {
        train: series.sub_days(0, spec.train_days),
        val: series.sub_days(spec.train_days, spec.val_days),
        test: series.sub_days(spec.train_days + spec.val_days, spec.test_days),
    })
}

/// Every run of `len` consecutive bins within a service day, stride one.
pub fn day_windows(series: &Series, len: usize) -> Vec<DayWindow> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    for (d, day) in series.days.iter().enumerate() {
        if day.len() < len {
            continue;
        }
        for start in 0..=day.len() - len {
            let times = (start..start + len).map(|b| b as f64).collect();
            let values = day[start..start + len].to_vec();
            out.push(DayWindow {
                window: SeriesWindow { times, values },
                date: series.grid.day(d),
                service_start: series.grid.service_start,
                interval_minutes: series.grid.interval_minutes,
            });
        }
    }
    out
}

/// Sliding `n_in`-in / `n_out`-out windows that never cross a day boundary.
pub fn make_windows(series: &Series, n_in: usize, n_out: usize) -> Result<Vec<WindowPair>, DataError> {
    if n_in == 0 || n_out == 0 {
        return Err(DataError::BadWindowLength);
    }
    Ok(day_windows(series, n_in + n_out)
        .into_iter()
        .map(|w| {
            let all: Vec<usize> = (0..n_in + n_out).collect();
            WindowPair {
                observed: w.window.select(&all[..n_in]),
                target: w.window.select(&all[n_in..]),
                date: w.date,
                service_start: w.service_start,
                interval_minutes: w.interval_minutes,
            }
        })
        .collect())
}

/// Observation/target split of an irregularly sampled window.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSample {
    pub observed: SeriesWindow,
    pub target: SeriesWindow,
    /// Observations falling after the first target time; only non-empty
    /// when interleaving is allowed.
    pub late_observed: SeriesWindow,
}

/// Draws a uniformly random sorted subset of `n_observed + m_target` slots.
///
/// By default the earliest `n_observed` become observations and the rest
/// targets. With `interleaved`, the targets are a random subset of the drawn
/// slots after the first one, so observations may fall between targets.
pub fn irregular_sample<R: Rng + ?Sized>(
    slots: &SeriesWindow,
    n_observed: usize,
    m_target: usize,
    interleaved: bool,
    rng: &mut R,
) -> Result<IrregularSample, DataError> {
    let want = n_observed + m_target;
    if n_observed == 0 || m_target == 0 || want > slots.len() {
        return Err(DataError::InsufficientSlots { want, have: slots.len() });
    }
    let mut drawn = rand::seq::index::sample(rng, slots.len(), want).into_vec();
    drawn.sort_unstable();
    let (obs_idx, tgt_idx): (Vec<usize>, Vec<usize>) = if interleaved {
        let mut pick = rand::seq::index::sample(rng, want - 1, m_target).into_vec();
        pick.sort_unstable();
        let tgt: Vec<usize> = pick.iter().map(|&p| drawn[p + 1]).collect();
        let obs = drawn.iter().copied().filter(|i| !tgt.contains(i)).collect();
        (obs, tgt)
    } else {
        (drawn[..n_observed].to_vec(), drawn[n_observed..].to_vec())
    };
    let first_target = tgt_idx[0];
    let early: Vec<usize> = obs_idx.iter().copied().filter(|&i| i < first_target).collect();
    let late: Vec<usize> = obs_idx.iter().copied().filter(|&i| i > first_target).collect();
    Ok(IrregularSample { observed: slots.select(&early), target: slots.select(&tgt_idx), late_observed: slots.select(&late) })
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).comment(Some(b'#')).from_reader(r)
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

fn is_header(rec: &csv::StringRecord) -> bool {
    rec.get(0).is_some_and(|f| parse_datetime(f).is_none() && f.parse::<f64>().is_err())
}

/// Reads `time_iso8601,station_id,inflow,outflow` rows onto a grid spanning
/// the first to the last date present. Missing rows count as zero.
pub fn read_ridership_csv<R: Read>(
    r: R,
    n_stations: Option<usize>,
    interval_minutes: u32,
    service: (NaiveTime, NaiveTime),
) -> Result<Series, DataError> {
    let mut rows = Vec::new();
    for (k, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv { line: k + 1, msg: e.to_string() })?;
        let line = record_line(&rec, k + 1);
        if k == 0 && is_header(&rec) {
            continue;
        }
        let err = |msg: String| DataError::Csv { line, msg };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let t = parse_datetime(&rec[0]).ok_or_else(|| err(format!("bad timestamp `{}`", &rec[0])))?;
        let s: usize = rec[1].parse().map_err(|_| err(format!("bad station id `{}`", &rec[1])))?;
        let inflow: f64 = rec[2].parse().map_err(|_| err(format!("bad inflow `{}`", &rec[2])))?;
        let outflow: f64 = rec[3].parse().map_err(|_| err(format!("bad outflow `{}`", &rec[3])))?;
        if !(inflow >= 0.0 && outflow >= 0.0 && inflow.is_finite() && outflow.is_finite()) {
            return Err(err("counts must be finite and non-negative".into()));
        }
        rows.push((line, t, s, inflow, outflow));
    }
    if rows.is_empty() {
        return Err(DataError::NoData);
    }
    let first = rows.iter().map(|r| r.1.date()).min().unwrap();
    let last = rows.iter().map(|r| r.1.date()).max().unwrap();
    let max_station = rows.iter().map(|r| r.2).max().unwrap();
    let n = n_stations.unwrap_or(max_station + 1);
    let grid = BinGrid::new(first, (last - first).num_days() as usize + 1, interval_minutes, service.0, service.1)?;
    let mut series = Series::zeros(grid, n);
    for (line, t, s, inflow, outflow) in rows {
        if s >= n {
            return Err(DataError::Csv { line, msg: format!("station {s} outside 0..{n}") });
        }
        let (d, b) = grid.locate(t).ok_or_else(|| DataError::Csv { line, msg: format!("time {t} outside the service window") })?;
        if grid.bin_start(d, b) != t {
            return Err(DataError::Csv { line, msg: format!("time {t} is not a bin start") });
        }
        series.days[d][b].set(s, 0, inflow);
        series.days[d][b].set(s, 1, outflow);
    }
    Ok(series)
}

fn fmt_count(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub fn write_ridership_csv<W: Write>(series: &Series, mut w: W) -> std::io::Result<()> {
    writeln!(w, "time,station_id,inflow,outflow")?;
    for (d, day) in series.days.iter().enumerate() {
        for (b, f) in day.iter().enumerate() {
            let t = series.grid.bin_start(d, b).format(DATETIME_FORMAT);
            for s in 0..series.n_stations {
                writeln!(w, "{t},{s},{},{}", fmt_count(f.get(s, 0)), fmt_count(f.get(s, 1)))?;
            }
        }
    }
    Ok(())
}

/// Reads `entry_time_iso8601,exit_time_iso8601,origin_id,destination_id` rows.
pub fn read_transactions_csv<R: Read>(r: R) -> Result<Vec<TransactionRecord>, DataError> {
    let mut out = Vec::new();
    for (k, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv { line: k + 1, msg: e.to_string() })?;
        let line = record_line(&rec, k + 1);
        if k == 0 && is_header(&rec) {
            continue;
        }
        let err = |msg: String| DataError::Csv { line, msg };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        out.push(TransactionRecord {
            entry: parse_datetime(&rec[0]).ok_or_else(|| err(format!("bad entry time `{}`", &rec[0])))?,
            exit: parse_datetime(&rec[1]).ok_or_else(|| err(format!("bad exit time `{}`", &rec[1])))?,
            origin: rec[2].parse().map_err(|_| err(format!("bad origin `{}`", &rec[2])))?,
            destination: rec[3].parse().map_err(|_| err(format!("bad destination `{}`", &rec[3])))?,
        });
    }
    Ok(out)
}

pub fn write_transactions_csv<W: Write>(records: &[TransactionRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "entry_time,exit_time,origin_id,destination_id")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.entry.format(DATETIME_FORMAT), r.exit.format(DATETIME_FORMAT), r.origin, r.destination)?;
    }
    Ok(())
}

/// Reads undirected `i,j` station pairs.
pub fn read_edges_csv<R: Read>(r: R) -> Result<Vec<(usize, usize)>, DataError> {
    let mut out = Vec::new();
    for (k, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv { line: k + 1, msg: e.to_string() })?;
        let line = record_line(&rec, k + 1);
        if k == 0 && is_header(&rec) {
            continue;
        }
        let err = || DataError::Csv { line, msg: "expected `i,j` station indices".into() };
        if rec.len() != 2 {
            return Err(err());
        }
        out.push((rec[0].parse().map_err(|_| err())?, rec[1].parse().map_err(|_| err())?));
    }
    Ok(out)
}

pub fn write_edges_csv<W: Write>(pairs: &[(usize, usize)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "i,j")?;
    for (i, j) in pairs {
        writeln!(w, "{i},{j}")?;
    }
    Ok(())
}

/// Groups ridership rows by timestamp into a window whose times are bin
/// offsets from `origin`. Used for ad-hoc observation files.
pub fn read_observation_csv<R: Read>(r: R, n_stations: usize, interval_minutes: u32) -> Result<(NaiveDateTime, SeriesWindow), DataError> {
    let mut frames: BTreeMap<NaiveDateTime, Tensor> = BTreeMap::new();
    for (k, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv { line: k + 1, msg: e.to_string() })?;
        let line = record_line(&rec, k + 1);
        if k == 0 && is_header(&rec) {
            continue;
        }
        let err = |msg: String| DataError::Csv { line, msg };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let t = parse_datetime(&rec[0]).ok_or_else(|| err(format!("bad timestamp `{}`", &rec[0])))?;
        let s: usize = rec[1].parse().map_err(|_| err(format!("bad station id `{}`", &rec[1])))?;
        if s >= n_stations {
            return Err(err(format!("station {s} outside 0..{n_stations}")));
        }
        let f = frames.entry(t).or_insert_with(|| Tensor::zeros(n_stations, 2));
        f.set(s, 0, rec[2].parse().map_err(|_| err(format!("bad inflow `{}`", &rec[2])))?);
        f.set(s, 1, rec[3].parse().map_err(|_| err(format!("bad outflow `{}`", &rec[3])))?);
    }
    let origin = *frames.keys().next().ok_or(DataError::NoData)?;
    let step = interval_minutes as f64 * 60.0;
    let times = frames.keys().map(|t| (*t - origin).num_seconds() as f64 / step).collect();
    let window = SeriesWindow::new(times, frames.into_values().collect())?;
    Ok((origin, window))
}

/// Clock time of a within-day bin index.
pub fn minutes_of_day(t: NaiveTime) -> u32 {
    t.hour() * 60 + t.minute()
}
