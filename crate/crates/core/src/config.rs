//! Flat `key = value` run configuration.
//!
//! [`RunConfig::render`] writes every key in a fixed order; parsing that text
//! gives back the same configuration and rendering it again the same bytes.

use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::NaiveTime;

use crate::checkpoint::ModelSpec;
use crate::data::{BinGrid, SplitSpec};
use crate::eval::IrregularSpec;
use crate::graph::Selection;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Conventional,
    Peak,
    Irregular,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Conventional, Protocol::Peak, Protocol::Irregular];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Conventional => "conventional",
            Protocol::Peak => "peak",
            Protocol::Irregular => "irregular",
        }
    }
}

/// Comma-separated protocol names, or `all`.
pub fn parse_protocols(s: &str) -> Result<Vec<Protocol>, String> {
    if s.trim() == "all" {
        return Ok(Protocol::ALL.to_vec());
    }
    s.split(',')
        .map(|p| match p.trim() {
            "conventional" => Ok(Protocol::Conventional),
            "peak" => Ok(Protocol::Peak),
            "irregular" => Ok(Protocol::Irregular),
            other => Err(format!("unknown protocol `{other}`")),
        })
        .collect()
}

fn render_protocols(p: &[Protocol]) -> String {
    p.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(",")
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let seeds: Vec<u64> = s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad seed `{x}`"))).collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err("empty seed list".into());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ridership: Option<PathBuf>,
    pub transactions: Option<PathBuf>,
    pub od: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub graph_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,

    pub interval_minutes: u32,
    pub service_start: NaiveTime,
    pub service_end: NaiveTime,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Explicit day counts; all zero means use the fractions.
    pub train_days: usize,
    pub val_days: usize,
    pub test_days: usize,

    pub similarity_selection: Selection,
    pub correlation_selection: Selection,
    pub dtw_band: Option<usize>,

    pub train: TrainConfig,

    pub protocols: Vec<Protocol>,
    pub observed: usize,
    pub seeds: Vec<u64>,
    pub irregular_span: usize,
    pub allow_interleaved: bool,

    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (service_start, service_end) = BinGrid::default_service();
        Self {
            ridership: None,
            transactions: None,
            od: None,
            edges: None,
            graph_dir: None,
            out_dir: None,
            interval_minutes: 15,
            service_start,
            service_end,
            train_fraction: 0.7,
            val_fraction: 0.1,
            train_days: 0,
            val_days: 0,
            test_days: 0,
            similarity_selection: Selection::TopK(10),
            correlation_selection: Selection::Threshold(0.02),
            dtw_band: None,
            train: TrainConfig::default(),
            protocols: vec![Protocol::Conventional],
            observed: 4,
            seeds: vec![0, 1, 2, 3, 4],
            irregular_span: 16,
            allow_interleaved: false,
            threads: 1,
        }
    }
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn positive<T: std::str::FromStr + PartialOrd + Default>(v: &str) -> Result<T, String> {
    let x: T = num(v)?;
    if x <= T::default() {
        return Err(format!("`{v}` must be positive"));
    }
    Ok(x)
}

fn fraction(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("`{v}` is not in [0, 1]"));
    }
    Ok(x)
}

fn clock(v: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(v, "%H:%M").map_err(|_| format!("invalid time `{v}` (expected HH:MM)"))
}

fn boolean(v: &str) -> Result<bool, String> {
    v.parse().map_err(|_| format!("invalid boolean `{v}`"))
}

impl RunConfig {
    /// Every key with its canonical value, in render order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &t.model;
        vec![
            ("ridership", path_str(&self.ridership)),
            ("transactions", path_str(&self.transactions)),
            ("od", path_str(&self.od)),
            ("edges", path_str(&self.edges)),
            ("graph_dir", path_str(&self.graph_dir)),
            ("out_dir", path_str(&self.out_dir)),
            ("interval_minutes", self.interval_minutes.to_string()),
            ("service_start", self.service_start.format("%H:%M").to_string()),
            ("service_end", self.service_end.format("%H:%M").to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("train_days", self.train_days.to_string()),
            ("val_days", self.val_days.to_string()),
            ("test_days", self.test_days.to_string()),
            ("similarity_selection", self.similarity_selection.to_string()),
            ("correlation_selection", self.correlation_selection.to_string()),
            ("dtw_band", self.dtw_band.map(|b| b.to_string()).unwrap_or_else(|| "none".into())),
            ("d", m.d.to_string()),
            ("solver", m.method.to_string()),
            ("n_intermediate", m.n_intermediate.to_string()),
            ("anchor", m.anchor.to_string()),
            ("transform_hidden", m.transform_hidden.to_string()),
            ("aggregation", m.aggregation.to_string()),
            ("n_in", t.n_in.to_string()),
            ("n_out", t.n_out.to_string()),
            ("train_irregular_span", t.irregular_span.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("max_decays", t.max_decays.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("protocol", render_protocols(&self.protocols)),
            ("observed", self.observed.to_string()),
            ("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ("irregular_span", self.irregular_span.to_string()),
            ("allow_interleaved", self.allow_interleaved.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        let t = &mut self.train;
        match key {
            "ridership" => self.ridership = opt_path(v),
            "transactions" => self.transactions = opt_path(v),
            "od" => self.od = opt_path(v),
            "edges" => self.edges = opt_path(v),
            "graph_dir" => self.graph_dir = opt_path(v),
            "out_dir" => self.out_dir = opt_path(v),
            "interval_minutes" => self.interval_minutes = positive(v)?,
            "service_start" => self.service_start = clock(v)?,
            "service_end" => self.service_end = clock(v)?,
            "train_fraction" => self.train_fraction = fraction(v)?,
            "val_fraction" => self.val_fraction = fraction(v)?,
            "train_days" => self.train_days = num(v)?,
            "val_days" => self.val_days = num(v)?,
            "test_days" => self.test_days = num(v)?,
            "similarity_selection" => self.similarity_selection = v.parse()?,
            "correlation_selection" => self.correlation_selection = v.parse()?,
            "dtw_band" => self.dtw_band = if v == "none" { None } else { Some(num(v)?) },
            "d" => t.model.d = positive(v)?,
            "solver" => t.model.method = v.parse()?,
            "n_intermediate" => t.model.n_intermediate = positive(v)?,
            "anchor" => t.model.anchor = v.parse()?,
            "transform_hidden" => t.model.transform_hidden = boolean(v)?,
            "aggregation" => t.model.aggregation = v.parse()?,
            "n_in" => t.n_in = positive(v)?,
            "n_out" => t.n_out = positive(v)?,
            "train_irregular_span" => t.irregular_span = num(v)?,
            "batch_size" => t.batch_size = positive(v)?,
            "lr" => t.lr = positive(v)?,
            "lr_decay" => t.lr_decay = positive(v)?,
            "max_decays" => t.max_decays = num(v)?,
            "max_epochs" => t.max_epochs = positive(v)?,
            "patience" => t.patience = positive(v)?,
            "seed" => t.seed = num(v)?,
            "protocol" => self.protocols = parse_protocols(v)?,
            "observed" => self.observed = positive(v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "irregular_span" => self.irregular_span = positive(v)?,
            "allow_interleaved" => self.allow_interleaved = boolean(v)?,
            "threads" => self.threads = positive(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ConfigError { line: k + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            self.set(key.trim(), value).map_err(err)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("override `{kv}` is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        self.train.model
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { model: self.train.model, n_in: self.train.n_in, n_out: self.train.n_out, interval_minutes: self.interval_minutes }
    }

    pub fn split_spec(&self, total_days: usize) -> SplitSpec {
        if self.train_days + self.val_days + self.test_days > 0 {
            SplitSpec { train_days: self.train_days, val_days: self.val_days, test_days: self.test_days }
        } else {
            SplitSpec::from_fractions(total_days, self.train_fraction, self.val_fraction)
        }
    }

    pub fn irregular_spec(&self) -> IrregularSpec {
        IrregularSpec {
            n_observed: self.observed,
            m_target: self.train.n_out,
            span: self.irregular_span,
            interleaved: self.allow_interleaved,
            seeds: self.seeds.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Anchor;
    use crate::ode::Method;

    #[test]
    fn default_round_trip() {
        let text = RunConfig::default().render();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        assert_eq!(back.render(), text);
    }

    #[test]
    fn edited_round_trip() {
        let mut c = RunConfig::default();
        for kv in ["d=8", "solver=euler", "anchor=first", "lr=0.0005", "seeds=3,1", "dtw_band=12", "ridership=data/r.csv", "protocol=peak,irregular", "similarity_selection=threshold:0.1"] {
            c.apply_override(kv).unwrap();
        }
        assert_eq!(c.train.model.method, Method::Euler);
        assert_eq!(c.train.model.anchor, Anchor::First);
        let text = c.render();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("# comment\n\nd = 4\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.msg.contains("bogus"));
        assert_eq!(RunConfig::parse("d = 0").unwrap_err().line, 1);
        assert!(RunConfig::parse("train_fraction = 1.5").is_err());
        assert!(RunConfig::parse("solver = midpoint").is_err());
    }

    #[test]
    fn split_override() {
        let mut c = RunConfig::default();
        assert_eq!(c.split_spec(40), SplitSpec { train_days: 28, val_days: 4, test_days: 8 });
        c.apply_override("train_days=6").unwrap();
        c.apply_override("val_days=2").unwrap();
        c.apply_override("test_days=2").unwrap();
        assert_eq!(c.split_spec(10), SplitSpec { train_days: 6, val_days: 2, test_days: 2 });
    }
}
