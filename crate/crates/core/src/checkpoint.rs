//! Binary checkpoints: a text header naming every tensor, then row-major
//! little-endian `f64` data in header order.

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;
use crate::training::NormStats;

pub const MAGIC: &str = "strgode-ckpt v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing `{MAGIC}` header)")]
    Magic,
    #[error("header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("truncated data: expected {expected} values")]
    Truncated { expected: usize },
    #[error("digest mismatch: checkpoint {found}, configuration {expected}")]
    DigestMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything that fixes a model's meaning: architecture plus the window
/// and bin conventions it was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub n_in: usize,
    pub n_out: usize,
    pub interval_minutes: u32,
}

impl ModelSpec {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("d", m.d.to_string()),
            ("solver", m.method.to_string()),
            ("n_intermediate", m.n_intermediate.to_string()),
            ("anchor", m.anchor.to_string()),
            ("transform_hidden", m.transform_hidden.to_string()),
            ("aggregation", m.aggregation.to_string()),
            ("n_in", self.n_in.to_string()),
            ("n_out", self.n_out.to_string()),
            ("interval_minutes", self.interval_minutes.to_string()),
        ]
    }

    fn line(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }

    fn parse_line(s: &str) -> Result<Self, String> {
        let mut spec = ModelSpec { model: ModelConfig::default(), n_in: 4, n_out: 4, interval_minutes: 15 };
        let mut seen = 0;
        for kv in s.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad field `{kv}`"))?;
            let bad = |e: String| format!("{k}: {e}");
            match k {
                "d" => spec.model.d = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "solver" => spec.model.method = v.parse().map_err(bad)?,
                "n_intermediate" => spec.model.n_intermediate = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "anchor" => spec.model.anchor = v.parse().map_err(bad)?,
                "transform_hidden" => spec.model.transform_hidden = v.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
                "aggregation" => spec.model.aggregation = v.parse().map_err(bad)?,
                "n_in" => spec.n_in = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "n_out" => spec.n_out = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "interval_minutes" => spec.interval_minutes = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(format!("unknown field `{other}`")),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err("incomplete model line".into());
        }
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical field list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.line().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        self.spec.digest()
    }

    fn tensors(&self) -> Vec<(&str, Tensor)> {
        let mut v: Vec<(&str, Tensor)> = self.params.iter().map(|(n, t)| (n, t.clone())).collect();
        v.push(("norm_mean", Tensor::row_vector(&self.norm.mean)));
        v.push(("norm_std", Tensor::row_vector(&self.norm.std)));
        v
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let tensors = self.tensors();
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "digest {}", self.digest())?;
        writeln!(w, "model {}", self.spec.line())?;
        for (name, t) in &tensors {
            writeln!(w, "{name} {}x{}", t.rows(), t.cols())?;
        }
        writeln!(w, "end")?;
        for (_, t) in &tensors {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        let next = |r: &mut R, line: &mut String| -> Result<(), CheckpointError> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(CheckpointError::Magic);
            }
            while line.ends_with('\n') || line.ends_with('\r') {
                line.pop();
            }
            Ok(())
        };
        next(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let header = |line: usize, msg: String| CheckpointError::Header { line, msg };
        next(&mut r, &mut line)?;
        let digest = line.strip_prefix("digest ").ok_or_else(|| header(2, "expected `digest <hex>`".into()))?.to_string();
        next(&mut r, &mut line)?;
        let spec = ModelSpec::parse_line(line.strip_prefix("model ").ok_or_else(|| header(3, "expected `model ...`".into()))?).map_err(|m| header(3, m))?;
        if spec.digest() != digest {
            return Err(CheckpointError::DigestMismatch { found: digest, expected: spec.digest() });
        }
        let mut shapes = Vec::new();
        let mut lineno = 3;
        loop {
            next(&mut r, &mut line)?;
            lineno += 1;
            if line == "end" {
                break;
            }
            let (name, shape) = line.split_once(' ').ok_or_else(|| header(lineno, format!("bad entry `{line}`")))?;
            let (a, b) = shape.split_once('x').ok_or_else(|| header(lineno, format!("bad shape `{shape}`")))?;
            let dims = (a.parse::<usize>(), b.parse::<usize>());
            let (Ok(rows), Ok(cols)) = dims else { return Err(header(lineno, format!("bad shape `{shape}`"))) };
            shapes.push((name.to_string(), rows, cols));
        }
        let expected: usize = shapes.iter().map(|s| s.1 * s.2).sum();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != expected * 8 {
            return Err(CheckpointError::Truncated { expected });
        }
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut named = Vec::new();
        let (mut mean, mut std) = (None, None);
        for (name, rows, cols) in shapes {
            let t = Tensor::new(rows, cols, values.by_ref().take(rows * cols).collect()).expect("sized");
            match name.as_str() {
                "norm_mean" if t.len() == 2 => mean = Some([t.data()[0], t.data()[1]]),
                "norm_std" if t.len() == 2 => std = Some([t.data()[0], t.data()[1]]),
                _ => named.push((name, t)),
            }
        }
        let (Some(mean), Some(std)) = (mean, std) else {
            return Err(header(lineno, "missing normalization statistics".into()));
        };
        if named.len() != PARAM_NAMES.len() {
            return Err(header(lineno, format!("{} parameter tensors, expected {}", named.len(), PARAM_NAMES.len())));
        }
        let params = ModelParams::from_named(spec.model.d, named).map_err(|e| header(lineno, e.to_string()))?;
        Ok(Self { spec, params, norm: NormStats { mean, std } })
    }

    /// Fails unless the checkpoint was produced under `spec`.
    pub fn ensure_spec(&self, spec: &ModelSpec) -> Result<(), CheckpointError> {
        if self.digest() != spec.digest() {
            return Err(CheckpointError::DigestMismatch { found: self.digest(), expected: spec.digest() });
        }
        Ok(())
    }
}
