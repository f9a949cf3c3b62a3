//! The graph-ODE forecaster: relational dynamics, GRU correction cell,
//! transform block, output layer, the reverse-time encoder and the
//! observation-corrected decoder.
//!
//! Station states are `N x d` matrices with one row per station; every weight
//! acts on the right (`state · W`), shared across stations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesWindow;
use crate::diff::{DiffError, Graph, Var};
use crate::graph::TriGraph;
use crate::ode::{integrate, Method, TimeGrid};
use crate::tensor::Tensor;
use crate::training::NormStats;

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 20] = [
    "theta0",
    "theta_physical",
    "theta_similarity",
    "theta_correlation",
    "gru_wr",
    "gru_br",
    "gru_wz",
    "gru_bz",
    "gru_wn",
    "gru_bn",
    "tz_w1",
    "tz_b1",
    "tz_w2",
    "tz_b2",
    "th_w1",
    "th_b1",
    "th_w2",
    "th_b2",
    "out_w",
    "out_b",
];

const THETA0: usize = 0;
const THETA_REL: usize = 1;
const GRU_WR: usize = 4;
const GRU_BR: usize = 5;
const GRU_WZ: usize = 6;
const GRU_BZ: usize = 7;
const GRU_WN: usize = 8;
const GRU_BN: usize = 9;
const TZ: usize = 10;
const TH: usize = 14;
const OUT_W: usize = 18;
const OUT_B: usize = 19;

/// Number of observed channels per station (inflow, outflow).
pub const CHANNELS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("time error: {0}")]
    Time(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn is_bias(name: &str) -> bool {
    matches!(name, "gru_br" | "gru_bz" | "gru_bn" | "tz_b1" | "tz_b2" | "th_b1" | "th_b2" | "out_b")
}

/// Expected shape of each parameter for latent width `d`.
pub fn param_shape(name: &str, d: usize) -> Option<[usize; 2]> {
    let gate_in = 2 * d + CHANNELS;
    Some(match name {
        "theta0" | "theta_physical" | "theta_similarity" | "theta_correlation" => [d, d],
        "gru_wr" | "gru_wz" => [gate_in, d],
        "gru_wn" => [d + CHANNELS, d],
        "tz_w1" | "tz_w2" | "th_w1" | "th_w2" => [d, d],
        "gru_br" | "gru_bz" | "gru_bn" | "tz_b1" | "tz_b2" | "th_b1" | "th_b2" => [1, d],
        "out_w" => [d, CHANNELS],
        "out_b" => [1, CHANNELS],
        _ => return None,
    })
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    d: usize,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "latent width must be positive");
        let tensors = PARAM_NAMES
            .iter()
            .map(|n| {
                let [r, c] = param_shape(n, d).expect("known name");
                Tensor::zeros(r, c)
            })
            .collect();
        Self { d, tensors }
    }

    /// Weights uniform in `(−1/√d, 1/√d)`, biases zero.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut p = Self::zeros(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        for (name, t) in PARAM_NAMES.iter().zip(p.tensors.iter_mut()) {
            if is_bias(name) {
                continue;
            }
            for x in t.data_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Builds a parameter set from named tensors; every name must be present
    /// with the shape implied by `d`.
    pub fn from_named(d: usize, named: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut slots: Vec<Option<Tensor>> = vec![None; PARAM_NAMES.len()];
        for (name, t) in named {
            let idx = PARAM_NAMES.iter().position(|n| *n == name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            let shape = param_shape(&name, d).expect("known name");
            if t.shape() != shape {
                return Err(ModelError::Dimension(format!("{name} is {:?}, expected {:?}", t.shape(), shape)));
            }
            slots[idx] = Some(t);
        }
        let tensors = slots
            .into_iter()
            .zip(PARAM_NAMES)
            .map(|(t, n)| t.ok_or_else(|| ModelError::Dimension(format!("missing parameter {n}"))))
            .collect::<Result<_>>()?;
        Ok(Self { d, tensors })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter_mut())
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Where the encoder's state is anchored in time before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchor {
    /// Re-integrate the encoded state forward to the last observation.
    #[default]
    Last,
    /// Decode directly from the earliest observation time.
    First,
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anchor::Last => "last",
            Anchor::First => "first",
        })
    }
}

impl FromStr for Anchor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "last" => Ok(Anchor::Last),
            "first" => Ok(Anchor::First),
            other => Err(format!("unknown anchor `{other}` (expected last or first)")),
        }
    }
}

/// How neighbor states are pooled in the dynamics function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `1/|N_r(i)|` over the relation's neighbors.
    #[default]
    Mean,
    /// The relation graph's edge weights.
    Weighted,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Weighted => "weighted",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "weighted" => Ok(Aggregation::Weighted),
            other => Err(format!("unknown aggregation `{other}` (expected mean or weighted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub method: Method,
    pub n_intermediate: usize,
    pub anchor: Anchor,
    pub transform_hidden: bool,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 16, method: Method::Rk4, n_intermediate: 3, anchor: Anchor::Last, transform_hidden: true, aggregation: Aggregation::Mean }
    }
}

/// Dense neighbor operators, one per relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregators {
    mats: [Tensor; 3],
}

impl Aggregators {
    pub fn new(graphs: &TriGraph, aggregation: Aggregation) -> Self {
        let op = |g: &crate::graph::RelationGraph| match aggregation {
            Aggregation::Mean => g.mean_aggregator(),
            Aggregation::Weighted => g.weight_matrix(),
        };
        Self { mats: [op(&graphs.physical), op(&graphs.similarity), op(&graphs.correlation)] }
    }

    pub fn n_stations(&self) -> usize {
        self.mats[0].rows()
    }

    pub fn matrices(&self) -> &[Tensor; 3] {
        &self.mats
    }
}

/// Latent state handles on a graph: ODE state `z` and GRU memory `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentVars {
    pub z: Var,
    pub hidden: Var,
}

/// Encoder output: latent state valid at time `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoded {
    pub state: LatentVars,
    pub anchor: f64,
}

/// A model bound to one computation graph: parameter leaves and neighbor
/// operators registered once, reused by every step.
#[derive(Debug, Clone)]
pub struct Net {
    params: Vec<Var>,
    aggr: [Option<Var>; 3],
    config: ModelConfig,
    n: usize,
}

impl Net {
    pub fn bind(g: &mut Graph, params: &ModelParams, aggr: &Aggregators, config: ModelConfig) -> Result<Self> {
        if params.d() != config.d {
            return Err(ModelError::Dimension(format!("parameters have d={}, config d={}", params.d(), config.d)));
        }
        let vars = params.iter().map(|(name, t)| g.param(name, t.clone())).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut handles = [None, None, None];
        for (h, m) in handles.iter_mut().zip(aggr.matrices()) {
            // relations without any edge contribute nothing
            if m.data().iter().any(|&x| x != 0.0) {
                *h = Some(g.constant(m.clone())?);
            }
        }
        Ok(Self { params: vars, aggr: handles, config, n: aggr.n_stations() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_stations(&self) -> usize {
        self.n
    }

    fn check_state(&self, g: &Graph, v: Var, what: &str) -> Result<()> {
        let s = g.value(v).shape();
        if s != [self.n, self.config.d] {
            return Err(ModelError::Dimension(format!("{what} is {s:?}, expected [{}, {}]", self.n, self.config.d)));
        }
        Ok(())
    }

    fn check_frame(&self, g: &Graph, v: Var) -> Result<()> {
        let s = g.value(v).shape();
        if s != [self.n, CHANNELS] {
            return Err(ModelError::Dimension(format!("observation is {s:?}, expected [{}, {CHANNELS}]", self.n)));
        }
        Ok(())
    }

    /// `relu(z·Θ₀ + Σ_r A_r·z·Θ_r)`, used as the time derivative of `z`.
    pub fn dynamics(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_state(g, z, "state")?;
        let mut acc = g.matmul(z, self.params[THETA0])?;
        for (r, a) in self.aggr.iter().enumerate() {
            if let Some(a) = a {
                let pooled = g.matmul(*a, z)?;
                let msg = g.matmul(pooled, self.params[THETA_REL + r])?;
                acc = g.add(acc, msg)?;
            }
        }
        Ok(g.relu(acc)?)
    }

    /// GRU correction of `(z, hidden)` by observation `x`.
    pub fn gru_cell(&self, g: &mut Graph, z: Var, hidden: Var, x: Var) -> Result<LatentVars> {
        self.check_state(g, z, "state")?;
        self.check_state(g, hidden, "hidden")?;
        self.check_frame(g, x)?;
        let p = &self.params;
        let cat = g.concat(&[z, hidden, x])?;
        let r = g.affine(cat, p[GRU_WR], p[GRU_BR])?;
        let r = g.sigmoid(r)?;
        let u = g.affine(cat, p[GRU_WZ], p[GRU_BZ])?;
        let u = g.sigmoid(u)?;
        let rh = g.mul(r, hidden)?;
        let cand_in = g.concat(&[rh, x])?;
        let cand = g.affine(cand_in, p[GRU_WN], p[GRU_BN])?;
        let cand = g.tanh(cand)?;
        let keep = g.one_minus(u)?;
        let fresh = g.mul(keep, cand)?;
        let uh = g.mul(u, hidden)?;
        let uz = g.mul(u, z)?;
        let hidden = g.add(fresh, uh)?;
        let z = g.add(fresh, uz)?;
        Ok(LatentVars { z, hidden })
    }

    fn two_layer(&self, g: &mut Graph, x: Var, base: usize) -> Result<Var> {
        let p = &self.params;
        let a = g.affine(x, p[base], p[base + 1])?;
        let a = g.tanh(a)?;
        Ok(g.affine(a, p[base + 2], p[base + 3])?)
    }

    /// Fully connected, tanh, fully connected; applied to `z` and (unless
    /// disabled) separately to `hidden`.
    pub fn transform_block(&self, g: &mut Graph, z: Var, hidden: Var) -> Result<LatentVars> {
        self.check_state(g, z, "state")?;
        self.check_state(g, hidden, "hidden")?;
        let z = self.two_layer(g, z, TZ)?;
        let hidden = if self.config.transform_hidden { self.two_layer(g, hidden, TH)? } else { hidden };
        Ok(LatentVars { z, hidden })
    }

    /// Per-station affine map to `(inflow, outflow)` in normalized units.
    pub fn output_layer(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_state(g, z, "state")?;
        Ok(g.affine(z, self.params[OUT_W], self.params[OUT_B])?)
    }

    /// Integrates `z` from `t0` to `t1` under the learned dynamics.
    pub fn evolve(&self, g: &mut Graph, z: Var, t0: f64, t1: f64) -> Result<Var> {
        let grid = TimeGrid::new(t0, t1, self.config.n_intermediate);
        let mut failure = None;
        let out = integrate(
            g,
            |g: &mut Graph, z: Var, _t: f64| match self.dynamics(g, z) {
                Ok(v) => Ok(v),
                Err(ModelError::Diff(e)) => Err(e),
                Err(other) => {
                    failure = Some(other);
                    Err(DiffError::Shape { node: g.len(), op: "dynamics", detail: "see model error".into() })
                }
            },
            z,
            &grid,
            self.config.method,
        );
        match (out, failure) {
            (_, Some(e)) => Err(e),
            (out, None) => Ok(out?),
        }
    }

    /// Sweeps the observations from latest to earliest, alternating
    /// backward integration and GRU correction, then applies the transform
    /// block and anchors the state per the configured [`Anchor`].
    pub fn encode(&self, g: &mut Graph, obs: &SeriesWindow) -> Result<Encoded> {
        let n_obs = obs.len();
        if n_obs == 0 {
            return Err(ModelError::Time("encoder needs at least one observation".into()));
        }
        let times = obs.times();
        let zero = g.constant(Tensor::zeros(self.n, self.config.d))?;
        let last = g.constant(obs.values()[n_obs - 1].clone())?;
        let mut state = self.gru_cell(g, zero, zero, last)?;
        for i in (0..n_obs - 1).rev() {
            let z = self.evolve(g, state.z, times[i + 1], times[i])?;
            let x = g.constant(obs.values()[i].clone())?;
            state = self.gru_cell(g, z, state.hidden, x)?;
        }
        let state = self.transform_block(g, state.z, state.hidden)?;
        Ok(match self.config.anchor {
            Anchor::First => Encoded { state, anchor: times[0] },
            Anchor::Last => {
                let z = self.evolve(g, state.z, times[0], times[n_obs - 1])?;
                Encoded { state: LatentVars { z, hidden: state.hidden }, anchor: times[n_obs - 1] }
            }
        })
    }

    /// Rolls the state forward through `times`. Each prediction is read out
    /// before the GRU correction at its own time; the correction uses the
    /// observation in `available` when present, else the prediction itself.
    pub fn decode(&self, g: &mut Graph, init: Encoded, times: &[f64], available: &[Option<Tensor>]) -> Result<Vec<Var>> {
        if !available.is_empty() && available.len() != times.len() {
            return Err(ModelError::Dimension(format!("{} availability slots for {} target times", available.len(), times.len())));
        }
        let mut prev = init.anchor;
        for (k, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < prev || (k > 0 && t == prev) {
                return Err(ModelError::Time(format!("target time {t} precedes {prev}")));
            }
            prev = t;
        }
        let mut state = init.state;
        let mut t_prev = init.anchor;
        let mut preds = Vec::with_capacity(times.len());
        for (k, &t) in times.iter().enumerate() {
            let z = self.evolve(g, state.z, t_prev, t)?;
            let y = self.output_layer(g, z)?;
            let x = match available.get(k) {
                Some(Some(obs)) => g.constant(obs.clone())?,
                _ => y,
            };
            state = self.gru_cell(g, z, state.hidden, x)?;
            preds.push(y);
            t_prev = t;
        }
        Ok(preds)
    }

    /// Mean absolute error of a decoded window against normalized targets.
    pub fn window_loss(&self, g: &mut Graph, observed: &SeriesWindow, target: &SeriesWindow) -> Result<Var> {
        let enc = self.encode(g, observed)?;
        let preds = self.decode(g, enc, target.times(), &[])?;
        let mut total: Option<Var> = None;
        for (y, t) in preds.iter().zip(target.values()) {
            let tv = g.constant(t.clone())?;
            let e = g.sub(*y, tv)?;
            let l = g.mean_abs(e)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| ModelError::Time("no target times".into()))?;
        Ok(g.scale(total, 1.0 / preds.len() as f64)?)
    }
}

/// A trained model ready for inference in original units.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub norm: NormStats,
    aggr: Aggregators,
}

impl Forecaster {
    pub fn new(params: ModelParams, config: ModelConfig, norm: NormStats, graphs: &TriGraph) -> Result<Self> {
        if params.d() != config.d {
            return Err(ModelError::Dimension(format!("parameters have d={}, config d={}", params.d(), config.d)));
        }
        Ok(Self { params, config, norm, aggr: Aggregators::new(graphs, config.aggregation) })
    }

    pub fn n_stations(&self) -> usize {
        self.aggr.n_stations()
    }

    pub fn aggregators(&self) -> &Aggregators {
        &self.aggr
    }

    /// Predictions at `times` given raw observations, with optional raw
    /// observations injected at target times.
    pub fn predict(&self, obs: &SeriesWindow, times: &[f64], available: &[Option<Tensor>]) -> Result<Vec<Tensor>> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        if obs.n_stations().is_some_and(|n| n != self.n_stations()) {
            return Err(ModelError::Dimension(format!("observations cover {:?} stations, graphs {}", obs.n_stations(), self.n_stations())));
        }
        let mut g = Graph::new();
        let net = Net::bind(&mut g, &self.params, &self.aggr, self.config)?;
        let normalized = self.norm.apply_window(obs);
        let avail: Vec<Option<Tensor>> = available.iter().map(|a| a.as_ref().map(|t| self.norm.apply(t))).collect();
        let enc = net.encode(&mut g, &normalized)?;
        let preds = net.decode(&mut g, enc, times, &avail)?;
        Ok(preds.into_iter().map(|y| self.norm.invert(g.value(y))).collect())
    }

    /// Encode then free-run decode; output in original units.
    pub fn forecast(&self, obs: &SeriesWindow, horizon_times: &[f64]) -> Result<Vec<Tensor>> {
        self.predict(obs, horizon_times, &[])
    }
}
