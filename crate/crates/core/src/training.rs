//! Normalization, loss, Adam and the epoch loop with plateau decay and early
//! stopping on validation error.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{day_windows, irregular_sample, make_windows, DataError, Series, SeriesWindow, Splits, WindowPair};
use crate::diff::{DiffError, Graph};
use crate::graph::TriGraph;
use crate::model::{Aggregators, ModelConfig, ModelError, ModelParams, Net, PARAM_NAMES};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Config(String),
    #[error("no {0} windows")]
    NoWindows(&'static str),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, best: Box<TrainOutcome> },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Per-channel Z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl NormStats {
    /// Population mean and standard deviation over every frame and station.
    pub fn fit(series: &Series) -> Result<Self> {
        Self::fit_frames(series.frames())
    }

    pub fn fit_frames<'a>(frames: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 2];
        let frames: Vec<&Tensor> = frames.into_iter().collect();
        for f in &frames {
            for r in 0..f.rows() {
                sum[0] += f.get(r, 0);
                sum[1] += f.get(r, 1);
                n += 1;
            }
        }
        if n == 0 {
            return Err(TrainError::Config("cannot fit normalization on empty data".into()));
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        let mut sq = [0.0; 2];
        for f in &frames {
            for r in 0..f.rows() {
                sq[0] += (f.get(r, 0) - mean[0]).powi(2);
                sq[1] += (f.get(r, 1) - mean[1]).powi(2);
            }
        }
        Ok(Self { mean, std: [(sq[0] / n as f64).sqrt(), (sq[1] / n as f64).sqrt()] })
    }

    pub fn identity() -> Self {
        Self { mean: [0.0; 2], std: [1.0; 2] }
    }

    fn scale(&self, c: usize) -> f64 {
        self.std[c].max(STD_FLOOR)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let cols = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = k % cols;
            *v = (*v - self.mean[c]) / self.scale(c);
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let cols = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = k % cols;
            *v = *v * self.scale(c) + self.mean[c];
        }
        out
    }

    pub fn apply_window(&self, w: &SeriesWindow) -> SeriesWindow {
        w.map_values(|t| self.apply(t))
    }
}

/// Mean of `|pred − target|` over all entries.
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if !pred.same_shape(target) || pred.is_empty() {
        return Err(TrainError::Shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. `grads` follows parameter order; the step
/// is rejected as a whole when any gradient entry is non-finite.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != PARAM_NAMES.len() {
        return Err(TrainError::Shape(format!("{} gradients for {} parameters", grads.len(), PARAM_NAMES.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(TrainError::Shape(format!("gradient of {name} is {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((w, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub max_decays: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub n_in: usize,
    pub n_out: usize,
    /// When non-zero, the training set also holds one irregular sample of
    /// `n_in` observations and `n_out` targets from every run of this many
    /// consecutive bins, so the dynamics see gaps longer than one bin.
    pub irregular_span: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.1,
            max_decays: 2,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            n_in: 4,
            n_out: 4,
            irregular_span: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.model.d == 0 {
            return bad("d must be positive");
        }
        if self.model.n_intermediate == 0 {
            return bad("n_intermediate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr must be positive and lr_decay in (0, 1]");
        }
        if self.n_in == 0 || self.n_out == 0 {
            return bad("n_in and n_out must be at least 1");
        }
        if self.irregular_span != 0 && self.irregular_span <= self.n_in + self.n_out {
            return bad("irregular_span must be 0 or exceed n_in + n_out");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub norm: NormStats,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainOutcome {
    /// `epoch train_mae val_mae lr`, one line per epoch.
    pub fn log_text(&self) -> String {
        render_log(&self.history)
    }
}

pub fn render_log(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        let _ = writeln!(s, "{} {:.10e} {:.10e} {:.10e}", r.epoch, r.train_mae, r.val_mae, r.lr);
    }
    s
}

/// A window with normalized observations and targets.
#[derive(Debug, Clone)]
pub struct TrainWindow {
    pub observed: SeriesWindow,
    pub target: SeriesWindow,
}

pub fn normalize_windows(pairs: &[WindowPair], norm: &NormStats) -> Vec<TrainWindow> {
    pairs.iter().map(|p| TrainWindow { observed: norm.apply_window(&p.observed), target: norm.apply_window(&p.target) }).collect()
}

/// Loss and per-parameter gradients of one window.
pub fn window_gradient(params: &ModelParams, aggr: &Aggregators, config: ModelConfig, w: &TrainWindow) -> std::result::Result<(f64, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, params, aggr, config)?;
    let loss = net.window_loss(&mut g, &w.observed, &w.target)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let ordered = PARAM_NAMES.iter().map(|n| grads.remove(*n).expect("every parameter has a gradient")).collect();
    Ok((value, ordered))
}

pub fn window_loss_value(params: &ModelParams, aggr: &Aggregators, config: ModelConfig, w: &TrainWindow) -> std::result::Result<f64, ModelError> {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, params, aggr, config)?;
    let loss = net.window_loss(&mut g, &w.observed, &w.target)?;
    Ok(g.value(loss).item())
}

/// Mean window loss; windows evaluated in parallel, summed in order.
pub fn mean_loss(params: &ModelParams, aggr: &Aggregators, config: ModelConfig, windows: &[TrainWindow]) -> std::result::Result<f64, ModelError> {
    let losses: Vec<f64> = windows.par_iter().map(|w| window_loss_value(params, aggr, config, w)).collect::<std::result::Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss and gradient over a minibatch.
pub fn batch_gradient(params: &ModelParams, aggr: &Aggregators, config: ModelConfig, batch: &[&TrainWindow]) -> std::result::Result<(f64, Vec<Tensor>), ModelError> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch.par_iter().map(|w| window_gradient(params, aggr, config, w)).collect::<std::result::Result<_, _>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    Ok((loss * scale, grads.into_iter().map(|g| g.scale(scale)).collect()))
}

/// Irregular training samples, drawn once from a stream seeded apart from
/// the shuffling one.
pub fn irregular_windows(series: &Series, config: &TrainConfig) -> Result<Vec<TrainWindow>> {
    if config.irregular_span == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    day_windows(series, config.irregular_span)
        .iter()
        .map(|w| {
            let s = irregular_sample(&w.window, config.n_in, config.n_out, false, &mut rng)?;
            Ok(TrainWindow { observed: s.observed, target: s.target })
        })
        .collect()
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Diff(DiffError::NonFinite { .. }))
}

/// Trains from a seeded initialization. Normalization is fitted on the
/// training split only.
pub fn fit(splits: &Splits, graphs: &TriGraph, config: &TrainConfig) -> Result<TrainOutcome> {
    fit_with(splits, graphs, config, |_| {})
}

/// As [`fit`], calling `on_epoch` after every epoch.
pub fn fit_with(splits: &Splits, graphs: &TriGraph, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if graphs.n_stations() != splits.train.n_stations {
        return Err(TrainError::Config(format!("graphs cover {} stations, series {}", graphs.n_stations(), splits.train.n_stations)));
    }
    let norm = NormStats::fit(&splits.train)?;
    let mut train = normalize_windows(&make_windows(&splits.train, config.n_in, config.n_out)?, &norm);
    train.extend(irregular_windows(&splits.train, config)?.iter().map(|w| TrainWindow { observed: norm.apply_window(&w.observed), target: norm.apply_window(&w.target) }));
    let val = normalize_windows(&make_windows(&splits.val, config.n_in, config.n_out)?, &norm);
    if train.is_empty() {
        return Err(TrainError::NoWindows("training"));
    }
    if val.is_empty() {
        return Err(TrainError::NoWindows("validation"));
    }
    let aggr = Aggregators::new(graphs, config.model.aggregation);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.model.d, config.seed);
    let mut adam = AdamState::new(&params);
    let mut lr = config.lr;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = TrainOutcome { params: params.clone(), norm, best_epoch: 0, best_val_mae: f64::INFINITY, history: Vec::new(), stop: StopReason::MaxEpochs };
    let mut since_best = 0;
    let mut decays = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let step = batch_gradient(&params, &aggr, config.model, &batch).map_err(TrainError::from).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteGradient("loss".into()));
                }
                adam_step(&mut params, &grads, &mut adam, lr)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(TrainError::NonFiniteGradient(_)) => return Err(TrainError::Diverged { epoch, best: Box::new(best) }),
                Err(TrainError::Model(e)) if is_divergence(&e) => return Err(TrainError::Diverged { epoch, best: Box::new(best) }),
                Err(e) => return Err(e),
            }
        }
        let val_mae = match mean_loss(&params, &aggr, config.model, &val) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(TrainError::Diverged { epoch, best: Box::new(best) }),
            Err(e) if is_divergence(&e) => return Err(TrainError::Diverged { epoch, best: Box::new(best) }),
            Err(e) => return Err(e.into()),
        };
        let record = EpochRecord { epoch, train_mae: total / train.len() as f64, val_mae, lr };
        best.history.push(record);
        on_epoch(&record);

        if val_mae < best.best_val_mae {
            best.best_val_mae = val_mae;
            best.best_epoch = epoch;
            best.params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                if decays < config.max_decays {
                    lr *= config.lr_decay;
                    decays += 1;
                    since_best = 0;
                } else {
                    best.stop = StopReason::Plateau;
                    break;
                }
            }
        }
    }
    Ok(best)
}

/// Adam on a single window, returning the loss before every step and the
/// loss after the last one. The rate drops by `lr_decay` whenever the loss
/// has not improved for `patience` steps, at most `max_decays` times.
pub fn overfit_window(params: &mut ModelParams, aggr: &Aggregators, config: ModelConfig, window: &TrainWindow, steps: usize, schedule: OverfitSchedule) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(params);
    let mut losses = Vec::with_capacity(steps + 1);
    let (mut lr, mut best, mut stale, mut decays) = (schedule.lr, f64::INFINITY, 0, 0);
    for _ in 0..steps {
        let (loss, grads) = window_gradient(params, aggr, config, window)?;
        losses.push(loss);
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience && decays < schedule.max_decays {
                lr *= schedule.lr_decay;
                decays += 1;
                stale = 0;
            }
        }
        adam_step(params, &grads, &mut adam, lr)?;
    }
    losses.push(window_loss_value(params, aggr, config, window)?);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverfitSchedule {
    pub lr: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub max_decays: usize,
}

impl OverfitSchedule {
    /// Constant rate.
    pub fn constant(lr: f64) -> Self {
        OverfitSchedule { lr, lr_decay: 1.0, patience: usize::MAX, max_decays: 0 }
    }
}

impl Default for OverfitSchedule {
    fn default() -> Self {
        OverfitSchedule { lr: 2e-2, lr_decay: 0.1, patience: 50, max_decays: 2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, NaiveTime};
    use proptest::prelude::*;

    use crate::data::BinGrid;

    #[test]
    fn zscore_examples() {
        let frames = [Tensor::from_rows(&[[0.0, 5.0]]), Tensor::from_rows(&[[2.0, 5.0]])];
        let n = NormStats::fit_frames(&frames).unwrap();
        assert_eq!(n.mean, [1.0, 5.0]);
        assert_eq!(n.std, [1.0, 0.0]);
        assert_eq!(n.apply(&frames[0]).data(), &[-1.0, 0.0]);
        assert_eq!(n.apply(&frames[1]).data(), &[1.0, 0.0]);
        assert!(NormStats::fit_frames(std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn zscore_round_trip(data in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let n = data.len() / 2;
            let t = Tensor::new(n, 2, data[..2 * n].to_vec()).unwrap();
            let s = NormStats::fit_frames([&t]).unwrap();
            let back = s.invert(&s.apply(&t));
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn mae_examples() {
        let p = Tensor::row_vector(&[0.0, 2.0]);
        let t = Tensor::row_vector(&[1.0, 3.0]);
        assert_eq!(mae_loss(&p, &t).unwrap(), 1.0);
        assert_eq!(mae_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mae_loss(&p.scale(-3.0), &t.scale(-3.0)).unwrap(), 3.0);
        assert!(mae_loss(&p, &Tensor::zeros(2, 1)).is_err());
    }

    fn single_param_set() -> ModelParams {
        ModelParams::init(2, 0)
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut p = single_param_set();
        let before = p.clone();
        let mut grads: Vec<Tensor> = p.iter().map(|(_, t)| Tensor::filled(t.rows(), t.cols(), 1.0)).collect();
        grads[0] = grads[0].map(|_| -2.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, 0.01).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(before.iter()).take(2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((x - y).abs() - 0.01).abs() < 1e-8);
            }
        }
        assert!(p.get("theta0").unwrap().data().iter().zip(before.get("theta0").unwrap().data()).all(|(x, y)| x > y));
    }

    #[test]
    fn adam_zero_gradient_and_rejection() {
        let mut p = single_param_set();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros: Vec<Tensor> = p.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        adam_step(&mut p, &zeros, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        let mut bad = zeros.clone();
        bad[3].data_mut()[0] = f64::NAN;
        let st_before = st.clone();
        assert!(matches!(adam_step(&mut p, &bad, &mut st, 0.1), Err(TrainError::NonFiniteGradient(n)) if n == "theta_correlation"));
        assert_eq!(p, before);
        assert_eq!(st, st_before);
    }

    #[test]
    fn adam_quadratic_bowl() {
        // f(w) = w² on the first entry of theta0
        let mut p = ModelParams::zeros(1);
        p.get_mut("theta0").unwrap().data_mut()[0] = 1.0;
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let w = p.get("theta0").unwrap().item();
            let grads: Vec<Tensor> = p.iter().map(|(n, t)| if n == "theta0" { Tensor::scalar(2.0 * w) } else { Tensor::zeros(t.rows(), t.cols()) }).collect();
            adam_step(&mut p, &grads, &mut st, 0.1).unwrap();
        }
        assert!(p.get("theta0").unwrap().item().abs() < 1e-2);
    }

    fn toy_series(days: usize, n: usize) -> Series {
        let grid = BinGrid::new(
            NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            days,
            15,
            NaiveTime::from_hms_opt(7, 0, 0).unwrap(),
            NaiveTime::from_hms_opt(10, 0, 0).unwrap(),
        )
        .unwrap();
        let mut s = Series::zeros(grid, n);
        for (d, day) in s.days.iter_mut().enumerate() {
            for (b, f) in day.iter_mut().enumerate() {
                for i in 0..n {
                    let x = (b as f64 * 0.5 + i as f64).sin() * 10.0 + 20.0 + d as f64;
                    f.set(i, 0, x);
                    f.set(i, 1, x * 0.5 + 3.0);
                }
            }
        }
        s
    }

    fn toy_graphs(n: usize) -> TriGraph {
        use crate::graph::{build_physical, RelationGraph, RelationKind};
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        TriGraph::new(
            build_physical(&pairs, n).unwrap(),
            RelationGraph::new(RelationKind::Similarity, n, vec![]).unwrap(),
            RelationGraph::new(RelationKind::Correlation, n, vec![]).unwrap(),
        )
        .unwrap()
    }

    fn toy_splits() -> Splits {
        crate::data::split_dataset(&toy_series(4, 3), crate::data::SplitSpec { train_days: 2, val_days: 1, test_days: 1 }).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { model: ModelConfig { d: 4, n_intermediate: 1, ..Default::default() }, max_epochs: 4, patience: 1, lr: 0.01, ..Default::default() }
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let (s, g) = (toy_splits(), toy_graphs(3));
        let a = fit(&s, &g, &quick_config()).unwrap();
        let b = fit(&s, &g, &quick_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_text().lines().count(), a.history.len());
        let lrs: Vec<f64> = a.history.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let mut distinct = lrs.clone();
        distinct.dedup();
        assert!(distinct.len() <= 3);
        assert_eq!(a.best_val_mae, a.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn fit_norm_ignores_test_split() {
        let g = toy_graphs(3);
        let mut s = toy_splits();
        let a = fit(&s, &g, &TrainConfig { max_epochs: 1, ..quick_config() }).unwrap();
        for f in s.test.days.iter_mut().flatten() {
            *f = f.scale(100.0);
        }
        let b = fit(&s, &g, &TrainConfig { max_epochs: 1, ..quick_config() }).unwrap();
        assert_eq!(a.norm, b.norm);
    }

    #[test]
    fn fit_rejects_empty_validation() {
        let g = toy_graphs(3);
        let mut s = toy_splits();
        s.val.days.clear();
        assert!(matches!(fit(&s, &g, &quick_config()), Err(TrainError::NoWindows("validation"))));
    }

    #[test]
    fn fit_plateau_stop() {
        let (s, g) = (toy_splits(), toy_graphs(3));
        let cfg = TrainConfig { max_epochs: 60, patience: 1, lr: 1e-300, ..quick_config() };
        let out = fit(&s, &g, &cfg).unwrap();
        assert_eq!(out.stop, StopReason::Plateau);
        assert!(out.history.len() < 60);
    }

    #[test]
    fn fit_divergence_returns_best() {
        let (s, g) = (toy_splits(), toy_graphs(3));
        let cfg = TrainConfig { lr: 1e200, max_epochs: 5, ..quick_config() };
        match fit(&s, &g, &cfg) {
            Err(TrainError::Diverged { best, .. }) => assert!(best.params.iter().all(|(_, t)| t.is_finite())),
            Ok(out) => assert!(out.params.iter().all(|(_, t)| t.is_finite())),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
