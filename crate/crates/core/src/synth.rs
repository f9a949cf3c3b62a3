//! Seeded synthetic ridership with known structure.
//!
//! Latent per-station intensities diffuse over a random connected network
//! while a daily two-harmonic pattern drives them; counts are Poisson draws
//! of a jittered intensity. Everything flows from one seed.

use std::collections::{BTreeSet, VecDeque};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};

use crate::data::{BinGrid, DataError, Series};
use crate::graph::{build_correlation, build_physical, build_similarity, zscore_per_station, GraphError, Selection, TriGraph};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("need at least 2 stations and 1 day")]
    TooSmall,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub days: usize,
    pub seed: u64,
    pub interval_minutes: u32,
    pub first_day: NaiveDate,
    /// Mean intensity per bin.
    pub base: f64,
    /// Scale of the driving terms; zero leaves pure diffusion.
    pub forcing: f64,
    /// Log-scale standard deviation of multiplicative jitter.
    pub noise: f64,
    /// Diffusion rate per interval.
    pub kappa: f64,
    /// Spread of the initial state around equilibrium, relative to `base`.
    pub init_spread: f64,
    /// Fraction of days (floored) used for the similarity and OD graphs.
    pub train_fraction: f64,
}

impl SynthConfig {
    pub fn new(n_stations: usize, days: usize, seed: u64) -> Self {
        Self {
            n_stations,
            days,
            seed,
            interval_minutes: 15,
            first_day: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            base: 100.0,
            forcing: 1.0,
            noise: 0.05,
            kappa: 0.05,
            init_spread: 0.0,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub pairs: Vec<(usize, usize)>,
    pub graphs: TriGraph,
    /// Observed counts.
    pub series: Series,
    /// Expected intensity before jitter and sampling.
    pub intensity: Series,
    pub od: Tensor,
    pub train_days: usize,
}

const SUBSTEPS: usize = 4;
const SECOND_HARMONIC: f64 = 0.8;
const PATTERN_SCALE: f64 = 0.35;

fn random_network<R: Rng>(n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        set.insert((j, i));
    }
    let extra = n / 4;
    let mut tries = 0;
    while set.len() < n - 1 + extra && tries < 100 * n {
        tries += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            set.insert((a.min(b), a.max(b)));
        }
    }
    set.into_iter().collect()
}

fn hop_distances(pairs: &[(usize, usize)], n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in pairs {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|s| {
            let mut dist = vec![usize::MAX; n];
            dist[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

fn laplacian(pairs: &[(usize, usize)], n: usize) -> Tensor {
    let mut l = Tensor::zeros(n, n);
    for &(a, b) in pairs {
        l.set(a, b, l.get(a, b) - 1.0);
        l.set(b, a, l.get(b, a) - 1.0);
        l.set(a, a, l.get(a, a) + 1.0);
        l.set(b, b, l.get(b, b) + 1.0);
    }
    l
}

struct Pattern {
    omega: f64,
    amp: Vec<f64>,
    phase: Vec<[f64; 2]>,
}

impl Pattern {
    fn value(&self, i: usize, c: usize, t: f64) -> f64 {
        let th = self.omega * t + self.phase[i][c];
        self.amp[i] * (-th.cos() - SECOND_HARMONIC * (2.0 * th).cos())
    }

    fn derivative(&self, i: usize, c: usize, t: f64) -> f64 {
        let th = self.omega * t + self.phase[i][c];
        self.amp[i] * self.omega * (th.sin() + 2.0 * SECOND_HARMONIC * (2.0 * th).sin())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    let n = cfg.n_stations;
    if n < 2 || cfg.days == 0 {
        return Err(SynthError::TooSmall);
    }
    for (v, name) in [(cfg.base, "base"), (cfg.forcing, "forcing"), (cfg.noise, "noise"), (cfg.kappa, "kappa"), (cfg.init_spread, "init_spread")] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(SynthError::Param(format!("{name} must be finite and non-negative")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (start, end) = BinGrid::default_service();
    let grid = BinGrid::new(cfg.first_day, cfg.days, cfg.interval_minutes, start, end)?;
    let bins = grid.bins_per_day();

    let pairs = random_network(n, &mut rng);
    let lap = laplacian(&pairs, n);
    let size: Vec<f64> = (0..n).map(|_| rng.random_range(0.4..1.6)).collect();
    let mean_size = size.iter().sum::<f64>() / n as f64;
    let rel: Vec<f64> = size.iter().map(|s| s / mean_size).collect();
    let lag = 2.0 * std::f64::consts::PI * 2.0 / bins as f64;
    let pattern = Pattern {
        omega: 2.0 * std::f64::consts::PI / bins as f64,
        amp: rel.iter().map(|r| PATTERN_SCALE * cfg.base * r).collect(),
        phase: (0..n)
            .map(|_| {
                let p = rng.random_range(-0.3..0.3);
                [p, p - lag]
            })
            .collect(),
    };
    let level: Vec<f64> = rel.iter().map(|r| cfg.base * (r - 1.0)).collect();
    let spread: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * cfg.init_spread * cfg.base).collect();

    // deviation w from the base level: dw/dt = −κLw + A(κL·level + ṗ(t))
    let pull = lap.matmul(&Tensor::new(n, 1, level.clone()).expect("column")).scale(cfg.kappa);
    let mut w = Tensor::zeros(n, 2);
    for i in 0..n {
        for c in 0..2 {
            w.set(i, c, cfg.forcing * (level[i] + pattern.value(i, c, 0.0)) + spread[i]);
        }
    }
    let h = 1.0 / SUBSTEPS as f64;
    let mut intensity = Series::zeros(grid, n);
    let mut series = Series::zeros(grid, n);
    let jitter = (cfg.noise > 0.0).then(|| LogNormal::new(0.0, cfg.noise).expect("valid sigma"));
    for d in 0..cfg.days {
        for b in 0..bins {
            let t0 = (d * bins + b) as f64;
            let lam = w.map(|x| (cfg.base + x).max(0.0));
            let mut counts = Tensor::zeros(n, 2);
            for i in 0..n {
                for c in 0..2 {
                    let mut rate = lam.get(i, c);
                    if let Some(j) = &jitter {
                        rate *= j.sample(&mut rng);
                    }
                    let k = if rate > 0.0 { Poisson::new(rate).expect("positive rate").sample(&mut rng) } else { 0.0 };
                    counts.set(i, c, k);
                }
            }
            intensity.days[d][b] = lam;
            series.days[d][b] = counts;
            for s in 0..SUBSTEPS {
                let t = t0 + s as f64 * h;
                let diff = lap.matmul(&w).scale(-cfg.kappa);
                for i in 0..n {
                    for c in 0..2 {
                        let drive = cfg.forcing * (pull.get(i, 0) + pattern.derivative(i, c, t));
                        w.set(i, c, w.get(i, c) + h * (diff.get(i, c) + drive));
                    }
                }
            }
        }
    }

    let train_days = ((cfg.days as f64 * cfg.train_fraction).floor() as usize).clamp(1, cfg.days);
    let hops = hop_distances(&pairs, n);
    let train_total: f64 = series.days[..train_days].iter().flatten().map(|f| (0..n).map(|i| f.get(i, 0)).sum::<f64>()).sum();
    let mut gravity = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                gravity.set(i, j, size[i] * size[j] * (-(hops[i][j] as f64) / 2.0).exp());
            }
        }
    }
    let od = gravity.scale(train_total / gravity.sum()).map(f64::round);

    let train_series: Vec<Vec<[f64; 2]>> = (0..n).map(|i| series.sub_days(0, train_days).station_points(i)).collect();
    let k = 3.min(n - 1);
    let graphs = TriGraph::new(
        build_physical(&pairs, n)?,
        build_similarity(&zscore_per_station(&train_series), Selection::TopK(k), None)?,
        build_correlation(&od, Selection::Threshold(0.02))?,
    )?;
    Ok(SynthData { pairs, graphs, series, intensity, od, train_days })
}
