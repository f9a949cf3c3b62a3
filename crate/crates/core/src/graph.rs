//! Station relation graphs: physical topology, series similarity and
//! origin-destination correlation.
//!
//! Each graph is a row-normalized weighted edge list. Rows with at least one
//! outgoing edge sum to one; stations without edges have empty rows.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::tensor::Tensor;

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("station index {index} out of range for {n} stations")]
    StationOutOfRange { index: usize, n: usize },
    #[error("self-loop on station {0} in physical graph")]
    SelfLoop(usize),
    #[error("empty series")]
    EmptySeries,
    #[error("series lengths differ: station {station} has {len} points, expected {expected}")]
    UnequalSeries { station: usize, len: usize, expected: usize },
    #[error("top_k requires 1 <= k < n (k = {k}, n = {n})")]
    BadTopK { k: usize, n: usize },
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("negative OD count {value} at ({i}, {j})")]
    NegativeCount { i: usize, j: usize, value: f64 },
    #[error("OD matrix must be {n}x{n}")]
    OdShape { n: usize },
    #[error("graphs disagree on station count: {0:?}")]
    StationCountMismatch([usize; 3]),
    #[error("invalid edge ({i}, {j}, {weight})")]
    BadEdge { i: usize, j: usize, weight: f64 },
    #[error("row {row} sums to {sum}")]
    RowSum { row: usize, sum: f64 },
    #[error("graph file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    Physical,
    Similarity,
    Correlation,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::Physical, RelationKind::Similarity, RelationKind::Correlation];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Physical => "physical",
            RelationKind::Similarity => "similarity",
            RelationKind::Correlation => "correlation",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physical" => Ok(RelationKind::Physical),
            "similarity" => Ok(RelationKind::Similarity),
            "correlation" => Ok(RelationKind::Correlation),
            other => Err(format!("unknown graph kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    n_stations: usize,
    kind: RelationKind,
    edges: Vec<Edge>,
}

/// Edge selection rule for the similarity and correlation graphs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Threshold(f64),
    TopK(usize),
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Threshold(t) => write!(f, "threshold:{t}"),
            Selection::TopK(k) => write!(f, "top_k:{k}"),
        }
    }
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (rule, arg) = s.split_once(':').ok_or_else(|| format!("selection `{s}` is not `threshold:<x>` or `top_k:<k>`"))?;
        match rule {
            "threshold" => arg.parse().map(Selection::Threshold).map_err(|e| format!("threshold `{arg}`: {e}")),
            "top_k" => arg.parse().map(Selection::TopK).map_err(|e| format!("top_k `{arg}`: {e}")),
            other => Err(format!("unknown selection rule `{other}`")),
        }
    }
}

impl RelationGraph {
    /// Validates and wraps an edge list. Edges are sorted by `(from, to)`.
    pub fn new(kind: RelationKind, n_stations: usize, mut edges: Vec<Edge>) -> Result<Self, GraphError> {
        for e in &edges {
            if e.from >= n_stations || e.to >= n_stations {
                return Err(GraphError::StationOutOfRange { index: e.from.max(e.to), n: n_stations });
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(GraphError::BadEdge { i: e.from, j: e.to, weight: e.weight });
            }
            if kind == RelationKind::Physical && e.from == e.to {
                return Err(GraphError::SelfLoop(e.from));
            }
        }
        edges.sort_by_key(|e| (e.from, e.to));
        if let Some(w) = edges.windows(2).find(|w| (w[0].from, w[0].to) == (w[1].from, w[1].to)) {
            return Err(GraphError::BadEdge { i: w[1].from, j: w[1].to, weight: w[1].weight });
        }
        let g = Self { n_stations, kind, edges };
        for (row, sum) in g.row_sums().into_iter().enumerate() {
            if let Some(sum) = sum {
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(GraphError::RowSum { row, sum });
                }
            }
        }
        Ok(g)
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn kind(&self) -> RelationKind {
        self.kind
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges.iter().find(|e| e.from == i && e.to == j).map_or(0.0, |e| e.weight)
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.from == i).count()
    }

    /// Per-row weight sums; `None` for rows without edges.
    pub fn row_sums(&self) -> Vec<Option<f64>> {
        let mut sums = vec![None; self.n_stations];
        for e in &self.edges {
            *sums[e.from].get_or_insert(0.0) += e.weight;
        }
        sums
    }

    /// Dense `N x N` weight matrix.
    pub fn weight_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.n_stations, self.n_stations);
        for e in &self.edges {
            m.set(e.from, e.to, e.weight);
        }
        m
    }

    /// Dense `N x N` neighbor-mean operator: `1/|N(i)|` for every neighbor `j` of `i`.
    pub fn mean_aggregator(&self) -> Tensor {
        let mut m = Tensor::zeros(self.n_stations, self.n_stations);
        for e in &self.edges {
            m.set(e.from, e.to, 1.0 / self.out_degree(e.from) as f64);
        }
        m
    }

    /// Relabels stations: old station `i` becomes `relabel[i]`.
    pub fn relabeled(&self, relabel: &[usize]) -> Self {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { from: relabel[e.from], to: relabel[e.to], weight: e.weight })
            .collect();
        Self::new(self.kind, self.n_stations, edges).expect("relabeling preserves invariants")
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "strgode-graph v1 {} {}", self.kind, self.n_stations)?;
        for e in &self.edges {
            writeln!(w, "{} {} {:.16e}", e.from, e.to, e.weight)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, GraphError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(GraphError::Parse { line: 1, msg: "empty file".into() })??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || GraphError::Parse { line: 1, msg: format!("bad header `{header}`") };
        if parts.len() != 4 || parts[0] != "strgode-graph" || parts[1] != "v1" {
            return Err(bad_header());
        }
        let kind: RelationKind = parts[2].parse().map_err(|msg| GraphError::Parse { line: 1, msg })?;
        let n: usize = parts[3].parse().map_err(|_| bad_header())?;
        let mut edges = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            let lineno = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| GraphError::Parse { line: lineno, msg: format!("{msg}: `{line}`") };
            if f.len() != 3 {
                return Err(err("expected `i j weight`"));
            }
            edges.push(Edge {
                from: f[0].parse().map_err(|_| err("bad station index"))?,
                to: f[1].parse().map_err(|_| err("bad station index"))?,
                weight: f[2].parse().map_err(|_| err("bad weight"))?,
            });
        }
        Self::new(kind, n, edges)
    }
}

/// The three relation graphs over one station set.
#[derive(Debug, Clone, PartialEq)]
pub struct TriGraph {
    pub physical: RelationGraph,
    pub similarity: RelationGraph,
    pub correlation: RelationGraph,
}

impl TriGraph {
    pub fn new(physical: RelationGraph, similarity: RelationGraph, correlation: RelationGraph) -> Result<Self, GraphError> {
        let ns = [physical.n_stations, similarity.n_stations, correlation.n_stations];
        if ns[0] != ns[1] || ns[0] != ns[2] {
            return Err(GraphError::StationCountMismatch(ns));
        }
        Ok(Self { physical, similarity, correlation })
    }

    pub fn n_stations(&self) -> usize {
        self.physical.n_stations
    }

    pub fn relations(&self) -> [&RelationGraph; 3] {
        [&self.physical, &self.similarity, &self.correlation]
    }

    pub fn relabeled(&self, relabel: &[usize]) -> Self {
        Self {
            physical: self.physical.relabeled(relabel),
            similarity: self.similarity.relabeled(relabel),
            correlation: self.correlation.relabeled(relabel),
        }
    }
}

/// Physical graph from undirected station pairs; each row is normalized by
/// the station's degree. Duplicate pairs collapse into one edge.
pub fn build_physical(pairs: &[(usize, usize)], n: usize) -> Result<RelationGraph, GraphError> {
    let mut adj = vec![vec![false; n]; n];
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(GraphError::StationOutOfRange { index: i.max(j), n });
        }
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        adj[i][j] = true;
        adj[j][i] = true;
    }
    let mut edges = Vec::new();
    for (i, row) in adj.iter().enumerate() {
        let deg = row.iter().filter(|&&b| b).count();
        for (j, _) in row.iter().enumerate().filter(|(_, &b)| b) {
            edges.push(Edge { from: i, to: j, weight: 1.0 / deg as f64 });
        }
    }
    RelationGraph::new(RelationKind::Physical, n, edges)
}

/// Dynamic time warping distance between two series of `(inflow, outflow)`
/// points, Euclidean local cost, unconstrained steps.
pub fn dtw_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, GraphError> {
    dtw_distance_banded(a, b, None)
}

/// As [`dtw_distance`], optionally restricted to cells with `|u − v| <= band`.
///
/// The band is widened to at least `|len(a) − len(b)|` so that a path exists.
pub fn dtw_distance_banded(a: &[[f64; 2]], b: &[[f64; 2]], band: Option<usize>) -> Result<f64, GraphError> {
    if a.is_empty() || b.is_empty() {
        return Err(GraphError::EmptySeries);
    }
    let (n, m) = (a.len(), b.len());
    let band = band.map(|w| w.max(n.abs_diff(m)));
    let cost = |u: usize, v: usize| {
        let dx = a[u][0] - b[v][0];
        let dy = a[u][1] - b[v][1];
        (dx * dx + dy * dy).sqrt()
    };
    let inf = f64::INFINITY;
    let mut prev = vec![inf; m];
    let mut cur = vec![inf; m];
    for u in 0..n {
        let (lo, hi) = match band {
            Some(w) => (u.saturating_sub(w), (u + w + 1).min(m)),
            None => (0, m),
        };
        cur.iter_mut().for_each(|c| *c = inf);
        for v in lo..hi {
            let best = if u == 0 && v == 0 {
                0.0
            } else {
                let up = if u > 0 { prev[v] } else { inf };
                let left = if v > 0 { cur[v - 1] } else { inf };
                let diag = if u > 0 && v > 0 { prev[v - 1] } else { inf };
                up.min(left).min(diag)
            };
            cur[v] = cost(u, v) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Z-scores each station's inflow and outflow channels independently.
pub fn zscore_per_station(series: &[Vec<[f64; 2]>]) -> Vec<Vec<[f64; 2]>> {
    series
        .iter()
        .map(|s| {
            let n = s.len().max(1) as f64;
            let mut mean = [0.0; 2];
            for p in s {
                mean[0] += p[0] / n;
                mean[1] += p[1] / n;
            }
            let mut var = [0.0; 2];
            for p in s {
                var[0] += (p[0] - mean[0]).powi(2) / n;
                var[1] += (p[1] - mean[1]).powi(2) / n;
            }
            let sd = [var[0].sqrt().max(1e-8), var[1].sqrt().max(1e-8)];
            s.iter().map(|p| [(p[0] - mean[0]) / sd[0], (p[1] - mean[1]) / sd[1]]).collect()
        })
        .collect()
}

/// Symmetric matrix of pairwise DTW distances (zero diagonal).
pub fn dtw_matrix(series: &[Vec<[f64; 2]>], band: Option<usize>) -> Result<Vec<Vec<f64>>, GraphError> {
    let n = series.len();
    if let Some(first) = series.first() {
        if first.is_empty() {
            return Err(GraphError::EmptySeries);
        }
        if let Some((station, s)) = series.iter().enumerate().find(|(_, s)| s.len() != first.len()) {
            return Err(GraphError::UnequalSeries { station, len: s.len(), expected: first.len() });
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance_banded(&series[i], &series[j], band))
        .collect::<Result<_, _>>()?;
    let mut out = vec![vec![0.0; n]; n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        out[i][j] = d;
        out[j][i] = d;
    }
    Ok(out)
}

/// Similarity graph with `S(i,j) = exp(−dtw(i,j))`.
///
/// Row weights are `S(i,j)` normalized over the selected edges of row `i`,
/// evaluated as a shifted softmax of `−dtw` so long series do not underflow.
pub fn build_similarity(series: &[Vec<[f64; 2]>], selection: Selection, band: Option<usize>) -> Result<RelationGraph, GraphError> {
    let dist = dtw_matrix(series, band)?;
    similarity_from_distances(&dist, selection)
}

pub fn similarity_from_distances(dist: &[Vec<f64>], selection: Selection) -> Result<RelationGraph, GraphError> {
    let n = dist.len();
    check_selection(selection, n)?;
    let mut edges = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let chosen: Vec<usize> = match selection {
            Selection::Threshold(tau) => cand.into_iter().filter(|&j| (-row[j]).exp() >= tau).collect(),
            Selection::TopK(k) => {
                // ascending distance == descending similarity; stable sort keeps lower index first on ties
                cand.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
                cand.truncate(k);
                cand.sort_unstable();
                cand
            }
        };
        if chosen.is_empty() {
            continue;
        }
        let dmin = chosen.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = chosen.iter().map(|&j| (dmin - row[j]).exp()).collect();
        let total: f64 = raw.iter().sum();
        for (&j, r) in chosen.iter().zip(raw) {
            edges.push(Edge { from: i, to: j, weight: (r / total).max(f64::MIN_POSITIVE) });
        }
    }
    RelationGraph::new(RelationKind::Similarity, n, edges)
}

/// Correlation graph from an OD matrix where `od(i,j)` counts trips from
/// station `j` to station `i`.
///
/// `C(i,j) = od(i,j) / Σ_k od(i,k)`; the selection rule is applied to `C`
/// over `j ≠ i` with `C(i,j) > 0`, and the surviving entries are renormalized.
pub fn build_correlation(od: &Tensor, selection: Selection) -> Result<RelationGraph, GraphError> {
    let n = od.rows();
    if od.cols() != n {
        return Err(GraphError::OdShape { n });
    }
    check_selection(selection, n)?;
    for i in 0..n {
        for j in 0..n {
            let v = od.get(i, j);
            if !(v >= 0.0) {
                return Err(GraphError::NegativeCount { i, j, value: v });
            }
        }
    }
    let ratio = correlation_ratios(od);
    let mut edges = Vec::new();
    for i in 0..n {
        let row = ratio.row(i);
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i && row[j] > 0.0).collect();
        let chosen: Vec<usize> = match selection {
            Selection::Threshold(tau) => cand.into_iter().filter(|&j| row[j] >= tau).collect(),
            Selection::TopK(k) => {
                cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                cand.truncate(k);
                cand.sort_unstable();
                cand
            }
        };
        let total: f64 = chosen.iter().map(|&j| row[j]).sum();
        for &j in &chosen {
            edges.push(Edge { from: i, to: j, weight: row[j] / total });
        }
    }
    RelationGraph::new(RelationKind::Correlation, n, edges)
}

/// Row-normalized OD ratios; all-zero rows stay zero.
pub fn correlation_ratios(od: &Tensor) -> Tensor {
    let mut c = od.clone();
    for i in 0..od.rows() {
        let s: f64 = od.row(i).iter().sum();
        for j in 0..od.cols() {
            c.set(i, j, if s > 0.0 { od.get(i, j) / s } else { 0.0 });
        }
    }
    c
}

fn check_selection(selection: Selection, n: usize) -> Result<(), GraphError> {
    match selection {
        Selection::Threshold(t) if !(t > 0.0) => Err(GraphError::BadThreshold(t)),
        Selection::TopK(k) if k == 0 || k >= n => Err(GraphError::BadTopK { k, n }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn physical_path() {
        let g = build_physical(&[(0, 1), (1, 2)], 3).unwrap();
        assert!(close(g.weight(1, 0), 0.5));
        assert!(close(g.weight(1, 2), 0.5));
        assert!(close(g.weight(0, 1), 1.0));
        assert_eq!(g.weight(0, 0), 0.0);
    }

    #[test]
    fn physical_isolated_and_star() {
        let g = build_physical(&[(0, 1), (0, 2), (0, 3), (0, 4)], 6).unwrap();
        for j in 1..5 {
            assert!(close(g.weight(0, j), 0.25));
        }
        assert_eq!(g.out_degree(5), 0);
        assert_eq!(g.row_sums()[5], None);
        assert!(g.mean_aggregator().row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn physical_errors_and_dedup() {
        assert!(matches!(build_physical(&[(0, 3)], 3), Err(GraphError::StationOutOfRange { .. })));
        assert!(matches!(build_physical(&[(1, 1)], 3), Err(GraphError::SelfLoop(1))));
        let g = build_physical(&[(0, 1), (1, 0), (0, 1)], 2).unwrap();
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn dtw_cases() {
        let a = [[0.0, 0.0], [0.0, 0.0]];
        let b = [[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(dtw_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        assert!(matches!(dtw_distance(&[], &a), Err(GraphError::EmptySeries)));
    }

    #[test]
    fn dtw_band_wide_enough_matches_unbanded() {
        let a: Vec<[f64; 2]> = (0..20).map(|i| [(i as f64 * 0.3).sin(), (i as f64).cos()]).collect();
        let b: Vec<[f64; 2]> = (0..17).map(|i| [(i as f64 * 0.35).sin(), (i as f64 * 0.9).cos()]).collect();
        let full = dtw_distance(&a, &b).unwrap();
        assert_eq!(dtw_distance_banded(&a, &b, Some(40)).unwrap(), full);
        assert!(dtw_distance_banded(&a, &b, Some(1)).unwrap() >= full);
    }

    #[test]
    fn similarity_identical_stations() {
        let s = vec![vec![[1.0, 2.0], [3.0, 1.0]]; 2];
        let g = build_similarity(&s, Selection::Threshold(1.0), None).unwrap();
        assert!(close(g.weight(0, 1), 1.0));
        assert!(close(g.weight(1, 0), 1.0));
    }

    #[test]
    fn similarity_only_one_pair_passes() {
        // dtw(0,1)=0.1, dtw(0,2)=dtw(1,2)=5 → only (0,1) has S ≥ 0.5
        let d = vec![vec![0.0, 0.1, 5.0], vec![0.1, 0.0, 5.0], vec![5.0, 5.0, 0.0]];
        let g = similarity_from_distances(&d, Selection::Threshold(0.5)).unwrap();
        assert!(close(g.weight(0, 1), 1.0));
        assert!(close(g.weight(1, 0), 1.0));
        assert_eq!(g.out_degree(2), 0);
    }

    #[test]
    fn similarity_top1_and_ties() {
        let d = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 2.0], vec![1.0, 2.0, 0.0]];
        let g = similarity_from_distances(&d, Selection::TopK(1)).unwrap();
        for i in 0..3 {
            assert_eq!(g.out_degree(i), 1);
        }
        // row 0 ties between 1 and 2 → lower index wins
        assert!(close(g.weight(0, 1), 1.0));
        let g2 = similarity_from_distances(&d, Selection::TopK(2)).unwrap();
        // row 1: S = e^-1, e^-2 → weights e^-1/(e^-1+e^-2)
        let w = (-1.0f64).exp() / ((-1.0f64).exp() + (-2.0f64).exp());
        assert!(close(g2.weight(1, 0), w));
    }

    #[test]
    fn selection_errors() {
        let d = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(similarity_from_distances(&d, Selection::TopK(2)), Err(GraphError::BadTopK { .. })));
        assert!(matches!(similarity_from_distances(&d, Selection::Threshold(0.0)), Err(GraphError::BadThreshold(_))));
    }

    #[test]
    fn correlation_ratio_row() {
        let od = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [30.0, 70.0, 0.0]]);
        let c = correlation_ratios(&od);
        assert!(close(c.get(2, 0), 0.3) && close(c.get(2, 1), 0.7) && c.get(2, 2) == 0.0);
        let g = build_correlation(&od, Selection::Threshold(0.02)).unwrap();
        assert_eq!(g.out_degree(0), 0);
        assert!(close(g.weight(2, 0), 0.3));
    }

    #[test]
    fn correlation_threshold_renormalizes() {
        let od = Tensor::from_rows(&[[0.0, 1.0, 99.0], [10.0, 0.0, 10.0], [0.0, 0.0, 0.0]]);
        let g = build_correlation(&od, Selection::Threshold(0.02)).unwrap();
        assert!(close(g.weight(0, 2), 1.0));
        assert_eq!(g.weight(0, 1), 0.0);
        assert!(close(g.weight(1, 0), 0.5));
        assert!(matches!(
            build_correlation(&Tensor::from_rows(&[[0.0, -1.0], [0.0, 0.0]]), Selection::Threshold(0.1)),
            Err(GraphError::NegativeCount { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let g = build_physical(&[(0, 1), (1, 2), (2, 3), (1, 3)], 5).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("strgode-graph v1 physical 5\n"));
        assert!(text.contains("1 0 3.3333333333333331e-1"));
        let back = RelationGraph::read_from(&buf[..]).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn file_rejects_bad_rows() {
        let text = "strgode-graph v1 similarity 2\n0 1 0.5\n";
        assert!(matches!(RelationGraph::read_from(text.as_bytes()), Err(GraphError::RowSum { .. })));
        let text = "strgode-graph v2 similarity 2\n";
        assert!(matches!(RelationGraph::read_from(text.as_bytes()), Err(GraphError::Parse { line: 1, .. })));
    }

    fn series_strategy(len: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..=len)
    }

    proptest! {
        #[test]
        fn dtw_symmetric_nonnegative(a in series_strategy(12), b in series_strategy(12)) {
            let ab = dtw_distance(&a, &b).unwrap();
            let ba = dtw_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn built_graph_rows_sum_to_one(
            pairs in prop::collection::vec((0usize..8, 0usize..8), 0..20),
            od in prop::collection::vec(0.0f64..50.0, 64),
        ) {
            let pairs: Vec<_> = pairs.into_iter().filter(|(i, j)| i != j).collect();
            let p = build_physical(&pairs, 8).unwrap();
            let c = build_correlation(&Tensor::new(8, 8, od).unwrap(), Selection::TopK(3)).unwrap();
            for g in [&p, &c] {
                for s in g.row_sums().into_iter().flatten() {
                    prop_assert!((s - 1.0).abs() <= ROW_SUM_TOLERANCE);
                }
            }
            for e in p.edges() {
                prop_assert!(p.weight(e.to, e.from) > 0.0);
            }
        }

        #[test]
        fn relabeling_commutes_with_building(
            seed_series in prop::collection::vec(series_strategy(6), 5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let len = seed_series.iter().map(Vec::len).min().unwrap();
            let series: Vec<Vec<[f64; 2]>> = seed_series.into_iter().map(|s| s[..len].to_vec()).collect();
            let g = build_similarity(&series, Selection::TopK(2), None).unwrap();
            // station i of the original becomes perm[i]
            let mut relabeled = vec![Vec::new(); 5];
            for (i, s) in series.iter().enumerate() {
                relabeled[perm[i]] = s.clone();
            }
            let h = build_similarity(&relabeled, Selection::TopK(2), None).unwrap();
            // ties may resolve differently after relabeling, so compare only when distances are distinct
            let d = dtw_matrix(&series, None).unwrap();
            let distinct = (0..5).all(|i| {
                let mut row: Vec<f64> = (0..5).filter(|&j| j != i).map(|j| d[i][j]).collect();
                row.sort_by(f64::total_cmp);
                row.windows(2).all(|w| w[1] - w[0] > 1e-9)
            });
            if distinct {
                let expect = g.relabeled(&perm);
                prop_assert_eq!(expect.edges().len(), h.edges().len());
                for (a, b) in expect.edges().iter().zip(h.edges()) {
                    prop_assert_eq!((a.from, a.to), (b.from, b.to));
                    prop_assert!((a.weight - b.weight).abs() < 1e-12);
                }
            }
        }
    }
}
