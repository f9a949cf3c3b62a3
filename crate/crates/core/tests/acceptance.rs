//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use chrono::{NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strgode::cli::main_with;
use strgode::data::{bin_transactions, make_windows, read_ridership_csv, read_transactions_csv, split_dataset, BinGrid, SeriesWindow, SplitSpec, Splits};
use strgode::diff::{grad_check, Graph};
use strgode::eval::{run_conventional, run_injection, Persistence};
use strgode::graph::{build_correlation, build_physical, build_similarity, dtw_distance, RelationGraph, Selection};
use strgode::model::{Aggregators, Forecaster, ModelConfig, ModelParams, Net};
use strgode::ode::{integrate, Method, TimeGrid};
use strgode::synth::{generate, SynthConfig, SynthData};
use strgode::tensor::Tensor;
use strgode::training::{fit, normalize_windows, overfit_window, NormStats, OverfitSchedule, TrainConfig, TrainOutcome};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let (n, d) = (4, 6);
    let data = generate(&SynthConfig::new(n, 3, 11)).map_err(|e| e.to_string())?;
    let aggr = Aggregators::new(&data.graphs, Default::default());
    let config = ModelConfig { d, method: Method::Rk4, n_intermediate: 2, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let observed = SeriesWindow::new(vec![0.0, 1.0], (0..2).map(|_| rand_tensor(&mut rng, n, 2, 1.5)).collect()).unwrap();
    let target = SeriesWindow::new(vec![2.0, 3.0], (0..2).map(|_| rand_tensor(&mut rng, n, 2, 1.5)).collect()).unwrap();
    let mut g = Graph::new();
    let net = Net::bind(&mut g, &ModelParams::init(d, 3), &aggr, config).map_err(|e| e.to_string())?;
    let loss = net.window_loss(&mut g, &observed, &target).map_err(|e| e.to_string())?;
    let bindings: HashMap<String, Tensor> = g.bindings();
    let worst = grad_check(&mut g, &bindings, loss, 3e-5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4 && secs < 60.0, format!("max relative error {worst:.2e}, {secs:.1} s"))
}

/// Global error at t=1 of dz/dt = A z, z(0) = (1, 1), for A = [[-1, 2], [0, -3]].
fn solver_error(method: Method, steps: usize) -> f64 {
    // eigenpairs: -1 with (1, 0), -3 with (1, -1); V is its own inverse
    let coef = [1.0 + 1.0, -1.0];
    let exact = [coef[0] * (-1.0f64).exp() + coef[1] * (-3.0f64).exp(), -coef[1] * (-3.0f64).exp()];
    let mut g = Graph::new();
    let at = g.constant(Tensor::from_rows(&[[-1.0, 0.0], [2.0, -3.0]])).unwrap();
    let z0 = g.constant(Tensor::row_vector(&[1.0, 1.0])).unwrap();
    let z = integrate(&mut g, |g: &mut Graph, z, _t| g.matmul(z, at), z0, &TimeGrid::new(0.0, 1.0, steps), method).unwrap();
    let v = g.value(z).data();
    ((v[0] - exact[0]).powi(2) + (v[1] - exact[1]).powi(2)).sqrt()
}

fn solver_order() -> Outcome {
    let euler = solver_error(Method::Euler, 40) / solver_error(Method::Euler, 80);
    let rk4 = solver_error(Method::Rk4, 20) / solver_error(Method::Rk4, 40);
    ensure((1.8..=2.2).contains(&euler) && (14.0..=18.0).contains(&rk4), format!("euler ratio {euler:.3}, rk4 ratio {rk4:.3}"))
}

fn graph_matches(g: &RelationGraph, expected: &[(usize, usize, f64)]) -> Result<(), String> {
    let n = g.n_stations();
    for i in 0..n {
        for j in 0..n {
            let want = expected.iter().find(|e| e.0 == i && e.1 == j).map_or(0.0, |e| e.2);
            let got = g.weight(i, j);
            if (got - want).abs() > 1e-9 {
                return Err(format!("{} ({i},{j}) = {got}, expected {want}", g.kind()));
            }
        }
    }
    for (i, s) in g.row_sums().iter().enumerate() {
        if let Some(s) = s {
            if (s - 1.0).abs() > 1e-9 {
                return Err(format!("{} row {i} sums to {s}", g.kind()));
            }
        }
    }
    Ok(())
}

fn graph_fixture() -> Outcome {
    let physical = build_physical(&[(0, 1), (1, 2), (1, 3)], 4).map_err(|e| e.to_string())?;
    let third = 1.0 / 3.0;
    graph_matches(&physical, &[(0, 1, 1.0), (1, 0, third), (1, 2, third), (1, 3, third), (2, 1, 1.0), (3, 1, 1.0)])?;

    // pairwise DTW: d01 = 10, d02 = 5, d03 = 2, d12 = 5, d13 = 2√18, d23 = 1 + √18
    let series = vec![vec![[0.0, 0.0], [0.0, 0.0]], vec![[3.0, 4.0], [3.0, 4.0]], vec![[0.0, 0.0], [3.0, 4.0]], vec![[0.0, 1.0], [0.0, 1.0]]];
    let similarity = build_similarity(&series, Selection::TopK(2), None).map_err(|e| e.to_string())?;
    let r18 = 18.0f64.sqrt();
    let pair = |gap: f64| (1.0 / (1.0 + (-gap).exp()), (-gap).exp() / (1.0 + (-gap).exp()));
    let (w03, w02) = pair(3.0);
    let (w12, w13) = pair(2.0 * r18 - 5.0);
    let (w30, w32) = pair(r18 - 1.0);
    graph_matches(&similarity, &[(0, 3, w03), (0, 2, w02), (1, 2, w12), (1, 3, w13), (2, 0, 0.5), (2, 1, 0.5), (3, 0, w30), (3, 2, w32)])?;

    let od = Tensor::from_rows(&[[0.0, 6.0, 3.0, 1.0], [2.0, 0.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 8.0, 10.0]]);
    let correlation = build_correlation(&od, Selection::Threshold(0.2)).map_err(|e| e.to_string())?;
    graph_matches(&correlation, &[(0, 1, 2.0 / 3.0), (0, 2, 1.0 / 3.0), (1, 0, 0.5), (1, 2, 0.5), (3, 2, 1.0)])?;
    Ok("physical, similarity and correlation weights within 1e-9".into())
}

fn brute_force_dtw(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    fn walk(a: &[[f64; 2]], b: &[[f64; 2]], u: usize, v: usize, acc: f64, best: &mut f64) {
        let acc = if u == 0 && v == 0 { cost(a[0], b[0]) } else { acc + cost(a[u], b[v]) };
        if u + 1 == a.len() && v + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if u + 1 < a.len() {
            walk(a, b, u + 1, v, acc, best);
        }
        if v + 1 < b.len() {
            walk(a, b, u, v + 1, acc, best);
        }
        if u + 1 < a.len() && v + 1 < b.len() {
            walk(a, b, u + 1, v + 1, acc, best);
        }
    }
    fn cost(p: [f64; 2], q: [f64; 2]) -> f64 {
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn dtw_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let series = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..=6);
        (0..len).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect::<Vec<[f64; 2]>>()
    };
    for k in 0..50 {
        let a = series(&mut rng);
        let b = series(&mut rng);
        let fast = dtw_distance(&a, &b).map_err(|e| e.to_string())?;
        let slow = brute_force_dtw(&a, &b);
        if fast != slow {
            return Err(format!("pair {k}: {fast} vs brute force {slow}"));
        }
    }
    Ok("50 pairs identical to exhaustive path search".into())
}

fn overfit() -> Outcome {
    let data = generate(&SynthConfig::new(5, 4, 3)).map_err(|e| e.to_string())?;
    let norm = NormStats::fit(&data.series).map_err(|e| e.to_string())?;
    let pairs = make_windows(&data.series, 4, 4).map_err(|e| e.to_string())?;
    let window = normalize_windows(&pairs[30..31], &norm).remove(0);
    let aggr = Aggregators::new(&data.graphs, Default::default());
    let config = ModelConfig { d: 8, ..Default::default() };
    let mut params = ModelParams::init(8, 0);
    let losses = overfit_window(&mut params, &aggr, config, &window, 500, OverfitSchedule::default()).map_err(|e| e.to_string())?;
    let (first, last) = (losses[0], *losses.last().unwrap());
    ensure(last < 0.02 * first, format!("loss {first:.4} -> {last:.6} ({:.2}%)", 100.0 * last / first))
}

struct Trained {
    data: SynthData,
    splits: Splits,
    runs: Vec<(u64, TrainOutcome, f64)>,
}

const EPOCHS: usize = 8;

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = generate(&SynthConfig::new(10, 40, 0)).expect("synthetic data");
        let splits = split_dataset(&data.series, SplitSpec::from_fractions(40, 0.7, 0.1)).expect("splits");
        let runs = (0..5)
            .map(|seed| {
                let start = Instant::now();
                let config = TrainConfig { seed, max_epochs: EPOCHS, ..Default::default() };
                let outcome = fit(&splits, &data.graphs, &config).expect("training");
                (seed, outcome, start.elapsed().as_secs_f64())
            })
            .collect();
        Trained { data, splits, runs }
    })
}

fn forecaster(t: &Trained, o: &TrainOutcome) -> Forecaster {
    Forecaster::new(o.params.clone(), ModelConfig::default(), o.norm, &t.data.graphs).expect("forecaster")
}

fn beats_persistence() -> Outcome {
    let t = trained();
    let base = run_conventional(&Persistence, &t.splits.test, 4, 4).map_err(|e| e.to_string())?.mean_mae();
    let mut total = 0.0;
    let mut secs = 0.0;
    for (_, o, s) in &t.runs[..3] {
        total += run_conventional(&forecaster(t, o), &t.splits.test, 4, 4).map_err(|e| e.to_string())?.mean_mae();
        secs += s;
    }
    let model = total / 3.0;
    let ratio = model / base;
    ensure(ratio <= 0.8 && secs < 1800.0, format!("model MAE {model:.3}, persistence {base:.3}, ratio {ratio:.3}, {EPOCHS} epochs, {secs:.0} s training"))
}

fn observation_correction() -> Outcome {
    let t = trained();
    let (mut rollout, mut injected) = (0.0, 0.0);
    for (_, o, _) in &t.runs {
        let study = run_injection(&forecaster(t, o), &t.splits.test, 4, 8, 4).map_err(|e| e.to_string())?;
        rollout += study.rollout[4..].iter().sum::<f64>() / 4.0;
        injected += study.injected[4..].iter().sum::<f64>() / 4.0;
    }
    let k = t.runs.len() as f64;
    let (rollout, injected) = (rollout / k, injected / k);
    ensure(injected <= rollout, format!("horizons 5-8 MAE: injected {injected:.3}, rollout {rollout:.3}"))
}

fn causality() -> Outcome {
    let data = generate(&SynthConfig::new(4, 2, 8)).map_err(|e| e.to_string())?;
    let pairs = make_windows(&data.series, 4, 6).map_err(|e| e.to_string())?;
    let w = &pairs[10];
    let f = Forecaster::new(ModelParams::init(6, 1), ModelConfig { d: 6, ..Default::default() }, NormStats::fit(&data.series).unwrap(), &data.graphs).map_err(|e| e.to_string())?;
    let times = w.target.times();
    let avail: Vec<Option<Tensor>> = w.target.values().iter().map(|v| Some(v.clone())).collect();
    let base = f.predict(&w.observed, times, &avail).map_err(|e| e.to_string())?;
    for i in 0..times.len() {
        let mut bumped = avail.clone();
        bumped[i] = bumped[i].as_ref().map(|v| v.map(|x| x + 37.0));
        let out = f.predict(&w.observed, times, &bumped).map_err(|e| e.to_string())?;
        if out[..=i] != base[..=i] {
            return Err(format!("perturbing horizon {} moved an earlier prediction", i + 1));
        }
        if i + 1 < times.len() && out[i + 1] == base[i + 1] {
            return Err(format!("perturbing horizon {} had no effect downstream", i + 1));
        }
    }
    Ok(format!("{} horizons, earlier predictions bit-identical", times.len()))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["strgode", "--threads", "1"];
    argv.extend_from_slice(args);
    match main_with(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// Shared scratch pipeline: a small dataset, two identical training runs.
fn pipeline() -> &'static Result<tempfile::TempDir, String> {
    static CELL: OnceLock<Result<tempfile::TempDir, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
        cli(&["synth", "--stations", "6", "--days", "12", "--seed", "3", "--out", &p("data")])?;
        for run in ["a", "b"] {
            cli(&["train", "--data", &p("data"), "--out", &p(run), "--seed", "7", "--set", "d=6", "--set", "max_epochs=2"])?;
        }
        Ok(dir)
    })
}

fn irregular_cli() -> Outcome {
    let dir = pipeline().as_ref().map_err(Clone::clone)?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    for out in ["irr1", "irr2"] {
        cli(&["evaluate", "--data", &p("data"), "--checkpoint", &p("a/model.ckpt"), "--protocol", "irregular", "--observed", "4", "--seeds", "0,1,2,3,4", "--out", &p(out)])?;
    }
    let first = read(&dir.path().join("irr1/report_irregular.csv"))?;
    let second = read(&dir.path().join("irr2/report_irregular.csv"))?;
    let text = String::from_utf8_lossy(&first);
    let rows = text.lines().filter(|l| l.starts_with("irregular,")).count();
    ensure(rows == 4 && first == second && text.contains("# seeds=0,1,2,3,4"), format!("{rows} rows, reruns identical: {}", first == second))
}

fn csv_fidelity() -> Outcome {
    let transactions = "\
entry_time,exit_time,origin_id,destination_id
2024-03-04T06:00:00,2024-03-04T06:20:00,0,1
2024-03-04T06:29:59,2024-03-04T07:10:00,1,2
2024-03-04T06:30:00,2024-03-04T06:45:00,2,0
2024-03-04T08:15:00,2024-03-04T08:40:00,0,2
2024-03-04T11:59:00,2024-03-05T06:05:00,1,0
2024-03-05T06:00:00,2024-03-05T06:01:00,2,1
2024-03-05T09:30:00,2024-03-05T10:00:00,1,1
2024-03-05T11:45:00,2024-03-05T11:50:00,0,1
";
    let records = read_transactions_csv(transactions.as_bytes()).map_err(|e| e.to_string())?;
    let (start, end) = (NaiveTime::from_hms_opt(6, 0, 0).unwrap(), NaiveTime::from_hms_opt(12, 0, 0).unwrap());
    let grid = BinGrid::new(NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(), 2, 30, start, end).map_err(|e| e.to_string())?;
    let series = bin_transactions(&records, 3, grid).map_err(|e| e.to_string())?;
    let totals = series.totals();
    if totals != [8.0, 8.0] {
        return Err(format!("binned totals {totals:?}, expected 8 entries and 8 exits"));
    }
    if series.days[0][0].get(0, 0) != 1.0 || series.days[0][0].get(1, 0) != 1.0 || series.days[0][1].get(2, 0) != 1.0 {
        return Err("half-open bin edges not respected".into());
    }
    // round trip through the documented ridership schema
    let mut buf = Vec::new();
    strgode::data::write_ridership_csv(&series, &mut buf).map_err(|e| e.to_string())?;
    let back = read_ridership_csv(&buf[..], Some(3), 30, (start, end)).map_err(|e| e.to_string())?;
    if back != series {
        return Err("ridership CSV round trip changed the series".into());
    }
    if split_dataset(&series, SplitSpec { train_days: 1, val_days: 0, test_days: 1 }).is_ok() {
        return Err("empty validation split accepted".into());
    }
    let grid3 = BinGrid::new(grid.first_day, 3, 30, start, end).map_err(|e| e.to_string())?;
    let series3 = bin_transactions(&records, 3, grid3).map_err(|e| e.to_string())?;
    let splits = split_dataset(&series3, SplitSpec { train_days: 1, val_days: 1, test_days: 1 }).map_err(|e| e.to_string())?;
    let aligned = splits.train.days == series3.days[..1]
        && splits.val.days == series3.days[1..2]
        && splits.test.days == series3.days[2..]
        && splits.val.grid.first_day == grid.day(1)
        && splits.test.grid.first_day == grid.day(2);
    if !aligned {
        return Err("split is not day-aligned".into());
    }
    // 12 bins per day, 8-bin windows: starts 0..=4
    let windows = make_windows(&series, 4, 4).map_err(|e| e.to_string())?;
    let per_day: Vec<usize> = (0..2).map(|d| windows.iter().filter(|w| w.date == grid.day(d)).count()).collect();
    ensure(per_day == [5, 5], format!("counts conserved (8/8), day-aligned split, windows per day {per_day:?}"))
}

fn determinism() -> Outcome {
    let dir = pipeline().as_ref().map_err(Clone::clone)?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    for run in ["a", "b"] {
        cli(&["evaluate", "--data", &p("data"), "--checkpoint", &p(&format!("{run}/model.ckpt")), "--protocol", "all", "--out", &p(&format!("{run}/reports"))])?;
    }
    let files = [
        "model.ckpt",
        "train.log",
        "run.conf",
        "reports/report_conventional.csv",
        "reports/report_peak.txt",
        "reports/report_irregular.csv",
    ];
    for f in files {
        let a = read(&dir.path().join("a").join(f))?;
        let b = read(&dir.path().join("b").join(f))?;
        let same = if f == "run.conf" { String::from_utf8_lossy(&a).replace("/a", "/b") == String::from_utf8_lossy(&b) } else { a == b };
        if !same {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("gradient oracle", gradient_oracle),
        ("solver order", solver_order),
        ("graph fixture", graph_fixture),
        ("dtw oracle", dtw_oracle),
        ("overfit capacity", overfit),
        ("learning beats persistence", beats_persistence),
        ("observation correction", observation_correction),
        ("causality", causality),
        ("irregular protocol cli", irregular_cli),
        ("csv pipeline fidelity", csv_fidelity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += result.is_err() as usize;
        println!("criterion {:>2} {tag} {name}: {detail}", k + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
