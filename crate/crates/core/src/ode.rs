//! Fixed-step integration of latent states on the computation graph.
//!
//! Steps are built from ordinary graph operations, so gradients flow through
//! the solver by plain backpropagation.

use std::fmt;
use std::str::FromStr;

use crate::diff::{DiffError, Graph, Var};

/// Solver method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown solver `{other}` (expected euler or rk4)")),
        }
    }
}

/// An interval split into `n_intermediate` equal steps. Time runs in units
/// of one scheduling interval; `t_end < t_start` integrates backwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_intermediate: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_intermediate: usize) -> Self {
        assert!(n_intermediate >= 1, "n_intermediate must be at least 1");
        Self { t_start, t_end, n_intermediate }
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_intermediate as f64
    }
}

/// `z + h·f(z, t)`.
pub fn euler_step<F>(g: &mut Graph, f: &mut F, z: Var, t: f64, h: f64) -> Result<Var, DiffError>
where
    F: FnMut(&mut Graph, Var, f64) -> Result<Var, DiffError>,
{
    let k = f(g, z, t)?;
    let hk = g.scale(k, h)?;
    g.add(z, hk)
}

/// Classic four-stage Runge–Kutta step.
pub fn rk4_step<F>(g: &mut Graph, f: &mut F, z: Var, t: f64, h: f64) -> Result<Var, DiffError>
where
    F: FnMut(&mut Graph, Var, f64) -> Result<Var, DiffError>,
{
    let k1 = f(g, z, t)?;
    let s1 = g.scale(k1, h / 2.0)?;
    let z2 = g.add(z, s1)?;
    let k2 = f(g, z2, t + h / 2.0)?;
    let s2 = g.scale(k2, h / 2.0)?;
    let z3 = g.add(z, s2)?;
    let k3 = f(g, z3, t + h / 2.0)?;
    let s3 = g.scale(k3, h)?;
    let z4 = g.add(z, s3)?;
    let k4 = f(g, z4, t + h)?;

    let k23 = g.add(k2, k3)?;
    let k23 = g.scale(k23, 2.0)?;
    let k14 = g.add(k1, k4)?;
    let sum = g.add(k14, k23)?;
    let inc = g.scale(sum, h / 6.0)?;
    g.add(z, inc)
}

/// State at `grid.t_end` starting from `z0` at `grid.t_start`.
///
/// An empty interval returns `z0` itself without recording any node.
pub fn integrate<F>(g: &mut Graph, mut f: F, z0: Var, grid: &TimeGrid, method: Method) -> Result<Var, DiffError>
where
    F: FnMut(&mut Graph, Var, f64) -> Result<Var, DiffError>,
{
    if grid.t_start == grid.t_end {
        return Ok(z0);
    }
    let h = grid.step();
    let mut z = z0;
    for k in 0..grid.n_intermediate {
        let t = grid.t_start + k as f64 * h;
        z = match method {
            Method::Euler => euler_step(g, &mut f, z, t, h)?,
            Method::Rk4 => rk4_step(g, &mut f, z, t, h)?,
        };
    }
    Ok(z)
}
