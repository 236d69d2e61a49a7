//! Time grids, Brownian drivers, sampled trajectories and the path loss.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_TOL: f64 = 1e-9;

/// Uniform discretization `t_i = i * dt`, `i = 0..=n_steps`, of `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::NonPositiveInput(format!("horizon = {horizon}")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::NonPositiveInput(format!("dt = {dt}")));
        }
        let ratio = horizon / dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > GRID_TOL * n.max(1.0) {
            return Err(Error::IncommensurateGrid { horizon, dt });
        }
        Ok(Self {
            horizon,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.time(i))
    }

    /// Grid with `factor` times fewer steps over the same horizon.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::IndivisibleFactor {
                factor,
                n_steps: self.n_steps,
            });
        }
        Ok(Self {
            horizon: self.horizon,
            dt: self.dt * factor as f64,
            n_steps: self.n_steps / factor,
        })
    }

    /// Same horizon and step count, with dt equal up to rounding.
    pub fn matches(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps
            && (self.dt - other.dt).abs() <= GRID_TOL * self.dt
            && (self.horizon - other.horizon).abs() <= GRID_TOL * self.horizon
    }
}

/// Independent random streams used by the artifact. Each stream is keyed by
/// `(seed, index, purpose)`, so draws for a sample never depend on how many
/// other samples were generated before it or on which thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Brownian = 0,
    Initial = 1,
    Shuffle = 2,
    Init = 3,
}

pub fn stream_rng(seed: u64, index: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}

/// Increments of an `m`-dimensional Brownian motion on a grid, stored
/// row-major as `n_steps x m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianPath {
    grid: TimeGrid,
    dim: usize,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadDims("Brownian dimension must be positive".into()));
        }
        if increments.len() != grid.n_steps() * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} increments, got {}",
                grid.n_steps() * dim,
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            dim,
            increments,
        })
    }

    /// Seeded sample; equivalent to `sample_indexed(grid, m, seed, 0)`.
    pub fn sample(grid: TimeGrid, m: usize, seed: u64) -> Result<Self> {
        Self::sample_indexed(grid, m, seed, 0)
    }

    pub fn sample_indexed(grid: TimeGrid, m: usize, seed: u64, index: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::BadDims("Brownian dimension must be positive".into()));
        }
        let mut rng = stream_rng(seed, index, Stream::Brownian);
        let sd = grid.dt().sqrt();
        let increments = (0..grid.n_steps() * m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        Ok(Self {
            grid,
            dim: m,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment over `[t_i, t_{i+1}]`.
    #[inline]
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.dim..(i + 1) * self.dim]
    }

    /// `B(t_i)` for every node, row-major `(n_steps + 1) x m`, starting at zero.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_nodes() * self.dim];
        for i in 0..self.grid.n_steps() {
            for c in 0..self.dim {
                out[(i + 1) * self.dim + c] = out[i * self.dim + c] + self.increments[i * self.dim + c];
            }
        }
        out
    }

    /// Sum each run of `factor` consecutive increments. Runs are summed by
    /// halving, so coarsening by 2 twice equals coarsening by 4 bit for bit.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let dim = self.dim;
        let mut increments = Vec::with_capacity(grid.n_steps() * dim);
        let mut column = Vec::with_capacity(factor);
        for chunk in self.increments.chunks_exact(factor * dim) {
            for c in 0..dim {
                column.clear();
                column.extend((0..factor).map(|k| chunk[k * dim + c]));
                increments.push(halving_sum(&column));
            }
        }
        Ok(Self {
            grid,
            dim,
            increments,
        })
    }

    /// CSV with one row per step, keyed by the left endpoint `t_i` of the
    /// increment `B(t_{i+1}) - B(t_i)`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim).map(|c| format!("db{c}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.grid.n_steps() {
            write_row(&mut out, self.grid.time(i), self.increment(i))?;
        }
        Ok(())
    }
}

/// A discretized trajectory, row-major `(n_steps + 1) x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.n_nodes() * dim {
            return Err(Error::ShapeMismatch(format!(
                "path of dim {dim} on {} nodes cannot hold {} values",
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_nodes() * dim],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// First node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| k / self.dim)
    }

    /// Discrete L2([0, T]) norm: `sqrt(sum_k |Y(t_k)|^2 dt)` over all nodes.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dt()).sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim).map(|c| format!("x{c}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.grid.n_nodes() {
            write_row(&mut out, self.grid.time(i), self.at(i))?;
        }
        Ok(())
    }
}

fn write_row<W: Write>(out: &mut W, t: f64, row: &[f64]) -> Result<()> {
    write!(out, "{t:.16e}")?;
    for v in row {
        write!(out, ",{v:.16e}")?;
    }
    writeln!(out)?;
    Ok(())
}

fn halving_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n % 2 == 0 => halving_sum(&v[..n / 2]) + halving_sum(&v[n / 2..]),
        _ => v.iter().sum(),
    }
}

/// Relative discrete L2 distance of one path pair.
pub fn relative_l2(pred: &SamplePath, target: &SamplePath) -> Result<f64> {
    if pred.dim != target.dim || !pred.grid.matches(&target.grid) {
        return Err(Error::DimMismatch(
            "prediction and target differ in grid or dimension".into(),
        ));
    }
    let denom = target.l2_norm();
    if denom < 1e-12 {
        return Err(Error::ZeroTargetNorm { index: 0 });
    }
    let num = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        * target.grid.dt();
    Ok(num.sqrt() / denom)
}

/// Average over samples of `||pred_i - target_i|| / ||target_i||`.
pub fn mean_relative_l2(pred: &[SamplePath], target: &[SamplePath]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        total += relative_l2(p, t).map_err(|e| match e {
            Error::ZeroTargetNorm { .. } => Error::ZeroTargetNorm { index: i },
            e => e,
        })?;
    }
    Ok(total / pred.len() as f64)
}

/// One supervised example: initial value, driving noise and the solution path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub xi: Vec<f64>,
    pub noise: BrownianPath,
    pub path: SamplePath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDataset {
    grid: TimeGrid,
    records: Vec<PathRecord>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl PathDataset {
    /// Split the first `round(0.8 n)` records into the training set.
    pub fn new(grid: TimeGrid, records: Vec<PathRecord>) -> Result<Self> {
        if records
            .iter()
            .any(|r| !r.noise.grid.matches(&grid) || !r.path.grid.matches(&grid))
        {
            return Err(Error::GridMismatch);
        }
        let n = records.len();
        let n_train = (0.8 * n as f64).round() as usize;
        Ok(Self {
            grid,
            records,
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn records(&self) -> &[PathRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn train(&self) -> Vec<&PathRecord> {
        self.train.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn test(&self) -> Vec<&PathRecord> {
        self.test.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.records
            .first()
            .map(|r| (r.path.dim(), r.noise.dim()))
            .unwrap_or((0, 0))
    }
}
