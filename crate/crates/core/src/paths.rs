//! Discretised paths on a shared uniform grid, plus the fractional-kernel
//! constructions used by the experiments: kernel directions `K^t`, the
//! conditional-expectation paths `Θ^t`, and Riemann–Liouville drivers.
//!
//! Every path in a problem lives on one [`TimeGrid`]. Directions and `Θ^t`
//! are stored full length and vanish before their support.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::linalg;

const NODE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t0 >= t1 {
            return Err(invalid(format!(
                "time grid needs t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if n_steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |k| self.node(k))
    }

    pub fn horizon(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Index of the node equal to `t`, if `t` sits on the grid.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.step();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > NODE_TOL {
            return None;
        }
        Some(k as usize)
    }

    /// Index of the last node `<= t`.
    pub fn floor_index(&self, t: f64) -> usize {
        let x = (t - self.t0) / self.step();
        let k = (x + NODE_TOL).floor().max(0.0) as usize;
        k.min(self.n_steps)
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.t0 - NODE_TOL && t <= self.t1 + NODE_TOL
    }
}

/// Values at every node of a [`TimeGrid`], row-major `(n_nodes, channels)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathEnvelope", into = "PathEnvelope")]
pub struct Path {
    grid: TimeGrid,
    channels: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PathEnvelope {
    grid: TimeGrid,
    channels: usize,
    values: Vec<Vec<f64>>,
}

impl TryFrom<PathEnvelope> for Path {
    type Error = Error;

    fn try_from(env: PathEnvelope) -> Result<Self> {
        let grid = TimeGrid::new(env.grid.t0, env.grid.t1, env.grid.n_steps)?;
        let mut flat = Vec::with_capacity(env.values.len() * env.channels);
        for row in &env.values {
            if row.len() != env.channels {
                return Err(shape(format!(
                    "row has {} entries, expected {}",
                    row.len(),
                    env.channels
                )));
            }
            flat.extend_from_slice(row);
        }
        Path::new(grid, env.channels, flat)
    }
}

impl From<Path> for PathEnvelope {
    fn from(p: Path) -> Self {
        let values = (0..p.n_nodes()).map(|k| p.row(k).to_vec()).collect();
        PathEnvelope {
            grid: p.grid,
            channels: p.channels,
            values,
        }
    }
}

impl Path {
    pub fn new(grid: TimeGrid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("path needs at least one channel"));
        }
        if values.len() != grid.n_nodes() * channels {
            return Err(shape(format!(
                "path has {} values, grid of {} nodes with {} channels needs {}",
                values.len(),
                grid.n_nodes(),
                channels,
                grid.n_nodes() * channels
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite path value at flat index {pos}"
            )));
        }
        Ok(Self {
            grid,
            channels,
            values,
        })
    }

    pub fn zeros(grid: TimeGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            values: vec![0.0; grid.n_nodes() * channels],
        }
    }

    /// Builds a path by evaluating `f` at every node.
    pub fn from_fn<F: Fn(f64) -> Vec<f64>>(grid: TimeGrid, channels: usize, f: F) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.n_nodes() * channels);
        for s in grid.nodes() {
            let row = f(s);
            if row.len() != channels {
                return Err(shape(format!(
                    "closure returned {} channels, expected {channels}",
                    row.len()
                )));
            }
            values.extend(row);
        }
        Self::new(grid, channels, values)
    }

    /// One-channel path from per-node scalars.
    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }

    pub fn value(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.channels + c]
    }

    pub fn start(&self) -> &[f64] {
        self.row(0)
    }

    pub fn end(&self) -> &[f64] {
        self.row(self.n_nodes() - 1)
    }

    /// Increment of cell `k` (from node `k` to node `k + 1`) in channel `c`.
    pub fn increment(&self, k: usize, c: usize) -> f64 {
        self.value(k + 1, c) - self.value(k, c)
    }

    pub fn scaled(&self, alpha: f64) -> Path {
        Path {
            grid: self.grid,
            channels: self.channels,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    fn check_compatible(&self, other: &Path) -> Result<()> {
        if self.grid != other.grid || self.channels != other.channels {
            return Err(shape(format!(
                "paths differ in layout: {:?}/{} vs {:?}/{}",
                self.grid, self.channels, other.grid, other.channels
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Path) -> Result<Path> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Path {
            values,
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &Path) -> Result<Path> {
        self.add(&other.scaled(-1.0))
    }

    /// Same path shifted so it starts at the origin.
    pub fn recentered(&self) -> Path {
        let start = self.start().to_vec();
        let values = self
            .values
            .chunks(self.channels)
            .flat_map(|row| {
                row.iter()
                    .zip(&start)
                    .map(|(v, s)| v - s)
                    .collect::<Vec<_>>()
            })
            .collect();
        Path {
            values,
            ..self.clone()
        }
    }

    /// Adds `offset` to every node of every channel.
    pub fn shifted(&self, offset: &[f64]) -> Result<Path> {
        if offset.len() != self.channels {
            return Err(shape("offset length differs from channel count"));
        }
        let values = self
            .values
            .chunks(self.channels)
            .flat_map(|row| {
                row.iter()
                    .zip(offset)
                    .map(|(v, o)| v + o)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Path {
            values,
            ..self.clone()
        })
    }

    /// Copy with `zeros` zero channels prepended, used to pad directions to
    /// the time-augmented layout.
    pub fn pad_front(&self, zeros: usize) -> Path {
        let ch = self.channels + zeros;
        let mut values = Vec::with_capacity(self.n_nodes() * ch);
        for k in 0..self.n_nodes() {
            values.extend(std::iter::repeat_n(0.0, zeros));
            values.extend_from_slice(self.row(k));
        }
        Path {
            grid: self.grid,
            channels: ch,
            values,
        }
    }

    /// Copy with `zeros` zero channels appended.
    pub fn pad_back(&self, zeros: usize) -> Path {
        let ch = self.channels + zeros;
        let mut values = Vec::with_capacity(self.n_nodes() * ch);
        for k in 0..self.n_nodes() {
            values.extend_from_slice(self.row(k));
            values.extend(std::iter::repeat_n(0.0, zeros));
        }
        Path {
            grid: self.grid,
            channels: ch,
            values,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s");
        for c in 0..self.channels {
            out.push_str(&format!(",ch{c}"));
        }
        out.push('\n');
        for (k, s) in self.grid.nodes().enumerate() {
            out.push_str(&format!("{s:.16e}"));
            for v in self.row(k) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Path> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"s") || cols.len() < 2 {
            return Err(Error::Parse(format!("bad path csv header '{header}'")));
        }
        let channels = cols.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != channels + 1 {
                return Err(Error::Parse(format!(
                    "row {} has {} fields",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |f: &str| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: '{f}': {e}", lineno + 2)))
            };
            times.push(parse(fields[0])?);
            for f in &fields[1..] {
                values.push(parse(f)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Parse("path csv needs at least two rows".into()));
        }
        let grid = TimeGrid::new(times[0], *times.last().unwrap(), times.len() - 1)?;
        for (k, &s) in times.iter().enumerate() {
            if (s - grid.node(k)).abs() > 1e-9 * grid.horizon().max(1.0) {
                return Err(Error::Parse(format!(
                    "row {} time {s} is not on a uniform grid",
                    k + 2
                )));
            }
        }
        Path::new(grid, channels, values)
    }

    pub fn read_csv(path: impl AsRef<std::path::Path>) -> Result<Path> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Supremum over nodes of the Euclidean norm.
pub fn sup_norm(p: &Path) -> f64 {
    p.values
        .chunks(p.channels)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Total variation of the piecewise-linear interpolant.
pub fn one_variation(p: &Path) -> f64 {
    (0..p.n_cells())
        .map(|k| {
            (0..p.channels)
                .map(|c| p.increment(k, c).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Prepends normalised time `(s - t0) / (t1 - t0)` as channel 0.
pub fn time_augment(p: &Path) -> Path {
    let grid = p.grid;
    let ch = p.channels + 1;
    let mut values = Vec::with_capacity(p.n_nodes() * ch);
    for k in 0..p.n_nodes() {
        values.push((grid.node(k) - grid.t0) / grid.horizon());
        values.extend_from_slice(p.row(k));
    }
    Path {
        grid,
        channels: ch,
        values,
    }
}

/// Fractional kernel `K(s, r) = scale * (s - r)^(H - 1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    pub scale: f64,
    pub horizon: f64,
}

impl FbmSpec {
    pub fn new(hurst: f64, scale: f64, horizon: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(invalid(format!(
                "Hurst exponent must lie in (0, 1), got {hurst}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!(
                "kernel scale must be positive, got {scale}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            hurst,
            scale,
            horizon,
        })
    }

    /// Kernel normalised by `sqrt(2H)`, so that `Var(Ŵ_t) = t^(2H)`.
    pub fn normalized(hurst: f64, horizon: f64) -> Result<Self> {
        Self::new(hurst, (2.0 * hurst).sqrt(), horizon)
    }

    /// Kernel value at lag `u = s - r > 0`.
    pub fn kernel(&self, lag: f64) -> f64 {
        self.scale * lag.powf(self.hurst - 0.5)
    }

    /// `sqrt` of the cell average of `K^2` over lags `[(k-1)h, kh]`.
    ///
    /// Summing these weights against Brownian increments reproduces the
    /// variance of the continuous integral exactly on every cell.
    pub fn l2_cell_weight(&self, k: usize, h: f64) -> f64 {
        let two_h = 2.0 * self.hurst;
        let k = k as f64;
        let mass = h.powf(two_h - 1.0) * (k.powf(two_h) - (k - 1.0).powf(two_h)) / two_h;
        self.scale * mass.sqrt()
    }

    /// Closed-form `Var(∫_a^b K(s, r) dW_r)` for `s >= b`.
    pub fn integrated_variance(&self, s: f64, a: f64, b: f64) -> f64 {
        let two_h = 2.0 * self.hurst;
        self.scale * self.scale * ((s - a).powf(two_h) - (s - b).powf(two_h)) / two_h
    }
}

/// Parameters of the rough Bergomi forward-variance model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BergomiParams {
    pub xi: f64,
    pub vol_of_vol: f64,
    pub rho: f64,
    pub hurst: f64,
    pub spot_log: f64,
}

impl BergomiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(invalid("forward variance xi must be positive"));
        }
        if !(self.vol_of_vol >= 0.0) {
            return Err(invalid("vol-of-vol must be nonnegative"));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(invalid("correlation must lie in (-1, 1)"));
        }
        if !(self.hurst > 0.0 && self.hurst <= 0.5) {
            return Err(invalid("rough Bergomi Hurst exponent must lie in (0, 1/2]"));
        }
        Ok(())
    }

    /// Instantaneous variance `ψ_t(v) = ξ exp(η v - η² t^{2H} / 2)`.
    pub fn psi(&self, t: f64, v: f64) -> f64 {
        let eta = self.vol_of_vol;
        self.xi * (eta * v - 0.5 * eta * eta * t.powf(2.0 * self.hurst)).exp()
    }

    pub fn fbm(&self, horizon: f64) -> Result<FbmSpec> {
        FbmSpec::normalized(self.hurst, horizon)
    }
}

/// How the singular kernel direction is regularised near `s = t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Regularization {
    /// `K(min(s, t + delta), t)`; `delta = 0` means plain grid-offset evaluation.
    Truncated { delta: f64 },
    /// `scale * (s + eps - t)^(H - 1/2)`.
    Shifted { eps: f64 },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Truncated { delta: 0.0 }
    }
}

impl Regularization {
    pub fn direction(&self, t: f64, spec: &FbmSpec, grid: &TimeGrid) -> Result<Path> {
        match *self {
            Regularization::Truncated { delta } => make_kernel_direction(t, delta, spec, grid),
            Regularization::Shifted { eps } => make_shifted_direction(t, eps, spec, grid),
        }
    }
}

fn check_direction_time(t: f64, grid: &TimeGrid) -> Result<()> {
    if !(t >= grid.t0 - NODE_TOL && t < grid.t1 - NODE_TOL) {
        return Err(invalid(format!(
            "direction time {t} outside [{}, {})",
            grid.t0, grid.t1
        )));
    }
    Ok(())
}

/// The kernel direction `s ↦ K^{δ,t}(s)`, zero for `s <= t`.
///
/// The singular point `s = t` is never evaluated: the first nonzero node is
/// the first one strictly after `t`.
pub fn make_kernel_direction(t: f64, delta: f64, spec: &FbmSpec, grid: &TimeGrid) -> Result<Path> {
    check_direction_time(t, grid)?;
    if !(delta >= 0.0) {
        return Err(invalid(format!(
            "regularisation length must be >= 0, got {delta}"
        )));
    }
    let values = grid
        .nodes()
        .map(|s| {
            if s <= t + NODE_TOL {
                0.0
            } else if delta > 0.0 {
                spec.kernel(s.min(t + delta) - t)
            } else {
                spec.kernel(s - t)
            }
        })
        .collect();
    Path::scalar(*grid, values)
}

/// Shifted direction `scale * (s + eps - t)^(H - 1/2)` for `s > t`, zero before.
pub fn make_shifted_direction(t: f64, eps: f64, spec: &FbmSpec, grid: &TimeGrid) -> Result<Path> {
    check_direction_time(t, grid)?;
    if !(eps >= 0.0) {
        return Err(invalid(format!("shift must be >= 0, got {eps}")));
    }
    let values = grid
        .nodes()
        .map(|s| {
            if s <= t + NODE_TOL {
                0.0
            } else {
                spec.kernel(s + eps - t)
            }
        })
        .collect();
    Path::scalar(*grid, values)
}

/// Standard Brownian increments, one per grid cell.
pub fn brownian_increments<R: Rng + ?Sized>(grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
    let sd = grid.step().sqrt();
    (0..grid.n_steps)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect()
}

fn check_increments(grid: &TimeGrid, increments: &[f64]) -> Result<()> {
    if increments.len() != grid.n_steps {
        return Err(invalid(format!(
            "expected {} Brownian increments, got {}",
            grid.n_steps,
            increments.len()
        )));
    }
    Ok(())
}

fn grid_node(t: f64, grid: &TimeGrid) -> Result<usize> {
    if !grid.contains(t) {
        return Err(invalid(format!("time {t} outside grid")));
    }
    grid.node_index(t)
        .ok_or_else(|| invalid(format!("time {t} is not a grid node")))
}

/// Left-point Riemann sum for `Σ_{r_k < t} K(s, r_k) ΔW_k` at node `s`.
fn theta_at(n: usize, t_idx: usize, spec: &FbmSpec, grid: &TimeGrid, increments: &[f64]) -> f64 {
    let h = grid.step();
    (0..t_idx)
        .map(|k| spec.kernel((n - k) as f64 * h) * increments[k])
        .sum()
}

/// `Θ^t_s = ∫_0^t K(s, r) dW_r` for `s > t`, zero for `s <= t`.
pub fn simulate_theta(t: f64, spec: &FbmSpec, grid: &TimeGrid, increments: &[f64]) -> Result<Path> {
    check_increments(grid, increments)?;
    let t_idx = grid_node(t, grid)?;
    let values = (0..grid.n_nodes())
        .map(|n| {
            if n <= t_idx {
                0.0
            } else {
                theta_at(n, t_idx, spec, grid, increments)
            }
        })
        .collect();
    Path::scalar(*grid, values)
}

/// Like [`simulate_theta`], but frozen at `Θ^t_t` (the driver's current
/// value) on `[0, t]` instead of zero, giving a continuous path whose
/// starting point carries the current state.
///
/// `t` need not be a grid node. For `t` inside cell `[t_f, t_f + h)` the
/// partial cell contributes the increment `ΔW_f` rescaled to `[t_f, t]`.
pub fn simulate_theta_frozen(
    t: f64,
    spec: &FbmSpec,
    grid: &TimeGrid,
    increments: &[f64],
) -> Result<Path> {
    check_increments(grid, increments)?;
    if !grid.contains(t) {
        return Err(invalid(format!("time {t} outside grid")));
    }
    let h = grid.step();
    let t_f = grid.floor_index(t);
    let partial = match grid.node_index(t) {
        Some(_) => None,
        None => {
            let frac = (t - grid.node(t_f)) / h;
            Some(increments[t_f] * frac.sqrt())
        }
    };
    let at = |s: f64, n_full: usize| -> f64 {
        let mut acc = theta_sum(s, n_full, spec, grid, increments);
        if let Some(dw) = partial {
            acc += spec.kernel(s - grid.node(t_f)) * dw;
        }
        acc
    };
    let frozen = at(t, t_f);
    let values = (0..grid.n_nodes())
        .map(|n| {
            if grid.node(n) <= t + NODE_TOL {
                frozen
            } else {
                at(grid.node(n), t_f)
            }
        })
        .collect();
    Path::scalar(*grid, values)
}

/// Left-point sum over the first `n_full` cells evaluated at time `s`.
fn theta_sum(s: f64, n_full: usize, spec: &FbmSpec, grid: &TimeGrid, increments: &[f64]) -> f64 {
    (0..n_full)
        .map(|k| spec.kernel(s - grid.node(k)) * increments[k])
        .sum()
}

/// Estimator used for the Volterra driver `Ŵ_t = ∫_0^t K(t, r) dW_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolterraMode {
    /// Discrete convolution with per-cell `L²`-matched kernel weights.
    #[default]
    Convolution,
    /// Discrete convolution with the kernel at cell midpoints.
    Midpoint,
    /// Exact Gaussian covariance on the grid, sampled through Cholesky.
    ExactCovariance,
}

fn convolution_weights(spec: &FbmSpec, grid: &TimeGrid, mode: VolterraMode) -> Vec<f64> {
    let h = grid.step();
    // weights[k] multiplies the increment k cells back (k >= 1)
    (0..=grid.n_steps)
        .map(|k| match (k, mode) {
            (0, _) => 0.0,
            (k, VolterraMode::Midpoint) => spec.kernel((k as f64 - 0.5) * h),
            (k, _) => spec.l2_cell_weight(k, h),
        })
        .collect()
}

fn convolve_from(start: usize, weights: &[f64], increments: &[f64], n_nodes: usize) -> Vec<f64> {
    (0..n_nodes)
        .map(|n| {
            if n <= start {
                0.0
            } else {
                (start..n).map(|j| weights[n - j] * increments[j]).sum()
            }
        })
        .collect()
}

/// Riemann–Liouville driver on the grid.
pub fn simulate_volterra(
    spec: &FbmSpec,
    grid: &TimeGrid,
    increments: &[f64],
    mode: VolterraMode,
) -> Result<Path> {
    check_increments(grid, increments)?;
    let values = match mode {
        VolterraMode::ExactCovariance => exact_volterra(spec, grid, increments)?,
        _ => {
            let w = convolution_weights(spec, grid, mode);
            convolve_from(0, &w, increments, grid.n_nodes())
        }
    };
    Path::scalar(*grid, values)
}

/// `I^t_s = ∫_t^s K(s, r) dW_r` for `s > t`, zero otherwise.
pub fn simulate_forward_volterra(
    t: f64,
    spec: &FbmSpec,
    grid: &TimeGrid,
    increments: &[f64],
) -> Result<Path> {
    check_increments(grid, increments)?;
    let t_idx = grid_node(t, grid)?;
    let w = convolution_weights(spec, grid, VolterraMode::Convolution);
    Path::scalar(*grid, convolve_from(t_idx, &w, increments, grid.n_nodes()))
}

/// Reusable forward-Volterra weights, for Monte Carlo loops that call the
/// convolution many times on one grid.
#[derive(Debug, Clone)]
pub struct ForwardVolterra {
    weights: Vec<f64>,
}

impl ForwardVolterra {
    pub fn new(spec: &FbmSpec, grid: &TimeGrid) -> Self {
        Self {
            weights: convolution_weights(spec, grid, VolterraMode::Convolution),
        }
    }

    /// Value at node `n` of the driver started at node `start`.
    pub fn at(&self, start: usize, n: usize, increments: &[f64]) -> f64 {
        (start..n)
            .map(|j| self.weights[n - j] * increments[j])
            .sum()
    }
}

/// `Cov(Ŵ_s, Ŵ_u) = scale² ∫_0^{min} (s - r)^α (u - r)^α dr`, `α = H - 1/2`.
pub fn volterra_covariance(spec: &FbmSpec, s: f64, u: f64) -> f64 {
    let (a, b) = if s <= u { (s, u) } else { (u, s) };
    if a <= 0.0 {
        return 0.0;
    }
    let alpha = spec.hurst - 0.5;
    let two_h = 2.0 * spec.hurst;
    let c2 = spec.scale * spec.scale;
    if (b - a).abs() <= 1e-14 * b {
        return c2 * a.powf(two_h) / two_h;
    }
    // substitute w = (a - r)^(α + 1), which removes the endpoint singularity
    let p = alpha + 1.0;
    let upper = a.powf(p);
    let gap = b - a;
    let integrand = |w: f64| (gap + w.max(0.0).powf(1.0 / p)).powf(alpha);
    // geometric panels towards w = 0 resolve the near-singular layer of
    // width ~gap^p when the two times are close
    let mut total = 0.0;
    let mut hi = upper;
    for _ in 0..48 {
        let lo = 0.5 * hi;
        total += linalg::gauss_legendre(integrand, lo, hi, 1);
        hi = lo;
    }
    total += linalg::gauss_legendre(integrand, 0.0, hi, 1);
    c2 * total / p
}

fn exact_volterra(spec: &FbmSpec, grid: &TimeGrid, increments: &[f64]) -> Result<Vec<f64>> {
    let n = grid.n_steps;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        volterra_covariance(spec, grid.node(i + 1), grid.node(j + 1))
    });
    let (chol, _) = linalg::cholesky_with_jitter(&cov)
        .map_err(|e| Error::Numerical(format!("Volterra covariance factorisation failed: {e}")))?;
    let sd = grid.step().sqrt();
    let z = nalgebra::DVector::from_iterator(n, increments.iter().map(|w| w / sd));
    let sample = chol.l() * z;
    let mut values = Vec::with_capacity(n + 1);
    values.push(0.0);
    values.extend(sample.iter().copied());
    Ok(values)
}
