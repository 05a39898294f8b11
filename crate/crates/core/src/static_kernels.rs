//! Static kernels: the Gaussian RBF used for the time-space factor `k`, the
//! starting-point factor `ℓ` and the lift `g`, plus the per-cell increment
//! fields `A` that drive the Goursat system.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::paths::Path;

/// Bandwidths of the product kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub sigma_t: f64,
    /// One bandwidth per state channel (empty when there is no state).
    pub sigma_x: Vec<f64>,
    pub sigma_g: f64,
    pub sigma_l: f64,
}

impl RbfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s > 0.0 && s.is_finite();
        if !ok(self.sigma_t)
            || !ok(self.sigma_g)
            || !ok(self.sigma_l)
            || !self.sigma_x.iter().all(|&s| ok(s))
        {
            return Err(invalid(format!(
                "bandwidths must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The pointwise feature map applied to path values before taking the
/// signature kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lift {
    Identity,
    Rbf { sigma: f64 },
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(shape(format!(
            "vector lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(-|x - y|² / (2σ²))`.
pub fn rbf(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_dims(x, y)?;
    Ok((-sq_dist(x, y) / (2.0 * sigma * sigma)).exp())
}

/// Gradient of [`rbf`] in `x`.
pub fn rbf_dx(x: &[f64], y: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let g = rbf(x, y, sigma)?;
    let s2 = sigma * sigma;
    Ok(x.iter().zip(y).map(|(a, b)| (b - a) / s2 * g).collect())
}

/// Hessian of [`rbf`] in `x`.
pub fn rbf_dxx(x: &[f64], y: &[f64], sigma: f64) -> Result<DMatrix<f64>> {
    let g = rbf(x, y, sigma)?;
    let s2 = sigma * sigma;
    let d = x.len();
    Ok(DMatrix::from_fn(d, d, |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        ((x[a] - y[a]) * (x[b] - y[b]) / (s2 * s2) - delta / s2) * g
    }))
}

/// `d^n/du^n exp(-u² / (2σ²))`, via probabilists' Hermite polynomials.
pub fn gauss_deriv_1d(u: f64, sigma: f64, n: usize) -> f64 {
    let z = u / sigma;
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let next = z * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * sigma.powi(-(n as i32)) * cur * (-0.5 * z * z).exp()
}

/// `D^n φ(r)[w_1, …, w_n]` for `φ(r) = exp(-c|r|²/2)`, without the factor
/// `φ(r)`: a sum over partial matchings of the directions, singletons
/// contributing `-c r·w` and pairs `-c w·w'`.
fn gaussian_poly(r: &[f64], dirs: &[&[f64]], c: f64) -> f64 {
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn rec(r: &[f64], dirs: &[&[f64]], used: u32, c: f64) -> f64 {
        let Some(first) = (0..dirs.len()).find(|k| used & (1 << k) == 0) else {
            return 1.0;
        };
        let used1 = used | (1 << first);
        let mut total = -c * dot(r, dirs[first]) * rec(r, dirs, used1, c);
        for other in (first + 1)..dirs.len() {
            if used1 & (1 << other) == 0 {
                total += -c * dot(dirs[first], dirs[other]) * rec(r, dirs, used1 | (1 << other), c);
            }
        }
        total
    }
    rec(r, dirs, 0, c)
}

fn check_layout(base: &Path, dirs: &[&Path], what: &str) -> Result<()> {
    for d in dirs {
        if d.grid() != base.grid() || d.channels() != base.channels() {
            return Err(shape(format!(
                "{what} direction does not match its path's grid or channels"
            )));
        }
    }
    Ok(())
}

/// Per-cell increments of `A` differentiated along `left` directions in
/// the first argument and `right` directions in the second.
///
/// Repeated entries mean repeated differentiation. The result has shape
/// `n_cells(γ) × n_cells(τ)`.
pub fn cell_field(
    gamma: &Path,
    tau: &Path,
    left: &[&Path],
    right: &[&Path],
    lift: &Lift,
) -> Result<DMatrix<f64>> {
    if gamma.channels() != tau.channels() {
        return Err(shape(format!(
            "paths have {} and {} channels",
            gamma.channels(),
            tau.channels()
        )));
    }
    check_layout(gamma, left, "left")?;
    check_layout(tau, right, "right")?;
    let (rows, cols) = (gamma.n_cells(), tau.n_cells());
    match *lift {
        Lift::Identity => {
            if left.len() >= 2 || right.len() >= 2 {
                return Ok(DMatrix::zeros(rows, cols));
            }
            let u = left.first().copied().unwrap_or(gamma);
            let v = right.first().copied().unwrap_or(tau);
            Ok(increment_matrix(u) * increment_matrix(v).transpose())
        }
        Lift::Rbf { sigma } => {
            if !(sigma > 0.0) {
                return Err(invalid("lift bandwidth must be positive"));
            }
            if left.len() + right.len() > 16 {
                return Err(invalid("too many derivative directions"));
            }
            let c = 1.0 / (sigma * sigma);
            let sign = if right.len().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            let d = gamma.channels();
            let mut r = vec![0.0; d];
            let corner = DMatrix::from_fn(rows + 1, cols + 1, |k, l| {
                let x = gamma.row(k);
                let y = tau.row(l);
                for ch in 0..d {
                    r[ch] = x[ch] - y[ch];
                }
                let phi = (-0.5 * c * sq_dist(x, y)).exp();
                let mut dirs: Vec<&[f64]> = Vec::with_capacity(left.len() + right.len());
                dirs.extend(left.iter().map(|p| p.row(k)));
                dirs.extend(right.iter().map(|p| p.row(l)));
                sign * phi * gaussian_poly(&r, &dirs, c)
            });
            Ok(DMatrix::from_fn(rows, cols, |i, j| {
                corner[(i + 1, j + 1)] - corner[(i + 1, j)] - corner[(i, j + 1)] + corner[(i, j)]
            }))
        }
    }
}

/// `n_cells × channels` matrix of path increments.
fn increment_matrix(p: &Path) -> DMatrix<f64> {
    DMatrix::from_fn(p.n_cells(), p.channels(), |k, c| p.increment(k, c))
}

/// The four fields of the first/second-derivative system.
#[derive(Debug, Clone, PartialEq)]
pub struct AField {
    pub a: DMatrix<f64>,
    pub a_eta: DMatrix<f64>,
    pub a_etabar: DMatrix<f64>,
    pub a_eta_etabar: DMatrix<f64>,
}

/// Fields for `κ`, `∂^η κ`, `∂^η̄ κ` and `∂^{ηη̄} κ`, all derivatives taken in
/// the first argument.
pub fn a_fields(
    gamma: &Path,
    tau: &Path,
    eta: &Path,
    etabar: &Path,
    lift: &Lift,
) -> Result<AField> {
    Ok(AField {
        a: cell_field(gamma, tau, &[], &[], lift)?,
        a_eta: cell_field(gamma, tau, &[eta], &[], lift)?,
        a_etabar: cell_field(gamma, tau, &[etabar], &[], lift)?,
        a_eta_etabar: cell_field(gamma, tau, &[eta, etabar], &[], lift)?,
    })
}
