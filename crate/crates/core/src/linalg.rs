//! Dense linear-algebra helpers shared by the simulation and recovery code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// First rung of the jitter ladder, relative to the trace.
pub const JITTER_START: f64 = 1e-12;
/// Last rung of the jitter ladder, relative to the trace.
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorisation with a diagonal jitter ladder.
///
/// Tries `1e-12 * trace`, then multiplies by ten up to `1e-6 * trace`.
/// Returns the factor and the absolute jitter that was added.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = mat.nrows();
    if n != mat.ncols() {
        return Err(crate::error::shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    if n == 0 {
        return Err(crate::error::invalid("cholesky of an empty matrix"));
    }
    let trace = mat.trace().abs().max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * trace;
        let mut shifted = mat.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol, jitter));
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::NotPositiveDefinite {
                jitter,
                pair: closest_pair(mat),
            });
        }
        rel *= 10.0;
    }
}

/// Most collinear pair of rows in a Gram matrix; used to name the culprit
/// when factorisation fails.
fn closest_pair(mat: &DMatrix<f64>) -> Option<(usize, usize)> {
    let n = mat.nrows();
    let mut best: Option<(f64, (usize, usize))> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = mat[(i, i)] * mat[(j, j)];
            if d <= 0.0 {
                continue;
            }
            let c = mat[(i, j)].abs() / d.sqrt();
            if best.is_none_or(|(b, _)| c > b) {
                best = Some((c, (i, j)));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(mat);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(mat: &DMatrix<f64>) -> DMatrix<f64> {
    (mat + mat.transpose()) * 0.5
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn max_asymmetry(mat: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..mat.nrows() {
        for j in (i + 1)..mat.ncols() {
            worst = worst.max((mat[(i, j)] - mat[(j, i)]).abs());
        }
    }
    worst
}

/// Nodes and weights of the 8-point Gauss–Legendre rule on [-1, 1].
const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_26),
];

/// Composite 8-point Gauss–Legendre quadrature of `f` over `[a, b]`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let mid = lo + 0.5 * width;
        let half = 0.5 * width;
        let mut acc = 0.0;
        for &(x, w) in GL8.iter() {
            acc += w * f(mid + half * x);
        }
        total += acc * half;
    }
    total
}
