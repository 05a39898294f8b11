//! Optimal recovery: Gram assembly, the linear solve routes, prediction,
//! Gaussian-process posteriors and the two-level nonlinear solve.
//!
//! Points are ordered interior first. A constraint functional is the
//! operator at an interior point and evaluation at a boundary point.

use std::path::Path as FsPath;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::linalg;
use crate::operator::{
    combine, evaluation, max_path_order, pair_table, CollocationPoint, KernelSpec, OpTerm,
    PairTable, PpdeKind, PpdeSpec, PreparedPoint,
};
use crate::paths::{BergomiParams, FbmSpec, Path, Regularization};
use crate::static_kernels::RbfParams;

/// Symmetric positive definite factorisation of a Jacobi-scaled Gram
/// matrix `D G D`, `D = diag(G)^{-1/2}`.
#[derive(Debug, Clone)]
pub struct ScaledCholesky {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
    pub jitter: f64,
}

impl ScaledCholesky {
    pub fn new(g: &DMatrix<f64>) -> Result<Self> {
        let n = g.nrows();
        let scale = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let d = g[(i, i)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            }),
        );
        let scaled = DMatrix::from_fn(n, n, |i, j| scale[i] * g[(i, j)] * scale[j]);
        let (chol, jitter) = linalg::cholesky_with_jitter(&linalg::symmetrize(&scaled))?;
        Ok(Self {
            chol,
            scale,
            jitter,
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = b.component_mul(&self.scale);
        self.chol.solve(&y).component_mul(&self.scale)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = b.clone();
        for mut col in y.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        let mut x = self.chol.solve(&y);
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        x
    }

    /// `L⁻¹ D v`, so that `vᵀ G⁻¹ v = |L⁻¹ D v|²`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let y = v.component_mul(&self.scale);
        self.chol
            .l()
            .solve_lower_triangular(&y)
            .expect("cholesky factor is invertible")
    }

    pub fn whiten_matrix(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = v.clone();
        for mut col in y.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        self.chol
            .l()
            .solve_lower_triangular(&y)
            .expect("cholesky factor is invertible")
    }
}

/// A linear functional `Σ terms` applied to the kernel at a collocation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    pub point: usize,
    pub terms: Vec<OpTerm>,
}

/// Collocation points prepared for kernel evaluation, with the signature
/// tables of every pair.
#[derive(Debug, Clone)]
pub struct PairCache {
    pub points: Vec<CollocationPoint>,
    prepared: Vec<PreparedPoint>,
    orders: Vec<usize>,
    tables: Vec<PairTable>,
}

fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

impl PairCache {
    /// Solves the signature system once per unordered pair, in parallel.
    pub fn build(
        points: Vec<CollocationPoint>,
        orders: Vec<usize>,
        kernel: &KernelSpec,
    ) -> Result<Self> {
        let prepared: Vec<PreparedPoint> = points
            .iter()
            .map(|p| PreparedPoint::new(p, kernel))
            .collect();
        let n = points.len();
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
        let tables = pairs
            .par_iter()
            .map(|&(i, j)| pair_table(&prepared[i], &prepared[j], orders[i], orders[j], kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            points,
            prepared,
            orders,
            tables,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn table(&self, i: usize, j: usize) -> PairTable {
        if i <= j {
            self.tables[tri_index(i, j)]
        } else {
            self.tables[tri_index(j, i)].transpose()
        }
    }

    /// `⟨f, g⟩` in the kernel's RKHS for two functionals on cached points.
    pub fn inner(&self, f: &Functional, g: &Functional, params: &RbfParams) -> Result<f64> {
        let t = self.table(f.point, g.point);
        combine(
            &f.terms,
            &g.terms,
            &self.prepared[f.point],
            &self.prepared[g.point],
            params,
            &t,
        )
    }

    pub fn gram(
        &self,
        fs: &[Functional],
        gs: &[Functional],
        params: &RbfParams,
    ) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(fs.len(), gs.len());
        for (i, f) in fs.iter().enumerate() {
            for (j, g) in gs.iter().enumerate() {
                m[(i, j)] = self.inner(f, g, params)?;
            }
        }
        Ok(m)
    }

    /// Rows `functional(κ(ω, ·))` for fresh points `ω`: entry `(e, k)` is
    /// functional `k` applied to the second argument of `κ(ω_e, ·)`.
    pub fn cross(
        &self,
        eval: &[CollocationPoint],
        fs: &[Functional],
        kernel: &KernelSpec,
    ) -> Result<DMatrix<f64>> {
        let rows = eval
            .par_iter()
            .map(|w| {
                let pw = PreparedPoint::new(w, kernel);
                let mut tables: Vec<Option<PairTable>> = vec![None; self.len()];
                let mut row = Vec::with_capacity(fs.len());
                for f in fs {
                    let order = max_path_order(&f.terms);
                    let t = match tables[f.point] {
                        Some(t) => t,
                        None => {
                            let t = pair_table(
                                &pw,
                                &self.prepared[f.point],
                                0,
                                self.orders[f.point].max(order),
                                kernel,
                            )?;
                            tables[f.point] = Some(t);
                            t
                        }
                    };
                    row.push(combine(
                        &evaluation(),
                        &f.terms,
                        &pw,
                        &self.prepared[f.point],
                        &kernel.rbf,
                        &t,
                    )?);
                }
                Ok(row)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(DMatrix::from_fn(eval.len(), fs.len(), |e, k| rows[e][k]))
    }
}

/// The assembled collocation problem.
#[derive(Debug, Clone)]
pub struct GramSystem {
    /// Symmetric Gram of the constraint functionals.
    pub g: DMatrix<f64>,
    /// Constraint functionals applied to `κ(·, ω_j)`.
    pub k_tilde: DMatrix<f64>,
    /// Plain kernel matrix `κ(ω_i, ω_j)`.
    pub kernel_gram: DMatrix<f64>,
    pub b: DVector<f64>,
    pub jitter_used: f64,
    pub m: usize,
    pub spec: PpdeSpec,
    pub kernel: KernelSpec,
    pub cache: Arc<PairCache>,
    pub constraints: Vec<Functional>,
    factor: ScaledCholesky,
}

fn constraint_functionals(spec: &PpdeSpec, points: &[CollocationPoint]) -> Result<Vec<Functional>> {
    points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            Ok(Functional {
                point: k,
                terms: spec.constraint_terms(p)?,
            })
        })
        .collect()
}

fn value_functionals(n: usize) -> Vec<Functional> {
    (0..n)
        .map(|k| Functional {
            point: k,
            terms: evaluation(),
        })
        .collect()
}

/// Splits points into interior-first order.
fn order_points(points: &[CollocationPoint]) -> (Vec<CollocationPoint>, usize) {
    let mut ordered: Vec<CollocationPoint> =
        points.iter().filter(|p| p.is_interior()).cloned().collect();
    let m = ordered.len();
    ordered.extend(points.iter().filter(|p| !p.is_interior()).cloned());
    (ordered, m)
}

/// Builds the Gram system for `points` (interior points are moved first,
/// keeping their relative order).
pub fn assemble(
    spec: &PpdeSpec,
    points: &[CollocationPoint],
    kernel: &KernelSpec,
) -> Result<GramSystem> {
    if points.is_empty() {
        return Err(invalid("collocation needs at least one point"));
    }
    spec.validate()?;
    kernel.validate()?;
    let (ordered, m) = order_points(points);
    let constraints = constraint_functionals(spec, &ordered)?;
    let orders = constraints
        .iter()
        .map(|f| max_path_order(&f.terms))
        .collect();
    let cache = PairCache::build(ordered, orders, kernel)?;
    GramSystem::from_cache(spec.clone(), kernel.clone(), Arc::new(cache), m)
}

impl GramSystem {
    /// Rebuilds the matrices from cached signature tables, e.g. after the
    /// time, state or start-point bandwidths changed.
    pub fn from_cache(
        spec: PpdeSpec,
        kernel: KernelSpec,
        cache: Arc<PairCache>,
        m: usize,
    ) -> Result<Self> {
        let constraints = constraint_functionals(&spec, &cache.points)?;
        let values = value_functionals(cache.len());
        let g = cache.gram(&constraints, &constraints, &kernel.rbf)?;
        let k_tilde = cache.gram(&constraints, &values, &kernel.rbf)?;
        let kernel_gram = cache.gram(&values, &values, &kernel.rbf)?;
        let b = DVector::from_iterator(
            cache.len(),
            cache.points.iter().enumerate().map(|(k, p)| {
                if k < m {
                    (spec.source)(p)
                } else {
                    (spec.terminal)(p)
                }
            }),
        );
        let factor = ScaledCholesky::new(&g)?;
        Ok(Self {
            g,
            k_tilde,
            kernel_gram,
            b,
            jitter_used: factor.jitter,
            m,
            spec,
            kernel,
            cache,
            constraints,
            factor,
        })
    }

    /// Same points and data under different bandwidths.
    pub fn with_params(&self, rbf: RbfParams) -> Result<Self> {
        if rbf.sigma_g != self.kernel.rbf.sigma_g
            && self.kernel.lift == crate::operator::LiftKind::Rbf
        {
            return Err(invalid(
                "changing the lift bandwidth needs a fresh assembly",
            ));
        }
        let mut kernel = self.kernel.clone();
        kernel.rbf = rbf;
        let mut sys = Self::from_cache(self.spec.clone(), kernel, self.cache.clone(), self.m)?;
        sys.b = self.b.clone();
        Ok(sys)
    }

    /// Same system with a different data vector.
    pub fn with_data(&self, b: DVector<f64>) -> Result<Self> {
        if b.len() != self.b.len() {
            return Err(shape(
                "data vector length differs from the number of constraints",
            ));
        }
        Ok(Self { b, ..self.clone() })
    }

    pub fn points(&self) -> &[CollocationPoint] {
        &self.cache.points
    }

    pub fn n(&self) -> usize {
        self.cache.len() - self.m
    }

    pub fn factor(&self) -> &ScaledCholesky {
        &self.factor
    }

    /// Smallest eigenvalue of `G` over its trace.
    pub fn min_eig_ratio(&self) -> f64 {
        linalg::min_eigenvalue(&self.g) / self.g.trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// `w = G⁻¹ b` on the constraint functionals.
    #[default]
    Symmetric,
    /// Minimum-norm saddle-point solve over kernel sections and operator
    /// sections at every point.
    Kkt,
    /// Plain kernel sections with square collocation `K̃ α = b`.
    OneSided,
}

/// Trained predictor `u(ω) = Σ_k w_k f_k(κ(ω, ·))`.
#[derive(Debug, Clone)]
pub struct RecoveryModel {
    pub method: Method,
    pub weights: DVector<f64>,
    pub basis: Vec<Functional>,
    pub cache: Arc<PairCache>,
    pub kernel: KernelSpec,
    pub spec: PpdeSpec,
    factor: Option<ScaledCholesky>,
}

/// Basis `[values at all points; operators at interior points]`.
fn augmented_basis(sys: &GramSystem) -> Vec<Functional> {
    let mut basis = value_functionals(sys.cache.len());
    basis.extend(sys.constraints[..sys.m].iter().cloned());
    basis
}

pub fn solve_linear(sys: &GramSystem, method: Method) -> Result<RecoveryModel> {
    let (weights, basis, factor) = match method {
        Method::Symmetric => (
            sys.factor.solve(&sys.b),
            sys.constraints.clone(),
            Some(sys.factor.clone()),
        ),
        Method::OneSided => {
            let lu = sys.k_tilde.clone().full_piv_lu();
            let w = lu.solve(&sys.b).ok_or_else(|| {
                Error::Numerical("one-sided collocation matrix is singular".into())
            })?;
            (w, value_functionals(sys.cache.len()), None)
        }
        Method::Kkt => {
            let basis = augmented_basis(sys);
            let k = sys.cache.gram(&basis, &basis, &sys.kernel.rbf)?;
            let c = sys.cache.gram(&sys.constraints, &basis, &sys.kernel.rbf)?;
            let (nb, nc) = (basis.len(), sys.constraints.len());
            // equilibrate rows and columns of the saddle matrix
            let s: Vec<f64> = (0..nb)
                .map(|i| 1.0 / k[(i, i)].abs().max(f64::MIN_POSITIVE).sqrt())
                .collect();
            let sc: Vec<f64> = (0..nc)
                .map(|i| 1.0 / sys.g[(i, i)].abs().max(f64::MIN_POSITIVE).sqrt())
                .collect();
            let mut saddle = DMatrix::zeros(nb + nc, nb + nc);
            for i in 0..nb {
                for j in 0..nb {
                    saddle[(i, j)] = s[i] * k[(i, j)] * s[j];
                }
            }
            for i in 0..nc {
                for j in 0..nb {
                    let v = sc[i] * c[(i, j)] * s[j];
                    saddle[(nb + i, j)] = v;
                    saddle[(j, nb + i)] = v;
                }
            }
            let mut rhs = DVector::zeros(nb + nc);
            for i in 0..nc {
                rhs[nb + i] = sc[i] * sys.b[i];
            }
            let sol = saddle
                .full_piv_lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("saddle-point system is singular".into()))?;
            let w = DVector::from_iterator(nb, (0..nb).map(|i| s[i] * sol[i]));
            (w, basis, None)
        }
    };
    if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite weight at index {pos}"
        )));
    }
    Ok(RecoveryModel {
        method,
        weights,
        basis,
        cache: sys.cache.clone(),
        kernel: sys.kernel.clone(),
        spec: sys.spec.clone(),
        factor,
    })
}

impl RecoveryModel {
    /// Matrix of basis functionals applied to `κ(ω_e, ·)`.
    pub fn design(&self, points: &[CollocationPoint]) -> Result<DMatrix<f64>> {
        self.cache.cross(points, &self.basis, &self.kernel)
    }

    pub fn predict(&self, points: &[CollocationPoint]) -> Result<Vec<f64>> {
        Ok(self.predict_with_design(&self.design(points)?))
    }

    pub fn predict_one(&self, point: &CollocationPoint) -> Result<f64> {
        Ok(self.predict(std::slice::from_ref(point))?[0])
    }

    pub fn predict_with_design(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * &self.weights).iter().copied().collect()
    }

    /// Same basis, new weights for a different data vector.
    pub fn reweighted(&self, sys: &GramSystem) -> Result<RecoveryModel> {
        solve_linear(sys, self.method)
    }

    /// Constraint functionals of the trained `u` at the collocation points.
    pub fn constraint_values(&self, sys: &GramSystem) -> Result<DVector<f64>> {
        let m = sys
            .cache
            .gram(&sys.constraints, &self.basis, &sys.kernel.rbf)?;
        Ok(m * &self.weights)
    }

    pub fn factor(&self) -> Option<&ScaledCholesky> {
        self.factor.as_ref()
    }

    /// Writes `model.json` and the referenced point paths to `dir`.
    pub fn save(&self, dir: impl AsRef<FsPath>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("points"))?;
        let mut refs = Vec::with_capacity(self.cache.len());
        for (k, p) in self.cache.points.iter().enumerate() {
            let gamma = format!("points/gamma_{k:04}.csv");
            let direction = format!("points/direction_{k:04}.csv");
            p.gamma.write_csv(dir.join(&gamma))?;
            p.direction.write_csv(dir.join(&direction))?;
            refs.push(PointRef {
                t: p.t,
                x: p.x.clone(),
                gamma,
                direction,
            });
        }
        let file = ModelFile {
            spec: SpecDescriptor::of(&self.spec),
            params: self.kernel.clone(),
            method: self.method,
            weights: self.weights.iter().copied().collect(),
            basis: self.basis.clone(),
            points: refs,
        };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Reads a model written by [`RecoveryModel::save`]. Source and terminal
    /// data are not serialised and come from `spec`.
    pub fn load(dir: impl AsRef<FsPath>, spec: PpdeSpec) -> Result<RecoveryModel> {
        let dir = dir.as_ref();
        let file: ModelFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut points = Vec::with_capacity(file.points.len());
        for r in &file.points {
            let gamma = Path::read_csv(dir.join(&r.gamma))?;
            let direction = Path::read_csv(dir.join(&r.direction))?;
            points.push(CollocationPoint::new(r.t, r.x.clone(), gamma, direction)?);
        }
        let mut orders = vec![0; points.len()];
        for f in &file.basis {
            if f.point >= points.len() {
                return Err(Error::Parse(format!(
                    "basis refers to missing point {}",
                    f.point
                )));
            }
            orders[f.point] = orders[f.point].max(max_path_order(&f.terms));
        }
        let cache = PairCache::build(points, orders, &file.params)?;
        let mut spec = spec;
        file.spec.apply(&mut spec);
        Ok(RecoveryModel {
            method: file.method,
            weights: DVector::from_vec(file.weights),
            basis: file.basis,
            cache: Arc::new(cache),
            kernel: file.params,
            spec,
            factor: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PointRef {
    t: f64,
    x: Vec<f64>,
    gamma: String,
    direction: String,
}

/// Serialisable part of a [`PpdeSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecDescriptor {
    pub kind: PpdeKind,
    pub fbm: FbmSpec,
    pub bergomi: Option<BergomiParams>,
    pub regularization: Regularization,
}

impl SpecDescriptor {
    pub fn of(spec: &PpdeSpec) -> Self {
        Self {
            kind: spec.kind,
            fbm: spec.fbm,
            bergomi: spec.bergomi,
            regularization: spec.regularization,
        }
    }

    fn apply(&self, spec: &mut PpdeSpec) {
        spec.kind = self.kind;
        spec.fbm = self.fbm;
        spec.bergomi = self.bergomi;
        spec.regularization = self.regularization;
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    spec: SpecDescriptor,
    params: KernelSpec,
    method: Method,
    weights: Vec<f64>,
    basis: Vec<Functional>,
    points: Vec<PointRef>,
}

/// Posterior mean and covariance at `test` points.
///
/// The mean is `a G⁻¹ b` and the covariance `κ - a G⁻¹ aᵀ`, symmetrised.
pub fn gp_posterior(
    model: &RecoveryModel,
    test: &[CollocationPoint],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let prior = prior_covariance(test, &model.kernel)?;
    if model.basis.is_empty() {
        return Ok((DVector::zeros(test.len()), prior));
    }
    let factor = model
        .factor
        .as_ref()
        .ok_or_else(|| invalid("posterior needs a model from the symmetric route"))?;
    let a = model.design(test)?;
    let mean = &a * &model.weights;
    let cov = prior - &a * factor.solve_matrix(&a.transpose());
    Ok((mean, linalg::symmetrize(&cov)))
}

/// Prior kernel matrix on a set of points.
pub fn prior_covariance(points: &[CollocationPoint], kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = points.len();
    let cache = PairCache::build(points.to_vec(), vec![0; n], kernel)?;
    let values = value_functionals(n);
    cache.gram(&values, &values, &kernel.rbf)
}

/// Pointwise nonlinearity with its derivative.
#[derive(Clone)]
pub struct Nonlinearity {
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub df: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self {
            f: Arc::new(|_| 0.0),
            df: Arc::new(|_| 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Gauss–Newton directions with Armijo backtracking.
    #[default]
    GaussNewton,
    /// Steepest descent with Armijo backtracking.
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentOptions {
    pub optimizer: Optimizer,
    /// Initial trial step for each line search.
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub armijo: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            step: 1.0,
            max_iters: 5000,
            tol: 1e-8,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub latent: Vec<f64>,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// The two-level problem `min_z v(z)ᵀ G⁻¹ v(z)` with
/// `v(z) = [z; f_boundary; g - ψ(z)]`.
pub struct NonlinearProblem {
    pub g_ext: DMatrix<f64>,
    pub m: usize,
    pub boundary: DVector<f64>,
    pub source: DVector<f64>,
    pub psi: Nonlinearity,
    basis: Vec<Functional>,
    factor: ScaledCholesky,
}

impl NonlinearProblem {
    pub fn new(sys: &GramSystem, psi: Nonlinearity) -> Result<Self> {
        let basis = augmented_basis(sys);
        let g_ext = sys.cache.gram(&basis, &basis, &sys.kernel.rbf)?;
        let factor = ScaledCholesky::new(&g_ext)?;
        let m = sys.m;
        Ok(Self {
            g_ext,
            m,
            boundary: sys.b.rows(m, sys.n()).into_owned(),
            source: sys.b.rows(0, m).into_owned(),
            psi,
            basis,
            factor,
        })
    }

    pub fn data(&self, z: &DVector<f64>) -> DVector<f64> {
        let (m, n) = (self.m, self.boundary.len());
        let mut v = DVector::zeros(2 * m + n);
        for i in 0..m {
            v[i] = z[i];
            v[m + n + i] = self.source[i] - (self.psi.f)(z[i]);
        }
        for i in 0..n {
            v[m + i] = self.boundary[i];
        }
        v
    }

    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (m, n) = (self.m, self.boundary.len());
        let mut j = DMatrix::zeros(2 * m + n, m);
        for i in 0..m {
            j[(i, i)] = 1.0;
            j[(m + n + i, i)] = -(self.psi.df)(z[i]);
        }
        j
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        self.factor.whiten(&self.data(z)).norm_squared()
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let w = self.factor.solve(&self.data(z));
        2.0 * self.jacobian(z).transpose() * w
    }

    /// Model induced by a latent vector.
    pub fn model(&self, sys: &GramSystem, z: &DVector<f64>) -> RecoveryModel {
        RecoveryModel {
            method: Method::Kkt,
            weights: self.factor.solve(&self.data(z)),
            basis: self.basis.clone(),
            cache: sys.cache.clone(),
            kernel: sys.kernel.clone(),
            spec: sys.spec.clone(),
            factor: None,
        }
    }

    pub fn minimize(&self, z0: DVector<f64>, opts: &DescentOptions) -> Result<DescentReport> {
        let mut z = z0;
        let mut obj = self.objective(&z);
        let mut history = vec![obj];
        for it in 0..opts.max_iters {
            let grad = self.gradient(&z);
            let gnorm = grad.norm();
            if gnorm <= opts.tol {
                return Ok(self.report(it, obj, gnorm, z, history));
            }
            let dir = match opts.optimizer {
                Optimizer::GradientDescent => -&grad,
                Optimizer::GaussNewton => {
                    let jr = self.factor.whiten_matrix(&self.jacobian(&z));
                    let r = self.factor.whiten(&self.data(&z));
                    let h = jr.transpose() * &jr;
                    let rhs = -(jr.transpose() * r);
                    match Cholesky::new(h.clone()) {
                        Some(c) => c.solve(&rhs),
                        None => -&grad,
                    }
                }
            };
            let slope = grad.dot(&dir);
            if slope >= 0.0 {
                return Err(self.stalled(it, obj, gnorm, z));
            }
            // the predicted decrease is at rounding level: stationary
            if -slope <= 1e-14 * (1.0 + obj) {
                return Ok(self.report(it, obj, gnorm, z, history));
            }
            let mut alpha = opts.step;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &z + alpha * &dir;
                let t_obj = self.objective(&trial);
                if t_obj <= obj + opts.armijo * alpha * slope {
                    z = trial;
                    obj = t_obj;
                    history.push(obj);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(self.stalled(it, obj, gnorm, z));
            }
        }
        let gnorm = self.gradient(&z).norm();
        if gnorm <= opts.tol {
            return Ok(self.report(opts.max_iters, obj, gnorm, z, history));
        }
        Err(self.stalled(opts.max_iters, obj, gnorm, z))
    }

    fn report(
        &self,
        iterations: usize,
        objective: f64,
        grad_norm: f64,
        z: DVector<f64>,
        history: Vec<f64>,
    ) -> DescentReport {
        DescentReport {
            iterations,
            objective,
            grad_norm,
            latent: z.iter().copied().collect(),
            history,
        }
    }

    fn stalled(&self, iterations: usize, objective: f64, grad_norm: f64, z: DVector<f64>) -> Error {
        Error::NoConvergence {
            iterations,
            objective,
            grad_norm,
            last_iterate: z.iter().copied().collect(),
        }
    }
}

/// Solves `𝓛u = g - ψ(u)` in the interior, `u = f` on the boundary, by
/// minimising the RKHS norm over the latent interior values.
pub fn solve_nonlinear(
    sys: &GramSystem,
    psi: Nonlinearity,
    opts: &DescentOptions,
) -> Result<(RecoveryModel, DescentReport)> {
    let problem = NonlinearProblem::new(sys, psi)?;
    let init = if problem.boundary.is_empty() {
        0.0
    } else {
        problem.boundary.mean()
    };
    let report = problem.minimize(DVector::from_element(problem.m, init), opts)?;
    let z = DVector::from_vec(report.latent.clone());
    Ok((problem.model(sys, &z), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goursat::Scheme;
    use crate::operator::LiftKind;
    use crate::paths::{brownian_increments, simulate_theta_frozen, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel() -> KernelSpec {
        KernelSpec {
            rbf: RbfParams {
                sigma_t: 0.5,
                sigma_x: vec![],
                sigma_g: 1.0,
                sigma_l: 1.0,
            },
            lift: LiftKind::Rbf,
            dyadic_order: 0,
            scheme: Scheme::default(),
            time_augment: true,
            time_warp: Default::default(),
        }
    }

    fn points(spec: &PpdeSpec, m: usize, n: usize, seed: u64) -> Vec<CollocationPoint> {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for k in 0..m + n {
            let t = if k < m {
                g.node(rng.gen_range(0..8))
            } else {
                1.0
            };
            let inc = brownian_increments(&g, &mut rng);
            let th = simulate_theta_frozen(t, &spec.fbm, &g, &inc).unwrap();
            out.push(spec.point(t, vec![], th).unwrap());
        }
        out
    }

    fn heat(terminal: fn(&CollocationPoint) -> f64) -> PpdeSpec {
        PpdeSpec::fbm_heat(FbmSpec::normalized(0.3, 1.0).unwrap(), Arc::new(terminal))
    }

    fn last(p: &CollocationPoint) -> f64 {
        p.gamma.end()[0]
    }

    #[test]
    fn single_boundary_point() {
        let spec = heat(|p| 2.0 + last(p));
        let pts = points(&spec, 0, 1, 1);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        assert_eq!(sys.g.shape(), (1, 1));
        let model = solve_linear(&sys, Method::Symmetric).unwrap();
        let other = points(&spec, 3, 0, 2);
        let pred = model.predict(&other).unwrap();
        let k11 = sys.g[(0, 0)];
        for (w, p) in other.iter().zip(pred) {
            let kap = crate::operator::product_kernel(w, &pts[0], &kernel()).unwrap();
            let expected = (2.0 + last(&pts[0])) * kap / k11;
            assert!((p - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn zero_data_gives_zero_model() {
        let spec = heat(|_| 0.0);
        let pts = points(&spec, 4, 3, 3);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        assert!(sys.b.iter().all(|&v| v == 0.0));
        let model = solve_linear(&sys, Method::Symmetric).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn constraints_hold_and_routes_agree() {
        let spec = heat(last);
        let pts = points(&spec, 6, 5, 4);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        assert!(linalg::max_asymmetry(&sys.g) < 1e-8);
        assert!(sys.min_eig_ratio() >= -1e-8);
        let sym = solve_linear(&sys, Method::Symmetric).unwrap();
        let res = sym.constraint_values(&sys).unwrap() - &sys.b;
        assert!(res.amax() < 1e-6, "residual {}", res.amax());
        let kkt = solve_linear(&sys, Method::Kkt).unwrap();
        let eval = points(&spec, 6, 0, 5);
        let a = sym.predict(&eval).unwrap();
        let b = kkt.predict(&eval).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
        let doubled =
            solve_linear(&sys.with_data(&sys.b * 2.0).unwrap(), Method::Symmetric).unwrap();
        for (x, y) in a.iter().zip(doubled.predict(&eval).unwrap()) {
            assert!((2.0 * x - y).abs() <= 1e-10 * x.abs().max(1e-6));
        }
    }

    #[test]
    fn posterior_interpolates_boundary() {
        let spec = heat(last);
        let pts = points(&spec, 4, 4, 6);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        let model = solve_linear(&sys, Method::Symmetric).unwrap();
        let boundary: Vec<CollocationPoint> = sys.points()[sys.m..].to_vec();
        let (mean, cov) = gp_posterior(&model, &boundary).unwrap();
        for (k, p) in boundary.iter().enumerate() {
            assert!(cov[(k, k)] <= 1e-6);
            assert!((mean[k] - last(p)).abs() < 1e-6);
        }
        let test = points(&spec, 6, 2, 7);
        let (mean, cov) = gp_posterior(&model, &test).unwrap();
        let pred = model.predict(&test).unwrap();
        for (a, b) in mean.iter().zip(pred) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
        assert!(linalg::min_eigenvalue(&cov) >= -1e-8 * cov.trace());
    }

    #[test]
    fn empty_model_posterior_is_prior() {
        let spec = heat(last);
        let pts = points(&spec, 2, 2, 8);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        let mut model = solve_linear(&sys, Method::Symmetric).unwrap();
        model.basis.clear();
        model.weights = DVector::zeros(0);
        let test = points(&spec, 3, 0, 9);
        let (mean, cov) = gp_posterior(&model, &test).unwrap();
        assert!(mean.iter().all(|&v| v == 0.0));
        let prior = prior_covariance(&test, &kernel()).unwrap();
        assert_eq!(cov, prior);
    }

    #[test]
    fn duplicate_boundary_point_changes_nothing() {
        let spec = heat(last);
        let pts = points(&spec, 3, 3, 10);
        let eval = points(&spec, 4, 0, 11);
        let base = solve_linear(
            &assemble(&spec, &pts, &kernel()).unwrap(),
            Method::Symmetric,
        )
        .unwrap()
        .predict(&eval)
        .unwrap();
        let mut dup = pts.clone();
        dup.push(pts[5].clone());
        let sys = assemble(&spec, &dup, &kernel()).unwrap();
        assert!(sys.jitter_used > 0.0);
        let with_dup = solve_linear(&sys, Method::Symmetric)
            .unwrap()
            .predict(&eval)
            .unwrap();
        for (a, b) in base.iter().zip(with_dup) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn nonlinear_with_zero_psi_matches_linear() {
        let spec = heat(last);
        let pts = points(&spec, 4, 4, 12);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        let lin = solve_linear(&sys, Method::Symmetric).unwrap();
        let (nl, report) =
            solve_nonlinear(&sys, Nonlinearity::zero(), &DescentOptions::default()).unwrap();
        assert!(report.history.windows(2).all(|w| w[1] <= w[0]));
        let eval = points(&spec, 5, 0, 13);
        for (a, b) in lin
            .predict(&eval)
            .unwrap()
            .iter()
            .zip(nl.predict(&eval).unwrap())
        {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let spec = heat(last);
        let pts = points(&spec, 2, 2, 14);
        let sys = assemble(&spec, &pts, &kernel()).unwrap();
        let model = solve_linear(&sys, Method::Symmetric).unwrap();
        let dir = std::env::temp_dir().join(format!("sigppde-model-{}", std::process::id()));
        model.save(&dir).unwrap();
        let loaded = RecoveryModel::load(&dir, spec.clone()).unwrap();
        let eval = points(&spec, 3, 0, 15);
        assert_eq!(
            model.predict(&eval).unwrap(),
            loaded.predict(&eval).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
