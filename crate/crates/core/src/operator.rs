//! The product kernel on `[0, T] × ℝ^d × paths` and the PDE operators
//! applied to it.
//!
//! `κ(ω, ω') = k((t, x), (t', x')) · ℓ(γ_0, γ'_0) · κ_sig(γ̃ - γ̃_0, γ̃' - γ̃'_0)`
//! where `γ̃` is the time-augmented path. Operators are stored as short
//! term lists so that one signature solve per pair of points yields every
//! Gram entry that pair contributes.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::goursat::{derivative_table, Scheme};
use crate::paths::{time_augment, BergomiParams, FbmSpec, Path, Regularization, TimeGrid};
use crate::static_kernels::{gauss_deriv_1d, rbf, Lift, RbfParams};

const TIME_TOL: f64 = 1e-9;

/// A point `ω = (t, x, γ)` with the direction used by the operator there.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub gamma: Path,
    pub direction: Path,
}

impl CollocationPoint {
    pub fn new(t: f64, x: Vec<f64>, gamma: Path, direction: Path) -> Result<Self> {
        if direction.grid() != gamma.grid() || direction.channels() != gamma.channels() {
            return Err(shape("direction must share the path's grid and channels"));
        }
        let grid = gamma.grid();
        if !(t >= grid.t0 - TIME_TOL && t <= grid.t1 + TIME_TOL) {
            return Err(invalid(format!("time {t} outside the path's grid")));
        }
        let last = grid.floor_index(t);
        for k in 0..=last {
            if direction.row(k).iter().any(|&v| v != 0.0) {
                return Err(invalid(format!("direction is nonzero before {t}")));
            }
        }
        Ok(Self {
            t,
            x,
            gamma,
            direction,
        })
    }

    /// A point without a direction (terminal constraints, evaluation).
    pub fn plain(t: f64, x: Vec<f64>, gamma: Path) -> Result<Self> {
        let direction = Path::zeros(*gamma.grid(), gamma.channels());
        Self::new(t, x, gamma, direction)
    }

    pub fn is_interior(&self) -> bool {
        self.t < self.gamma.grid().t1 - TIME_TOL
    }

    /// Node index of `t` on the path grid (floor for off-grid times).
    pub fn node(&self) -> usize {
        self.gamma.grid().floor_index(self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpdeKind {
    /// `∂_t u + ½ ∂^{KK}_γ u + g = 0`.
    FbmHeat,
    /// `∂_t u + ½ψ(∂²_x - ∂_x)u + ½ ∂^{KK}_γ u + ρ√ψ ∂^K_γ ∂_x u = 0`.
    RoughBergomi,
}

pub type PointFn = Arc<dyn Fn(&CollocationPoint) -> f64 + Send + Sync>;

/// A linear PPDE with its data.
#[derive(Clone)]
pub struct PpdeSpec {
    pub kind: PpdeKind,
    pub fbm: FbmSpec,
    pub bergomi: Option<BergomiParams>,
    pub source: PointFn,
    pub terminal: PointFn,
    pub regularization: Regularization,
}

impl fmt::Debug for PpdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PpdeSpec")
            .field("kind", &self.kind)
            .field("fbm", &self.fbm)
            .field("bergomi", &self.bergomi)
            .field("regularization", &self.regularization)
            .finish_non_exhaustive()
    }
}

impl PpdeSpec {
    pub fn fbm_heat(fbm: FbmSpec, terminal: PointFn) -> Self {
        Self {
            kind: PpdeKind::FbmHeat,
            fbm,
            bergomi: None,
            source: Arc::new(|_| 0.0),
            terminal,
            regularization: Regularization::default(),
        }
    }

    pub fn rough_bergomi(params: BergomiParams, horizon: f64, terminal: PointFn) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            kind: PpdeKind::RoughBergomi,
            fbm: params.fbm(horizon)?,
            bergomi: Some(params),
            source: Arc::new(|_| 0.0),
            terminal,
            regularization: Regularization::default(),
        })
    }

    pub fn with_source(mut self, source: PointFn) -> Self {
        self.source = source;
        self
    }

    pub fn with_regularization(mut self, reg: Regularization) -> Self {
        self.regularization = reg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.regularization {
            Regularization::Truncated { delta: v } | Regularization::Shifted { eps: v }
                if !(v >= 0.0) =>
            {
                return Err(invalid("regularisation length must be >= 0"));
            }
            _ => {}
        }
        if self.kind == PpdeKind::RoughBergomi {
            self.bergomi
                .as_ref()
                .ok_or_else(|| invalid("rough Bergomi operator needs model parameters"))?
                .validate()?;
        }
        Ok(())
    }

    /// The operator's direction at time `t`.
    pub fn direction(&self, t: f64, grid: &TimeGrid) -> Result<Path> {
        self.regularization.direction(t, &self.fbm, grid)
    }

    /// A collocation point carrying this operator's direction when interior.
    pub fn point(&self, t: f64, x: Vec<f64>, gamma: Path) -> Result<CollocationPoint> {
        let grid = *gamma.grid();
        if t < grid.t1 - TIME_TOL {
            let dir = self.direction(t, &grid)?;
            let dir = if gamma.channels() == 1 {
                dir
            } else {
                // the direction moves the first channel only
                dir.pad_back(gamma.channels() - 1)
            };
            CollocationPoint::new(t, x, gamma, dir)
        } else {
            CollocationPoint::plain(t, x, gamma)
        }
    }

    /// Operator terms at an interior point.
    pub fn terms(&self, p: &CollocationPoint) -> Result<Vec<OpTerm>> {
        if !p.is_interior() {
            return Err(invalid(format!(
                "operator applied at boundary time {}",
                p.t
            )));
        }
        let t = |coef, dt, dx, path| OpTerm { coef, dt, dx, path };
        Ok(match self.kind {
            PpdeKind::FbmHeat => vec![t(1.0, 1, 0, 0), t(0.5, 0, 0, 2)],
            PpdeKind::RoughBergomi => {
                let b = self
                    .bergomi
                    .as_ref()
                    .ok_or_else(|| invalid("missing Bergomi parameters"))?;
                if p.x.len() != 1 {
                    return Err(invalid("rough Bergomi points need a scalar log-price"));
                }
                let psi = b.psi(p.t, p.gamma.value(p.node(), 0));
                vec![
                    t(1.0, 1, 0, 0),
                    t(0.5 * psi, 0, 2, 0),
                    t(-0.5 * psi, 0, 1, 0),
                    t(0.5, 0, 0, 2),
                    t(b.rho * psi.sqrt(), 0, 1, 1),
                ]
            }
        })
    }

    /// Terms of the constraint functional at `p`: the operator when
    /// interior, point evaluation on the boundary.
    pub fn constraint_terms(&self, p: &CollocationPoint) -> Result<Vec<OpTerm>> {
        if p.is_interior() {
            self.terms(p)
        } else {
            Ok(evaluation())
        }
    }
}

/// `coef · ∂_t^dt ∂_x^dx (∂^K_γ)^path` acting on one argument of `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpTerm {
    pub coef: f64,
    pub dt: usize,
    pub dx: usize,
    pub path: usize,
}

/// The point-evaluation functional.
pub fn evaluation() -> Vec<OpTerm> {
    vec![OpTerm {
        coef: 1.0,
        dt: 0,
        dx: 0,
        path: 0,
    }]
}

pub fn max_path_order(terms: &[OpTerm]) -> usize {
    terms.iter().map(|t| t.path).max().unwrap_or(0)
}

/// Everything about the signature factor that is fixed per kernel setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub rbf: RbfParams,
    pub lift: LiftKind,
    pub dyadic_order: u32,
    #[serde(default)]
    pub scheme: Scheme,
    /// Prepend a normalised time channel before taking signatures.
    #[serde(default = "default_true")]
    pub time_augment: bool,
    #[serde(default)]
    pub time_warp: TimeWarp,
}

/// Reparametrisation of time inside the Gaussian time factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWarp {
    #[default]
    Identity,
    /// `s(t) = 1 - (1 - t/T)^p`. With `p = 2H` the factor sees time
    /// through the remaining variance `(T - t)^{2H}`, which is how the
    /// solutions of fractional problems depend on `t`.
    Power { exponent: f64, horizon: f64 },
}

impl TimeWarp {
    /// `(s(t), s'(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            TimeWarp::Identity => (t, 1.0),
            TimeWarp::Power { exponent, horizon } => {
                let r = (1.0 - t / horizon).max(0.0);
                let ds = if r > 0.0 {
                    exponent * r.powf(exponent - 1.0) / horizon
                } else {
                    f64::INFINITY
                };
                (1.0 - r.powf(exponent), ds)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimeWarp::Identity => Ok(()),
            TimeWarp::Power { exponent, horizon } => {
                if !(exponent > 0.0 && exponent.is_finite() && horizon > 0.0) {
                    return Err(invalid("time warp needs a positive exponent and horizon"));
                }
                Ok(())
            }
        }
    }
}

fn default_true() -> bool {
    true
}

/// Which lift the signature factor uses; the RBF bandwidth is `sigma_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftKind {
    Identity,
    Rbf,
}

impl KernelSpec {
    pub fn lift(&self) -> Lift {
        match self.lift {
            LiftKind::Identity => Lift::Identity,
            LiftKind::Rbf => Lift::Rbf {
                sigma: self.rbf.sigma_g,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rbf.validate()?;
        if self.dyadic_order > 8 {
            return Err(invalid("dyadic order above 8 is not supported"));
        }
        self.time_warp.validate()
    }
}

/// A point in the layout the signature solver consumes.
#[derive(Debug, Clone)]
pub struct PreparedPoint {
    pub t: f64,
    /// Warped time and its derivative.
    pub s: f64,
    pub ds: f64,
    pub x: Vec<f64>,
    pub start: Vec<f64>,
    pub path: Path,
    pub direction: Path,
}

impl PreparedPoint {
    pub fn new(p: &CollocationPoint, kernel: &KernelSpec) -> Self {
        let centered = p.gamma.recentered();
        let (path, direction) = if kernel.time_augment {
            (time_augment(&centered), p.direction.pad_front(1))
        } else {
            (centered, p.direction.clone())
        };
        let (s, ds) = kernel.time_warp.eval(p.t);
        Self {
            t: p.t,
            s,
            ds,
            x: p.x.clone(),
            start: p.gamma.start().to_vec(),
            path,
            direction,
        }
    }
}

/// `∂^p_{η_a} ∂^q_{η_b} κ_sig` for `p, q ≤ 2`, directions from each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTable(pub [[f64; 3]; 3]);

impl PairTable {
    pub fn transpose(&self) -> PairTable {
        let mut t = [[0.0; 3]; 3];
        for (p, row) in self.0.iter().enumerate() {
            for (q, v) in row.iter().enumerate() {
                t[q][p] = *v;
            }
        }
        PairTable(t)
    }

    pub fn kernel(&self) -> f64 {
        self.0[0][0]
    }
}

/// Signature-factor table for a pair, up to the given derivative orders.
pub fn pair_table(
    a: &PreparedPoint,
    b: &PreparedPoint,
    left: usize,
    right: usize,
    kernel: &KernelSpec,
) -> Result<PairTable> {
    if left > 2 || right > 2 {
        return Err(invalid("pathwise derivative order above 2"));
    }
    let l: Vec<(&Path, usize)> = if left > 0 {
        vec![(&a.direction, left)]
    } else {
        vec![]
    };
    let r: Vec<(&Path, usize)> = if right > 0 {
        vec![(&b.direction, right)]
    } else {
        vec![]
    };
    let table = derivative_table(
        &a.path,
        &b.path,
        &l,
        &r,
        &kernel.lift(),
        kernel.dyadic_order,
        kernel.scheme,
    )?;
    let mut out = [[0.0; 3]; 3];
    for p in 0..=left {
        for q in 0..=right {
            let li: Vec<usize> = if left > 0 { vec![p] } else { vec![] };
            let ri: Vec<usize> = if right > 0 { vec![q] } else { vec![] };
            out[p][q] = table.get(&li, &ri);
        }
    }
    Ok(PairTable(out))
}

/// `∂^a_t ∂^b_{t'} exp(-(s(t) - s(t'))² / 2σ²)` for a warp `s`.
fn time_factor(
    a: &PreparedPoint,
    b: &PreparedPoint,
    da: usize,
    db: usize,
    sigma: f64,
) -> Result<f64> {
    let warped = a.ds != 1.0 || b.ds != 1.0;
    if warped && (da > 1 || db > 1) {
        return Err(invalid(
            "time derivatives above first order need an unwarped time factor",
        ));
    }
    let sign = if db.is_multiple_of(2) { 1.0 } else { -1.0 };
    let chain = a.ds.powi(da as i32) * b.ds.powi(db as i32);
    Ok(sign * chain * gauss_deriv_1d(a.s - b.s, sigma, da + db))
}

fn state_factor(x: &[f64], y: &[f64], a: usize, b: usize, sigma: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != sigma.len() {
        return Err(shape(format!(
            "state dimensions {} / {} with {} bandwidths",
            x.len(),
            y.len(),
            sigma.len()
        )));
    }
    if x.is_empty() {
        return if a + b == 0 {
            Ok(1.0)
        } else {
            Err(invalid("state derivative requested without a state"))
        };
    }
    let sign = if b.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut v = sign * gauss_deriv_1d(x[0] - y[0], sigma[0], a + b);
    for c in 1..x.len() {
        v *= rbf(&x[c..=c], &y[c..=c], sigma[c])?;
    }
    Ok(v)
}

/// `Σ_p Σ_q c_p c_q ∂^{p} ∂'^{q} κ(a, b)` from a precomputed table.
pub fn combine(
    left: &[OpTerm],
    right: &[OpTerm],
    a: &PreparedPoint,
    b: &PreparedPoint,
    params: &RbfParams,
    table: &PairTable,
) -> Result<f64> {
    let ell = rbf(&a.start, &b.start, params.sigma_l)?;
    let mut total = 0.0;
    for l in left {
        for r in right {
            let kt = time_factor(a, b, l.dt, r.dt, params.sigma_t)?;
            let kx = state_factor(&a.x, &b.x, l.dx, r.dx, &params.sigma_x)?;
            total += l.coef * r.coef * kt * kx * table.0[l.path][r.path];
        }
    }
    Ok(total * ell)
}

/// `κ(ω, ω')`.
pub fn product_kernel(
    a: &CollocationPoint,
    b: &CollocationPoint,
    kernel: &KernelSpec,
) -> Result<f64> {
    let (pa, pb) = (PreparedPoint::new(a, kernel), PreparedPoint::new(b, kernel));
    let table = pair_table(&pa, &pb, 0, 0, kernel)?;
    combine(&evaluation(), &evaluation(), &pa, &pb, &kernel.rbf, &table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Operator on the first argument only.
    Left,
    /// Operator on both arguments, each with its own point's direction.
    Both,
}

/// `𝓛` applied to `κ(·, ω_j)` at `ω_i`, or to both arguments.
///
/// With [`Side::Both`] a boundary `ω_j` contributes point evaluation.
pub fn apply_l(
    spec: &PpdeSpec,
    wi: &CollocationPoint,
    wj: &CollocationPoint,
    kernel: &KernelSpec,
    side: Side,
) -> Result<f64> {
    let left = spec.terms(wi)?;
    let right = match side {
        Side::Left => evaluation(),
        Side::Both => spec.constraint_terms(wj)?,
    };
    let (pa, pb) = (
        PreparedPoint::new(wi, kernel),
        PreparedPoint::new(wj, kernel),
    );
    let table = pair_table(
        &pa,
        &pb,
        max_path_order(&left),
        max_path_order(&right),
        kernel,
    )?;
    combine(&left, &right, &pa, &pb, &kernel.rbf, &table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{brownian_increments, simulate_theta_frozen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel() -> KernelSpec {
        KernelSpec {
            rbf: RbfParams {
                sigma_t: 0.5,
                sigma_x: vec![],
                sigma_g: 1.0,
                sigma_l: 0.8,
            },
            lift: LiftKind::Rbf,
            dyadic_order: 1,
            scheme: Scheme::default(),
            time_augment: true,
            time_warp: Default::default(),
        }
    }

    fn setup(hurst: f64) -> (TimeGrid, PpdeSpec) {
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let fbm = FbmSpec::normalized(hurst, 1.0).unwrap();
        (g, PpdeSpec::fbm_heat(fbm, Arc::new(|_| 0.0)))
    }

    fn theta_point(
        spec: &PpdeSpec,
        g: &TimeGrid,
        t: f64,
        seed: u64,
        x: Vec<f64>,
    ) -> CollocationPoint {
        let inc = brownian_increments(g, &mut ChaCha8Rng::seed_from_u64(seed));
        let th = simulate_theta_frozen(t, &spec.fbm, g, &inc).unwrap();
        spec.point(t, x, th).unwrap()
    }

    #[test]
    fn identical_constant_points_have_unit_kernel() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let p =
            CollocationPoint::plain(1.0, vec![], Path::scalar(g, vec![0.2; 9]).unwrap()).unwrap();
        let mut k = kernel();
        k.time_augment = false;
        assert!((product_kernel(&p, &p, &k).unwrap() - 1.0).abs() < 1e-15);
        // with the time channel only time moves: the Bessel value for the identity lift
        k.time_augment = true;
        k.lift = LiftKind::Identity;
        k.dyadic_order = 4;
        assert!((product_kernel(&p, &p, &k).unwrap() - 2.279_585_3).abs() < 1e-3);
    }

    #[test]
    fn kernel_symmetric_and_bounded() {
        let (g, spec) = setup(0.3);
        let a = theta_point(&spec, &g, 0.25, 1, vec![]);
        let b = theta_point(&spec, &g, 0.5, 2, vec![]);
        let mut k = kernel();
        k.lift = LiftKind::Identity;
        let ab = product_kernel(&a, &b, &k).unwrap();
        let ba = product_kernel(&b, &a, &k).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        let pa = PreparedPoint::new(&a, &k);
        let pb = PreparedPoint::new(&b, &k);
        let bound =
            (crate::paths::one_variation(&pa.path) * crate::paths::one_variation(&pb.path)).exp();
        assert!(ab > 0.0 && ab <= bound);
    }

    #[test]
    fn zero_direction_leaves_time_derivative() {
        let (g, spec) = setup(0.3);
        let a = theta_point(&spec, &g, 0.25, 1, vec![]);
        let a = CollocationPoint::plain(a.t, vec![], a.gamma).unwrap();
        let b = theta_point(&spec, &g, 0.5, 2, vec![]);
        let k = kernel();
        let l = apply_l(&spec, &a, &b, &k, Side::Left).unwrap();
        let kap = product_kernel(&a, &b, &k).unwrap();
        let dt = a.t - b.t;
        let expected = -dt / (k.rbf.sigma_t * k.rbf.sigma_t) * kap;
        assert!((l - expected).abs() < 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn boundary_operator_is_rejected() {
        let (g, spec) = setup(0.3);
        let a = theta_point(&spec, &g, 1.0, 1, vec![]);
        assert!(apply_l(&spec, &a, &a, &kernel(), Side::Left).is_err());
    }

    #[test]
    fn operator_matches_finite_difference_oracle() {
        let (g, spec) = setup(0.3);
        let spec = spec.with_regularization(Regularization::Truncated { delta: 0.125 });
        let a = theta_point(&spec, &g, 0.25, 3, vec![]);
        let b = theta_point(&spec, &g, 0.5, 4, vec![]);
        let k = kernel();
        let exact = apply_l(&spec, &a, &b, &k, Side::Left).unwrap();
        let kap = |t: f64, eps: f64| {
            let gamma = a.gamma.add(&a.direction.scaled(eps)).unwrap();
            let p = CollocationPoint::plain(t, vec![], gamma).unwrap();
            product_kernel(&p, &b, &k).unwrap()
        };
        let h = 1e-4;
        let e = 1e-3;
        let fd_t = (kap(a.t + h, 0.0) - kap(a.t, 0.0)) / h;
        let fd_path = (kap(a.t, e) - 2.0 * kap(a.t, 0.0) + kap(a.t, -e)) / (e * e);
        let fd = fd_t + 0.5 * fd_path;
        assert!(
            (exact - fd).abs() <= 1e-2 * fd.abs().max(1e-3),
            "{exact} vs {fd}"
        );
    }

    #[test]
    fn both_sided_operator_is_symmetric() {
        let (g, spec) = setup(0.1);
        let a = theta_point(&spec, &g, 0.125, 5, vec![]);
        let b = theta_point(&spec, &g, 0.5, 6, vec![]);
        let k = kernel();
        let ab = apply_l(&spec, &a, &b, &k, Side::Both).unwrap();
        let ba = apply_l(&spec, &b, &a, &k, Side::Both).unwrap();
        assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{ab} vs {ba}");
    }

    #[test]
    fn degenerate_bergomi_matches_heat_plus_state_terms() {
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let params = BergomiParams {
            xi: 0.04,
            vol_of_vol: 1e-12,
            rho: 0.0,
            hurst: 0.3,
            spot_log: 0.0,
        };
        let rb = PpdeSpec::rough_bergomi(params, 1.0, Arc::new(|_| 0.0)).unwrap();
        let heat = PpdeSpec::fbm_heat(rb.fbm, Arc::new(|_| 0.0));
        let a = theta_point(&rb, &g, 0.25, 7, vec![0.1]);
        let b = theta_point(&rb, &g, 0.5, 8, vec![-0.05]);
        let mut k = kernel();
        k.rbf.sigma_x = vec![0.3];
        let lb = apply_l(&rb, &a, &b, &k, Side::Left).unwrap();
        let lh = apply_l(&heat, &a, &b, &k, Side::Left).unwrap();
        let kap = product_kernel(&a, &b, &k).unwrap();
        let (d, s2) = (a.x[0] - b.x[0], 0.09);
        let dxx = (d * d - s2) / (s2 * s2) * kap;
        let dx = -d / s2 * kap;
        let expected = lh + 0.5 * params.xi * (dxx - dx);
        assert!((lb - expected).abs() < 1e-6 * (1.0 + expected.abs()));
    }

    #[test]
    fn operator_is_linear_in_the_section() {
        let (g, spec) = setup(0.3);
        let a = theta_point(&spec, &g, 0.25, 9, vec![]);
        let b = theta_point(&spec, &g, 0.5, 10, vec![]);
        let c = theta_point(&spec, &g, 0.75, 11, vec![]);
        let k = kernel();
        let pa = PreparedPoint::new(&a, &k);
        let terms = spec.terms(&a).unwrap();
        let row = |p: &CollocationPoint| {
            let pp = PreparedPoint::new(p, &k);
            let t = pair_table(&pa, &pp, 2, 0, &k).unwrap();
            combine(&terms, &evaluation(), &pa, &pp, &k.rbf, &t).unwrap()
        };
        let (rb, rc) = (row(&b), row(&c));
        let direct_b = apply_l(&spec, &a, &b, &k, Side::Left).unwrap();
        let direct_c = apply_l(&spec, &a, &c, &k, Side::Left).unwrap();
        let combo = 2.0 * rb - 0.5 * rc;
        assert!((combo - (2.0 * direct_b - 0.5 * direct_c)).abs() < 1e-10 * (1.0 + combo.abs()));
    }
}
