//! Pricing studies: the fBM heat equation against closed forms and the
//! rough Bergomi equation against Monte Carlo.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::goursat::Scheme;
use crate::operator::{CollocationPoint, KernelSpec, LiftKind, PointFn, PpdeSpec, TimeWarp};
use crate::paths::{
    brownian_increments, one_variation, simulate_theta_frozen, BergomiParams, FbmSpec,
    ForwardVolterra, Path, Regularization, TimeGrid,
};
use crate::recovery::{assemble, solve_linear, GramSystem, Method, ScaledCholesky};
use crate::sig_oracle::{
    fd_directional_derivative, fd_second, random_bv_path, signature, truncated_kernel,
};
use crate::static_kernels::{a_fields, Lift, RbfParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payoff {
    Identity,
    Abs,
    Exp { nu: f64 },
    Call { strike: f64 },
    Zero,
}

impl Payoff {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Payoff::Identity => x,
            Payoff::Abs => x.abs(),
            Payoff::Exp { nu } => (nu * x).exp(),
            Payoff::Call { strike } => (x - strike).max(0.0),
            Payoff::Zero => 0.0,
        }
    }

    /// The payoff on the price `e^x` of a log-price `x`.
    pub fn on_log_price(&self, x: f64) -> f64 {
        self.value(x.exp())
    }

    pub fn label(&self) -> String {
        match *self {
            Payoff::Identity => "identity".into(),
            Payoff::Abs => "abs".into(),
            Payoff::Exp { nu } => format!("exp({nu})"),
            Payoff::Call { strike } => format!("call({strike})"),
            Payoff::Zero => "zero".into(),
        }
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[f(Ŵ_T) | F_t]` given `Θ^t_T`, for the normalised kernel where
/// `Var(Ŵ_T | F_t) = (T - t)^{2H}`.
pub fn analytic_fbm_price(
    payoff: Payoff,
    theta_end: f64,
    t: f64,
    horizon: f64,
    hurst: f64,
) -> Result<f64> {
    if !(t <= horizon + 1e-12) {
        return Err(invalid(format!("time {t} beyond horizon {horizon}")));
    }
    let sd = (horizon - t).max(0.0).powf(hurst);
    if sd == 0.0 {
        return Ok(payoff.value(theta_end));
    }
    Ok(match payoff {
        Payoff::Identity => theta_end,
        Payoff::Zero => 0.0,
        Payoff::Exp { nu } => (nu * theta_end + 0.5 * nu * nu * sd * sd).exp(),
        Payoff::Call { strike } => {
            let d = (theta_end - strike) / sd;
            sd * normal_pdf(d) + (theta_end - strike) * normal_cdf(d)
        }
        Payoff::Abs => {
            let d = theta_end / sd;
            sd * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * d * d).exp()
                + theta_end * (1.0 - 2.0 * normal_cdf(-d))
        }
    })
}

/// Black–Scholes call on `S = e^x` with total variance `v`, zero rates.
pub fn black_scholes_call(x: f64, strike: f64, total_variance: f64) -> f64 {
    let s = x.exp();
    if total_variance <= 0.0 {
        return (s - strike).max(0.0);
    }
    let sd = total_variance.sqrt();
    let d1 = (x - strike.ln()) / sd + 0.5 * sd;
    s * normal_cdf(d1) - strike * normal_cdf(d1 - sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fbm,
    Bergomi,
}

fn default_kernel() -> KernelSpec {
    KernelSpec {
        rbf: RbfParams {
            sigma_t: 2.5,
            sigma_x: vec![],
            sigma_g: 2.0,
            sigma_l: 2.0,
        },
        lift: LiftKind::Rbf,
        dyadic_order: 0,
        scheme: Scheme::default(),
        time_augment: true,
        time_warp: TimeWarp::default(),
    }
}

/// Everything a run needs; the JSON schema of `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub payoff: Payoff,
    /// Further fBM payoffs solved on the same Gram system.
    pub extra_payoffs: Vec<Payoff>,
    pub hurst: f64,
    pub horizon: f64,
    pub bergomi: Option<BergomiParams>,
    /// Interior collocation points.
    pub m: usize,
    /// Boundary collocation points.
    pub n: usize,
    pub grid_steps: usize,
    pub eval_count: usize,
    pub mc_paths: usize,
    pub seed: u64,
    pub kernel: KernelSpec,
    /// Candidate bandwidths for cross-validation.
    pub cv_grid: Vec<RbfParams>,
    pub method: Method,
    pub regularization: Regularization,
    /// Log-prices are drawn uniformly on `spot_log ± x_half_width`.
    pub x_half_width: f64,
    pub boundary_paths: BoundaryPaths,
    /// Law of interior collocation times.
    pub time_sampling: TimeSampling,
}

/// How interior collocation times are drawn on `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TimeSampling {
    /// Uniform over grid nodes.
    #[default]
    Grid,
    /// Continuous uniform.
    Uniform,
    /// `t = T (1 - u^exponent)` with `u` uniform; `exponent > 1` crowds
    /// points towards the horizon.
    Power { exponent: f64 },
}

impl TimeSampling {
    fn draw<R: Rng + ?Sized>(&self, grid: &TimeGrid, rng: &mut R) -> f64 {
        match *self {
            TimeSampling::Grid => grid.node(rng.gen_range(0..grid.n_steps)),
            TimeSampling::Uniform => grid.t0 + rng.gen::<f64>() * grid.horizon(),
            TimeSampling::Power { exponent } => {
                grid.t1 - grid.horizon() * (1.0 - rng.gen::<f64>()).powf(exponent)
            }
        }
    }
}

/// Where the paths of terminal collocation points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPaths {
    /// Boundary point `k` reuses the path and state of interior point `k mod m`.
    #[default]
    Shared,
    /// Fresh `Θ^s` draws at independent uniform times `s`.
    Independent,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Fbm,
            payoff: Payoff::Identity,
            extra_payoffs: vec![],
            hurst: 0.1,
            horizon: 1.0,
            bergomi: None,
            m: 150,
            n: 50,
            grid_steps: 64,
            eval_count: 100,
            mc_paths: 20_000,
            seed: 7,
            kernel: default_kernel(),
            cv_grid: vec![],
            method: Method::Symmetric,
            regularization: Regularization::default(),
            x_half_width: 0.25,
            boundary_paths: BoundaryPaths::default(),
            time_sampling: TimeSampling::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m + self.n == 0 {
            return Err(invalid("need at least one collocation point"));
        }
        if self.mc_paths == 0 {
            return Err(invalid("mc_paths must be at least 1"));
        }
        if self.grid_steps == 0 {
            return Err(invalid("grid_steps must be positive"));
        }
        if !(self.x_half_width >= 0.0) {
            return Err(invalid("x_half_width must be nonnegative"));
        }
        if let TimeSampling::Power { exponent } = self.time_sampling {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(invalid(format!(
                    "time sampling exponent must be positive, got {exponent}"
                )));
            }
        }
        self.kernel.validate()?;
        match self.kind {
            ExperimentKind::Fbm => {
                FbmSpec::normalized(self.hurst, self.horizon)?;
                if !self.kernel.rbf.sigma_x.is_empty() {
                    return Err(invalid(
                        "the fBM experiment has no state variable; sigma_x must be empty",
                    ));
                }
            }
            ExperimentKind::Bergomi => {
                self.bergomi_params()?.validate()?;
                if self.kernel.rbf.sigma_x.len() != 1 {
                    return Err(invalid("the Bergomi experiment needs one state bandwidth"));
                }
                if self.time_sampling != TimeSampling::Grid {
                    return Err(invalid(
                        "Monte Carlo prices need collocation times on grid nodes",
                    ));
                }
            }
        }
        for p in &self.cv_grid {
            p.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, self.grid_steps)
    }

    pub fn bergomi_params(&self) -> Result<BergomiParams> {
        self.bergomi
            .ok_or_else(|| invalid("a Bergomi run needs model parameters"))
    }

    pub fn fbm_spec(&self) -> Result<FbmSpec> {
        match self.kind {
            ExperimentKind::Fbm => FbmSpec::normalized(self.hurst, self.horizon),
            ExperimentKind::Bergomi => self.bergomi_params()?.fbm(self.horizon),
        }
    }

    /// The PDE for `payoff`.
    pub fn spec(&self, payoff: Payoff) -> Result<PpdeSpec> {
        let spec = match self.kind {
            ExperimentKind::Fbm => {
                let terminal: PointFn =
                    Arc::new(move |p: &CollocationPoint| payoff.value(p.gamma.end()[0]));
                PpdeSpec::fbm_heat(self.fbm_spec()?, terminal)
            }
            ExperimentKind::Bergomi => {
                let terminal: PointFn =
                    Arc::new(move |p: &CollocationPoint| payoff.on_log_price(p.x[0]));
                PpdeSpec::rough_bergomi(self.bergomi_params()?, self.horizon, terminal)?
            }
        };
        Ok(spec.with_regularization(self.regularization))
    }
}

/// Which draw a point belongs to; keeps the streams of the different point
/// sets disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRole {
    Interior,
    Boundary,
    Evaluation,
}

fn point_rng(seed: u64, role: PointRole, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match role {
        PointRole::Interior => 1u64,
        PointRole::Boundary => 2,
        PointRole::Evaluation => 3,
    };
    rng.set_stream((tag << 48) | k as u64);
    rng
}

/// Draws point `k` of a role: time from `cfg.time_sampling` on `[0, T)`
/// (or `T` on the boundary), path `Θ^t` frozen before `t`, log-price
/// uniform around the spot for Bergomi runs.
pub fn sample_point(
    cfg: &ExperimentConfig,
    spec: &PpdeSpec,
    role: PointRole,
    k: usize,
) -> Result<CollocationPoint> {
    let grid = cfg.grid()?;
    if role == PointRole::Boundary && cfg.boundary_paths == BoundaryPaths::Shared && cfg.m > 0 {
        let inner = sample_point(cfg, spec, PointRole::Interior, k % cfg.m)?;
        return spec.point(grid.t1, inner.x, inner.gamma);
    }
    let mut rng = point_rng(cfg.seed, role, k);
    let t = match role {
        PointRole::Boundary => grid.t1,
        PointRole::Interior => cfg.time_sampling.draw(&grid, &mut rng),
        PointRole::Evaluation => match cfg.time_sampling {
            TimeSampling::Grid => TimeSampling::Grid.draw(&grid, &mut rng),
            _ => TimeSampling::Uniform.draw(&grid, &mut rng),
        },
    };
    let x = match cfg.kind {
        ExperimentKind::Fbm => vec![],
        ExperimentKind::Bergomi => {
            let spot = cfg.bergomi_params()?.spot_log;
            let w = cfg.x_half_width;
            vec![if w > 0.0 {
                spot + rng.gen_range(-w..=w)
            } else {
                spot
            }]
        }
    };
    // terminal data holds for every path, so boundary paths are Θ^s draws
    // at an independent uniform time s
    let s = match role {
        PointRole::Boundary => grid.node(rng.gen_range(0..=grid.n_steps)),
        _ => t,
    };
    let increments = brownian_increments(&grid, &mut rng);
    let gamma = simulate_theta_frozen(s, &spec.fbm, &grid, &increments)?;
    spec.point(t, x, gamma)
}

pub fn sample_points(
    cfg: &ExperimentConfig,
    spec: &PpdeSpec,
    role: PointRole,
    count: usize,
) -> Result<Vec<CollocationPoint>> {
    (0..count)
        .map(|k| sample_point(cfg, spec, role, k))
        .collect()
}

/// Interior then boundary collocation points of a config.
pub fn collocation_points(
    cfg: &ExperimentConfig,
    spec: &PpdeSpec,
) -> Result<Vec<CollocationPoint>> {
    let mut pts = sample_points(cfg, spec, PointRole::Interior, cfg.m)?;
    pts.extend(sample_points(cfg, spec, PointRole::Boundary, cfg.n)?);
    Ok(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub id: usize,
    pub t: f64,
    pub x: Option<f64>,
    pub theta_end: f64,
    pub predicted: f64,
    pub oracle: f64,
    pub abs_error: f64,
    /// Monte Carlo standard error of the oracle, when it is simulated.
    pub oracle_std_error: Option<f64>,
}

impl PointRow {
    pub fn new(
        id: usize,
        p: &CollocationPoint,
        predicted: f64,
        oracle: f64,
        oracle_std_error: Option<f64>,
    ) -> Self {
        Self {
            id,
            t: p.t,
            x: p.x.first().copied(),
            theta_end: p.gamma.end()[0],
            predicted,
            oracle,
            abs_error: (predicted - oracle).abs(),
            oracle_std_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub jitter_used: f64,
    pub min_eig_ratio: f64,
    pub interior: usize,
    pub boundary: usize,
    pub constraint_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub payoff: Payoff,
    pub mse: f64,
    pub mae: f64,
    pub max_abs_error: f64,
    pub rows: Vec<PointRow>,
    pub diagnostics: Diagnostics,
    pub config: ExperimentConfig,
}

impl MetricsReport {
    pub fn new(
        payoff: Payoff,
        rows: Vec<PointRow>,
        diagnostics: Diagnostics,
        config: ExperimentConfig,
    ) -> Self {
        let (mse, mae) = summary(&rows);
        let max_abs_error = rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);
        Self {
            payoff,
            mse,
            mae,
            max_abs_error,
            rows,
            diagnostics,
            config,
        }
    }

    /// Per-point table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("id,t,x,theta_end,predicted,oracle,abs_error,oracle_std_error\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.id,
                r.t,
                opt(r.x),
                r.theta_end,
                r.predicted,
                r.oracle,
                r.abs_error,
                opt(r.oracle_std_error)
            ));
        }
        out
    }

    /// The `(oracle, predicted)` scatter behind a price-recovery plot.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("oracle,predicted\n");
        for r in &self.rows {
            out.push_str(&format!("{:.16e},{:.16e}\n", r.oracle, r.predicted));
        }
        out
    }
}

/// `(MSE, MAE)` of a per-point table, summed in row order.
pub fn summary(rows: &[PointRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    let sq: f64 = rows.iter().map(|r| (r.predicted - r.oracle).powi(2)).sum();
    let ab: f64 = rows.iter().map(|r| r.abs_error).sum();
    (sq / n, ab / n)
}

fn diagnostics(sys: &GramSystem, residual: f64) -> Diagnostics {
    Diagnostics {
        jitter_used: sys.jitter_used,
        min_eig_ratio: sys.min_eig_ratio(),
        interior: sys.m,
        boundary: sys.n(),
        constraint_residual: residual,
    }
}

/// The fBM study for `cfg.payoff`.
pub fn run_fbm(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    Ok(run_fbm_payoffs(cfg, &[cfg.payoff])?.remove(0))
}

/// The fBM study for several payoffs sharing collocation points, Gram
/// matrix and factorisation; only the data vector changes.
pub fn run_fbm_payoffs(cfg: &ExperimentConfig, payoffs: &[Payoff]) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::Fbm {
        return Err(invalid("run_fbm needs kind = fbm"));
    }
    let first = payoffs.first().ok_or_else(|| invalid("no payoff given"))?;
    let spec = cfg.spec(*first)?;
    let pts = collocation_points(cfg, &spec)?;
    let base = assemble(&spec, &pts, &cfg.kernel)?;
    let eval = sample_points(cfg, &spec, PointRole::Evaluation, cfg.eval_count)?;
    let mut design = None;
    let mut out = Vec::with_capacity(payoffs.len());
    for &payoff in payoffs {
        let spec = cfg.spec(payoff)?;
        let b = DVector::from_iterator(
            base.points().len(),
            base.points().iter().map(|p| {
                if p.is_interior() {
                    (spec.source)(p)
                } else {
                    (spec.terminal)(p)
                }
            }),
        );
        let sys = base.with_data(b)?;
        let model = solve_linear(&sys, cfg.method)?;
        if design.is_none() {
            design = Some(model.design(&eval)?);
        }
        let pred = model.predict_with_design(design.as_ref().expect("design computed"));
        let residual = (model.constraint_values(&sys)? - &sys.b).amax();
        let rows = eval
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(id, (p, u))| {
                let oracle =
                    analytic_fbm_price(payoff, p.gamma.end()[0], p.t, cfg.horizon, cfg.hurst)?;
                Ok(PointRow::new(id, p, u, oracle, None))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsReport::new(
            payoff,
            rows,
            diagnostics(&sys, residual),
            cfg.clone(),
        ));
    }
    Ok(out)
}

/// Monte Carlo price `E[f(X_T)]` with `X` the log-price started from `x`
/// at `t`, variance driven by `γ + I^t`. Returns `(mean, standard error)`.
///
/// `mc_paths` samples are drawn as antithetic pairs; pair `j` uses stream
/// `j` of the seed, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn mc_bergomi_price(
    t: f64,
    x: f64,
    gamma: &Path,
    params: &BergomiParams,
    payoff: Payoff,
    mc_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<(f64, f64)> {
    params.validate()?;
    if gamma.grid() != grid {
        return Err(invalid("path grid differs from the simulation grid"));
    }
    let start = grid
        .node_index(t)
        .ok_or_else(|| invalid(format!("time {t} is not a grid node")))?;
    let fbm = params.fbm(grid.horizon())?;
    let volterra = ForwardVolterra::new(&fbm, grid);
    let h = grid.step();
    let sd = h.sqrt();
    let rho_bar = (1.0 - params.rho * params.rho).sqrt();
    let steps = grid.n_steps;
    let pairs = mc_paths.div_ceil(2);
    let simulate = |dw1: &[f64], dw2: &[f64]| {
        let mut xv = x;
        for k in start..steps {
            let drive = gamma.value(k, 0) + volterra.at(start, k, dw1);
            let v = params.psi(grid.node(k), drive);
            let db = params.rho * dw1[k] + rho_bar * dw2[k];
            xv += v.sqrt() * db - 0.5 * v * h;
        }
        payoff.on_log_price(xv)
    };
    let values: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut dw1 = vec![0.0; steps];
            let mut dw2 = vec![0.0; steps];
            for k in start..steps {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                dw1[k] = sd * z1;
                dw2[k] = sd * z2;
            }
            let a = simulate(&dw1, &dw2);
            dw1.iter_mut().for_each(|v| *v = -*v);
            dw2.iter_mut().for_each(|v| *v = -*v);
            0.5 * (a + simulate(&dw1, &dw2))
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// The rough Bergomi study: collocation model against Monte Carlo.
pub fn run_bergomi(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::Bergomi {
        return Err(invalid("run_bergomi needs kind = bergomi"));
    }
    let params = cfg.bergomi_params()?;
    let grid = cfg.grid()?;
    let spec = cfg.spec(cfg.payoff)?;
    let pts = collocation_points(cfg, &spec)?;
    let sys = assemble(&spec, &pts, &cfg.kernel)?;
    let model = solve_linear(&sys, cfg.method)?;
    let residual = (model.constraint_values(&sys)? - &sys.b).amax();
    let eval = sample_points(cfg, &spec, PointRole::Evaluation, cfg.eval_count)?;
    let pred = model.predict(&eval)?;
    // common random numbers across evaluation points
    let mc_seed = cfg.seed ^ 0x6d63_5f73_6565_6421;
    let rows = eval
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(id, (p, u))| {
            let (price, se) = mc_bergomi_price(
                p.t,
                p.x[0],
                &p.gamma,
                &params,
                cfg.payoff,
                cfg.mc_paths,
                &grid,
                mc_seed,
            )?;
            Ok(PointRow::new(id, p, u, price, Some(se)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(
        cfg.payoff,
        rows,
        diagnostics(&sys, residual),
        cfg.clone(),
    ))
}

fn bandwidth_key(p: &RbfParams) -> Vec<f64> {
    let mut k = vec![p.sigma_t, p.sigma_l, p.sigma_g];
    k.extend(&p.sigma_x);
    k
}

/// `true` when `a` has larger bandwidths than `b` (lexicographic on
/// `sigma_t, sigma_l, sigma_g, sigma_x`).
fn larger(a: &RbfParams, b: &RbfParams) -> bool {
    bandwidth_key(a)
        .iter()
        .zip(bandwidth_key(b))
        .find(|(x, y)| *x != y)
        .is_some_and(|(x, y)| *x > y)
}

/// Held-out constraint MSE of a system under 5-fold cross-validation.
pub fn cv_score(sys: &GramSystem, folds: &[usize], k: usize) -> Result<f64> {
    let total = sys.b.len();
    let mut sq = 0.0;
    let mut count = 0usize;
    for fold in 0..k {
        let train: Vec<usize> = (0..total).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..total).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let residuals: Vec<f64> = if train.is_empty() {
            test.iter().map(|&i| sys.b[i]).collect()
        } else {
            let g = DMatrix::from_fn(train.len(), train.len(), |a, b| sys.g[(train[a], train[b])]);
            let bt = DVector::from_iterator(train.len(), train.iter().map(|&i| sys.b[i]));
            let w = ScaledCholesky::new(&g)?.solve(&bt);
            test.iter()
                .map(|&i| {
                    let pred: f64 = train
                        .iter()
                        .zip(w.iter())
                        .map(|(&j, wj)| sys.g[(i, j)] * wj)
                        .sum();
                    pred - sys.b[i]
                })
                .collect()
        };
        sq += residuals.iter().map(|r| r * r).sum::<f64>();
        count += residuals.len();
    }
    Ok(sq / count.max(1) as f64)
}

/// Fold labels for `total` constraints, shuffled by `seed`.
pub fn fold_labels(total: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = vec![0; total];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % k;
    }
    labels
}

pub const CV_FOLDS: usize = 5;

/// Picks the candidate with the smallest held-out constraint MSE on an
/// assembled system; ties go to larger bandwidths. Returns the choice and
/// every score in grid order.
pub fn cross_validate_system(
    sys: &GramSystem,
    grid: &[RbfParams],
    seed: u64,
) -> Result<(RbfParams, Vec<f64>)> {
    let first = grid
        .first()
        .ok_or_else(|| invalid("empty bandwidth grid"))?;
    if grid.len() == 1 {
        return Ok((first.clone(), vec![f64::NAN]));
    }
    let folds = fold_labels(sys.b.len(), CV_FOLDS, seed);
    let mut scores = Vec::with_capacity(grid.len());
    let mut fresh: Option<GramSystem> = None;
    for params in grid {
        let candidate =
            if params.sigma_g == sys.kernel.rbf.sigma_g || sys.kernel.lift == LiftKind::Identity {
                sys.with_params(params.clone())?
            } else {
                // a different lift bandwidth changes the signature factor itself
                let reuse = fresh
                    .as_ref()
                    .is_some_and(|f| f.kernel.rbf.sigma_g == params.sigma_g);
                if !reuse {
                    let mut kernel = sys.kernel.clone();
                    kernel.rbf = params.clone();
                    fresh = Some(assemble(&sys.spec, sys.points(), &kernel)?);
                }
                fresh
                    .as_ref()
                    .expect("assembled")
                    .with_params(params.clone())?
                    .with_data(sys.b.clone())?
            };
        scores.push(cv_score(&candidate, &folds, CV_FOLDS)?);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (s, b) = (scores[i], scores[best]);
        let tie = (s - b).abs() <= 1e-12 * b.abs().max(f64::MIN_POSITIVE);
        if (!tie && s < b) || (tie && larger(&grid[i], &grid[best])) {
            best = i;
        }
    }
    Ok((grid[best].clone(), scores))
}

/// Cross-validation on the collocation set a config would train on.
pub fn cross_validate(cfg: &ExperimentConfig, grid: &[RbfParams]) -> Result<(RbfParams, Vec<f64>)> {
    cfg.validate()?;
    let first = grid
        .first()
        .ok_or_else(|| invalid("empty bandwidth grid"))?;
    let spec = cfg.spec(cfg.payoff)?;
    let pts = collocation_points(cfg, &spec)?;
    let mut kernel = cfg.kernel.clone();
    kernel.rbf = first.clone();
    let sys = assemble(&spec, &pts, &kernel)?;
    cross_validate_system(&sys, grid, cfg.seed)
}

/// Worst-case discrepancies of the Goursat solver against the brute-force
/// signature oracle on random paths, plus the Bessel reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub dyadic_order: u32,
    /// `(κ, ∂κ, ∂²κ)` for `γ = τ = η = η̄ = t` on `[0, 1]`, identity lift.
    pub bessel: [f64; 3],
    pub bessel_error: [f64; 3],
    /// Max of `|goursat - oracle| / (1 + |oracle|)` over instances.
    pub kernel_error: f64,
    pub first_error: f64,
    pub second_error: f64,
    /// Instances violating `‖S(γ)‖ ≤ exp(‖γ‖₁)` or
    /// `|κ(γ, τ)| ≤ exp(‖γ‖₁ ‖τ‖₁)`.
    pub signature_bound_violations: usize,
    pub kernel_bound_violations: usize,
}

pub const BESSEL_I: [f64; 3] = [
    2.279_585_302_336_067,
    1.590_636_854_637_329,
    0.688_948_447_698_738,
];

/// Oracle level and finite-difference steps used by [`oracle_suite`].
const ORACLE_LEVEL: usize = 12;
const FD_EPS: f64 = 1e-4;
const FD_EPS_SECOND: f64 = 1e-3;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

pub fn bessel_check(cells: usize, dyadic_order: u32) -> Result<[f64; 3]> {
    let g = Path::from_fn(TimeGrid::new(0.0, 1.0, cells)?, 1, |s| vec![s])?;
    let fields = a_fields(&g, &g, &g, &g, &Lift::Identity)?;
    let c = crate::goursat::solve(&g, &g, &g, &g, &fields, dyadic_order)?.corner();
    Ok([c[0], c[1], c[3]])
}

/// Runs the oracle comparison on `instances` random 2-channel paths with 8
/// segments and total variation at most 2.
pub fn oracle_suite(instances: usize, seed: u64, dyadic_order: u32) -> Result<OracleReport> {
    let bessel = bessel_check(64, 2)?;
    let mut report = OracleReport {
        instances,
        dyadic_order,
        bessel,
        bessel_error: [0, 1, 2].map(|k| (bessel[k] - BESSEL_I[k]).abs()),
        kernel_error: 0.0,
        first_error: 0.0,
        second_error: 0.0,
        signature_bound_violations: 0,
        kernel_bound_violations: 0,
    };
    let results = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let gamma = random_bv_path(&mut rng, 2, 8, 2.0);
            let tau = random_bv_path(&mut rng, 2, 8, 2.0);
            let eta = random_bv_path(&mut rng, 2, 8, 2.0);
            let etabar = random_bv_path(&mut rng, 2, 8, 2.0);
            let fields = a_fields(&gamma, &tau, &eta, &etabar, &Lift::Identity)?;
            let only = crate::goursat::kernel_only(&gamma, &tau, &fields, dyadic_order)?;
            let c =
                crate::goursat::solve(&gamma, &tau, &eta, &etabar, &fields, dyadic_order)?.corner();
            let k = truncated_kernel(&gamma, &tau, ORACLE_LEVEL)?;
            let d1 = fd_directional_derivative(&gamma, &tau, &eta, ORACLE_LEVEL, FD_EPS)?;
            let d1b = fd_directional_derivative(&gamma, &tau, &etabar, ORACLE_LEVEL, FD_EPS)?;
            let d2 = fd_second(&gamma, &tau, &eta, &etabar, ORACLE_LEVEL, FD_EPS_SECOND)?;
            let (vg, vt) = (one_variation(&gamma), one_variation(&tau));
            let sig_ok = signature(&gamma, ORACLE_LEVEL).norm() <= vg.exp() * (1.0 + 1e-12)
                && signature(&tau, ORACLE_LEVEL).norm() <= vt.exp() * (1.0 + 1e-12);
            let bound = (vg * vt).exp() * (1.0 + 1e-12);
            let kernel_ok = only.abs() <= bound && k.abs() <= bound;
            Ok((
                rel(only, k).max(rel(c[0], k)),
                rel(c[1], d1).max(rel(c[2], d1b)),
                rel(c[3], d2),
                sig_ok,
                kernel_ok,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for (ke, fe, se, sig_ok, kernel_ok) in results {
        report.kernel_error = report.kernel_error.max(ke);
        report.first_error = report.first_error.max(fe);
        report.second_error = report.second_error.max(se);
        report.signature_bound_violations += usize::from(!sig_ok);
        report.kernel_bound_violations += usize::from(!kernel_ok);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(
            analytic_fbm_price(Payoff::Identity, 0.3, 0.2, 1.0, 0.1).unwrap(),
            0.3
        );
        let e = analytic_fbm_price(Payoff::Exp { nu: 1.0 }, 0.0, 0.0, 1.0, 0.3).unwrap();
        assert!((e - 1.648_721_270_700_128).abs() < 1e-12);
        for h in [0.1, 0.3, 0.45] {
            let c = analytic_fbm_price(Payoff::Call { strike: 0.4 }, 0.4, 0.0, 1.0, h).unwrap();
            assert!((c - 0.398_942_280_401_432_7).abs() < 1e-12);
        }
        // at maturity the price is the payoff
        let c = analytic_fbm_price(Payoff::Call { strike: 0.1 }, 0.5, 1.0, 1.0, 0.1).unwrap();
        assert!((c - 0.4).abs() < 1e-15);
    }

    #[test]
    fn call_and_abs_against_quadrature() {
        let (theta, sd) = (0.3, 0.7f64);
        let h = 1.0 - sd.powf(1.0 / 0.2);
        // split at the kink of the payoff
        let quad = |f: &dyn Fn(f64) -> f64, kink: f64| {
            let zk = (kink - theta) / sd;
            let g = |z: f64| f(theta + sd * z) * normal_pdf(z);
            crate::linalg::gauss_legendre(g, -12.0, zk, 200)
                + crate::linalg::gauss_legendre(g, zk, 12.0, 200)
        };
        for (payoff, kink) in [
            (Payoff::Abs, 0.0),
            (Payoff::Call { strike: 0.5 }, 0.5),
            (Payoff::Exp { nu: -0.7 }, 0.0),
        ] {
            let exact = quad(&|x| payoff.value(x), kink);
            let got = analytic_fbm_price(payoff, theta, h, 1.0, 0.2).unwrap();
            assert!((exact - got).abs() < 1e-9, "{payoff:?}: {exact} vs {got}");
        }
    }

    #[test]
    fn normal_cdf_accuracy() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!(
            (normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12,
            "{}",
            normal_cdf(1.0)
        );
        assert!((normal_cdf(-2.5) - 0.006_209_665_325_776_132).abs() < 1e-12);
    }

    #[test]
    fn larger_prefers_wider_bandwidths() {
        let p = |t: f64, l: f64| RbfParams {
            sigma_t: t,
            sigma_x: vec![],
            sigma_g: 1.0,
            sigma_l: l,
        };
        assert!(larger(&p(2.0, 1.0), &p(1.0, 5.0)));
        assert!(larger(&p(1.0, 2.0), &p(1.0, 1.0)));
        assert!(!larger(&p(1.0, 1.0), &p(1.0, 1.0)));
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_labels(23, 5, 3);
        for k in 0..5 {
            let c = f.iter().filter(|&&v| v == k).count();
            assert!(c == 4 || c == 5);
        }
        assert_eq!(f, fold_labels(23, 5, 3));
    }

    #[test]
    fn report_summary_matches_rows() {
        let cfg = ExperimentConfig::default();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let p =
            CollocationPoint::plain(1.0, vec![], Path::scalar(g, vec![0.0; 5]).unwrap()).unwrap();
        let rows = vec![
            PointRow::new(0, &p, 1.0, 0.5, None),
            PointRow::new(1, &p, -1.0, 0.0, None),
        ];
        let diag = Diagnostics {
            jitter_used: 0.0,
            min_eig_ratio: 0.0,
            interior: 0,
            boundary: 1,
            constraint_residual: 0.0,
        };
        let r = MetricsReport::new(Payoff::Identity, rows, diag, cfg);
        assert!((r.mse - 0.625).abs() < 1e-15);
        assert!((r.mae - 0.75).abs() < 1e-15);
        assert!(r.mae <= r.mse.sqrt() + 1e-15);
    }
}
