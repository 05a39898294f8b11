use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigppde::experiments::{sample_points, ExperimentConfig, Payoff, PointRole};
use sigppde::linalg::{max_asymmetry, min_eigenvalue};
use sigppde::operator::{evaluation, CollocationPoint, PpdeSpec};
use sigppde::recovery::{
    assemble, gp_posterior, solve_linear, solve_nonlinear, DescentOptions, Functional, Method,
    NonlinearProblem, Nonlinearity,
};

fn small_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        hurst: 0.3,
        grid_steps: 8,
        seed,
        ..ExperimentConfig::default()
    }
}

/// Narrow bandwidths keep the Gram well conditioned.
fn narrow(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.kernel.rbf.sigma_t = 0.5;
    cfg.kernel.rbf.sigma_g = 1.0;
    cfg.kernel.rbf.sigma_l = 1.0;
    cfg.kernel.time_warp = Default::default();
    cfg
}

fn collocation(
    cfg: &ExperimentConfig,
    spec: &PpdeSpec,
    m: usize,
    n: usize,
) -> Vec<CollocationPoint> {
    let mut pts = sample_points(cfg, spec, PointRole::Interior, m).unwrap();
    pts.extend(sample_points(cfg, spec, PointRole::Boundary, n).unwrap());
    pts
}

#[test]
fn manufactured_solution_is_recovered() {
    let cfg = small_config(21);
    let spec = cfg.spec(Payoff::Identity).unwrap();
    let pts = collocation(&cfg, &spec, 6, 4);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();

    // u* = Σ β_j 𝓛̄_j κ(·, ω_j), so its constraint data are G β
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta = DVector::from_fn(pts.len(), |_, _| rng.gen_range(-1.0..1.0));
    let manufactured = sys.with_data(&sys.g * &beta).unwrap();
    let model = solve_linear(&manufactured, Method::Symmetric).unwrap();

    let held_out = sample_points(&cfg, &spec, PointRole::Evaluation, 20).unwrap();
    let design = model.design(&held_out).unwrap();
    let truth = &design * &beta;
    let pred = model.predict_with_design(&design);
    let scale = truth.amax();
    for (p, u) in pred.iter().zip(truth.iter()) {
        assert!((p - u).abs() <= 1e-5 * scale, "{p} vs {u}");
    }
}

#[test]
fn gram_is_psd_on_thirty_points() {
    let cfg = small_config(22);
    let spec = cfg.spec(Payoff::Exp { nu: 1.0 }).unwrap();
    let pts = collocation(&cfg, &spec, 20, 10);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    assert!(max_asymmetry(&sys.g) <= 1e-8 * sys.g.amax());
    assert!(min_eigenvalue(&sys.g) >= -1e-8 * sys.g.trace());
    assert!(sys.min_eig_ratio() >= -1e-8);
}

#[test]
fn routes_agree_and_constraints_hold() {
    let cfg = narrow(small_config(23));
    let spec = cfg.spec(Payoff::Call { strike: 0.1 }).unwrap();
    let pts = collocation(&cfg, &spec, 12, 8);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    let sym = solve_linear(&sys, Method::Symmetric).unwrap();
    let kkt = solve_linear(&sys, Method::Kkt).unwrap();
    let residual = sym.constraint_values(&sys).unwrap() - &sys.b;
    assert!(residual.amax() <= 1e-6, "{}", residual.amax());
    let eval = sample_points(&cfg, &spec, PointRole::Evaluation, 20).unwrap();
    let a = sym.predict(&eval).unwrap();
    let b = kkt.predict(&eval).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn symmetric_route_has_minimal_norm() {
    let cfg = small_config(24);
    let spec = cfg.spec(Payoff::Identity).unwrap();
    let pts = collocation(&cfg, &spec, 4, 3);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    let model = solve_linear(&sys, Method::Symmetric).unwrap();

    // richer basis: constraint sections plus value sections at interior points
    let mut basis = sys.constraints.clone();
    basis.extend((0..sys.m).map(|point| Functional {
        point,
        terms: evaluation(),
    }));
    let g_ext = sys.cache.gram(&basis, &basis, &sys.kernel.rbf).unwrap();
    let c = sys
        .cache
        .gram(&sys.constraints, &basis, &sys.kernel.rbf)
        .unwrap();
    let mut coef = DVector::zeros(basis.len());
    coef.rows_mut(0, model.weights.len())
        .copy_from(&model.weights);
    let best = coef.dot(&(&g_ext * &coef));

    // null space of the constraint map from the eigenvectors of CᵀC
    let ctc = c.transpose() * &c;
    let eig = ctc.symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.amax();
    let null: Vec<DVector<f64>> = (0..basis.len())
        .filter(|&k| eig.eigenvalues[k].abs() <= tol)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    assert!(!null.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let mut alt = coef.clone();
        for v in &null {
            alt += v * rng.gen_range(-1.0..1.0);
        }
        let feasible = &c * &alt - &sys.b;
        assert!(feasible.amax() <= 1e-6 * (1.0 + sys.b.amax()));
        let norm = alt.dot(&(&g_ext * &alt));
        assert!(best <= norm + 1e-8 * best.abs().max(1.0), "{best} > {norm}");
    }
}

#[test]
fn posterior_matches_prediction_and_is_psd() {
    let cfg = small_config(25);
    let spec = cfg.spec(Payoff::Identity).unwrap();
    let pts = collocation(&cfg, &spec, 6, 6);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    let model = solve_linear(&sys, Method::Symmetric).unwrap();
    let boundary = sys.points()[sys.m..].to_vec();
    let (_, cov) = gp_posterior(&model, &boundary).unwrap();
    assert!((0..boundary.len()).all(|k| cov[(k, k)] <= 1e-6));
    let test = sample_points(&cfg, &spec, PointRole::Evaluation, 15).unwrap();
    let (mean, cov) = gp_posterior(&model, &test).unwrap();
    let pred = model.predict(&test).unwrap();
    for (a, b) in mean.iter().zip(pred) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
    }
    assert!(min_eigenvalue(&cov) >= -1e-8 * cov.trace());
}

#[test]
fn nonlinear_single_latent_matches_grid_search() {
    let cfg = small_config(26);
    let base = cfg.spec(Payoff::Identity).unwrap();
    let spec = base.with_source(Arc::new(|_| 0.3));
    let pts = collocation(&cfg, &spec, 1, 3);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    let psi = Nonlinearity {
        f: Arc::new(|z| z * z),
        df: Arc::new(|z| 2.0 * z),
    };
    let problem = NonlinearProblem::new(&sys, psi.clone()).unwrap();
    let (mut best_z, mut best) = (0.0, f64::INFINITY);
    for k in 0..=100_000 {
        let z = -5.0 + k as f64 * 1e-4;
        let j = problem.objective(&DVector::from_element(1, z));
        if j < best {
            best = j;
            best_z = z;
        }
    }
    let (_, report) = solve_nonlinear(&sys, psi, &DescentOptions::default()).unwrap();
    assert!(
        (report.latent[0] - best_z).abs() <= 1e-3,
        "{} vs {best_z}",
        report.latent[0]
    );
    assert!(report.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn nonlinear_with_zero_psi_is_linear() {
    let cfg = small_config(27);
    let spec = cfg.spec(Payoff::Exp { nu: 0.5 }).unwrap();
    let pts = collocation(&cfg, &spec, 5, 4);
    let sys = assemble(&spec, &pts, &cfg.kernel).unwrap();
    let linear = solve_linear(&sys, Method::Symmetric).unwrap();
    let (nonlinear, _) =
        solve_nonlinear(&sys, Nonlinearity::zero(), &DescentOptions::default()).unwrap();
    let eval = sample_points(&cfg, &spec, PointRole::Evaluation, 10).unwrap();
    for (a, b) in linear
        .predict(&eval)
        .unwrap()
        .iter()
        .zip(nonlinear.predict(&eval).unwrap())
    {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
    }
}
