//! Finite-difference integration of the coupled Goursat system satisfied by
//! the signature kernel and its directional derivatives.
//!
//! Every component solves `∂_s ∂_t K_c = Σ_terms coeff · A_field · K_src`
//! with sources `src <= c`, so the system is lower triangular and can be
//! marched one cell at a time. Component 0 is the kernel itself and carries
//! the boundary value 1; all other components start at 0.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::paths::Path;
use crate::static_kernels::{cell_field, AField, Lift};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Trapezoidal predictor-corrector, second order.
    #[default]
    PredictorCorrector,
    /// Explicit rectangle rule, first order. Debugging only.
    Euler,
}

/// One coupling term `coeff · fields[field] · K_source`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub source: usize,
    pub field: usize,
    pub coeff: f64,
}

/// A lower-triangular system of Goursat problems sharing one grid.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub fields: Vec<DMatrix<f64>>,
    pub components: Vec<Vec<Term>>,
}

impl CoupledSystem {
    fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .fields
            .first()
            .ok_or_else(|| shape("coupled system has no fields"))?;
        let (rows, cols) = first.shape();
        if self.fields.iter().any(|f| f.shape() != (rows, cols)) {
            return Err(shape("fields of a coupled system must share one shape"));
        }
        for (c, terms) in self.components.iter().enumerate() {
            for t in terms {
                if t.source > c || t.field >= self.fields.len() {
                    return Err(shape(format!(
                        "term {t:?} of component {c} is not lower triangular"
                    )));
                }
            }
        }
        Ok((rows, cols))
    }
}

/// Node values of every component, either at all original grid nodes or
/// only at the terminal corner.
#[derive(Debug, Clone)]
pub struct Marched {
    pub corner: Vec<f64>,
    pub surfaces: Option<Vec<DMatrix<f64>>>,
}

/// Marches the system over the product grid, refining each cell into
/// `2^dyadic_order × 2^dyadic_order` subcells with uniformly split fields.
pub fn march(
    system: &CoupledSystem,
    dyadic_order: u32,
    scheme: Scheme,
    keep_surfaces: bool,
) -> Result<Marched> {
    let (rows, cols) = system.validate()?;
    let nc = system.components.len();
    let refine = 1usize << dyadic_order;
    let scale = 1.0 / (refine * refine) as f64;
    let (rr, cr) = (rows * refine, cols * refine);
    let width = cr + 1;

    // drop terms whose field vanishes identically
    let nonzero: Vec<bool> = system
        .fields
        .iter()
        .map(|f| f.iter().any(|&v| v != 0.0))
        .collect();
    let comps: Vec<Vec<Term>> = system
        .components
        .iter()
        .map(|ts| ts.iter().copied().filter(|t| nonzero[t.field]).collect())
        .collect();

    let mut prev = vec![0.0; width * nc];
    let mut cur = vec![0.0; width * nc];
    if nc > 0 {
        for j in 0..width {
            prev[j * nc] = 1.0;
        }
    }
    let mut surfaces = keep_surfaces.then(|| {
        let mut s = vec![DMatrix::zeros(rows + 1, cols + 1); nc];
        if nc > 0 {
            s[0].fill(1.0);
        }
        s
    });
    let mut fv = vec![0.0; system.fields.len()];

    for ir in 0..rr {
        let i = ir >> dyadic_order;
        cur.iter_mut().for_each(|v| *v = 0.0);
        if nc > 0 {
            cur[0] = 1.0;
        }
        for jr in 0..cr {
            let j = jr >> dyadic_order;
            for (f, field) in system.fields.iter().enumerate() {
                fv[f] = field[(i, j)] * scale;
            }
            let (k00, k01) = (jr * nc, (jr + 1) * nc);
            for c in 0..nc {
                let (mut f1, mut f2, mut f3, mut off4, mut diag) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for t in &comps[c] {
                    let a = t.coeff * fv[t.field];
                    f1 += a * prev[k00 + t.source];
                    f2 += a * prev[k01 + t.source];
                    f3 += a * cur[k00 + t.source];
                    if t.source < c {
                        off4 += a * cur[k01 + t.source];
                    } else {
                        diag += a;
                    }
                }
                let base = prev[k01 + c] + cur[k00 + c] - prev[k00 + c];
                let value = match scheme {
                    Scheme::PredictorCorrector => {
                        let pred = base + f1;
                        base + 0.25 * (f1 + f2 + f3 + off4 + diag * pred)
                    }
                    Scheme::Euler => base + f1,
                };
                if !value.is_finite() {
                    return Err(Error::NonFinite { i, j, component: c });
                }
                cur[k01 + c] = value;
            }
        }
        if let Some(s) = surfaces.as_mut() {
            if (ir + 1) % refine == 0 {
                let io = (ir + 1) / refine;
                for (jo, col) in (0..=cr).step_by(refine).enumerate() {
                    for c in 0..nc {
                        s[c][(io, jo)] = cur[col * nc + c];
                    }
                }
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let corner = prev[cr * nc..(cr + 1) * nc].to_vec();
    Ok(Marched { corner, surfaces })
}

/// Surfaces of `κ`, `∂^η κ`, `∂^η̄ κ`, `∂^{ηη̄} κ` on the original nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GoursatSolution {
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub k3: DMatrix<f64>,
    pub k4: DMatrix<f64>,
    pub dyadic_order: u32,
}

impl GoursatSolution {
    /// Terminal-corner values `(κ, ∂^η κ, ∂^η̄ κ, ∂^{ηη̄} κ)`.
    pub fn corner(&self) -> [f64; 4] {
        let (r, c) = (self.k1.nrows() - 1, self.k1.ncols() - 1);
        [
            self.k1[(r, c)],
            self.k2[(r, c)],
            self.k3[(r, c)],
            self.k4[(r, c)],
        ]
    }

    /// Long-format CSV `i,j,k1,k2,k3,k4`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,k1,k2,k3,k4\n");
        for i in 0..self.k1.nrows() {
            for j in 0..self.k1.ncols() {
                out.push_str(&format!(
                    "{i},{j},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    self.k1[(i, j)],
                    self.k2[(i, j)],
                    self.k3[(i, j)],
                    self.k4[(i, j)]
                ));
            }
        }
        out
    }
}

fn check_field_shapes(gamma: &Path, tau: &Path, fields: &AField) -> Result<()> {
    let want = (gamma.n_cells(), tau.n_cells());
    for f in [
        &fields.a,
        &fields.a_eta,
        &fields.a_etabar,
        &fields.a_eta_etabar,
    ] {
        if f.shape() != want {
            return Err(shape(format!(
                "field shape {:?}, paths need {want:?}",
                f.shape()
            )));
        }
    }
    Ok(())
}

fn four_component_system(fields: &AField) -> CoupledSystem {
    let t = |source, field| Term {
        source,
        field,
        coeff: 1.0,
    };
    CoupledSystem {
        fields: vec![
            fields.a.clone(),
            fields.a_eta.clone(),
            fields.a_etabar.clone(),
            fields.a_eta_etabar.clone(),
        ],
        components: vec![
            vec![t(0, 0)],
            vec![t(0, 1), t(1, 0)],
            vec![t(0, 2), t(2, 0)],
            vec![t(0, 3), t(1, 2), t(2, 1), t(3, 0)],
        ],
    }
}

/// Solves for the kernel and its first and second derivatives along `η`
/// and `η̄` (both acting on the first path).
pub fn solve(
    gamma: &Path,
    tau: &Path,
    eta: &Path,
    etabar: &Path,
    fields: &AField,
    dyadic_order: u32,
) -> Result<GoursatSolution> {
    solve_with(
        gamma,
        tau,
        eta,
        etabar,
        fields,
        dyadic_order,
        Scheme::default(),
    )
}

pub fn solve_with(
    gamma: &Path,
    tau: &Path,
    eta: &Path,
    etabar: &Path,
    fields: &AField,
    dyadic_order: u32,
    scheme: Scheme,
) -> Result<GoursatSolution> {
    if eta.grid() != gamma.grid() || etabar.grid() != gamma.grid() {
        return Err(shape("directions must share the first path's grid"));
    }
    check_field_shapes(gamma, tau, fields)?;
    let out = march(&four_component_system(fields), dyadic_order, scheme, true)?;
    let mut s = out.surfaces.expect("surfaces requested").into_iter();
    Ok(GoursatSolution {
        k1: s.next().unwrap(),
        k2: s.next().unwrap(),
        k3: s.next().unwrap(),
        k4: s.next().unwrap(),
        dyadic_order,
    })
}

/// Terminal kernel value only; skips the derivative components.
pub fn kernel_only(gamma: &Path, tau: &Path, fields: &AField, dyadic_order: u32) -> Result<f64> {
    check_field_shapes(gamma, tau, fields)?;
    let system = CoupledSystem {
        fields: vec![fields.a.clone()],
        components: vec![vec![Term {
            source: 0,
            field: 0,
            coeff: 1.0,
        }]],
    };
    Ok(march(&system, dyadic_order, Scheme::default(), false)?.corner[0])
}

/// Corner values of `∂^α_γ ∂^β_τ κ` for every multi-index up to the
/// requested maximal orders.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTable {
    radices: Vec<usize>,
    n_left: usize,
    values: Vec<f64>,
}

impl DerivativeTable {
    fn rank(&self, left: &[usize], right: &[usize]) -> usize {
        assert_eq!(left.len(), self.n_left, "left multi-index length");
        assert_eq!(
            left.len() + right.len(),
            self.radices.len(),
            "multi-index length"
        );
        let mut r = 0;
        let mut stride = 1;
        for (k, &o) in left.iter().chain(right).enumerate() {
            assert!(o < self.radices[k], "derivative order {o} not computed");
            r += o * stride;
            stride *= self.radices[k];
        }
        r
    }

    pub fn get(&self, left: &[usize], right: &[usize]) -> f64 {
        self.values[self.rank(left, right)]
    }

    pub fn kernel(&self) -> f64 {
        self.values[0]
    }
}

fn multi_indices(radices: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = radices.iter().product();
    (0..total)
        .map(|mut r| {
            radices
                .iter()
                .map(|&b| {
                    let o = r % b;
                    r /= b;
                    o
                })
                .collect()
        })
        .collect()
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Kernel derivatives along directions on either argument.
///
/// `left` lists `(direction, max order)` pairs acting on `gamma`, `right`
/// those acting on `tau`. Coupling follows the Leibniz rule applied to
/// `A · K`.
pub fn derivative_table(
    gamma: &Path,
    tau: &Path,
    left: &[(&Path, usize)],
    right: &[(&Path, usize)],
    lift: &Lift,
    dyadic_order: u32,
    scheme: Scheme,
) -> Result<DerivativeTable> {
    let dirs: Vec<&Path> = left.iter().chain(right).map(|(p, _)| *p).collect();
    let radices: Vec<usize> = left.iter().chain(right).map(|(_, o)| o + 1).collect();
    let n_left = left.len();
    let indices = multi_indices(&radices);

    let mut fields = Vec::with_capacity(indices.len());
    for idx in &indices {
        let (lo, ro) = idx.split_at(n_left);
        let lsum: usize = lo.iter().sum();
        let rsum: usize = ro.iter().sum();
        if matches!(lift, Lift::Identity) && (lsum >= 2 || rsum >= 2) {
            fields.push(DMatrix::zeros(gamma.n_cells(), tau.n_cells()));
            continue;
        }
        let expand = |range: std::ops::Range<usize>| -> Vec<&Path> {
            range
                .flat_map(|k| std::iter::repeat_n(dirs[k], idx[k]))
                .collect()
        };
        let l = expand(0..n_left);
        let r = expand(n_left..dirs.len());
        fields.push(cell_field(gamma, tau, &l, &r, lift)?);
    }

    let rank_of = |idx: &[usize]| -> usize {
        let mut r = 0;
        let mut stride = 1;
        for (k, &o) in idx.iter().enumerate() {
            r += o * stride;
            stride *= radices[k];
        }
        r
    };
    let components = indices
        .iter()
        .map(|alpha| {
            multi_indices(&alpha.iter().map(|a| a + 1).collect::<Vec<_>>())
                .into_iter()
                .map(|beta| {
                    let delta: Vec<usize> = alpha.iter().zip(&beta).map(|(a, b)| a - b).collect();
                    let coeff = alpha
                        .iter()
                        .zip(&beta)
                        .map(|(&a, &b)| binom(a, b))
                        .product();
                    Term {
                        source: rank_of(&beta),
                        field: rank_of(&delta),
                        coeff,
                    }
                })
                .collect()
        })
        .collect();
    let system = CoupledSystem { fields, components };
    let out = march(&system, dyadic_order, scheme, false)?;
    Ok(DerivativeTable {
        radices,
        n_left,
        values: out.corner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;
    use crate::static_kernels::a_fields;

    const I0_2: f64 = 2.279_585_302_336_067;
    const I1_2: f64 = 1.590_636_854_637_329;
    const I2_2: f64 = 0.688_948_447_698_738;

    fn linear(n: usize) -> Path {
        Path::from_fn(TimeGrid::new(0.0, 1.0, n).unwrap(), 1, |s| vec![s]).unwrap()
    }

    #[test]
    fn constant_path_gives_trivial_surfaces() {
        let g = TimeGrid::new(0.0, 1.0, 6).unwrap();
        let c = Path::scalar(g, vec![0.3; 7]).unwrap();
        let tau = linear(6);
        let f = a_fields(&c, &tau, &c, &c, &Lift::Identity).unwrap();
        let sol = solve(&c, &tau, &c, &c, &f, 1).unwrap();
        assert!(sol.k1.iter().all(|&v| v == 1.0));
        for k in [&sol.k2, &sol.k3, &sol.k4] {
            assert!(k.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bessel_corner_values() {
        let p = linear(64);
        let f = a_fields(&p, &p, &p, &p, &Lift::Identity).unwrap();
        let sol = solve(&p, &p, &p, &p, &f, 2).unwrap();
        let [k1, k2, k3, k4] = sol.corner();
        assert!((k1 - I0_2).abs() < 1e-4);
        assert!((k2 - I1_2).abs() < 1e-3);
        assert!((k4 - I2_2).abs() < 1e-2);
        assert!((k2 - k3).abs() < 1e-12);
        assert_eq!(kernel_only(&p, &p, &f, 2).unwrap(), k1);
        // boundary
        for k in 0..65 {
            assert_eq!(sol.k1[(0, k)], 1.0);
            assert_eq!(sol.k1[(k, 0)], 1.0);
            assert_eq!(sol.k4[(k, 0)], 0.0);
        }
    }

    #[test]
    fn general_table_matches_four_component_solve() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let a = Path::from_fn(g, 2, |s| vec![s, (2.0 * s).sin()]).unwrap();
        let b = Path::from_fn(g, 2, |s| vec![s, s * s - 0.5 * s]).unwrap();
        let e1 = Path::from_fn(g, 2, |s| vec![0.0, 1.0 + s]).unwrap();
        let e2 = Path::from_fn(g, 2, |s| vec![0.0, (3.0 * s).cos()]).unwrap();
        for lift in [Lift::Identity, Lift::Rbf { sigma: 0.9 }] {
            let f = a_fields(&a, &b, &e1, &e2, &lift).unwrap();
            let c = solve(&a, &b, &e1, &e2, &f, 1).unwrap().corner();
            let t = derivative_table(
                &a,
                &b,
                &[(&e1, 1), (&e2, 1)],
                &[],
                &lift,
                1,
                Scheme::default(),
            )
            .unwrap();
            assert!((t.get(&[0, 0], &[]) - c[0]).abs() < 1e-14);
            assert!((t.get(&[1, 0], &[]) - c[1]).abs() < 1e-14);
            assert!((t.get(&[0, 1], &[]) - c[2]).abs() < 1e-14);
            assert!((t.get(&[1, 1], &[]) - c[3]).abs() < 1e-14);
        }
    }

    #[test]
    fn two_sided_table_is_consistent_under_swap() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let a = Path::from_fn(g, 2, |s| vec![s, 0.4 * (2.0 * s).sin()]).unwrap();
        let b = Path::from_fn(g, 2, |s| vec![s, s * s]).unwrap();
        let ea = Path::from_fn(g, 2, |s| vec![0.0, 1.0 - s]).unwrap();
        let eb = Path::from_fn(g, 2, |s| vec![0.0, s.sqrt()]).unwrap();
        let lift = Lift::Rbf { sigma: 1.1 };
        let ab = derivative_table(
            &a,
            &b,
            &[(&ea, 2)],
            &[(&eb, 2)],
            &lift,
            0,
            Scheme::default(),
        )
        .unwrap();
        let ba = derivative_table(
            &b,
            &a,
            &[(&eb, 2)],
            &[(&ea, 2)],
            &lift,
            0,
            Scheme::default(),
        )
        .unwrap();
        for p in 0..3 {
            for q in 0..3 {
                let x = ab.get(&[p], &[q]);
                let y = ba.get(&[q], &[p]);
                assert!(
                    (x - y).abs() <= 1e-10 * (1.0 + x.abs()),
                    "{p}{q}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn second_order_component_matches_finite_difference_of_first() {
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let a = Path::from_fn(g, 2, |s| vec![s, 0.5 * s.sin()]).unwrap();
        let b = Path::from_fn(g, 2, |s| vec![s, -0.3 * s]).unwrap();
        let e = Path::from_fn(g, 2, |s| vec![0.0, s]).unwrap();
        let lift = Lift::Rbf { sigma: 0.7 };
        let t = derivative_table(&a, &b, &[(&e, 2)], &[], &lift, 1, Scheme::default()).unwrap();
        let eps = 1e-4;
        let first = |x: f64| {
            let ax = a.add(&e.scaled(x)).unwrap();
            derivative_table(&ax, &b, &[(&e, 1)], &[], &lift, 1, Scheme::default())
                .unwrap()
                .get(&[1], &[])
        };
        let fd = (first(eps) - first(-eps)) / (2.0 * eps);
        // the coupled scheme is not the exact derivative of the scalar scheme; they agree to O(h²)
        assert!((t.get(&[2], &[]) - fd).abs() < 1e-4 * (1.0 + fd.abs()));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let f = AField {
            a: DMatrix::from_element(2, 2, f64::INFINITY),
            a_eta: DMatrix::zeros(2, 2),
            a_etabar: DMatrix::zeros(2, 2),
            a_eta_etabar: DMatrix::zeros(2, 2),
        };
        let p = linear(2);
        assert!(matches!(
            kernel_only(&p, &p, &f, 0),
            Err(Error::NonFinite { i: 0, j: 0, .. })
        ));
    }
}
