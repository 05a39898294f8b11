//! Brute-force truncated signatures of piecewise-linear paths.
//!
//! Slow but independent of the Goursat solver, which makes it the reference
//! for kernel values and, through finite differences, their derivatives.

use rand::Rng;

use crate::error::{shape, Result};
use crate::paths::{Path, TimeGrid};

/// Tensors of orders `0..=level` over `dim` channels, each stored flat in
/// row-major (lexicographic word) order.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSignature {
    level: usize,
    dim: usize,
    tensors: Vec<Vec<f64>>,
}

impl TruncatedSignature {
    /// The unit `(1, 0, 0, …)`.
    pub fn unit(dim: usize, level: usize) -> Self {
        let tensors = (0..=level)
            .map(|k| {
                let mut t = vec![0.0; dim.pow(k as u32)];
                if k == 0 {
                    t[0] = 1.0;
                }
                t
            })
            .collect();
        Self {
            level,
            dim,
            tensors,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tensor(&self, order: usize) -> &[f64] {
        &self.tensors[order]
    }

    /// Hilbert–Schmidt norm over all orders.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product summed over orders.
    pub fn dot(&self, other: &TruncatedSignature) -> Result<f64> {
        check_same(self, other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }
}

fn check_same(a: &TruncatedSignature, b: &TruncatedSignature) -> Result<()> {
    if a.level != b.level || a.dim != b.dim {
        return Err(shape(format!(
            "signatures differ: level {} dim {} vs level {} dim {}",
            a.level, a.dim, b.level, b.dim
        )));
    }
    Ok(())
}

/// Signature of a single linear segment: the truncated tensor exponential.
pub fn segment_signature(delta: &[f64], level: usize) -> TruncatedSignature {
    let dim = delta.len();
    let mut tensors = Vec::with_capacity(level + 1);
    tensors.push(vec![1.0]);
    for k in 1..=level {
        let prev: &Vec<f64> = &tensors[k - 1];
        let mut next = Vec::with_capacity(prev.len() * dim);
        for &p in prev {
            for &d in delta {
                next.push(p * d / k as f64);
            }
        }
        tensors.push(next);
    }
    TruncatedSignature {
        level,
        dim,
        tensors,
    }
}

/// Truncated tensor product `z_k = Σ_j v_j ⊗ w_{k-j}`.
pub fn chen_concat(s1: &TruncatedSignature, s2: &TruncatedSignature) -> Result<TruncatedSignature> {
    check_same(s1, s2)?;
    let dim = s1.dim;
    let mut out = TruncatedSignature::unit(dim, s1.level);
    for k in 0..=s1.level {
        let z = &mut out.tensors[k];
        z.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..=k {
            let v = &s1.tensors[j];
            let w = &s2.tensors[k - j];
            let wl = w.len();
            for (a, &va) in v.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                let base = a * wl;
                for (b, &wb) in w.iter().enumerate() {
                    z[base + b] += va * wb;
                }
            }
        }
    }
    Ok(out)
}

/// Signature of the piecewise-linear interpolant of `p`.
pub fn signature(p: &Path, level: usize) -> TruncatedSignature {
    let dim = p.channels();
    let mut sig = TruncatedSignature::unit(dim, level);
    let mut delta = vec![0.0; dim];
    for k in 0..p.n_cells() {
        for (c, d) in delta.iter_mut().enumerate() {
            *d = p.increment(k, c);
        }
        sig = chen_concat(&sig, &segment_signature(&delta, level)).expect("same layout");
    }
    sig
}

/// `Σ_{k ≤ N} ⟨S(γ)_k, S(τ)_k⟩`.
pub fn truncated_kernel(gamma: &Path, tau: &Path, level: usize) -> Result<f64> {
    if gamma.channels() != tau.channels() {
        return Err(shape("paths have different channel counts"));
    }
    signature(gamma, level).dot(&signature(tau, level))
}

fn perturbed(gamma: &Path, terms: &[(&Path, f64)]) -> Result<Path> {
    let mut out = gamma.clone();
    for (dir, eps) in terms {
        out = out.add(&dir.scaled(*eps))?;
    }
    Ok(out)
}

/// Central difference `(κ(γ+εη, τ) - κ(γ-εη, τ)) / 2ε`.
pub fn fd_directional_derivative(
    gamma: &Path,
    tau: &Path,
    eta: &Path,
    level: usize,
    eps: f64,
) -> Result<f64> {
    let plus = truncated_kernel(&perturbed(gamma, &[(eta, eps)])?, tau, level)?;
    let minus = truncated_kernel(&perturbed(gamma, &[(eta, -eps)])?, tau, level)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Four-point mixed stencil for `∂^{ηη̄} κ(γ, τ)`.
pub fn fd_second(
    gamma: &Path,
    tau: &Path,
    eta: &Path,
    etabar: &Path,
    level: usize,
    eps: f64,
) -> Result<f64> {
    let k = |a: f64, b: f64| -> Result<f64> {
        truncated_kernel(&perturbed(gamma, &[(eta, a), (etabar, b)])?, tau, level)
    };
    Ok((k(eps, eps)? - k(eps, -eps)? - k(-eps, eps)? + k(-eps, -eps)?) / (4.0 * eps * eps))
}

/// Random piecewise-linear path from the origin on `[0, 1]` with total
/// variation at most `max_variation`.
pub fn random_bv_path<R: Rng + ?Sized>(
    rng: &mut R,
    channels: usize,
    cells: usize,
    max_variation: f64,
) -> Path {
    let mut vals = vec![0.0; channels];
    for _ in 0..cells {
        let mut row: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = rng.gen_range(0.0..max_variation / cells as f64);
        row.iter_mut().for_each(|v| *v *= target / len.max(1e-12));
        let last = vals[vals.len() - channels..].to_vec();
        vals.extend(last.iter().zip(&row).map(|(a, b)| a + b));
    }
    Path::new(
        TimeGrid::new(0.0, 1.0, cells).expect("valid grid"),
        channels,
        vals,
    )
    .expect("consistent layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::one_variation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const I0_2: f64 = 2.279_585_302_336_067;
    const I1_2: f64 = 1.590_636_854_637_329;
    const I2_2: f64 = 0.688_948_447_698_738;

    fn linear(n: usize) -> Path {
        Path::from_fn(TimeGrid::new(0.0, 1.0, n).unwrap(), 1, |s| vec![s]).unwrap()
    }

    fn random_path(seed: u64, channels: usize, cells: usize, max_var: f64) -> Path {
        random_bv_path(
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            channels,
            cells,
            max_var,
        )
    }

    #[test]
    fn segment_examples() {
        let s = segment_signature(&[0.0, 0.0], 3);
        assert_eq!(s, TruncatedSignature::unit(2, 3));
        let s = segment_signature(&[2.0], 3);
        let flat: Vec<f64> = (0..=3).map(|k| s.tensor(k)[0]).collect();
        for (a, b) in flat.iter().zip([1.0, 2.0, 2.0, 4.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = segment_signature(&[1.0, 1.0], 2);
        assert!(s.tensor(2).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn chen_identity_and_group_property() {
        let a = segment_signature(&[0.3, -0.2], 5);
        let unit = TruncatedSignature::unit(2, 5);
        assert_eq!(chen_concat(&a, &unit).unwrap(), a);
        let twice = chen_concat(&a, &a).unwrap();
        let direct = segment_signature(&[0.6, -0.4], 5);
        for k in 0..=5 {
            for (x, y) in twice.tensor(k).iter().zip(direct.tensor(k)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(chen_concat(&a, &segment_signature(&[1.0], 5)).is_err());
    }

    #[test]
    fn chen_is_associative() {
        let a = segment_signature(&[0.3, -0.7], 6);
        let b = segment_signature(&[-0.1, 0.4], 6);
        let c = segment_signature(&[0.9, 0.2], 6);
        let left = chen_concat(&chen_concat(&a, &b).unwrap(), &c).unwrap();
        let right = chen_concat(&a, &chen_concat(&b, &c).unwrap()).unwrap();
        for k in 0..=6 {
            for (x, y) in left.tensor(k).iter().zip(right.tensor(k)) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn constant_path_kernel_is_one() {
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let c = Path::scalar(g, vec![0.4; 4]).unwrap();
        let tau = random_path(1, 1, 3, 2.0);
        assert_eq!(truncated_kernel(&c, &tau, 7).unwrap(), 1.0);
    }

    #[test]
    fn bessel_values() {
        let g = linear(1);
        assert!((truncated_kernel(&g, &g, 12).unwrap() - I0_2).abs() < 1e-10);
        let d1 = fd_directional_derivative(&g, &g, &g, 16, 1e-4).unwrap();
        assert!((d1 - I1_2).abs() < 1e-6);
        let d2 = fd_second(&g, &g, &g, &g, 16, 1e-3).unwrap();
        assert!((d2 - I2_2).abs() < 1e-4);
        let zero = Path::zeros(*g.grid(), 1);
        assert_eq!(
            fd_directional_derivative(&g, &g, &zero, 8, 1e-3).unwrap(),
            0.0
        );
    }

    #[test]
    fn truncation_error_decays_superfactorially() {
        let g = linear(1);
        let errs: Vec<f64> = (2..8)
            .map(|n| (I0_2 - truncated_kernel(&g, &g, n).unwrap()).abs())
            .collect();
        for (k, w) in errs.windows(2).enumerate() {
            let n = (k + 3) as f64;
            // successive ratio beats 1/n², the ratio of consecutive 1/(n!)² terms
            assert!(w[1] / w[0] <= 1.0 / (n * n) * 1.5);
        }
    }

    #[test]
    fn kernel_symmetric() {
        let a = random_path(3, 2, 8, 2.0);
        let b = random_path(4, 2, 8, 2.0);
        assert_eq!(
            truncated_kernel(&a, &b, 8).unwrap(),
            truncated_kernel(&b, &a, 8).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn norm_bounds_hold(seed in 0u64..10_000) {
            let a = random_path(seed, 2, 8, 2.0);
            let b = random_path(seed + 77_777, 2, 8, 2.0);
            let sa = signature(&a, 10);
            prop_assert!(sa.norm() <= one_variation(&a).exp() * (1.0 + 1e-12));
            let k = sa.dot(&signature(&b, 10)).unwrap();
            prop_assert!(k.abs() <= (one_variation(&a) * one_variation(&b)).exp() * (1.0 + 1e-12));
        }

        #[test]
        fn monotone_in_level_for_positive_increments(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = TimeGrid::new(0.0, 1.0, 6).unwrap();
            let mut mk = || {
                let mut acc = vec![0.0, 0.0];
                let mut v = acc.clone();
                for _ in 0..6 {
                    acc[0] += rng.gen_range(0.0..0.4);
                    acc[1] += rng.gen_range(0.0..0.4);
                    v.extend_from_slice(&acc);
                }
                Path::new(g, 2, v).unwrap()
            };
            let (a, b) = (mk(), mk());
            let mut prev = 0.0;
            for n in 0..8 {
                let k = truncated_kernel(&a, &b, n).unwrap();
                prop_assert!(k >= prev - 1e-14);
                prev = k;
            }
        }
    }
}
