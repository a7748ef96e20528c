//! Discrete trace spaces on the accessible window Σ, generation of local Cauchy
//! data subspaces, and the aperture distance between them.
//!
//! The window of every fixture is a flat axis-aligned rectangle, so the surface
//! Laplacian with zero condition at ∂Σ diagonalizes in the tensor sine basis and
//! the fractional trace norms become exact spectral scalings. The Dirichlet-trace
//! norm weights modal coefficients by (1+λ)^{1/4} and the normal-trace norm by
//! (1+λ)^{-1/4} (with the matching square-rooted surface-measure factors), so the
//! two weighting maps are exact inverses of one another and the lowest mass-
//! normalized eigenfunction has trace norm (1+λ₁)^{1/4}.
//!
//! Subspaces are generated through the always-well-posed impedance problem: the
//! map from a solution to its impedance datum g + iτ·u is a bijection, so driving
//! the first m surface eigenfunctions yields a nested exhaustion of the discrete
//! Cauchy space. The aperture is the largest principal-angle sine, computed as
//! the top singular value of (I − P₁)B₂.

use crate::pde::{DiscreteOperator, PdeError};
use crate::{C64, GridDomain};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors from trace-space construction and subspace comparison.
#[derive(Debug, Error)]
pub enum CauchyError {
    /// Window has no strictly interior nodes.
    #[error("the accessible window holds no interior nodes at this spacing")]
    EmptyWindow,
    /// Vector length does not match the window.
    #[error("expected {expected} window values, got {got}")]
    DimensionMismatch {
        /// Σ node count of the metric.
        expected: usize,
        /// Supplied length.
        got: usize,
    },
    /// More modes requested than the window carries.
    #[error("requested {m} generation modes but the window has only {s} nodes")]
    TooManyModes {
        /// Requested count.
        m: usize,
        /// Available modes.
        s: usize,
    },
    /// Operator does not drive data on this metric's window.
    #[error("operator impedance rows do not coincide with the metric's window nodes")]
    OperatorMismatch,
    /// Subspaces built over different metrics.
    #[error("subspaces carry different metric hashes")]
    MetricMismatch,
    /// Underlying solver failure.
    #[error(transparent)]
    Pde(#[from] PdeError),
}

/// Spectral realization of the trace norms on Σ.
///
/// Holds the Σ node list, the diagonal surface measure, and the full
/// eigendecomposition of the surface Laplacian (zero condition at ∂Σ), through
/// which the fractional-power weighting maps act.
#[derive(Clone, Debug)]
pub struct BoundaryMetric {
    /// Σ nodes (strict interior of the window), lattice order.
    pub sigma: Vec<u32>,
    /// Grid spacing.
    pub h: f64,
    /// Ambient dimension of the domain (window is dim−1 dimensional).
    pub dim: usize,
    /// Diagonal surface measure weight h^(dim−1), identical at every Σ node.
    pub mass: f64,
    /// Interior node counts per tangential axis.
    pub inner: Vec<usize>,
    /// Surface-Laplacian eigenvalues, ascending; exact ties in lexicographic
    /// wavenumber order.
    pub lambda: Vec<f64>,
    /// Wavenumber tuple of each mode (second entry 0 when the window is 1-d).
    pub wavenumbers: Vec<[usize; 2]>,
    /// Eigenvector matrix, column-major s×s, orthonormal columns.
    psi: Vec<f64>,
}

impl BoundaryMetric {
    /// Builds the metric for the window of `dom` (physical or augmented).
    pub fn from_domain(dom: &GridDomain) -> Result<Self, CauchyError> {
        if dom.sigma.is_empty() {
            return Err(CauchyError::EmptyWindow);
        }
        let nt = dom.dim - 1;
        let inner: Vec<usize> = dom.sigma_inner[..nt].to_vec();
        let s: usize = inner.iter().product();
        debug_assert_eq!(s, dom.sigma.len());
        let h = dom.h;

        // Per-axis sine bases and 1-d eigenvalues.
        let mut axes_basis = Vec::with_capacity(nt);
        let mut axes_mu = Vec::with_capacity(nt);
        for &m in &inner {
            let norm = (2.0 / (m as f64 + 1.0)).sqrt();
            let mut b = vec![0.0f64; m * m]; // b[i + m*k] = φ_{k+1}(i)
            let mut mu = vec![0.0f64; m];
            for k in 0..m {
                let t = (k as f64 + 1.0) * std::f64::consts::PI / (m as f64 + 1.0);
                mu[k] = (4.0 / (h * h)) * (t / 2.0).sin().powi(2);
                for i in 0..m {
                    b[i + m * k] = norm * ((i as f64 + 1.0) * t).sin();
                }
            }
            axes_basis.push(b);
            axes_mu.push(mu);
        }

        // Tensor modes sorted by eigenvalue, exact ties by wavenumber.
        let mut modes: Vec<([usize; 2], f64)> = Vec::with_capacity(s);
        if nt == 1 {
            for k in 0..inner[0] {
                modes.push(([k, 0], axes_mu[0][k]));
            }
        } else {
            for k2 in 0..inner[1] {
                for k1 in 0..inner[0] {
                    modes.push(([k1, k2], axes_mu[0][k1] + axes_mu[1][k2]));
                }
            }
        }
        modes.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .expect("finite eigenvalues")
                .then(a.0.cmp(&b.0))
        });

        let mut psi = vec![0.0f64; s * s];
        let mut lambda = Vec::with_capacity(s);
        let mut wavenumbers = Vec::with_capacity(s);
        for (col, &(k, lam)) in modes.iter().enumerate() {
            lambda.push(lam);
            wavenumbers.push([k[0] + 1, if nt == 2 { k[1] + 1 } else { 0 }]);
            for i in 0..s {
                let i1 = i % inner[0];
                let v1 = axes_basis[0][i1 + inner[0] * k[0]];
                let v = if nt == 2 {
                    let i2 = i / inner[0];
                    v1 * axes_basis[1][i2 + inner[1] * k[1]]
                } else {
                    v1
                };
                psi[i + s * col] = v;
            }
        }

        Ok(BoundaryMetric {
            sigma: dom.sigma.clone(),
            h,
            dim: dom.dim,
            mass: h.powi(dom.dim as i32 - 1),
            inner,
            lambda,
            wavenumbers,
            psi,
        })
    }

    /// Number of Σ nodes (= number of surface modes).
    pub fn modes(&self) -> usize {
        self.lambda.len()
    }

    /// The k-th (0-based) eigenfunction as Σ-node values, Euclidean-normalized.
    pub fn eigenfunction(&self, k: usize) -> Vec<f64> {
        let s = self.modes();
        self.psi[s * k..s * (k + 1)].to_vec()
    }

    /// Modal coefficients Ψᵀx.
    pub fn to_modal(&self, x: &[C64]) -> Vec<C64> {
        let s = self.modes();
        assert_eq!(x.len(), s);
        let mut c = vec![C64::new(0.0, 0.0); s];
        for (k, ck) in c.iter_mut().enumerate() {
            let col = &self.psi[s * k..s * (k + 1)];
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..s {
                acc += x[i] * col[i];
            }
            *ck = acc;
        }
        c
    }

    /// Node values Ψc from modal coefficients.
    pub fn from_modal(&self, c: &[C64]) -> Vec<C64> {
        let s = self.modes();
        assert_eq!(c.len(), s);
        let mut x = vec![C64::new(0.0, 0.0); s];
        for k in 0..s {
            let col = &self.psi[s * k..s * (k + 1)];
            for i in 0..s {
                x[i] += col[i] * c[k];
            }
        }
        x
    }

    fn scaled(&self, x: &[C64], exponent: f64) -> Vec<C64> {
        let mut c = self.to_modal(x);
        let mass_half = self.mass.sqrt().powf(exponent.signum());
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= mass_half * (1.0 + self.lambda[k]).powf(exponent);
        }
        self.from_modal(&c)
    }

    /// Dirichlet-trace weighting map: modal scaling √mass·(1+λ)^(1/4).
    pub fn half_power(&self, f: &[C64]) -> Vec<C64> {
        self.scaled(f, 0.25)
    }

    /// Normal-trace weighting map, the exact inverse of [`Self::half_power`]:
    /// modal scaling (1+λ)^(−1/4)/√mass.
    pub fn neg_half_power(&self, g: &[C64]) -> Vec<C64> {
        self.scaled(g, -0.25)
    }

    /// Normalized surface Laplacian applied at the Σ nodes (zero at ∂Σ). The
    /// measure-weighted operator is `mass` times this; its generalized
    /// eigenvalues against the mass are exactly [`Self::lambda`].
    pub fn surface_laplacian_apply(&self, x: &[C64]) -> Vec<C64> {
        let s = self.modes();
        assert_eq!(x.len(), s);
        let inv_h2 = 1.0 / (self.h * self.h);
        let m1 = self.inner[0];
        let nt = self.inner.len();
        let mut y = vec![C64::new(0.0, 0.0); s];
        for i in 0..s {
            let idx = [i % m1, i / m1];
            let mut acc = C64::new(0.0, 0.0);
            for d in 0..nt {
                let (md, stride) = (self.inner[d], if d == 0 { 1 } else { m1 });
                acc += 2.0 * x[i];
                if idx[d] > 0 {
                    acc -= x[i - stride];
                }
                if idx[d] + 1 < md {
                    acc -= x[i + stride];
                }
            }
            y[i] = acc * inv_h2;
        }
        y
    }

    /// SHA-256 fingerprint of the metric: dimension, spacing, window extents,
    /// eigenvalues. Distinguishes incompatible window discretizations.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update([self.dim as u8]);
        hasher.update(self.h.to_le_bytes());
        for &m in &self.inner {
            hasher.update((m as u32).to_le_bytes());
        }
        for &l in &self.lambda {
            hasher.update(l.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Swaps two modes in place; meaningful only for exactly degenerate pairs,
    /// where it realizes a different valid eigen-ordering of the same metric.
    #[doc(hidden)]
    pub fn swap_modes(&mut self, a: usize, b: usize) {
        assert_eq!(self.lambda[a], self.lambda[b], "only degenerate modes swap");
        let s = self.modes();
        self.lambda.swap(a, b);
        self.wavenumbers.swap(a, b);
        for i in 0..s {
            self.psi.swap(i + s * a, i + s * b);
        }
    }
}

/// One Cauchy datum on Σ: Dirichlet trace and discrete normal derivative, both
/// at the Σ nodes (the trace extends by zero across ∂Σ by construction).
#[derive(Clone, Debug)]
pub struct CauchyPair {
    /// Dirichlet trace at the Σ nodes.
    pub f: Vec<C64>,
    /// Normal derivative at the Σ nodes.
    pub g: Vec<C64>,
}

/// Trace-space norm (‖f‖²_{1/2} + ‖g‖²_{−1/2})^{1/2} in weighted coordinates.
pub fn pair_norm(metric: &BoundaryMetric, pair: &CauchyPair) -> Result<f64, CauchyError> {
    let coords = weighted_coordinates(metric, pair)?;
    Ok(coords.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
}

/// Concatenated weighted coordinates [half_power·f ; neg_half_power·g].
pub fn weighted_coordinates(
    metric: &BoundaryMetric,
    pair: &CauchyPair,
) -> Result<Vec<C64>, CauchyError> {
    let s = metric.modes();
    for v in [&pair.f, &pair.g] {
        if v.len() != s {
            return Err(CauchyError::DimensionMismatch {
                expected: s,
                got: v.len(),
            });
        }
    }
    let mut out = metric.half_power(&pair.f);
    out.extend(metric.neg_half_power(&pair.g));
    Ok(out)
}

/// A generated local Cauchy data subspace in weighted coordinates.
#[derive(Clone, Debug)]
pub struct CauchySubspace {
    /// Orthonormal basis columns, each of length 2·(Σ node count).
    pub basis: Vec<Vec<C64>>,
    /// Requested generation count.
    pub m: usize,
    /// Columns dropped as numerically dependent during orthonormalization.
    pub dropped: usize,
    /// The raw recorded pairs, in generation order (regenerable from scratch).
    pub pairs: Vec<CauchyPair>,
    /// Metric fingerprint the coordinates live in.
    pub metric_hash: String,
}

impl CauchySubspace {
    /// Dimension after drops.
    pub fn dims(&self) -> usize {
        self.basis.len()
    }
}

/// Generates the subspace spanned by the Cauchy data of the first `m` surface
/// eigenfunctions driven as impedance data through `op` (a window-generation
/// operator on the physical domain whose impedance rows are exactly Σ).
pub fn generate_cauchy_space(
    op: &DiscreteOperator,
    metric: &BoundaryMetric,
    m: usize,
) -> Result<CauchySubspace, CauchyError> {
    if op.robin_nodes() != metric.sigma.as_slice() {
        return Err(CauchyError::OperatorMismatch);
    }
    let s = metric.modes();
    if m > s {
        return Err(CauchyError::TooManyModes { m, s });
    }

    let data: Vec<Vec<C64>> = (0..m)
        .map(|k| {
            metric
                .eigenfunction(k)
                .into_iter()
                .map(|v| C64::new(v, 0.0))
                .collect()
        })
        .collect();
    let solutions = op.solve_windows_many(data.clone())?;

    let mut pairs = Vec::with_capacity(m);
    let mut coords = Vec::with_capacity(m);
    for (g_imp, v) in data.iter().zip(&solutions) {
        let pair = CauchyPair {
            f: op.window_trace(v),
            g: op.normal_trace(v, g_imp),
        };
        coords.push(weighted_coordinates(metric, &pair)?);
        pairs.push(pair);
    }

    let (basis, dropped) = orthonormalize(coords);
    Ok(CauchySubspace {
        basis,
        m,
        dropped,
        pairs,
        metric_hash: metric.hash(),
    })
}

/// Builds the subspace spanned by already-recorded pairs, without any solves.
/// Truncating the `pairs` of a generated subspace to a prefix reproduces the
/// space the same generation would have produced at the smaller count, byte
/// for byte; model-predicted pairs can be wrapped the same way.
pub fn subspace_from_pairs(
    metric: &BoundaryMetric,
    pairs: &[CauchyPair],
) -> Result<CauchySubspace, CauchyError> {
    let mut coords = Vec::with_capacity(pairs.len());
    for pair in pairs {
        coords.push(weighted_coordinates(metric, pair)?);
    }
    let (basis, dropped) = orthonormalize(coords);
    Ok(CauchySubspace {
        basis,
        m: pairs.len(),
        dropped,
        pairs: pairs.to_vec(),
        metric_hash: metric.hash(),
    })
}

/// Modified Gram–Schmidt with one reorthogonalization pass; columns whose
/// remainder falls below 1e−12 of their original size are dropped.
fn orthonormalize(columns: Vec<Vec<C64>>) -> (Vec<Vec<C64>>, usize) {
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(columns.len());
    let mut dropped = 0usize;
    for mut v in columns {
        let orig = norm(&v);
        if orig == 0.0 {
            dropped += 1;
            continue;
        }
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &v);
                for i in 0..v.len() {
                    v[i] -= c * b[i];
                }
            }
        }
        let n = norm(&v);
        if n <= 1e-12 * orig {
            dropped += 1;
            continue;
        }
        for z in &mut v {
            *z /= n;
        }
        basis.push(v);
    }
    (basis, dropped)
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.len() {
        acc += a[i].conj() * b[i];
    }
    acc
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest singular value of (I − P₁)·B₂ over orthonormal column families:
/// how far `b2` sticks out of the span of `b1`. Clamped to [0, 1].
pub fn subspace_gap(b1: &[Vec<C64>], b2: &[Vec<C64>]) -> f64 {
    if b2.is_empty() {
        return 0.0;
    }
    let m2 = b2.len();
    // Residuals G_j = (I − P₁) b2_j.
    let mut g: Vec<Vec<C64>> = b2.to_vec();
    for gj in &mut g {
        for b in b1 {
            let c = dot(b, gj);
            for i in 0..gj.len() {
                gj[i] -= c * b[i];
            }
        }
    }
    // Top eigenvalue of the small Gram matrix GᴴG.
    let mut gram = nalgebra::DMatrix::<C64>::zeros(m2, m2);
    for j in 0..m2 {
        for i in 0..m2 {
            gram[(i, j)] = dot(&g[i], &g[j]);
        }
    }
    let eig = gram.symmetric_eigenvalues();
    let top = eig.iter().fold(0.0f64, |a, &b| a.max(b));
    top.max(0.0).sqrt().min(1.0)
}

/// Aperture between two subspaces: both one-sided gaps and their maximum.
#[derive(Clone, Copy, Debug)]
pub struct ApertureReport {
    /// max of the two one-sided gaps; the distance d(S₁,S₂).
    pub value: f64,
    /// one_sided(S₁,S₂) and one_sided(S₂,S₁).
    pub one_sided: [f64; 2],
    /// True when the subspace dimensions differ (possible after drops).
    pub unequal_dims: bool,
}

/// One-sided gap: largest distance from a unit vector of S₂ to S₁.
pub fn one_sided(s1: &CauchySubspace, s2: &CauchySubspace) -> Result<f64, CauchyError> {
    if s1.metric_hash != s2.metric_hash {
        return Err(CauchyError::MetricMismatch);
    }
    Ok(subspace_gap(&s1.basis, &s2.basis))
}

/// Aperture distance between two generated subspaces over the same metric.
pub fn aperture(s1: &CauchySubspace, s2: &CauchySubspace) -> Result<ApertureReport, CauchyError> {
    let a = one_sided(s1, s2)?;
    let b = one_sided(s2, s1)?;
    Ok(ApertureReport {
        value: a.max(b),
        one_sided: [a, b],
        unequal_dims: s1.dims() != s2.dims(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fixtures, GridDomain, Spacing};
    use crate::pde::Impedance;
    use crate::potential::{AffineCoeff, PiecewiseLinearPotential};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::sync::Arc;

    fn phys(spec: &crate::geometry::DomainSpec) -> Arc<GridDomain> {
        Arc::new(GridDomain::build_physical(spec).unwrap())
    }

    fn gen_op(
        dom: &Arc<GridDomain>,
        q: &PiecewiseLinearPotential,
    ) -> DiscreteOperator {
        DiscreteOperator::assemble(dom, q, Impedance::default()).unwrap()
    }

    #[test]
    fn metric_matches_dense_eigendecomposition() {
        // 7×7 window of the half-cube fixture: analytic modes against a dense solve.
        let dom = phys(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let s = metric.modes();
        assert_eq!(s, 49);

        // Assemble the normalized surface Laplacian densely by columns.
        let mut dense = nalgebra::DMatrix::<f64>::zeros(s, s);
        for j in 0..s {
            let mut e = vec![C64::new(0.0, 0.0); s];
            e[j] = C64::new(1.0, 0.0);
            let col = metric.surface_laplacian_apply(&e);
            for i in 0..s {
                dense[(i, j)] = col[i].re;
            }
        }
        let mut oracle: Vec<f64> = dense
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top = *oracle.last().unwrap();
        for k in 0..s {
            assert!(
                (oracle[k] - metric.lambda[k]).abs() <= 1e-10 * top,
                "mode {k}: dense {} analytic {}",
                oracle[k],
                metric.lambda[k]
            );
            assert!(metric.lambda[k] >= 0.0);
        }
        // Each analytic eigenvector solves the stencil eigenproblem.
        for k in [0, 1, s / 2, s - 1] {
            let phi: Vec<C64> = metric
                .eigenfunction(k)
                .into_iter()
                .map(|v| C64::new(v, 0.0))
                .collect();
            let lap = metric.surface_laplacian_apply(&phi);
            for i in 0..s {
                assert!(
                    (lap[i] - phi[i] * metric.lambda[k]).norm() <= 1e-10 * top,
                    "mode {k} fails the stencil eigenproblem at node {i}"
                );
            }
        }
        // Orthonormal columns.
        for a in 0..s {
            let pa = metric.eigenfunction(a);
            for b in a..s {
                let pb = metric.eigenfunction(b);
                let d: f64 = (0..s).map(|i| pa[i] * pb[i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() <= 1e-12, "Ψᵀψ[{a},{b}] = {d}");
            }
        }
    }

    #[test]
    fn pair_norm_oracles() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let s = metric.modes();

        let zero = CauchyPair {
            f: vec![C64::new(0.0, 0.0); s],
            g: vec![C64::new(0.0, 0.0); s],
        };
        assert_eq!(pair_norm(&metric, &zero).unwrap(), 0.0);

        // Mass-normalized lowest eigenfunction: norm (1+λ₁)^{1/4}.
        let scale = 1.0 / metric.mass.sqrt();
        let pair = CauchyPair {
            f: metric
                .eigenfunction(0)
                .into_iter()
                .map(|v| C64::new(v * scale, 0.0))
                .collect(),
            g: vec![C64::new(0.0, 0.0); s],
        };
        let want = (1.0 + metric.lambda[0]).powf(0.25);
        let got = pair_norm(&metric, &pair).unwrap();
        assert!((got - want).abs() <= 1e-12 * want, "got {got}, want {want}");

        // Homogeneity under c = 3+4i: factor 5.
        let c = C64::new(3.0, 4.0);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let randv = |rng: &mut ChaCha12Rng| -> Vec<C64> {
            (0..s)
                .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect()
        };
        let p = CauchyPair {
            f: randv(&mut rng),
            g: randv(&mut rng),
        };
        let pc = CauchyPair {
            f: p.f.iter().map(|z| z * c).collect(),
            g: p.g.iter().map(|z| z * c).collect(),
        };
        let n1 = pair_norm(&metric, &p).unwrap();
        let n2 = pair_norm(&metric, &pc).unwrap();
        assert!((n2 - 5.0 * n1).abs() <= 1e-12 * n2, "n1 {n1} n2 {n2}");

        // Length mismatch is an error.
        let bad = CauchyPair {
            f: vec![C64::new(0.0, 0.0); s - 1],
            g: vec![C64::new(0.0, 0.0); s],
        };
        assert!(matches!(
            pair_norm(&metric, &bad),
            Err(CauchyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn weighting_maps_are_exact_inverses() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let s = metric.modes();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g: Vec<C64> = (0..s)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let round = metric.half_power(&metric.neg_half_power(&g));
        let err: f64 = (0..s).map(|i| (round[i] - g[i]).norm()).fold(0.0, f64::max);
        let scale: f64 = g.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(err <= 1e-12 * scale, "round-trip error {err}");
    }

    #[test]
    fn generation_records_the_impedance_identity() {
        // q ≡ 0, m = 1: recorded g must equal (driven datum) − i·f exactly.
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let q = PiecewiseLinearPotential::zero(2, 3.0);
        let op = gen_op(&dom, &q);
        let space = generate_cauchy_space(&op, &metric, 1).unwrap();
        assert_eq!(space.dims(), 1);
        let pair = &space.pairs[0];
        let phi = metric.eigenfunction(0);
        let i_tau = C64::new(0.0, 1.0);
        let scale: f64 = pair.g.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for k in 0..metric.modes() {
            let want = C64::new(phi[k], 0.0) - i_tau * pair.f[k];
            assert!((pair.g[k] - want).norm() <= 1e-13 * scale);
        }
    }

    #[test]
    fn generated_basis_is_orthonormal() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let q = PiecewiseLinearPotential::constant(2, -1.0, 3.0);
        let op = gen_op(&dom, &q);
        let space = generate_cauchy_space(&op, &metric, 5).unwrap();
        assert_eq!(space.dims(), 5);
        assert_eq!(space.dropped, 0);
        for a in 0..5 {
            for b in a..5 {
                let d = dot(&space.basis[a], &space.basis[b]);
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (d - C64::new(want, 0.0)).norm() <= 1e-12,
                    "Gram[{a},{b}] = {d}"
                );
            }
        }
    }

    #[test]
    fn aperture_toy_examples() {
        let e = |k: usize| -> Vec<C64> {
            let mut v = vec![C64::new(0.0, 0.0); 2];
            v[k] = C64::new(1.0, 0.0);
            v
        };
        // Identical spans.
        assert!(subspace_gap(&[e(0)], &[e(0)]) <= 1e-15);
        // Orthogonal lines.
        assert!((subspace_gap(&[e(0)], &[e(1)]) - 1.0).abs() <= 1e-15);
        // Rotated line: gap = sin θ.
        let th = 0.3f64;
        let rot = vec![C64::new(th.cos(), 0.0), C64::new(th.sin(), 0.0)];
        let got = subspace_gap(&[e(0)], &[rot.clone()]);
        assert!((got - th.sin()).abs() <= 1e-12, "gap {got}");
        // Brute-force sup–inf over sampled unit vectors of S₂ agrees to 1e−4.
        let mut brute = 0.0f64;
        for j in 0..10_000 {
            let ph = 2.0 * std::f64::consts::PI * j as f64 / 10_000.0;
            let u: Vec<C64> = rot.iter().map(|z| z * C64::new(0.0, ph).exp()).collect();
            // inf over S₁ of ‖u − w‖ is attained by the orthogonal projection.
            let c = dot(&e(0), &u);
            let mut d2 = 0.0;
            for i in 0..2 {
                d2 += (u[i] - c * e(0)[i]).norm_sqr();
            }
            brute = brute.max(d2.sqrt());
        }
        assert!((brute - got).abs() <= 1e-4, "brute {brute} vs {got}");
    }

    fn q_pair_2d() -> (PiecewiseLinearPotential, PiecewiseLinearPotential) {
        (
            PiecewiseLinearPotential::zero(2, 3.0),
            PiecewiseLinearPotential::new(
                vec![
                    AffineCoeff {
                        a: 1.0,
                        grad: [0.5, -0.5, 0.0],
                    },
                    AffineCoeff {
                        a: -1.5,
                        grad: [0.0, 0.75, 0.0],
                    },
                ],
                3.0,
            ),
        )
    }

    #[test]
    fn same_potential_gives_zero_aperture() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let (_, q) = q_pair_2d();
        let s1 = generate_cauchy_space(&gen_op(&dom, &q), &metric, 4).unwrap();
        let s2 = generate_cauchy_space(&gen_op(&dom, &q), &metric, 4).unwrap();
        let rep = aperture(&s1, &s2).unwrap();
        assert!(rep.value <= 1e-10, "aperture {}", rep.value);
        assert!(!rep.unequal_dims);
    }

    #[test]
    fn one_sided_gaps_coincide_below_one() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let (qa, qb) = q_pair_2d();
        let s1 = generate_cauchy_space(&gen_op(&dom, &qa), &metric, 6).unwrap();
        let s2 = generate_cauchy_space(&gen_op(&dom, &qb), &metric, 6).unwrap();
        let rep = aperture(&s1, &s2).unwrap();
        assert!(rep.one_sided[0] > 0.0 && rep.one_sided[0] < 1.0);
        assert!(rep.one_sided[1] > 0.0 && rep.one_sided[1] < 1.0);
        assert!(
            (rep.one_sided[0] - rep.one_sided[1]).abs() <= 1e-10,
            "gaps {:?}",
            rep.one_sided
        );
    }

    #[test]
    fn larger_generation_contains_smaller() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let (_, q) = q_pair_2d();
        let op = gen_op(&dom, &q);
        let small = generate_cauchy_space(&op, &metric, 3).unwrap();
        let large = generate_cauchy_space(&op, &metric, 6).unwrap();
        let gap = one_sided(&large, &small).unwrap();
        assert!(gap <= 1e-10, "containment gap {gap}");
    }

    #[test]
    fn degenerate_ordering_leaves_the_subspace_unchanged() {
        // Square window → exact degeneracy between wavenumbers (1,2) and (2,1).
        let dom = phys(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let metric_a = BoundaryMetric::from_domain(&dom).unwrap();
        assert_eq!(metric_a.lambda[1], metric_a.lambda[2]);
        assert_eq!(metric_a.wavenumbers[1], [1, 2]);
        assert_eq!(metric_a.wavenumbers[2], [2, 1]);
        let mut metric_b = metric_a.clone();
        metric_b.swap_modes(1, 2);

        let q = PiecewiseLinearPotential::constant(2, 1.0, 3.0);
        let op = gen_op(&dom, &q);
        // m = 3 covers the whole degenerate cluster.
        let sa = generate_cauchy_space(&op, &metric_a, 3).unwrap();
        let sb = generate_cauchy_space(&op, &metric_b, 3).unwrap();
        // The two coordinate maps agree as operators (equal scaling on the
        // degenerate eigenspace), so the bases are directly comparable.
        let gap = subspace_gap(&sa.basis, &sb.basis).max(subspace_gap(&sb.basis, &sa.basis));
        assert!(gap <= 1e-10, "ordering-dependent subspace: gap {gap}");
    }

    #[test]
    fn aperture_stabilizes_in_generation_count() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.03125)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let (qa, qb) = q_pair_2d();
        let op_a = gen_op(&dom, &qa);
        let op_b = gen_op(&dom, &qb);
        let m = 8;
        let d_m = aperture(
            &generate_cauchy_space(&op_a, &metric, m).unwrap(),
            &generate_cauchy_space(&op_b, &metric, m).unwrap(),
        )
        .unwrap()
        .value;
        let d_2m = aperture(
            &generate_cauchy_space(&op_a, &metric, 2 * m).unwrap(),
            &generate_cauchy_space(&op_b, &metric, 2 * m).unwrap(),
        )
        .unwrap()
        .value;
        let rel = (d_m - d_2m).abs() / d_2m.max(1e-300);
        assert!(rel <= 0.05, "d({m}) = {d_m}, d({}) = {d_2m}: {rel}", 2 * m);
    }

    #[test]
    fn unequal_dimensions_are_flagged() {
        let hash = "same".to_string();
        let e = |k: usize| -> Vec<C64> {
            let mut v = vec![C64::new(0.0, 0.0); 3];
            v[k] = C64::new(1.0, 0.0);
            v
        };
        let mk = |basis: Vec<Vec<C64>>| CauchySubspace {
            m: basis.len(),
            dropped: 0,
            pairs: Vec::new(),
            metric_hash: hash.clone(),
            basis,
        };
        let s1 = mk(vec![e(0)]);
        let s2 = mk(vec![e(0), e(1)]);
        let rep = aperture(&s1, &s2).unwrap();
        assert!(rep.unequal_dims);
        assert!((rep.value - 1.0).abs() <= 1e-12);
        // Mismatched metrics refuse to compare.
        let s3 = CauchySubspace {
            metric_hash: "other".into(),
            ..s2.clone()
        };
        assert!(matches!(
            aperture(&s1, &s3),
            Err(CauchyError::MetricMismatch)
        ));
    }

    #[test]
    fn too_many_modes_is_an_error() {
        let dom = phys(&fixtures::two_half_square(Spacing::Value(0.125)));
        let metric = BoundaryMetric::from_domain(&dom).unwrap();
        let q = PiecewiseLinearPotential::zero(2, 3.0);
        let op = gen_op(&dom, &q);
        assert!(matches!(
            generate_cauchy_space(&op, &metric, metric.modes() + 1),
            Err(CauchyError::TooManyModes { .. })
        ));
    }
}
