//! Discrete Schrödinger operators Δ + q on grid domains with mixed boundary
//! conditions, and the direct solver used by every experiment in the crate.
//!
//! Three operator kinds are assembled from the same stencil machinery:
//!
//! * the mixed problem on the augmented domain — Dirichlet on ∂Ω₀∖Σ₀, impedance
//!   ∂νv + iτv = 0 on the control face Σ₀ (this is the Green-function operator);
//! * the generation problem on the physical domain — Dirichlet on ∂Ω∖Σ, impedance
//!   data ∂νu + iτu = g on the window Σ (used to generate Cauchy pairs);
//! * the pure Dirichlet problem (diagnostics only: it is the problem that may be
//!   singular when q hits an eigenvalue, the failure mode the impedance condition
//!   is there to avoid).
//!
//! The Laplacian is the second-order centered (2·dim+1)-point stencil with the
//! negative-definite sign convention. The impedance condition is folded in by
//! ghost-node elimination, and impedance rows are weighted by their half cell,
//! which makes the assembled matrix exactly complex symmetric. Quadrature weights
//! h^dim (interior) and h^dim/2 (impedance face) are the matching inner product:
//! with them, the energy identities
//!
//!   Im ⟨f, v̄⟩ = −τ·h^{dim−1}·Σ_face |v|²   and
//!   Re ⟨f, v̄⟩ = −Σ|∇v|² + Σ q|v|²
//!
//! hold exactly (to solver tolerance), not merely up to discretization error.

pub mod band;

use crate::geometry::{GridDomain, NodeClass};
use crate::potential::{PiecewiseLinearPotential, PotentialError};
use crate::C64;
use band::{norm2, BandError, BandFactor, BandMatrix};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

/// Boundary-condition descriptor: the impedance coefficient iτ. The baseline is
/// τ = 1; other values are experimental.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Impedance {
    /// Coefficient τ in ∂νv + iτv.
    pub tau: f64,
}

impl Default for Impedance {
    fn default() -> Self {
        Impedance { tau: 1.0 }
    }
}

/// Which boundary value problem an operator discretizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcKind {
    /// Augmented domain: Dirichlet everywhere except the impedance control face.
    MixedAugmented,
    /// Physical domain: Dirichlet except the window, which carries impedance data.
    GenerationWindow,
    /// Physical domain, Dirichlet everywhere (diagnostics only).
    DirichletOnly,
}

/// Errors from assembly and solves.
#[derive(Debug, Error)]
pub enum PdeError {
    /// Ill-posed assembly request.
    #[error("assembly: {0}")]
    Assemble(String),
    /// Factorization failure.
    #[error(transparent)]
    Band(#[from] BandError),
    /// The refined solution still has a large algebraic residual.
    #[error("solve residual {rel:.3e} exceeds 1e-10")]
    Residual {
        /// Relative residual after refinement.
        rel: f64,
    },
    /// Potential evaluation failed.
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// A complex-valued grid field over the unknowns of an operator.
#[derive(Clone, Debug)]
pub struct Field {
    /// Owning domain.
    pub dom: Arc<GridDomain>,
    /// One value per operator unknown, in unknown order.
    pub values: Vec<C64>,
}

/// Assembled and factorizable discrete operator.
pub struct DiscreteOperator {
    /// Domain the operator lives on.
    pub dom: Arc<GridDomain>,
    /// Grid spacing (copied from the domain).
    pub h: f64,
    /// Space dimension (copied from the domain).
    pub dim: usize,
    /// Impedance coefficient τ.
    pub tau: f64,
    /// Problem kind.
    pub kind: BcKind,
    /// Lattice ids of the unknowns, in lattice order.
    unknowns: Vec<u32>,
    rank: Vec<u32>,
    /// Lattice ids of impedance rows (empty for the Dirichlet problem).
    robin: Vec<u32>,
    /// Row weights: 1 for interior rows, 1/2 for impedance rows.
    w: Vec<f64>,
    qvals: Vec<f64>,
    band: BandMatrix,
    factor: OnceLock<Result<BandFactor, String>>,
}

const RANK_NONE: u32 = u32::MAX;

impl DiscreteOperator {
    /// Assembles the operator with impedance boundary handling chosen by the domain:
    /// the mixed problem on an augmented domain, the generation problem otherwise.
    pub fn assemble(
        dom: &Arc<GridDomain>,
        q: &PiecewiseLinearPotential,
        bc: Impedance,
    ) -> Result<Self, PdeError> {
        let kind = if dom.augmented {
            BcKind::MixedAugmented
        } else {
            BcKind::GenerationWindow
        };
        Self::assemble_kind(dom, q, bc, kind)
    }

    /// Assembles the pure-Dirichlet operator on the physical domain (diagnostics).
    pub fn assemble_dirichlet(
        dom: &Arc<GridDomain>,
        q: &PiecewiseLinearPotential,
    ) -> Result<Self, PdeError> {
        if dom.augmented {
            return Err(PdeError::Assemble(
                "the Dirichlet diagnostic problem lives on the physical domain".into(),
            ));
        }
        Self::assemble_kind(dom, q, Impedance { tau: 0.0 }, BcKind::DirichletOnly)
    }

    fn assemble_kind(
        dom: &Arc<GridDomain>,
        q: &PiecewiseLinearPotential,
        bc: Impedance,
        kind: BcKind,
    ) -> Result<Self, PdeError> {
        let robin_class = match kind {
            BcKind::MixedAugmented => Some(NodeClass::Impedance),
            BcKind::GenerationWindow => Some(NodeClass::Accessible),
            BcKind::DirichletOnly => None,
        };
        if kind != BcKind::DirichletOnly && !(bc.tau > 0.0) {
            return Err(PdeError::Assemble(format!(
                "impedance coefficient must be positive, got {}",
                bc.tau
            )));
        }

        // Unknowns: interior nodes plus the impedance rows of this problem kind.
        let mut unknowns = Vec::new();
        let mut rank = vec![RANK_NONE; dom.n_nodes()];
        for &id in &dom.active {
            let c = dom.class[id as usize];
            let keep = c == NodeClass::Interior || robin_class == Some(c);
            if keep {
                rank[id as usize] = unknowns.len() as u32;
                unknowns.push(id);
            }
        }
        let n = unknowns.len();
        if n == 0 {
            return Err(PdeError::Assemble("no unknowns".into()));
        }

        let triplets = assemble_triplets(dom, q, bc.tau, robin_class, &unknowns, &rank)?;

        let mut kl = 0usize;
        for &(i, j, _) in &triplets {
            kl = kl.max((i as i64 - j as i64).unsigned_abs() as usize);
        }
        let mut band = BandMatrix::zeros(n, kl);
        for &(i, j, v) in &triplets {
            if i >= j {
                band.add(i as usize, j as usize, v)?;
            }
        }

        let mut robin = Vec::new();
        let mut w = vec![1.0f64; n];
        let mut qvals = vec![0.0f64; n];
        for (r, &id) in unknowns.iter().enumerate() {
            qvals[r] = q.eval(dom, id as usize)?;
            if robin_class == Some(dom.class[id as usize]) {
                robin.push(id);
                w[r] = 0.5;
            }
        }

        Ok(DiscreteOperator {
            dom: dom.clone(),
            h: dom.h,
            dim: dom.dim,
            tau: bc.tau,
            kind,
            unknowns,
            rank,
            robin,
            w,
            qvals,
            band,
            factor: OnceLock::new(),
        })
    }

    /// Lattice ids of the unknowns, in unknown (lattice) order.
    pub fn unknowns(&self) -> &[u32] {
        &self.unknowns
    }

    /// Unknown rank of a lattice node, if it is an unknown.
    pub fn rank_of(&self, node: usize) -> Option<usize> {
        let r = self.rank[node];
        (r != RANK_NONE).then_some(r as usize)
    }

    /// Lattice ids of the impedance rows, in lattice order.
    pub fn robin_nodes(&self) -> &[u32] {
        &self.robin
    }

    /// Row weights (1 interior, 1/2 impedance face), in unknown order.
    pub fn row_weights(&self) -> &[f64] {
        &self.w
    }

    /// Quadrature weights h^dim·w for the discrete L² inner product.
    pub fn quad_weights(&self) -> Vec<f64> {
        let vol = self.h.powi(self.dim as i32);
        self.w.iter().map(|w| w * vol).collect()
    }

    /// Potential values at the unknowns.
    pub fn q_values(&self) -> &[f64] {
        &self.qvals
    }

    /// Assembled matrix entry by unknown ranks (for tests and diagnostics).
    pub fn matrix_entry(&self, i: usize, j: usize) -> C64 {
        self.band.get(i, j)
    }

    /// Upper bound for the matrix norm (largest absolute row sum).
    pub fn norm_estimate(&self) -> f64 {
        self.band.norm_inf()
    }

    /// Applies the assembled (row-weighted) matrix.
    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        self.band.matvec(x)
    }

    fn factorized(&self) -> Result<&BandFactor, PdeError> {
        let r = self
            .factor
            .get_or_init(|| self.band.factor().map_err(|e| e.to_string()));
        match r {
            Ok(f) => Ok(f),
            Err(msg) => Err(PdeError::Assemble(format!("factorization failed: {msg}"))),
        }
    }

    fn solve_weighted_rhs(&self, rhs: Vec<C64>) -> Result<Vec<C64>, PdeError> {
        let nrm = norm2(&rhs);
        if nrm == 0.0 {
            // The homogeneous problem has only the zero solution.
            return Ok(rhs);
        }
        let f = self.factorized()?;
        let mut x = f.solve(&rhs);
        let mut rel = f64::INFINITY;
        for _ in 0..4 {
            let ax = self.band.matvec(&x);
            let r: Vec<C64> = (0..rhs.len()).map(|i| rhs[i] - ax[i]).collect();
            rel = norm2(&r) / nrm;
            if rel <= 1e-12 {
                break;
            }
            let dx = f.solve(&r);
            for i in 0..x.len() {
                x[i] += dx[i];
            }
        }
        if !(rel <= 1e-10) {
            return Err(PdeError::Residual { rel });
        }
        Ok(x)
    }

    /// Solves Δv + qv = f with homogeneous boundary data; `f` is given at the
    /// unknowns in unknown order.
    pub fn solve(&self, f: &[C64]) -> Result<Vec<C64>, PdeError> {
        assert_eq!(f.len(), self.unknowns.len());
        let rhs: Vec<C64> = (0..f.len()).map(|i| f[i] * self.w[i]).collect();
        self.solve_weighted_rhs(rhs)
    }

    /// Solves with volumetric source `f` (may be `None` for zero) and impedance data
    /// `g` given at the impedance rows in their lattice order: ∂νv + iτv = g.
    pub fn solve_with_window_data(
        &self,
        f: Option<&[C64]>,
        g: &[C64],
    ) -> Result<Vec<C64>, PdeError> {
        assert_eq!(g.len(), self.robin.len());
        let n = self.unknowns.len();
        let mut rhs = vec![C64::new(0.0, 0.0); n];
        if let Some(f) = f {
            assert_eq!(f.len(), n);
            for i in 0..n {
                rhs[i] = f[i] * self.w[i];
            }
        }
        for (b, &id) in self.robin.iter().enumerate() {
            let r = self.rank[id as usize] as usize;
            rhs[r] -= g[b] / self.h;
        }
        self.solve_weighted_rhs(rhs)
    }

    /// Solves many right-hand sides against the shared factorization, in parallel
    /// when the `parallel` feature is on; results keep the input order either way.
    pub fn solve_many(&self, fs: Vec<Vec<C64>>) -> Result<Vec<Vec<C64>>, PdeError> {
        self.factorized()?;
        let results = crate::par::map_indexed(fs, |f| self.solve(&f));
        results.into_iter().collect()
    }

    /// Solves the generation problem for many impedance data against the shared
    /// factorization, in parallel when the `parallel` feature is on; results keep
    /// the input order either way.
    pub fn solve_windows_many(&self, gs: Vec<Vec<C64>>) -> Result<Vec<Vec<C64>>, PdeError> {
        self.factorized()?;
        let results = crate::par::map_indexed(gs, |g| self.solve_with_window_data(None, &g));
        results.into_iter().collect()
    }

    /// Values of a solution at the impedance rows, in their lattice order.
    pub fn window_trace(&self, v: &[C64]) -> Vec<C64> {
        self.robin
            .iter()
            .map(|&id| v[self.rank[id as usize] as usize])
            .collect()
    }

    /// Recorded normal derivative on the window: ∂νv = g − iτ·v, exact for the
    /// one-sided discretization folded into the impedance rows.
    pub fn normal_trace(&self, v: &[C64], g: &[C64]) -> Vec<C64> {
        assert_eq!(g.len(), self.robin.len());
        let itau = C64::new(0.0, self.tau);
        self.robin
            .iter()
            .enumerate()
            .map(|(b, &id)| g[b] - itau * v[self.rank[id as usize] as usize])
            .collect()
    }

    /// Discrete gradient energy Σ|∇v|² consistent with the stencil: edge sums with
    /// the face-edge weights of the assembly, including virtual edges to eliminated
    /// (zero) Dirichlet nodes. Satisfies Re⟨f,v̄⟩ = −Σ|∇v|² + Σq|v|² exactly.
    pub fn gradient_energy(&self, v: &[C64]) -> f64 {
        let vol = self.h.powi(self.dim as i32);
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut e = 0.0f64;
        for (r, &id) in self.unknowns.iter().enumerate() {
            let p = self.dom.node_step(id as usize);
            let wr = self.w[r];
            for axis in 0..self.dim {
                for dir in [-1i64, 1] {
                    let mut qn = p;
                    qn[axis] += dir;
                    let Some(nid) = self.dom.step_id(&qn) else { continue };
                    if self.is_ghost_dir(id, axis, dir) {
                        continue;
                    }
                    match self.rank[nid] {
                        RANK_NONE => {
                            // Virtual edge to an eliminated Dirichlet node (value 0),
                            // counted once with this row's weight.
                            if self.dom.class[nid] != NodeClass::Exterior {
                                e += wr * v[r].norm_sqr() * inv_h2;
                            }
                        }
                        nr => {
                            // Real edge, visited from both ends: halve. Conductance
                            // matches the assembled coupling: ½ for face-tangential
                            // edges (both rows impedance), 1 otherwise — an
                            // interior–impedance edge is always normal to the face.
                            let c = if self.w[nr as usize] == 0.5 && wr == 0.5 {
                                0.5
                            } else {
                                1.0
                            };
                            e += 0.5 * c * (v[r] - v[nr as usize]).norm_sqr() * inv_h2;
                        }
                    }
                }
            }
        }
        e * vol
    }

    fn plane(&self) -> crate::geometry::PlaneRef {
        match self.kind {
            BcKind::MixedAugmented => self.dom.control_plane.expect("augmented domain"),
            _ => self.dom.window_plane,
        }
    }

    fn is_ghost_dir(&self, id: u32, axis: usize, dir: i64) -> bool {
        if self.w[self.rank[id as usize] as usize] == 1.0 {
            return false;
        }
        let plane = self.plane();
        axis == plane.axis && dir == plane.outward as i64
    }

    /// Power-iteration estimate of the smallest singular value of the assembled
    /// matrix. Deterministic (fixed iteration count, fixed seed).
    pub fn smallest_singular_value_estimate(&self, iters: usize) -> Result<f64, PdeError> {
        use rand::prelude::*;
        let f = self.factorized()?;
        let n = self.unknowns.len();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x5eed);
        let mut x: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let nrm = norm2(&x);
        x.iter_mut().for_each(|z| *z /= nrm);
        let mut lambda = 0.0f64;
        for _ in 0..iters.max(1) {
            // y = A⁻¹ A⁻ᴴ x, using Aᴴ = conj(A): A⁻ᴴ x = conj(A⁻¹ conj(x)).
            let mut t: Vec<C64> = x.iter().map(|z| z.conj()).collect();
            f.solve_in_place(&mut t);
            let mut y: Vec<C64> = t.iter().map(|z| z.conj()).collect();
            f.solve_in_place(&mut y);
            // Rayleigh quotient of the PSD map: λ = ⟨x, y⟩ (real up to roundoff).
            lambda = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a.conj() * b).re)
                .sum::<f64>();
            let nrm = norm2(&y);
            if nrm == 0.0 {
                break;
            }
            y.iter_mut().for_each(|z| *z /= nrm);
            x = y;
        }
        Ok(1.0 / lambda.max(f64::MIN_POSITIVE).sqrt())
    }

    /// Flags a numerically singular operator: σ_min below 1e−8 times the norm bound.
    pub fn near_singular(&self, iters: usize) -> Result<bool, PdeError> {
        let s = self.smallest_singular_value_estimate(iters)?;
        Ok(s < 1e-8 * self.norm_estimate())
    }
}

/// Builds the full (both-triangles) coefficient list of the weighted matrix.
fn assemble_triplets(
    dom: &GridDomain,
    q: &PiecewiseLinearPotential,
    tau: f64,
    robin_class: Option<NodeClass>,
    unknowns: &[u32],
    rank: &[u32],
) -> Result<Vec<(u32, u32, C64)>, PdeError> {
    let h = dom.h;
    let dim = dom.dim;
    let inv_h2 = 1.0 / (h * h);
    let mut t: Vec<(u32, u32, C64)> = Vec::with_capacity(unknowns.len() * (2 * dim + 1));

    let plane = match robin_class {
        Some(NodeClass::Impedance) => Some(dom.control_plane.expect("augmented domain")),
        Some(NodeClass::Accessible) => Some(dom.window_plane),
        _ => None,
    };

    for (r, &id) in unknowns.iter().enumerate() {
        let idu = id as usize;
        let cls = dom.class[idu];
        let is_robin = robin_class == Some(cls);
        let w = if is_robin { 0.5 } else { 1.0 };
        let p = dom.node_step(idu);
        let qv = q.eval(dom, idu)?;

        let mut diag = C64::new(w * (qv - 2.0 * dim as f64 * inv_h2), 0.0);
        if is_robin {
            diag += C64::new(0.0, -w * 2.0 * tau / h);
        }
        t.push((r as u32, r as u32, diag));

        for axis in 0..dim {
            for dir in [-1i64, 1] {
                if is_robin {
                    let pl = plane.expect("robin row has a plane");
                    if axis == pl.axis && dir == pl.outward as i64 {
                        continue; // ghost direction, folded into diagonal and inward term
                    }
                }
                let mut qn = p;
                qn[axis] += dir;
                let Some(nid) = dom.step_id(&qn) else {
                    if is_robin {
                        continue;
                    }
                    return Err(PdeError::Assemble(format!(
                        "interior node {p:?} falls off the lattice"
                    )));
                };
                let nr = rank[nid];
                if nr == RANK_NONE {
                    // Dirichlet neighbor: eliminated, homogeneous.
                    continue;
                }
                // Inward coupling of a robin row is doubled by the ghost fold.
                let double = is_robin && {
                    let pl = plane.expect("robin row has a plane");
                    axis == pl.axis && dir == -(pl.outward as i64)
                };
                let c = if double { 2.0 } else { 1.0 };
                t.push((r as u32, nr, C64::new(w * c * inv_h2, 0.0)));
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
pub(crate) fn assemble_triplets_for_tests(
    dom: &Arc<GridDomain>,
    q: &PiecewiseLinearPotential,
    bc: Impedance,
) -> Vec<(u32, u32, C64)> {
    let robin_class = if dom.augmented {
        Some(NodeClass::Impedance)
    } else {
        Some(NodeClass::Accessible)
    };
    let mut unknowns = Vec::new();
    let mut rank = vec![RANK_NONE; dom.n_nodes()];
    for &id in &dom.active {
        let c = dom.class[id as usize];
        if c == NodeClass::Interior || robin_class == Some(c) {
            rank[id as usize] = unknowns.len() as u32;
            unknowns.push(id);
        }
    }
    assemble_triplets(dom, q, bc.tau, robin_class, &unknowns, &rank).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fixtures, GridDomain, Spacing};
    use crate::potential::{AffineCoeff, PiecewiseLinearPotential};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::collections::HashMap;

    fn aug(spec: &crate::geometry::DomainSpec) -> Arc<GridDomain> {
        Arc::new(GridDomain::build_augmented(spec).unwrap())
    }
    fn phys(spec: &crate::geometry::DomainSpec) -> Arc<GridDomain> {
        Arc::new(GridDomain::build_physical(spec).unwrap())
    }

    fn q_one(dom: &GridDomain) -> PiecewiseLinearPotential {
        PiecewiseLinearPotential::constant(dom.n_subdomains(), 1.0, 3.0)
    }

    #[test]
    fn one_dimensional_analogue_interior_row() {
        // Interior stencil on a coarse cube with h = 1, q = 0: diagonal −2·dim,
        // neighbors +1 — the (1, −2, 1) pattern per axis.
        let spec = crate::geometry::DomainSpec {
            dim: 3,
            omega: vec![[0.0, 4.0], [0.0, 4.0], [0.0, 4.0]],
            subdomains: vec![vec![[0.0, 4.0], [0.0, 4.0], [0.0, 4.0]]],
            window: crate::geometry::WindowSpec {
                axis: 2,
                side: crate::geometry::FaceSide::Lo,
                rect: None,
            },
            r0: 3.0,
            h: Spacing::Value(1.0),
            slab_thickness: Some(2.0),
        };
        let dom = phys(&spec);
        let q = PiecewiseLinearPotential::zero(1, 3.0);
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let center = dom.step_id(&[2, 2, 2]).unwrap();
        let r = op.rank_of(center).unwrap();
        assert_eq!(op.matrix_entry(r, r), C64::new(-6.0, 0.0));
        let nb = dom.step_id(&[3, 2, 2]).unwrap();
        let rn = op.rank_of(nb).unwrap();
        assert_eq!(op.matrix_entry(r, rn), C64::new(1.0, 0.0));
    }

    #[test]
    fn laplacian_of_constant_field_vanishes_in_deep_interior() {
        let dom = phys(&fixtures::single_cube(Spacing::Value(0.25)));
        let q = PiecewiseLinearPotential::zero(1, 3.0);
        let op = DiscreteOperator::assemble_dirichlet(&dom, &q).unwrap();
        let n = op.unknowns().len();
        let ones = vec![C64::new(1.0, 0.0); n];
        let y = op.matvec(&ones);
        let inv_h2 = 16.0;
        for (r, &id) in op.unknowns().iter().enumerate() {
            let p = dom.node_step(id as usize);
            // Count lattice neighbors that are Dirichlet boundary nodes.
            let mut dropped = 0;
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let mut qn = p;
                    qn[axis] += dir;
                    let nid = dom.step_id(&qn).unwrap();
                    if op.rank_of(nid).is_none() {
                        dropped += 1;
                    }
                }
            }
            let expect = -(dropped as f64) * inv_h2;
            assert!(
                (y[r] - C64::new(expect, 0.0)).norm() < 1e-12,
                "row {p:?}: got {:?}, want {expect}",
                y[r]
            );
        }
    }

    #[test]
    fn matrix_is_exactly_complex_symmetric() {
        for dom in [
            aug(&fixtures::two_half_cube(Spacing::Value(0.25))),
            phys(&fixtures::two_half_cube(Spacing::Value(0.25))),
        ] {
            let q = q_one(&dom);
            let q = if dom.augmented {
                q.extend_to_omega0(&dom).unwrap()
            } else {
                q
            };
            let trip = assemble_triplets_for_tests(&dom, &q, Impedance::default());
            let mut map: HashMap<(u32, u32), C64> = HashMap::new();
            for (i, j, v) in trip {
                *map.entry((i, j)).or_insert(C64::new(0.0, 0.0)) += v;
            }
            for (&(i, j), &v) in &map {
                let vt = map.get(&(j, i)).copied().unwrap_or(C64::new(0.0, 0.0));
                assert_eq!(v, vt, "entry ({i},{j}) vs transpose");
            }
            // Not Hermitian: impedance diagonals have nonzero imaginary part.
            let has_complex = map.values().any(|v| v.im != 0.0);
            assert!(has_complex);
        }
    }

    #[test]
    fn real_part_negative_semidefinite_with_zero_potential() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let q = PiecewiseLinearPotential::zero(2, 3.0)
            .extend_to_omega0(&dom)
            .unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let n = op.unknowns().len();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..10 {
            let v: Vec<C64> = (0..n)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let av = op.matvec(&v);
            let quad: C64 = (0..n).map(|i| v[i].conj() * av[i]).sum();
            assert!(quad.re <= 1e-12, "Re quadratic form {quad:?}");
        }
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let q = q_one(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let f = vec![C64::new(0.0, 0.0); op.unknowns().len()];
        let v = op.solve(&f).unwrap();
        assert!(v.iter().all(|z| z.norm_sqr() == 0.0));
    }

    /// Random real interior-supported source for identity tests.
    fn random_interior_source(op: &DiscreteOperator, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        op.unknowns()
            .iter()
            .enumerate()
            .map(|(r, _)| {
                if op.row_weights()[r] == 1.0 {
                    C64::new(rng.random_range(-1.0..1.0), 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect()
    }

    #[test]
    fn energy_identities_hold_to_solver_tolerance() {
        let dom = aug(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let q = q_one(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let f = random_interior_source(&op, 17);
        let v = op.solve(&f).unwrap();
        let wq = op.quad_weights();
        let inner: C64 = (0..f.len())
            .map(|i| C64::new(wq[i], 0.0) * f[i] * v[i].conj())
            .sum();
        // Im ⟨f, v̄⟩ = −τ h^{dim−1} Σ_face |v|².
        let face: f64 = op
            .robin_nodes()
            .iter()
            .map(|&id| v[op.rank_of(id as usize).unwrap()].norm_sqr())
            .sum();
        let rhs = -op.tau * op.h.powi(op.dim as i32 - 1) * face;
        assert!(
            (inner.im - rhs).abs() <= 1e-9 * rhs.abs().max(1e-12),
            "imaginary identity: {} vs {rhs}",
            inner.im
        );
        // Re ⟨f, v̄⟩ = −Σ|∇v|² + Σ q|v|².
        let grad = op.gradient_energy(&v);
        let pot: f64 = (0..f.len())
            .map(|i| wq[i] * op.q_values()[i] * v[i].norm_sqr())
            .sum();
        let lhs = inner.re;
        let rhs = -grad + pot;
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1e-12),
            "real identity: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn solve_map_is_complex_symmetric() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let q = q_one(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let f1 = random_interior_source(&op, 100);
        let f2 = random_interior_source(&op, 101);
        let v1 = op.solve(&f1).unwrap();
        let v2 = op.solve(&f2).unwrap();
        let wq = op.quad_weights();
        // Unconjugated pairing with the quadrature weights.
        let a: C64 = (0..f1.len()).map(|i| C64::new(wq[i], 0.0) * f1[i] * v2[i]).sum();
        let b: C64 = (0..f1.len()).map(|i| C64::new(wq[i], 0.0) * f2[i] * v1[i]).sum();
        assert!((a - b).norm() <= 1e-10 * a.norm().max(1e-12));
    }

    #[test]
    fn impulse_response_decays_inward() {
        let dom = phys(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let q = PiecewiseLinearPotential::zero(2, 3.0);
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        // Impulse at the window node below the center column.
        let robins = op.robin_nodes().to_vec();
        let target = dom.step_id(&[4, 4, 0]).unwrap() as u32;
        let g: Vec<C64> = robins
            .iter()
            .map(|&id| {
                if id == target {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect();
        let u = op.solve_with_window_data(None, &g).unwrap();
        let mut prev = f64::INFINITY;
        for z in 0..8 {
            let id = dom.step_id(&[4, 4, z]).unwrap();
            let m = u[op.rank_of(id).unwrap()].norm();
            assert!(m < prev, "z={z}: {m} !< {prev}");
            prev = m;
        }
    }

    #[test]
    fn generation_reciprocity() {
        let dom = phys(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let q = PiecewiseLinearPotential::new(
            vec![
                AffineCoeff {
                    a: 0.5,
                    grad: [0.25, 0.0, -0.5],
                },
                AffineCoeff {
                    a: -1.0,
                    grad: [0.0, 0.5, 0.0],
                },
            ],
            3.0,
        );
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let robins = op.robin_nodes().to_vec();
        let a = 3usize; // two impulse locations on the window
        let b = 11usize;
        let mut ga = vec![C64::new(0.0, 0.0); robins.len()];
        ga[a] = C64::new(1.0, 0.0);
        let mut gb = vec![C64::new(0.0, 0.0); robins.len()];
        gb[b] = C64::new(1.0, 0.0);
        let ua = op.solve_with_window_data(None, &ga).unwrap();
        let ub = op.solve_with_window_data(None, &gb).unwrap();
        let ta = op.window_trace(&ua);
        let tb = op.window_trace(&ub);
        let pa: C64 = (0..robins.len()).map(|i| ga[i] * tb[i]).sum();
        let pb: C64 = (0..robins.len()).map(|i| gb[i] * ta[i]).sum();
        assert!((pa - pb).norm() <= 1e-10 * pa.norm().max(1e-12));
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        // u = sin(πx)·(1 + y/2 + z/4), q ≡ 1 on the augmented domain; Dirichlet
        // values lifted into the right side, impedance data supplied analytically.
        let exact = |x: [f64; 3]| (std::f64::consts::PI * x[0]).sin() * (1.0 + x[1] / 2.0 + x[2] / 4.0);
        let mut errs = Vec::new();
        for h in [0.125, 0.0625] {
            let dom = aug(&fixtures::two_half_cube(Spacing::Value(h)));
            let q = q_one(&dom).extend_to_omega0(&dom).unwrap();
            let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
            let pi2 = std::f64::consts::PI * std::f64::consts::PI;
            // Weighted right side: w·f with f = Δu + u = (1 − π²)·u.
            let mut rhs: Vec<C64> = op
                .unknowns()
                .iter()
                .enumerate()
                .map(|(r, &id)| {
                    C64::new(
                        op.row_weights()[r] * (1.0 - pi2) * exact(dom.coords(id as usize)),
                        0.0,
                    )
                })
                .collect();
            // Dirichlet lift: every eliminated neighbor had coupling w/h² in the
            // assembled row; move coupling·u_exact to the right side.
            let inv_h2 = 1.0 / (h * h);
            for (r, &id) in op.unknowns().iter().enumerate() {
                let p = dom.node_step(id as usize);
                let w = op.row_weights()[r];
                for axis in 0..3 {
                    for dir in [-1i64, 1] {
                        let mut qn = p;
                        qn[axis] += dir;
                        let Some(nid) = dom.step_id(&qn) else { continue };
                        if dom.class[nid] == NodeClass::Dirichlet {
                            rhs[r] -= C64::new(w * inv_h2 * exact(dom.coords(nid)), 0.0);
                        }
                    }
                }
            }
            // Impedance data g = ∂νu + i·u on the control face (ν = −z).
            let dz = |x: [f64; 3]| (std::f64::consts::PI * x[0]).sin() * 0.25;
            for &id in op.robin_nodes().to_vec().iter() {
                let x = dom.coords(id as usize);
                let g = C64::new(-dz(x), 0.0) + C64::new(0.0, 1.0) * exact(x);
                let r = op.rank_of(id as usize).unwrap();
                rhs[r] -= g / h;
            }
            let v = op.solve_weighted_rhs(rhs).unwrap();
            let mut e: f64 = 0.0;
            for (r, &id) in op.unknowns().iter().enumerate() {
                e = e.max((v[r] - C64::new(exact(dom.coords(id as usize)), 0.0)).norm());
            }
            errs.push(e);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(
            (1.7..=2.3).contains(&order),
            "observed order {order} from errors {errs:?}"
        );
    }

    #[test]
    fn impedance_keeps_operator_invertible_at_dirichlet_eigenvalue() {
        // q = the first discrete Dirichlet eigenvalue of the unit square: the pure
        // Dirichlet operator is exactly singular, the window operator is not.
        let h = 0.0625;
        let spec = fixtures::two_half_square(Spacing::Value(h));
        let dom = phys(&spec);
        let lam = 2.0 * (4.0 / (h * h)) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        let q = PiecewiseLinearPotential::constant(2, lam, lam + 1.0);
        let dir = DiscreteOperator::assemble_dirichlet(&dom, &q).unwrap();
        let win = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let s_dir = dir.smallest_singular_value_estimate(40).unwrap();
        let s_win = win.smallest_singular_value_estimate(40).unwrap();
        assert!(dir.near_singular(40).unwrap(), "σ_dir = {s_dir}");
        assert!(!win.near_singular(40).unwrap(), "σ_win = {s_win}");
        assert!(s_win > 1e3 * s_dir, "{s_win} vs {s_dir}");
    }

    #[test]
    fn solve_many_matches_sequential_solves() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let q = q_one(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let fs: Vec<Vec<C64>> = (0..5).map(|s| random_interior_source(&op, 200 + s)).collect();
        let batch = op.solve_many(fs.clone()).unwrap();
        for (k, f) in fs.iter().enumerate() {
            let v = op.solve(f).unwrap();
            assert_eq!(batch[k], v, "batched solve {k} must be bitwise identical");
        }
    }
}
