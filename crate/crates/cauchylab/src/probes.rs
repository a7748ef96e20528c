//! Singular-solution probes and integral-identity checks.
//!
//! The objects here all live on a chain of subdomains marching inward from the
//! accessible window. At depth k the union of the exterior slab and the first k
//! subdomains is the resolved region W_k; its complement U_k is unresolved. The
//! probe kernel
//!
//!   S(y, z) = Σ_{x ∈ U_k} (q̃₁ − q̃₂)(x) · ∂ᵅ_y G₁(x, y) · ∂ᵝ_z G₂(x, z) · h^dim
//!
//! pairs derivative Green columns of two potentials against their difference,
//! restricted to the unresolved region. Probes are evaluated at nodes of W_k;
//! derivatives always come from exact discrete source-derivative columns, never
//! from finite differences of S itself.
//!
//! The module also checks the exact discrete Green identity relating the volume
//! pairing of two impedance-generated solutions to their boundary data, the
//! resulting bilinear-form inequality against the subspace aperture, runs
//! three-spheres growth experiments on solution fields, and fits the r^{-2} and
//! r^{-4} derivative-to-value ratios that drive the propagation-of-smallness
//! step count.

use std::sync::Arc;

use thiserror::Error;

use crate::cauchy::{generate_cauchy_space, pair_norm, BoundaryMetric, CauchyError, CauchyPair};
use crate::geometry::{Chain, GeometryError, GridDomain, SUB_NONE, SUB_SLAB};
use crate::green::{green_column, multipole_source, GreenError};
use crate::pde::PdeError;
use crate::potential::PotentialError;
use crate::{AffineCoeff, C64, DiscreteOperator, Impedance, PiecewiseLinearPotential};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Errors raised by probe construction and evaluation.
#[derive(Debug, Error)]
pub enum ProbesError {
    /// A probe point sits in the unresolved region (or outside the domain).
    #[error("probe node {node} carries label {label}, which is not resolved at depth {k}")]
    ProbeNotResolved {
        /// Offending node id.
        node: usize,
        /// Its subdomain label.
        label: u8,
        /// Chain depth of the region.
        k: usize,
    },
    /// A probe point left the node lattice.
    #[error("probe point {0:?} (lattice steps) is not a grid node")]
    ProbeOffGrid([i64; 3]),
    /// Chain depth beyond the available links.
    #[error("depth {k} has no interface link (chain has {links})")]
    BadDepth {
        /// Requested depth.
        k: usize,
        /// Number of links in the chain.
        links: usize,
    },
    /// A probe offset fell below the resolution floor 4h.
    #[error("probe radius {r} steps is below the floor of 4 grid steps")]
    RadiusBelowFloor {
        /// Offending radius in lattice steps.
        r: i64,
    },
    /// Fewer than two usable radii; nothing can be fitted.
    #[error("only {0} usable probe radii; at least 2 are required for a fit")]
    TooFewRadii(usize),
    /// The three-spheres ball leaves the physical domain.
    #[error("ball of radius {r} at {center:?} leaves the domain")]
    BallOutsideDomain {
        /// Ball center.
        center: [f64; 3],
        /// Offending radius.
        r: f64,
    },
    /// Radii not strictly increasing and positive.
    #[error("radii must satisfy 0 < r1 < r2 < r3, got {0:?}")]
    BadRadii([f64; 3]),
    /// Every sample was degenerate (identically zero on the largest ball).
    #[error("all {0} samples were degenerate")]
    DegenerateSamples(usize),
    /// The two operators do not share a domain.
    #[error("operators do not share an unknown set")]
    OperatorMismatch,
    /// Forwarded Green-column failure.
    #[error(transparent)]
    Green(#[from] GreenError),
    /// Forwarded solver failure.
    #[error(transparent)]
    Pde(#[from] PdeError),
    /// Forwarded trace-space failure.
    #[error(transparent)]
    Cauchy(#[from] CauchyError),
    /// Forwarded geometry failure.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// Forwarded potential failure.
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

// ---------------------------------------------------------------------------
// Unresolved region U_k
// ---------------------------------------------------------------------------

/// The unresolved region U_k of a chain at depth k: all nodes whose subdomain
/// has not yet been visited. Interface nodes carry the lower (resolved) label,
/// so U_k is open: its closure boundary belongs to W_k.
#[derive(Clone, Debug)]
pub struct UnresolvedRegion {
    /// Chain depth.
    pub k: usize,
    /// `unresolved[label]` for labels `0..=N`; the slab entry is always false.
    pub unresolved: Vec<bool>,
    /// Unknown ranks inside U_k, in lattice order.
    pub ranks: Vec<usize>,
}

impl UnresolvedRegion {
    fn from_labels(op: &DiscreteOperator, k: usize, unresolved: Vec<bool>) -> Self {
        let ranks = op
            .unknowns()
            .iter()
            .enumerate()
            .filter_map(|(rank, &node)| {
                let lbl = op.dom.subdomain[node as usize];
                if lbl != SUB_NONE && lbl != SUB_SLAB && unresolved[lbl as usize] {
                    Some(rank)
                } else {
                    None
                }
            })
            .collect();
        UnresolvedRegion {
            k,
            unresolved,
            ranks,
        }
    }

    /// True when the node's subdomain label belongs to the resolved set.
    pub fn is_resolved(&self, dom: &GridDomain, node: usize) -> bool {
        let lbl = dom.subdomain[node];
        lbl != SUB_NONE && !self.unresolved[lbl as usize]
    }

    /// Euclidean distance from a node to the nearest unresolved node.
    pub fn distance_to(&self, op: &DiscreteOperator, node: usize) -> f64 {
        let p = op.dom.coords(node);
        let mut best = f64::INFINITY;
        for &rank in &self.ranks {
            let q = op.dom.coords(op.unknowns()[rank] as usize);
            let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    }
}

/// Builds U_k for a validated chain: the subdomains `chain.order[k..]` are
/// unresolved, everything else (the slab included) is resolved.
pub fn unresolved_region(
    op: &DiscreteOperator,
    chain: &Chain,
    k: usize,
) -> Result<UnresolvedRegion, ProbesError> {
    if k > chain.order.len() {
        return Err(ProbesError::BadDepth {
            k,
            links: chain.links.len(),
        });
    }
    let n = op.dom.n_subdomains();
    let mut unresolved = vec![false; n + 1];
    for &lbl in &chain.order[k..] {
        unresolved[lbl as usize] = true;
    }
    Ok(UnresolvedRegion::from_labels(op, k, unresolved))
}

/// U_0 without a chain: every physical subdomain is unresolved, only the slab
/// is resolved. This is the region behind first-interface boundary probes.
pub fn unresolved_all(op: &DiscreteOperator) -> UnresolvedRegion {
    let n = op.dom.n_subdomains();
    let mut unresolved = vec![true; n + 1];
    unresolved[SUB_SLAB as usize] = false;
    UnresolvedRegion::from_labels(op, 0, unresolved)
}

// ---------------------------------------------------------------------------
// The probe kernel S(y, z)
// ---------------------------------------------------------------------------

/// Shared factorizations for probing the difference of two potentials: the
/// mixed impedance operators of both extensions on one augmented domain.
pub struct SingularKernel {
    /// Operator of the first extended potential.
    pub op1: DiscreteOperator,
    /// Operator of the second extended potential.
    pub op2: DiscreteOperator,
    dq: Vec<f64>,
}

impl SingularKernel {
    /// Extends both potentials to the augmented domain (the common slab value
    /// cancels in the difference) and assembles both operators.
    pub fn new(
        dom: &Arc<GridDomain>,
        q1: &PiecewiseLinearPotential,
        q2: &PiecewiseLinearPotential,
        bc: Impedance,
    ) -> Result<Self, ProbesError> {
        let q1e = q1.extend_to_omega0(dom)?;
        let q2e = q2.extend_to_omega0(dom)?;
        let op1 = DiscreteOperator::assemble(dom, &q1e, bc)?;
        let op2 = DiscreteOperator::assemble(dom, &q2e, bc)?;
        if op1.unknowns() != op2.unknowns() {
            return Err(ProbesError::OperatorMismatch);
        }
        let dq = op1
            .q_values()
            .iter()
            .zip(op2.q_values())
            .map(|(a, b)| a - b)
            .collect();
        Ok(SingularKernel { op1, op2, dq })
    }

    /// The potential difference q̃₁ − q̃₂ at the unknowns.
    pub fn dq(&self) -> &[f64] {
        &self.dq
    }

    fn check_probe(&self, region: &UnresolvedRegion, node: usize) -> Result<(), ProbesError> {
        if !region.is_resolved(&self.op1.dom, node) {
            return Err(ProbesError::ProbeNotResolved {
                node,
                label: self.op1.dom.subdomain[node],
                k: region.k,
            });
        }
        Ok(())
    }

    /// Node summation of dq · c1 · c2 · h^dim over the unresolved region, in
    /// lattice order. The column product is formed before the difference
    /// factor so that swapping the two potentials negates every term — and
    /// hence the sum — exactly in floating point.
    fn quadrature(&self, region: &UnresolvedRegion, c1: &[C64], c2: &[C64]) -> C64 {
        let cell = self.op1.h.powi(self.op1.dim as i32);
        let mut s = C64::new(0.0, 0.0);
        for &r in &region.ranks {
            s += (c1[r] * c2[r]) * self.dq[r];
        }
        s * cell
    }

    /// Evaluates S at one probe pair with derivative orders α (on the y slot)
    /// and β (on the z slot). Both probe points must be resolved nodes.
    pub fn singular_value(
        &self,
        region: &UnresolvedRegion,
        y: usize,
        z: usize,
        alpha: [u8; 3],
        beta: [u8; 3],
    ) -> Result<C64, ProbesError> {
        self.check_probe(region, y)?;
        self.check_probe(region, z)?;
        let c1 = green_column(&self.op1, y, alpha)?;
        let c2 = green_column(&self.op2, z, beta)?;
        Ok(self.quadrature(region, &c1.values, &c2.values))
    }

    /// S(·, z) as a field over the unknowns, obtained from one solve: by the
    /// symmetry of G₁ the kernel solves (Δ + q̃₁)S(·, z) = −(q̃₁ − q̃₂)·∂ᵝG₂(·, z)
    /// on the unresolved region and the homogeneous equation on W_k. Values are
    /// the probe kernel only at resolved nodes; inside U_k the field carries the
    /// source term.
    pub fn singular_field(
        &self,
        region: &UnresolvedRegion,
        z: usize,
        beta: [u8; 3],
    ) -> Result<Vec<C64>, ProbesError> {
        self.check_probe(region, z)?;
        let c2 = green_column(&self.op2, z, beta)?;
        let mut f = vec![C64::new(0.0, 0.0); self.op1.unknowns().len()];
        for &r in &region.ranks {
            f[r] = -self.dq[r] * c2.values[r];
        }
        Ok(self.op1.solve(&f)?)
    }

    /// Batched probe ladder: S at y = z with α = β = order·e_axis for orders
    /// 0, 1, 2, for each probe node. Sources are built once per operator and
    /// solved in one batch.
    fn diagonal_probes(
        &self,
        region: &UnresolvedRegion,
        nodes: &[usize],
        axis: usize,
    ) -> Result<Vec<[C64; 3]>, ProbesError> {
        let mut orders = [[0u8; 3]; 3];
        orders[1][axis] = 1;
        orders[2][axis] = 2;
        let mut fs1 = Vec::with_capacity(nodes.len() * 3);
        let mut fs2 = Vec::with_capacity(nodes.len() * 3);
        for &y in nodes {
            self.check_probe(region, y)?;
            for o in orders {
                fs1.push(multipole_source(&self.op1, y, o)?);
                fs2.push(multipole_source(&self.op2, y, o)?);
            }
        }
        let cols1 = self.op1.solve_many(fs1)?;
        let cols2 = self.op2.solve_many(fs2)?;
        let mut out = Vec::with_capacity(nodes.len());
        for i in 0..nodes.len() {
            let mut row = [C64::new(0.0, 0.0); 3];
            for (o, slot) in row.iter_mut().enumerate() {
                let j = i * 3 + o;
                *slot = self.quadrature(region, &cols1[j], &cols2[j]);
            }
            out.push(row);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Green identity and the aperture inequality
// ---------------------------------------------------------------------------

/// Both sides of the discrete Green identity and their mismatch.
#[derive(Clone, Copy, Debug)]
pub struct IdentityCheck {
    /// Volume side Σ W_i (q₁ − q₂) u₁ u₂ (unconjugated).
    pub volume: C64,
    /// Boundary side h^{dim−1} Σ_Σ (f₁ g₂^ν − f₂ g₁^ν).
    pub boundary: C64,
    /// Magnitude of the boundary pairing, used to normalize degenerate cases.
    pub scale: f64,
    /// |volume − boundary| relative to max(|volume|, |boundary|, scale).
    pub residual: f64,
}

/// Checks the exact discrete identity tying the volume pairing of two
/// impedance-generated solutions to their Cauchy data on the window. `data_i`
/// is the impedance datum the solution was generated from; the normal trace is
/// recovered as g − iτu. The denominator keeps the unsigned magnitude of the
/// boundary pairing so that the reciprocity case (q₁ = q₂, both sides ≈ 0) is
/// measured against the size of its terms rather than their vanishing sum.
pub fn green_identity(
    op1: &DiscreteOperator,
    op2: &DiscreteOperator,
    sol1: &[C64],
    data1: &[C64],
    sol2: &[C64],
    data2: &[C64],
) -> Result<IdentityCheck, ProbesError> {
    if op1.unknowns() != op2.unknowns() {
        return Err(ProbesError::OperatorMismatch);
    }
    let quad = op1.quad_weights();
    let q1 = op1.q_values();
    let q2 = op2.q_values();
    let mut volume = C64::new(0.0, 0.0);
    for i in 0..quad.len() {
        volume += quad[i] * (q1[i] - q2[i]) * sol1[i] * sol2[i];
    }

    let f1 = op1.window_trace(sol1);
    let gn1 = op1.normal_trace(sol1, data1);
    let f2 = op2.window_trace(sol2);
    let gn2 = op2.normal_trace(sol2, data2);
    let mass = op1.h.powi(op1.dim as i32 - 1);
    let mut boundary = C64::new(0.0, 0.0);
    let mut scale = 0.0;
    for b in 0..f1.len() {
        boundary += f1[b] * gn2[b] - f2[b] * gn1[b];
        scale += (f1[b] * gn2[b]).norm() + (f2[b] * gn1[b]).norm();
    }
    boundary *= mass;
    scale *= mass;

    let denom = (volume.norm())
        .max(boundary.norm())
        .max(scale)
        .max(f64::MIN_POSITIVE);
    Ok(IdentityCheck {
        volume,
        boundary,
        scale,
        residual: (volume - boundary).norm() / denom,
    })
}

/// One sampled pair in the aperture inequality check.
#[derive(Clone, Copy, Debug)]
pub struct BilinearSample {
    /// |volume pairing| of the two sampled solutions.
    pub lhs: f64,
    /// aperture · ‖pair₁‖ · ‖pair₂‖.
    pub rhs: f64,
    /// lhs / rhs (∞ when rhs = 0).
    pub ratio: f64,
}

/// Result of sampling the bilinear-form inequality.
#[derive(Clone, Debug)]
pub struct BilinearCheck {
    /// Aperture between the two generated subspaces.
    pub aperture: f64,
    /// Generation count used for both subspaces.
    pub m: usize,
    /// Per-sample records.
    pub samples: Vec<BilinearSample>,
    /// Largest ratio observed.
    pub max_ratio: f64,
    /// True when every sample satisfies lhs ≤ rhs up to solver slack.
    pub all_hold: bool,
}

/// Samples random solutions from the first m generation data of each operator
/// and checks |Σ W (q₁−q₂) u₁ u₂| ≤ aperture · ‖pair₁‖ · ‖pair₂‖ for each pair.
/// The constant in front of the right side is exactly 1 in the weighted trace
/// metric; the solver contributes only round-off slack.
pub fn bilinear_aperture_check(
    op1: &DiscreteOperator,
    op2: &DiscreteOperator,
    metric: &BoundaryMetric,
    m: usize,
    n_samples: usize,
    seed: u64,
) -> Result<BilinearCheck, ProbesError> {
    let s1 = generate_cauchy_space(op1, metric, m)?;
    let s2 = generate_cauchy_space(op2, metric, m)?;
    let gap = crate::cauchy::aperture(&s1, &s2)?.value;

    let basis: Vec<Vec<f64>> = (0..m).map(|k| metric.eigenfunction(k)).collect();
    let s = basis.first().map_or(0, Vec::len);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha12Rng| -> Vec<C64> {
        let mut data = vec![C64::new(0.0, 0.0); s];
        for phi in &basis {
            let c = C64::new(
                2.0 * rng.random::<f64>() - 1.0,
                2.0 * rng.random::<f64>() - 1.0,
            );
            for (d, &p) in data.iter_mut().zip(phi) {
                *d += c * p;
            }
        }
        data
    };
    let datas1: Vec<Vec<C64>> = (0..n_samples).map(|_| draw(&mut rng)).collect();
    let datas2: Vec<Vec<C64>> = (0..n_samples).map(|_| draw(&mut rng)).collect();
    let sols1 = op1.solve_windows_many(datas1.clone())?;
    let sols2 = op2.solve_windows_many(datas2.clone())?;

    let quad = op1.quad_weights();
    let q1 = op1.q_values();
    let q2 = op2.q_values();
    let mut samples = Vec::with_capacity(n_samples);
    let mut max_ratio: f64 = 0.0;
    let mut all_hold = true;
    for i in 0..n_samples {
        let (u1, u2) = (&sols1[i], &sols2[i]);
        let mut vol = C64::new(0.0, 0.0);
        for r in 0..quad.len() {
            vol += quad[r] * (q1[r] - q2[r]) * u1[r] * u2[r];
        }
        let p1 = CauchyPair {
            f: op1.window_trace(u1),
            g: op1.normal_trace(u1, &datas1[i]),
        };
        let p2 = CauchyPair {
            f: op2.window_trace(u2),
            g: op2.normal_trace(u2, &datas2[i]),
        };
        let n1 = pair_norm(metric, &p1)?;
        let n2 = pair_norm(metric, &p2)?;
        let lhs = vol.norm();
        let rhs = gap * n1 * n2;
        let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
        max_ratio = max_ratio.max(ratio);
        if lhs > rhs * (1.0 + 1e-6) + 1e-12 * n1 * n2 {
            all_hold = false;
        }
        samples.push(BilinearSample { lhs, rhs, ratio });
    }
    Ok(BilinearCheck {
        aperture: gap,
        m,
        samples,
        max_ratio,
        all_hold,
    })
}

// ---------------------------------------------------------------------------
// Three-spheres experiments
// ---------------------------------------------------------------------------

/// Node-wise maximum of |v| over the discrete ball of radius r. Values are
/// indexed by unknown rank; nodes without a rank (Dirichlet rim) carry 0.
pub fn ball_max(op: &DiscreteOperator, v: &[C64], center: [f64; 3], r: f64) -> f64 {
    let mut best = 0.0_f64;
    for &id in &op.dom.nodes_in_ball(center, r) {
        if let Some(rank) = op.rank_of(id as usize) {
            best = best.max(v[rank].norm());
        }
    }
    best
}

/// Outcome of a three-spheres experiment over a family of solution fields.
#[derive(Clone, Debug)]
pub struct ThreeSpheres {
    /// Per-sample exponent τ̂ = log(M₃/M₂) / log(M₃/M₁) (degenerate samples
    /// skipped).
    pub tau: Vec<f64>,
    /// Smallest exponent over the kept samples.
    pub tau_min: f64,
    /// Largest empirical constant M₂ / √(M₁ M₃) when τ = 1/2 is imposed.
    pub constant_at_half: f64,
    /// Number of degenerate samples skipped.
    pub skipped: usize,
}

/// Measures the interpolation exponent of ball maxima on three concentric
/// spheres for each sample field. The largest ball must stay inside the
/// physical body; a sample is degenerate when its maxima carry no growth
/// information (zero field or equal inner and outer maxima).
pub fn three_spheres_experiment(
    op: &DiscreteOperator,
    fields: &[Vec<C64>],
    center: [f64; 3],
    radii: [f64; 3],
) -> Result<ThreeSpheres, ProbesError> {
    let [r1, r2, r3] = radii;
    if !(r1 > 0.0 && r1 < r2 && r2 < r3) {
        return Err(ProbesError::BadRadii(radii));
    }
    let dom = &op.dom;
    for a in 0..dom.dim {
        let [lo, hi] = dom.spec.omega[a];
        if center[a] - r3 < lo - 1e-12 || center[a] + r3 > hi + 1e-12 {
            return Err(ProbesError::BallOutsideDomain { center, r: r3 });
        }
    }

    let mut tau = Vec::with_capacity(fields.len());
    let mut constant_at_half = 0.0_f64;
    let mut skipped = 0usize;
    for v in fields {
        let m1 = ball_max(op, v, center, r1);
        let m2 = ball_max(op, v, center, r2);
        let m3 = ball_max(op, v, center, r3);
        if m3 == 0.0 || m1 == 0.0 || m1 == m3 {
            skipped += 1;
            continue;
        }
        tau.push((m3 / m2).ln() / (m3 / m1).ln());
        constant_at_half = constant_at_half.max(m2 / (m1 * m3).sqrt());
    }
    if tau.is_empty() {
        return Err(ProbesError::DegenerateSamples(fields.len()));
    }
    let tau_min = tau.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ThreeSpheres {
        tau,
        tau_min,
        constant_at_half,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Propagation-of-smallness probe ladders
// ---------------------------------------------------------------------------

/// One probe radius of a smallness ladder.
#[derive(Clone, Copy, Debug)]
pub struct SmallnessRow {
    /// Probe offset r (the probe point sits at distance 2r from the interface).
    pub r: f64,
    /// |S| at the probe pair.
    pub s0: f64,
    /// |∂_ν∂_ν S| (first normal derivative on both slots).
    pub s1: f64,
    /// |∂²_ν∂²_ν S|.
    pub s2: f64,
    /// s1 / s0; the theory scales this like r^{-2}.
    pub ratio1: f64,
    /// s2 / s0; the theory scales this like r^{-4}.
    pub ratio2: f64,
    /// Distance from the probe point to the unresolved region.
    pub dist: f64,
    /// Far-field envelope dist^{4−dim} the kernel magnitude is monitored
    /// against.
    pub envelope: f64,
}

/// Fitted decay of the probe ladders across one interface.
#[derive(Clone, Debug)]
pub struct SmallnessReport {
    /// Chain depth probed.
    pub k: usize,
    /// Normal axis of the probed interface.
    pub axis: usize,
    /// Ladder rows, one per radius.
    pub rows: Vec<SmallnessRow>,
    /// Log-log slope of ratio1 against r (None when the kernel vanishes).
    pub slope1: Option<f64>,
    /// Log-log slope of ratio2 against r.
    pub slope2: Option<f64>,
    /// Coefficient of determination of the ratio1 fit.
    pub r2_1: f64,
    /// Coefficient of determination of the ratio2 fit.
    pub r2_2: f64,
    /// Per-step contraction exponent β = ln(8/7)/ln 4 of the smallness
    /// propagation, carried as metadata for step-count estimates.
    pub beta: f64,
    /// Far-field envelope exponent 2 − dim/2 (per probe slot).
    pub gamma: f64,
    /// True when both potentials agree and every probe value is zero.
    pub zero_case: bool,
    /// True when some radius exceeded the r0/8 window (recorded, not fatal).
    pub soft_window: bool,
    /// Hypothesis smallness level ε₀ this ladder feeds, when the caller
    /// tracks one.
    pub eps0: Option<f64>,
}

/// Least squares on (ln x, ln y): returns (slope, r²), or None with fewer than
/// two usable points.
fn fit_loglog(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let syy = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let ss_res = syy - slope * sxy;
    let r2 = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Some((slope, r2))
}

/// Runs the derivative-ratio ladder across the interface entered at depth k:
/// for each offset r (in lattice steps) the probe pair sits at
/// y = z = P_{k+1} − 2rν, and S is evaluated with matched normal-derivative
/// orders 0, 1, 2 on both slots. Offsets below 4h are rejected; offsets beyond
/// r0/8 are allowed but flagged, since the dyadic probe window is narrower than
/// the resolution floor on coarse grids.
pub fn smallness_propagation_report(
    kernel: &SingularKernel,
    chain: &Chain,
    k: usize,
    radii_steps: &[i64],
    eps0: Option<f64>,
) -> Result<SmallnessReport, ProbesError> {
    let link = chain.links.get(k).ok_or(ProbesError::BadDepth {
        k,
        links: chain.links.len(),
    })?;
    let region = unresolved_region(&kernel.op1, chain, k)?;
    let dom = &kernel.op1.dom;
    let h = kernel.op1.h;
    let mut soft_window = false;
    let mut nodes = Vec::with_capacity(radii_steps.len());
    for &s in radii_steps {
        if s < 4 {
            return Err(ProbesError::RadiusBelowFloor { r: s });
        }
        if s as f64 * h > chain.r0 / 8.0 + 1e-12 {
            soft_window = true;
        }
        let mut p = link.p_step;
        for a in 0..3 {
            p[a] -= 2 * s * link.nu[a] as i64;
        }
        let node = dom.step_id(&p).ok_or(ProbesError::ProbeOffGrid(p))?;
        nodes.push(node);
    }
    if nodes.len() < 2 {
        return Err(ProbesError::TooFewRadii(nodes.len()));
    }

    let values = kernel.diagonal_probes(&region, &nodes, link.axis)?;
    let mut rows = Vec::with_capacity(nodes.len());
    for (i, &s) in radii_steps.iter().enumerate() {
        let r = s as f64 * h;
        let [v0, v1, v2] = values[i];
        let (s0, s1, s2) = (v0.norm(), v1.norm(), v2.norm());
        let dist = region.distance_to(&kernel.op1, nodes[i]);
        rows.push(SmallnessRow {
            r,
            s0,
            s1,
            s2,
            ratio1: s1 / s0,
            ratio2: s2 / s0,
            dist,
            envelope: dist.powi(4 - dom.dim as i32),
        });
    }

    let pts1: Vec<(f64, f64)> = rows.iter().map(|w| (w.r, w.ratio1)).collect();
    let pts2: Vec<(f64, f64)> = rows.iter().map(|w| (w.r, w.ratio2)).collect();
    let fit1 = fit_loglog(&pts1);
    let fit2 = fit_loglog(&pts2);
    let zero_case = rows.iter().all(|w| w.s0 == 0.0 && w.s1 == 0.0 && w.s2 == 0.0);
    Ok(SmallnessReport {
        k,
        axis: link.axis,
        rows,
        slope1: fit1.map(|f| f.0),
        slope2: fit2.map(|f| f.0),
        r2_1: fit1.map_or(0.0, |f| f.1),
        r2_2: fit2.map_or(0.0, |f| f.1),
        beta: (8.0_f64 / 7.0).ln() / 4.0_f64.ln(),
        gamma: 2.0 - dom.dim as f64 / 2.0,
        zero_case,
        soft_window,
        eps0,
    })
}

// ---------------------------------------------------------------------------
// First-interface boundary probe
// ---------------------------------------------------------------------------

/// One radius of a boundary probe, with the reference responses used in the
/// recovery fit.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryProbeRow {
    /// Probe offset into the slab.
    pub r: f64,
    /// Order-1 response of the probed pair.
    pub s1: C64,
    /// Order-2 response of the probed pair.
    pub s2: C64,
    /// Order-1 response of the unit constant jump on the first subdomain.
    pub s1_ref: C64,
    /// Order-2 response of the unit constant jump.
    pub s2_ref: C64,
    /// Order-2 response of the unit inward-linear jump.
    pub s2_lin: C64,
}

/// Recovered first-interface data of a potential difference.
#[derive(Clone, Debug)]
pub struct BoundaryProbeReport {
    /// Recovered value of (q₁ − q₂) at the window center.
    pub recovered_jump: f64,
    /// Recovered inward normal derivative of (q₁ − q₂) there.
    pub recovered_slope: f64,
    /// Coefficient of determination of the order-1 fit.
    pub r2_jump: f64,
    /// Coefficient of determination of the order-2 fit.
    pub r2_slope: f64,
    /// True when either fit has R² < 0.9.
    pub low_confidence: bool,
    /// True when some radius exceeded r0/16 (recorded, not fatal: the dyadic
    /// window is narrower than the 4h floor on coarse grids).
    pub soft_window: bool,
    /// Probe rows.
    pub rows: Vec<BoundaryProbeRow>,
}

/// Real two-parameter least squares t ≈ c_a·a + c_b·b over complex samples
/// (normal equations). Falls back to the single-reference fit when the
/// references are degenerate.
fn fit_two(t: &[C64], a: &[C64], b: &[C64]) -> (f64, f64) {
    let maa: f64 = a.iter().map(|v| v.norm_sqr()).sum();
    let mbb: f64 = b.iter().map(|v| v.norm_sqr()).sum();
    let mab: f64 = a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum();
    let ra: f64 = a.iter().zip(t).map(|(x, y)| (x.conj() * y).re).sum();
    let rb: f64 = b.iter().zip(t).map(|(x, y)| (x.conj() * y).re).sum();
    let det = maa * mbb - mab * mab;
    if det > 1e-12 * maa * mbb {
        ((ra * mbb - rb * mab) / det, (maa * rb - mab * ra) / det)
    } else if maa > 0.0 {
        (ra / maa, 0.0)
    } else if mbb > 0.0 {
        (0.0, rb / mbb)
    } else {
        (0.0, 0.0)
    }
}

/// Coefficient of determination of t ≈ c_a·a + c_b·b on one block of samples.
fn block_r2(t: &[C64], a: &[C64], b: &[C64], ca: f64, cb: f64) -> f64 {
    let total: f64 = t.iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return 1.0;
    }
    let res: f64 = (0..t.len())
        .map(|i| (t[i] - ca * a[i] - cb * b[i]).norm_sqr())
        .sum();
    (1.0 - res / total).clamp(0.0, 1.0)
}

/// Probes the potential difference across the accessible window from inside
/// the slab: order-1 and order-2 diagonal probes at P₁ + rν are matched, by a
/// joint least squares over the radii of both orders, against the responses of
/// two synthetic unit references (a constant jump and an inward-linear jump on
/// the first subdomain). The constant coefficient recovers (q₁ − q₂)(P₁), the
/// linear coefficient its inward normal derivative. The fit must be joint: the
/// constant reference dominates the order-2 responses, so recovering the slope
/// from a residual after a separate order-1 fit amplifies the value error by
/// the response ratio. Order blocks are normalized to balance their scales
/// (order-2 values carry two extra inverse powers of h). Fits with R² below
/// 0.9 on either block are flagged low-confidence.
pub fn boundary_stability_probe(
    dom: &Arc<GridDomain>,
    q1: &PiecewiseLinearPotential,
    q2: &PiecewiseLinearPotential,
    bc: Impedance,
    radii_steps: &[i64],
) -> Result<BoundaryProbeReport, ProbesError> {
    let n = dom.n_subdomains();
    let e0 = q1.e0_bound.max(1.5);
    let mut const_coeffs = vec![AffineCoeff::ZERO; n];
    const_coeffs[0] = AffineCoeff {
        a: 1.0,
        grad: [0.0; 3],
    };
    let plane = dom.window_plane;
    let inward = -f64::from(plane.outward);
    let plane_coord = plane.step as f64 * dom.h;
    let mut lin_coeffs = vec![AffineCoeff::ZERO; n];
    let mut grad = [0.0; 3];
    grad[plane.axis] = inward;
    lin_coeffs[0] = AffineCoeff {
        a: -plane_coord * inward,
        grad,
    };
    let zero = PiecewiseLinearPotential::zero(n, e0);
    let ref_const = PiecewiseLinearPotential::new(const_coeffs, e0);
    let ref_lin = PiecewiseLinearPotential::new(lin_coeffs, e0);

    let test = SingularKernel::new(dom, q1, q2, bc)?;
    let kc = SingularKernel::new(dom, &ref_const, &zero, bc)?;
    let kl = SingularKernel::new(dom, &ref_lin, &zero, bc)?;
    let region = unresolved_all(&test.op1);

    // Window-center anchor: tangential rect center snapped to the lattice. A
    // window without an explicit rect spans the full face of the body, so the
    // tangential extents come from the body box itself.
    let rect = dom.spec.window.rect.as_ref();
    let mut center_step = [0i64; 3];
    center_step[plane.axis] = plane.step;
    let mut t = 0;
    for a in 0..dom.dim {
        if a != plane.axis {
            let [lo, hi] = match rect {
                Some(r) => r[t],
                None => dom.spec.omega[a],
            };
            center_step[a] = ((lo + hi) / (2.0 * dom.h)).round() as i64;
            t += 1;
        }
    }

    let h = dom.h;
    let mut soft_window = false;
    let mut nodes = Vec::with_capacity(radii_steps.len());
    for &s in radii_steps {
        if s < 4 {
            return Err(ProbesError::RadiusBelowFloor { r: s });
        }
        if s as f64 * h > dom.spec.r0 / 16.0 + 1e-12 {
            soft_window = true;
        }
        let mut p = center_step;
        p[plane.axis] += s * plane.outward as i64;
        let node = dom.step_id(&p).ok_or(ProbesError::ProbeOffGrid(p))?;
        nodes.push(node);
    }
    if nodes.len() < 2 {
        return Err(ProbesError::TooFewRadii(nodes.len()));
    }

    let vt = test.diagonal_probes(&region, &nodes, plane.axis)?;
    let vc = kc.diagonal_probes(&region, &nodes, plane.axis)?;
    let vl = kl.diagonal_probes(&region, &nodes, plane.axis)?;

    let s1t: Vec<C64> = vt.iter().map(|v| v[1]).collect();
    let s2t: Vec<C64> = vt.iter().map(|v| v[2]).collect();
    let s1c: Vec<C64> = vc.iter().map(|v| v[1]).collect();
    let s2c: Vec<C64> = vc.iter().map(|v| v[2]).collect();
    let s1l: Vec<C64> = vl.iter().map(|v| v[1]).collect();
    let s2l: Vec<C64> = vl.iter().map(|v| v[2]).collect();

    // Stack both orders, each block scaled by its constant-reference norm so
    // neither dominates the joint fit.
    let block_norm = |v: &[C64]| v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let (w1, w2) = (1.0 / block_norm(&s1c), 1.0 / block_norm(&s2c));
    let scale_block = |a: &[C64], w: f64| a.iter().map(|v| v * w).collect::<Vec<C64>>();
    let mut t = scale_block(&s1t, w1);
    t.extend(scale_block(&s2t, w2));
    let mut rc = scale_block(&s1c, w1);
    rc.extend(scale_block(&s2c, w2));
    let mut rl = scale_block(&s1l, w1);
    rl.extend(scale_block(&s2l, w2));

    let (jump, slope) = fit_two(&t, &rc, &rl);
    let r2_jump = block_r2(&s1t, &s1c, &s1l, jump, slope);
    let r2_slope = block_r2(&s2t, &s2c, &s2l, jump, slope);

    let rows = radii_steps
        .iter()
        .enumerate()
        .map(|(i, &s)| BoundaryProbeRow {
            r: s as f64 * h,
            s1: s1t[i],
            s2: s2t[i],
            s1_ref: s1c[i],
            s2_ref: s2c[i],
            s2_lin: s2l[i],
        })
        .collect();
    Ok(BoundaryProbeReport {
        recovered_jump: jump,
        recovered_slope: slope,
        r2_jump,
        r2_slope,
        low_confidence: r2_jump < 0.9 || r2_slope < 0.9,
        soft_window,
        rows,
    })
}
