//! Green functions of the mixed problem, their source derivatives, the iterated
//! kernel decomposition, and asymptotics against the free-space fundamental
//! solution.
//!
//! A Green column G(·, y) solves Δv + qv = −δ(·−y) with the mixed boundary
//! conditions of the augmented domain. Source derivatives ∂ᵅ_y G are computed by
//! replacing the delta with the exact difference-quotient multipole (dipole or
//! quadrupole pattern of deltas), which makes them derivatives of the inverse
//! matrix column — a linear-algebra identity, immune to post-hoc cancellation.
//!
//! The kernel stack realizes G = G₀ + Σ_{j=1}^{J+1} R_j with R_j solved through
//! the potential-free operator for j ≤ J and through the full operator for the
//! last layer; discretely this telescopes exactly, so the reconstruction agrees
//! with the direct column to solver tolerance.

use crate::geometry::ChainLink;
use crate::pde::{DiscreteOperator, Impedance, PdeError};
use crate::potential::{AffineCoeff, PiecewiseLinearPotential};
use crate::{C64, GridDomain};
use std::sync::Arc;
use thiserror::Error;

/// Errors from Green-function construction and asymptotics.
#[derive(Debug, Error)]
pub enum GreenError {
    /// Fundamental solution requested at the singularity.
    #[error("fundamental solution evaluated at zero offset")]
    ZeroOffset,
    /// Unsupported dimension.
    #[error("dimension {0} not supported")]
    BadDim(usize),
    /// Multi-index order above 2.
    #[error("multi-index {0:?} has order above 2")]
    BadOrder([u8; 3]),
    /// Source too close to the boundary for the requested order.
    #[error("source node {node} lacks an interior margin of {margin} for order {order:?}")]
    TooCloseToBoundary {
        /// Lattice id of the source.
        node: usize,
        /// Required Chebyshev margin.
        margin: i64,
        /// Requested multi-index.
        order: [u8; 3],
    },
    /// A probe target is not an unknown of the operator.
    #[error("probe target at lattice steps {0:?} is not an interior node")]
    BadTarget([i64; 3]),
    /// Not enough radii for a regression.
    #[error("only {0} probe radii in range; at least 4 required")]
    TooFewRadii(usize),
    /// Probe offset below the resolved floor.
    #[error("probe offset {0} steps is below the 4-step floor")]
    RadiusBelowFloor(i64),
    /// The far-side probe ball contains no unknowns.
    #[error("far-side probe ball at interface center {0:?} contains no unknowns")]
    EmptyProbeBall([i64; 3]),
    /// Underlying solver failure.
    #[error(transparent)]
    Pde(#[from] PdeError),
}

/// Free-space fundamental solution Γ of −Δ at offset `x` (so −ΔΓ = δ).
/// Dimension 2 is the logarithmic variant, outside the regime the quantitative
/// estimates target; it is provided for the fast smoke fixtures.
pub fn fundamental_solution(dim: usize, x: &[f64; 3]) -> Result<f64, GreenError> {
    let r = offset_norm(dim, x)?;
    match dim {
        2 => Ok(-(r.ln()) / (2.0 * std::f64::consts::PI)),
        3 => Ok(1.0 / (4.0 * std::f64::consts::PI * r)),
        n if n > 3 => {
            // ((n−2)·ω_n)^{−1} r^{2−n} with ω_n the unit-sphere area.
            let omega = 2.0 * std::f64::consts::PI.powf(n as f64 / 2.0)
                / gamma_half_integer(n as f64 / 2.0);
            Ok(r.powi(2 - n as i32) / ((n as f64 - 2.0) * omega))
        }
        n => Err(GreenError::BadDim(n)),
    }
}

/// Source gradient ∂_y Γ(x − y) expressed through the offset x − y.
pub fn fundamental_gradient(dim: usize, x: &[f64; 3]) -> Result<[f64; 3], GreenError> {
    let r = offset_norm(dim, x)?;
    let c = match dim {
        2 => 1.0 / (2.0 * std::f64::consts::PI * r * r),
        3 => 1.0 / (4.0 * std::f64::consts::PI * r * r * r),
        n => return Err(GreenError::BadDim(n)),
    };
    Ok([c * x[0], c * x[1], c * x[2]])
}

/// Source Hessian ∂²_y Γ(x − y) through the offset x − y.
pub fn fundamental_hessian(dim: usize, x: &[f64; 3]) -> Result<[[f64; 3]; 3], GreenError> {
    let r = offset_norm(dim, x)?;
    let (c1, c2) = match dim {
        // ∂_{y_i}∂_{y_j} Γ = −δ_ij·c1 + x_i x_j·c2 in the offset variable.
        2 => {
            let base = 1.0 / (2.0 * std::f64::consts::PI);
            (base / (r * r), 2.0 * base / (r * r * r * r))
        }
        3 => {
            let base = 1.0 / (4.0 * std::f64::consts::PI);
            (base / (r * r * r), 3.0 * base / (r * r * r * r * r))
        }
        n => return Err(GreenError::BadDim(n)),
    };
    let mut h = [[0.0f64; 3]; 3];
    for i in 0..dim {
        for j in 0..dim {
            h[i][j] = c2 * x[i] * x[j] - if i == j { c1 } else { 0.0 };
        }
    }
    Ok(h)
}

fn offset_norm(dim: usize, x: &[f64; 3]) -> Result<f64, GreenError> {
    let mut r2 = 0.0;
    for &c in x.iter().take(dim) {
        r2 += c * c;
    }
    if r2 == 0.0 {
        return Err(GreenError::ZeroOffset);
    }
    Ok(r2.sqrt())
}

fn gamma_half_integer(x: f64) -> f64 {
    // Γ(x) for x a positive multiple of 1/2 (enough for sphere areas).
    let mut acc = 1.0;
    let mut t = x;
    while t > 1.5 {
        t -= 1.0;
        acc *= t;
    }
    if (t - 1.0).abs() < 1e-12 {
        acc
    } else {
        acc * std::f64::consts::PI.sqrt()
    }
}

/// One Green column ∂ᵅ_y G(·, y): the solution field together with its source.
#[derive(Clone, Debug)]
pub struct GreenColumn {
    /// Lattice id of the source y.
    pub source: usize,
    /// Source multi-index α, |α| ≤ 2.
    pub order: [u8; 3],
    /// Field over the operator unknowns, unknown order.
    pub values: Vec<C64>,
}

impl GreenColumn {
    /// Value at a lattice node, if that node is an unknown of `op`.
    pub fn at(&self, op: &DiscreteOperator, node: usize) -> Option<C64> {
        op.rank_of(node).map(|r| self.values[r])
    }
}

/// Interior margin (in nodes) required for a multi-index.
fn required_margin(order: [u8; 3]) -> Result<i64, GreenError> {
    let total = order[0] + order[1] + order[2];
    match total {
        0 => Ok(0),
        1 => Ok(1),
        2 => Ok(2),
        _ => Err(GreenError::BadOrder(order)),
    }
}

/// The delta / multipole right side −∂ᵅδ_y as offsets and coefficients.
fn multipole_pattern(order: [u8; 3], h: f64) -> Result<Vec<([i64; 3], f64)>, GreenError> {
    let axes: Vec<usize> = (0..3).flat_map(|a| std::iter::repeat_n(a, order[a] as usize)).collect();
    let e = |a: usize, s: i64| -> [i64; 3] {
        let mut v = [0i64; 3];
        v[a] = s;
        v
    };
    match axes.as_slice() {
        [] => Ok(vec![([0; 3], 1.0)]),
        [a] => Ok(vec![(e(*a, 1), 0.5 / h), (e(*a, -1), -0.5 / h)]),
        [a, b] if a == b => Ok(vec![
            (e(*a, 1), 1.0 / (h * h)),
            ([0; 3], -2.0 / (h * h)),
            (e(*a, -1), 1.0 / (h * h)),
        ]),
        [a, b] => {
            let mut out = Vec::with_capacity(4);
            for (sa, sb) in [(1i64, 1i64), (1, -1), (-1, 1), (-1, -1)] {
                let mut v = [0i64; 3];
                v[*a] = sa;
                v[*b] = sb;
                out.push((v, (sa * sb) as f64 * 0.25 / (h * h)));
            }
            Ok(out)
        }
        _ => Err(GreenError::BadOrder(order)),
    }
}

/// Builds the right side −∂ᵅδ_y over the unknowns of `op`.
pub fn multipole_source(
    op: &DiscreteOperator,
    y: usize,
    order: [u8; 3],
) -> Result<Vec<C64>, GreenError> {
    let margin = required_margin(order)?;
    if margin > 0 && !op.dom.has_interior_ball(y, margin) {
        return Err(GreenError::TooCloseToBoundary {
            node: y,
            margin,
            order,
        });
    }
    if op.rank_of(y).is_none() || op.dom.class[y] != crate::NodeClass::Interior {
        return Err(GreenError::TooCloseToBoundary {
            node: y,
            margin: 1,
            order,
        });
    }
    let scale = op.h.powi(-(op.dim as i32)); // discrete delta mass
    let p = op.dom.node_step(y);
    let mut f = vec![C64::new(0.0, 0.0); op.unknowns().len()];
    for (off, coeff) in multipole_pattern(order, op.h)? {
        let node = [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
        let id = op
            .dom
            .step_id(&node)
            .and_then(|n| op.rank_of(n))
            .ok_or(GreenError::BadTarget(node))?;
        f[id] -= C64::new(coeff * scale, 0.0);
    }
    Ok(f)
}

/// Solves for ∂ᵅ_y G(·, y) on the operator's domain.
pub fn green_column(
    op: &DiscreteOperator,
    y: usize,
    order: [u8; 3],
) -> Result<GreenColumn, GreenError> {
    let f = multipole_source(op, y, order)?;
    let values = op.solve(&f)?;
    Ok(GreenColumn {
        source: y,
        order,
        values,
    })
}

/// All multi-indices with |α| ≤ 2 in `dim` axes: identity, gradients, then the
/// Hessian in lexicographic (i ≤ j) order.
pub fn multi_indices(dim: usize) -> Vec<[u8; 3]> {
    let mut out = vec![[0u8; 3]];
    for a in 0..dim {
        let mut m = [0u8; 3];
        m[a] = 1;
        out.push(m);
    }
    for i in 0..dim {
        for j in i..dim {
            let mut m = [0u8; 3];
            m[i] += 1;
            m[j] += 1;
            out.push(m);
        }
    }
    out
}

/// The iterated-kernel decomposition of one Green column.
#[derive(Clone, Debug)]
pub struct KernelStack {
    /// Source node.
    pub source: usize,
    /// Depth J = ⌊(dim−1)/2⌋; the stack has J+2 layers.
    pub depth: usize,
    /// Layers R₀ … R_{J+1}, each a field over the unknowns.
    pub layers: Vec<Vec<C64>>,
}

impl KernelStack {
    /// Sum of the layers: the reconstructed Green column.
    pub fn reconstructed(&self) -> Vec<C64> {
        let n = self.layers[0].len();
        let mut g = vec![C64::new(0.0, 0.0); n];
        for layer in &self.layers {
            for i in 0..n {
                g[i] += layer[i];
            }
        }
        g
    }
}

/// Shared factorizations for building kernel stacks: the potential-free operator
/// and the full operator on the same augmented domain.
pub struct KernelStackBuilder {
    /// Mixed operator for Δ alone (q ≡ 0 on all of the augmented domain).
    pub op0: DiscreteOperator,
    /// Mixed operator for Δ + q̃.
    pub opq: DiscreteOperator,
    qvals: Vec<f64>,
}

impl KernelStackBuilder {
    /// Assembles both operators; `q_ext` must be extended to the augmented domain.
    pub fn new(
        dom: &Arc<GridDomain>,
        q_ext: &PiecewiseLinearPotential,
        bc: Impedance,
    ) -> Result<Self, GreenError> {
        let zero = PiecewiseLinearPotential {
            coeffs: vec![AffineCoeff::ZERO; dom.n_subdomains()],
            e0_bound: q_ext.e0_bound,
            slab: Some(AffineCoeff::ZERO),
        };
        let op0 = DiscreteOperator::assemble(dom, &zero, bc)?;
        let opq = DiscreteOperator::assemble(dom, q_ext, bc)?;
        let qvals = opq.q_values().to_vec();
        Ok(KernelStackBuilder { op0, opq, qvals })
    }

    /// Builds the stack for source `y`: R₀ = G₀(·,y); R_j solves ΔR_j = −q̃R_{j−1}
    /// for j ≤ J; the last layer solves the full problem (Δ+q̃)R_{J+1} = −q̃R_J.
    pub fn stack(&self, y: usize) -> Result<KernelStack, GreenError> {
        let depth = (self.op0.dim - 1) / 2;
        let mut layers = Vec::with_capacity(depth + 2);
        let f0 = multipole_source(&self.op0, y, [0; 3])?;
        layers.push(self.op0.solve(&f0)?);
        for j in 1..=depth + 1 {
            let prev = layers.last().expect("at least one layer");
            let f: Vec<C64> = prev
                .iter()
                .zip(&self.qvals)
                .map(|(v, q)| -v * q)
                .collect();
            let next = if j <= depth {
                self.op0.solve(&f)?
            } else {
                self.opq.solve(&f)?
            };
            layers.push(next);
        }
        Ok(KernelStack {
            source: y,
            depth,
            layers,
        })
    }
}

/// One radius row of an asymptotics report.
#[derive(Clone, Debug)]
pub struct AsymptoticsRow {
    /// Probe radius.
    pub r: f64,
    /// |G − Γ| at the probe point.
    pub diff: f64,
    /// Euclidean norm of ∇_y(G − Γ).
    pub grad: f64,
    /// Frobenius norm of ∇²_y(G − Γ).
    pub hess: f64,
    /// Predicted envelopes for the three quantities at this radius.
    pub envelopes: [f64; 3],
}

/// Log–log slopes and envelope ratios of |G−Γ| and its source derivatives along
/// a probe ray.
#[derive(Clone, Debug)]
pub struct AsymptoticsReport {
    /// Source node.
    pub source: usize,
    /// Lattice direction of the ray.
    pub dir: [i64; 3],
    /// Per-radius measurements, largest radius first.
    pub rows: Vec<AsymptoticsRow>,
    /// Fitted log–log slopes for (value, gradient, Hessian).
    pub slopes: [f64; 3],
    /// Sup over radii of quantity / envelope.
    pub envelope_sup: [f64; 3],
    /// True in dimension 2 (outside the quantitative regime).
    pub out_of_paper_regime: bool,
}

/// Envelope predictions: value bounded (n=3) or r^{3−n}; gradient logarithmic
/// (n=3) or r^{2−n}; Hessian r^{2−n}.
fn envelopes(dim: usize, r: f64) -> [f64; 3] {
    match dim {
        3 => [1.0, r.ln().abs() + 1.0, 1.0 / r],
        _ => [r, 1.0, 1.0],
    }
}

/// Least-squares slope of ln(v) against ln(r).
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.max(1e-300).ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pts.len() {
        num += (xs[i] - xm) * (ys[i] - ym);
        den += (xs[i] - xm) * (xs[i] - xm);
    }
    num / den
}

/// Deterministic ladder of integer probe radii in [k_min, k_max]: dyadic if that
/// yields at least five values, else geometric with ratio √2 then 2^(1/4), else
/// all integers in range.
pub fn ladder_radii(k_min: i64, k_max: i64) -> Vec<i64> {
    for ratio in [2.0f64, std::f64::consts::SQRT_2, 2.0f64.powf(0.25)] {
        let mut ks = Vec::new();
        let mut r = k_max as f64;
        while r >= k_min as f64 - 1e-9 {
            let k = r.round() as i64;
            if ks.last() != Some(&k) && k >= k_min {
                ks.push(k);
            }
            r /= ratio;
        }
        if ks.len() >= 5 {
            return ks;
        }
    }
    (k_min..=k_max).rev().collect()
}

/// Measures |∂ᵅ(G−Γ)| along the ray y + k·h·dir for the given integer radii and
/// fits log–log slopes. The operator must be the mixed augmented one.
pub fn asymptotics_report(
    op: &DiscreteOperator,
    y: usize,
    dir: [i64; 3],
    radii_steps: &[i64],
) -> Result<AsymptoticsReport, GreenError> {
    if radii_steps.len() < 4 {
        return Err(GreenError::TooFewRadii(radii_steps.len()));
    }
    let dim = op.dim;
    let orders = multi_indices(dim);
    let mut columns = Vec::with_capacity(orders.len());
    for &order in &orders {
        columns.push(green_column(op, y, order)?);
    }
    let yc = op.dom.coords(y);
    let p = op.dom.node_step(y);
    let dirn = {
        let mut s = 0.0;
        for a in 0..dim {
            s += (dir[a] * dir[a]) as f64;
        }
        s.sqrt()
    };

    let mut rows = Vec::with_capacity(radii_steps.len());
    for &k in radii_steps {
        let tp = [p[0] + k * dir[0], p[1] + k * dir[1], p[2] + k * dir[2]];
        let tid = op.dom.step_id(&tp).ok_or(GreenError::BadTarget(tp))?;
        let rank = op.rank_of(tid).ok_or(GreenError::BadTarget(tp))?;
        let xc = op.dom.coords(tid);
        let off = [xc[0] - yc[0], xc[1] - yc[1], xc[2] - yc[2]];
        let r = k as f64 * op.h * dirn;

        // Value.
        let g0 = columns[0].values[rank];
        let diff = (g0 - C64::new(fundamental_solution(dim, &off)?, 0.0)).norm();
        // Gradient.
        let gam_g = fundamental_gradient(dim, &off)?;
        let mut grad2 = 0.0;
        for a in 0..dim {
            let ga = columns[1 + a].values[rank];
            grad2 += (ga - C64::new(gam_g[a], 0.0)).norm_sqr();
        }
        // Hessian (lexicographic pairs follow the gradient block).
        let gam_h = fundamental_hessian(dim, &off)?;
        let mut hess2 = 0.0;
        let mut idx = 1 + dim;
        for i in 0..dim {
            for j in i..dim {
                let hij = columns[idx].values[rank];
                let d2 = (hij - C64::new(gam_h[i][j], 0.0)).norm_sqr();
                hess2 += if i == j { d2 } else { 2.0 * d2 };
                idx += 1;
            }
        }
        rows.push(AsymptoticsRow {
            r,
            diff,
            grad: grad2.sqrt(),
            hess: hess2.sqrt(),
            envelopes: envelopes(dim, r),
        });
    }

    let slope = |f: &dyn Fn(&AsymptoticsRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|row| (row.r, f(row))).collect();
        loglog_slope(&pts)
    };
    let sup = |f: &dyn Fn(&AsymptoticsRow) -> f64, e: usize| {
        rows.iter()
            .map(|row| f(row) / row.envelopes[e])
            .fold(0.0f64, f64::max)
    };
    Ok(AsymptoticsReport {
        source: y,
        dir,
        slopes: [
            slope(&|r| r.diff),
            slope(&|r| r.grad),
            slope(&|r| r.hess),
        ],
        envelope_sup: [
            sup(&|r| r.diff, 0),
            sup(&|r| r.grad, 1),
            sup(&|r| r.hess, 2),
        ],
        rows,
        out_of_paper_regime: dim == 2,
    })
}

/// One source offset of an interface Hessian ladder.
#[derive(Clone, Copy, Debug)]
pub struct InterfaceHessianRow {
    /// Distance from the source to the interface plane.
    pub r: f64,
    /// Sup over the far-side probe ball of |∇²_y(G−Γ)| (Frobenius).
    pub sup: f64,
    /// sup · r^{dim−2}, the quantity the envelope predicts to stay bounded.
    pub envelope_ratio: f64,
}

/// Hessian envelope ladder for a source approaching an interface orthogonally:
/// y = Q − r·ν marches toward the interface center Q along the inward normal
/// while the probes x fill the fixed ball B_{r0/16}(Q) on the far side of the
/// interface. The second-order estimate predicts sup_x |∇²_y(G−Γ)| ≲ r^{2−dim},
/// so `envelope_ratio` should neither grow nor collapse across the offsets.
#[derive(Clone, Debug)]
pub struct InterfaceHessianReport {
    /// Axis perpendicular to the probed interface.
    pub axis: usize,
    /// Per-offset measurements, in the order the radii were given.
    pub rows: Vec<InterfaceHessianRow>,
    /// Log–log slope of the sup against r.
    pub slope: f64,
    /// Max/min of the envelope ratio across the rows.
    pub drift: f64,
    /// Far-side probe count.
    pub probes: usize,
    /// True in dimension 2 (outside the quantitative regime).
    pub out_of_paper_regime: bool,
    /// True when some offset exceeded the r0/8 window (recorded, not fatal).
    pub soft_window: bool,
}

/// Measures sup_x |∇²_y(G−Γ)(x, y_r)| over the fixed far-side ball for sources
/// y_r = Q − r·ν at the given offsets (in lattice steps, floor 4). The link
/// supplies the interface center Q and the normal ν; probes live strictly
/// inside the far subdomain within r0/16 of Q.
pub fn interface_hessian_report(
    op: &DiscreteOperator,
    link: &ChainLink,
    radii_steps: &[i64],
) -> Result<InterfaceHessianReport, GreenError> {
    if radii_steps.len() < 4 {
        return Err(GreenError::TooFewRadii(radii_steps.len()));
    }
    let dim = op.dim;
    let dom = &op.dom;
    let r0 = dom.spec.r0;

    // Fixed probe ball, strictly inside the far subdomain (interface nodes
    // carry the lower label, so the plane itself is excluded).
    let qc = link.p;
    let mut probes = Vec::new();
    for (rank, &id) in op.unknowns().iter().enumerate() {
        let id = id as usize;
        if dom.subdomain[id] != link.to {
            continue;
        }
        let xc = dom.coords(id);
        let d2: f64 = (0..dim).map(|a| (xc[a] - qc[a]).powi(2)).sum();
        if d2.sqrt() <= r0 / 16.0 + 1e-12 {
            probes.push((rank, xc));
        }
    }
    if probes.is_empty() {
        return Err(GreenError::EmptyProbeBall(link.p_step));
    }

    // Second-order multi-indices with their Hessian slots.
    let mut orders = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            let mut o = [0u8; 3];
            o[i] += 1;
            o[j] += 1;
            orders.push((i, j, o));
        }
    }

    let mut rows = Vec::with_capacity(radii_steps.len());
    let mut soft_window = false;
    for &k in radii_steps {
        if k < 4 {
            return Err(GreenError::RadiusBelowFloor(k));
        }
        let r = k as f64 * op.h;
        if r > r0 / 8.0 + 1e-12 {
            soft_window = true;
        }
        let mut yp = link.p_step;
        for a in 0..3 {
            yp[a] -= k * link.nu[a] as i64;
        }
        let y = dom
            .step_id(&yp)
            .filter(|&id| op.rank_of(id).is_some())
            .ok_or(GreenError::BadTarget(yp))?;
        let yc = dom.coords(y);

        let mut columns = Vec::with_capacity(orders.len());
        for &(_, _, o) in &orders {
            columns.push(green_column(op, y, o)?);
        }

        let mut sup = 0.0f64;
        for &(rank, xc) in &probes {
            let off = [xc[0] - yc[0], xc[1] - yc[1], xc[2] - yc[2]];
            let gam = fundamental_hessian(dim, &off)?;
            let mut hess2 = 0.0;
            for (col, &(i, j, _)) in columns.iter().zip(&orders) {
                let d2 = (col.values[rank] - C64::new(gam[i][j], 0.0)).norm_sqr();
                hess2 += if i == j { d2 } else { 2.0 * d2 };
            }
            sup = sup.max(hess2.sqrt());
        }
        rows.push(InterfaceHessianRow {
            r,
            sup,
            envelope_ratio: sup * r.powi(dim as i32 - 2),
        });
    }

    let pts: Vec<(f64, f64)> = rows.iter().map(|w| (w.r, w.sup)).collect();
    let slope = loglog_slope(&pts);
    let max = rows.iter().map(|w| w.envelope_ratio).fold(0.0f64, f64::max);
    let min = rows
        .iter()
        .map(|w| w.envelope_ratio)
        .fold(f64::INFINITY, f64::min);
    Ok(InterfaceHessianReport {
        axis: link.axis,
        rows,
        slope,
        drift: max / min,
        probes: probes.len(),
        out_of_paper_regime: dim == 2,
        soft_window,
    })
}

/// Caccioppoli-style monitor: exterior gradient energy of a Green column times
/// r^{dim−2}, per radius. Monitored, never asserted against a fixed constant.
pub fn caccioppoli_monitor(
    op: &DiscreteOperator,
    col: &GreenColumn,
    radii: &[f64],
) -> Vec<(f64, f64)> {
    let dom = &op.dom;
    let yc = dom.coords(col.source);
    let vol = op.h.powi(op.dim as i32);
    let inv_h2 = 1.0 / (op.h * op.h);
    radii
        .iter()
        .map(|&r| {
            let r2 = r * r;
            let mut e = 0.0;
            for (rank, &id) in op.unknowns().iter().enumerate() {
                let p = dom.node_step(id as usize);
                let xc = dom.coords(id as usize);
                let mut d2 = 0.0;
                for a in 0..op.dim {
                    d2 += (xc[a] - yc[a]) * (xc[a] - yc[a]);
                }
                if d2 <= r2 {
                    continue;
                }
                for axis in 0..op.dim {
                    // Forward edges only; both endpoints outside the ball.
                    let mut qn = p;
                    qn[axis] += 1;
                    let Some(nid) = dom.step_id(&qn) else { continue };
                    let Some(nrank) = op.rank_of(nid) else { continue };
                    let nc = dom.coords(nid);
                    let mut nd2 = 0.0;
                    for a in 0..op.dim {
                        nd2 += (nc[a] - yc[a]) * (nc[a] - yc[a]);
                    }
                    if nd2 <= r2 {
                        continue;
                    }
                    e += (col.values[rank] - col.values[nrank]).norm_sqr() * inv_h2;
                }
            }
            (r, e * vol * r.powi(op.dim as i32 - 2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fixtures, GridDomain, Spacing};
    use crate::pde::Impedance;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn aug(spec: &crate::geometry::DomainSpec) -> Arc<GridDomain> {
        Arc::new(GridDomain::build_augmented(spec).unwrap())
    }

    #[test]
    fn fundamental_solution_reference_values() {
        let g1 = fundamental_solution(3, &[1.0, 0.0, 0.0]).unwrap();
        assert!((g1 - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        let g2 = fundamental_solution(3, &[0.0, 2.0, 0.0]).unwrap();
        assert!((g2 - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!(matches!(
            fundamental_solution(3, &[0.0; 3]),
            Err(GreenError::ZeroOffset)
        ));
        // General-dimension formula reproduces the 3-d constant.
        let g3 = fundamental_solution(4, &[1.0, 0.0, 0.0]).unwrap();
        assert!((g3 - 1.0 / (2.0 * 2.0 * std::f64::consts::PI.powi(2))).abs() < 1e-15);
    }

    #[test]
    fn discrete_laplacian_of_gamma_vanishes_off_singularity() {
        // Sum Δ_h Γ against a bump supported away from the origin: ≈ 0 at O(h²).
        let bump = |x: [f64; 3]| {
            let c = [1.5, 1.4, 1.6];
            let r2: f64 = (0..3).map(|a| (x[a] - c[a]) * (x[a] - c[a])).sum();
            if r2 < 0.16 {
                (-1.0 / (0.16 - r2)).exp()
            } else {
                0.0
            }
        };
        let mut sums = Vec::new();
        for lvl in 0..2 {
            let h = 0.05 / (1 << lvl) as f64;
            let n = (1.0 / h) as i64;
            let mut s = 0.0;
            for iz in 0..=n {
                for iy in 0..=n {
                    for ix in 0..=n {
                        let x = [1.0 + ix as f64 * h, 1.0 + iy as f64 * h, 1.0 + iz as f64 * h];
                        let w = bump(x);
                        if w == 0.0 {
                            continue;
                        }
                        let mut lap = -6.0 * fundamental_solution(3, &x).unwrap();
                        for a in 0..3 {
                            for d in [-1.0, 1.0] {
                                let mut xx = x;
                                xx[a] += d * h;
                                lap += fundamental_solution(3, &xx).unwrap();
                            }
                        }
                        s += lap / (h * h) * w * h * h * h;
                    }
                }
            }
            sums.push(s.abs());
        }
        assert!(sums[0] < 1e-4, "{sums:?}");
        assert!(sums[1] < sums[0] / 2.5, "not O(h²): {sums:?}");
    }

    fn q_affine(dom: &GridDomain) -> PiecewiseLinearPotential {
        PiecewiseLinearPotential::new(
            vec![
                AffineCoeff {
                    a: 0.8,
                    grad: [0.5, -0.25, 0.0],
                },
                AffineCoeff {
                    a: -1.2,
                    grad: [0.0, 0.5, 0.25],
                },
            ][..dom.n_subdomains()]
                .to_vec(),
            3.0,
        )
    }

    #[test]
    fn green_symmetry_random_pairs() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let interior: Vec<usize> = op
            .unknowns()
            .iter()
            .map(|&id| id as usize)
            .filter(|&id| dom.class[id] == crate::NodeClass::Interior)
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = *interior.choose(&mut rng).unwrap();
            let y = *interior.choose(&mut rng).unwrap();
            if x == y {
                continue;
            }
            let gy = green_column(&op, y, [0; 3]).unwrap();
            let gx = green_column(&op, x, [0; 3]).unwrap();
            let a = gy.at(&op, x).unwrap();
            let b = gx.at(&op, y).unwrap();
            assert!(
                (a - b).norm() <= 1e-10 * a.norm().max(1e-12),
                "G(x,y)={a} G(y,x)={b}"
            );
        }
    }

    #[test]
    fn green_column_solves_pde_away_from_source() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let y = dom.step_id(&[8, 8, 0]).unwrap();
        let col = green_column(&op, y, [1, 1, 0]).unwrap();
        let f = multipole_source(&op, y, [1, 1, 0]).unwrap();
        let mv = op.matvec(&col.values);
        let scale = f.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let py = dom.node_step(y);
        for (r, &id) in op.unknowns().iter().enumerate() {
            let p = dom.node_step(id as usize);
            let cheb = (0..2)
                .map(|a| (p[a] - py[a]).abs())
                .max()
                .unwrap();
            if cheb > 2 {
                // Rows not touching the source multipole: pure PDE rows.
                assert!(
                    mv[r].norm() <= 1e-9 * scale,
                    "row {p:?}: residual {}",
                    mv[r].norm()
                );
            }
        }
    }

    #[test]
    fn dipole_column_matches_difference_quotient_of_columns() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let y = dom.step_id(&[8, 10, 0]).unwrap();
        let col = green_column(&op, y, [1, 0, 0]).unwrap();
        let yp = green_column(&op, dom.step_id(&[9, 10, 0]).unwrap(), [0; 3]).unwrap();
        let ym = green_column(&op, dom.step_id(&[7, 10, 0]).unwrap(), [0; 3]).unwrap();
        let h = dom.h;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..col.values.len() {
            let dq = (yp.values[r] - ym.values[r]) / (2.0 * h);
            worst = worst.max((col.values[r] - dq).norm());
            scale = scale.max(dq.norm());
        }
        assert!(worst <= 1e-9 * scale.max(1.0), "worst {worst}, scale {scale}");
    }

    #[test]
    fn source_margin_is_enforced() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        // One node in from the left wall: fine at order 0, too close for order 2.
        let y = dom.step_id(&[1, 4, 0]).unwrap();
        assert!(green_column(&op, y, [0; 3]).is_ok());
        assert!(matches!(
            green_column(&op, y, [2, 0, 0]),
            Err(GreenError::TooCloseToBoundary { .. })
        ));
    }

    #[test]
    fn kernel_stack_telescopes_to_direct_column() {
        let dom = aug(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let builder = KernelStackBuilder::new(&dom, &q, Impedance::default()).unwrap();
        let y = dom.step_id(&[4, 4, 3]).unwrap();
        let stack = builder.stack(y).unwrap();
        // dim 3: J = 1, layers R₀, R₁, R₂.
        assert_eq!(stack.depth, 1);
        assert_eq!(stack.layers.len(), 3);
        let direct = green_column(&builder.opq, y, [0; 3]).unwrap();
        let rec = stack.reconstructed();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..rec.len() {
            worst = worst.max((rec[r] - direct.values[r]).norm());
            scale = scale.max(direct.values[r].norm());
        }
        assert!(worst <= 1e-8 * scale, "worst {worst} scale {scale}");
    }

    #[test]
    fn kernel_stack_with_zero_potential_is_just_g0() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.125)));
        let zero = PiecewiseLinearPotential {
            coeffs: vec![AffineCoeff::ZERO; 2],
            e0_bound: 3.0,
            slab: Some(AffineCoeff::ZERO),
        };
        let builder = KernelStackBuilder::new(&dom, &zero, Impedance::default()).unwrap();
        let y = dom.step_id(&[4, 4, 0]).unwrap();
        let stack = builder.stack(y).unwrap();
        // dim 2: J = 0, layers R₀ and the final correction, which vanishes.
        assert_eq!(stack.layers.len(), 2);
        assert!(stack.layers[1].iter().all(|z| z.norm_sqr() == 0.0));
        let g0 = green_column(&builder.op0, y, [0; 3]).unwrap();
        assert_eq!(stack.layers[0], g0.values);
    }

    #[test]
    fn kernel_layers_satisfy_their_defining_equations() {
        // 3-d so the potential-free recursion layer actually exists (J = 1).
        let dom = aug(&fixtures::two_half_cube(Spacing::Value(0.125)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let builder = KernelStackBuilder::new(&dom, &q, Impedance::default()).unwrap();
        let y = dom.step_id(&[4, 4, 3]).unwrap();
        let stack = builder.stack(y).unwrap();
        let residual = |op: &DiscreteOperator, layer: &[C64], prev: &[C64]| {
            let w = op.row_weights();
            let qv = builder.opq.q_values();
            let mv = op.matvec(layer);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..layer.len() {
                let rhs = -prev[i] * qv[i] * w[i];
                num += (mv[i] - rhs).norm_sqr();
                den += rhs.norm_sqr();
            }
            (num.sqrt(), den.sqrt())
        };
        // ΔR₁ = −q̃·R₀ through the potential-free operator …
        let (num, den) = residual(&builder.op0, &stack.layers[1], &stack.layers[0]);
        assert!(num <= 1e-9 * den, "layer 1 relative residual {}", num / den);
        // … and (Δ+q̃)R₂ = −q̃·R₁ through the full operator.
        let (num, den) = residual(&builder.opq, &stack.layers[2], &stack.layers[1]);
        assert!(num <= 1e-9 * den, "layer 2 relative residual {}", num / den);
    }

    #[test]
    fn bound_shape_uniform_under_refinement() {
        // sup |G(x,y)|·|x−y| over the shell [4h₀, r0/4] must not grow as h shrinks.
        let mut sups = Vec::new();
        for h in [0.0625, 0.05] {
            let dom = aug(&fixtures::two_half_cube(Spacing::Value(h)));
            let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
            let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
            let y = dom
                .step_id(&[(0.5 / h) as i64, (0.5 / h) as i64, (0.5 / h) as i64])
                .unwrap();
            let col = green_column(&op, y, [0; 3]).unwrap();
            let yc = dom.coords(y);
            let lo = 4.0 * 0.0625; // fixed inner radius: the coarser grid's cutoff
            let hi = dom.spec.r0 / 4.0;
            let mut sup: f64 = 0.0;
            for (r, &id) in op.unknowns().iter().enumerate() {
                let xc = dom.coords(id as usize);
                let d = ((xc[0] - yc[0]).powi(2)
                    + (xc[1] - yc[1]).powi(2)
                    + (xc[2] - yc[2]).powi(2))
                .sqrt();
                if d >= lo && d <= hi {
                    sup = sup.max(col.values[r].norm() * d);
                }
            }
            sups.push(sup);
        }
        assert!(
            sups[1] <= 1.25 * sups[0],
            "shell sup grew under refinement: {sups:?}"
        );
    }

    #[test]
    fn ladder_radii_and_report_shape() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(1.0 / 64.0)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let y = dom.step_id(&[32, 24, 0]).unwrap();
        let ks = ladder_radii(4, 12);
        assert!(ks.len() >= 5, "{ks:?}");
        assert!(ks.windows(2).all(|w| w[0] > w[1]));
        let rep = asymptotics_report(&op, y, [0, 1, 0], &ks).unwrap();
        assert!(rep.out_of_paper_regime);
        assert_eq!(rep.rows.len(), ks.len());
        assert!(rep.rows.iter().all(|r| r.diff.is_finite()
            && r.grad.is_finite()
            && r.hess.is_finite()));
        assert!(rep.slopes.iter().all(|s| s.is_finite()));
        // Too few radii is an error.
        assert!(matches!(
            asymptotics_report(&op, y, [0, 1, 0], &ks[..3]),
            Err(GreenError::TooFewRadii(3))
        ));
    }

    #[test]
    fn interface_ladder_measures_the_far_side_ball() {
        let dom = aug(&fixtures::two_half_square(Spacing::Value(0.0625)));
        let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
        let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
        let chain = crate::geometry::validate_chain(&dom, &[1, 2]).unwrap();
        let link = &chain.links[1];

        let rep = interface_hessian_report(&op, link, &[7, 6, 5, 4]).unwrap();
        assert!(rep.out_of_paper_regime);
        assert!(rep.probes > 0);
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.rows.iter().all(|w| w.sup.is_finite() && w.sup > 0.0));
        // In dimension 2 the envelope power r⁰ leaves the ratio equal to the sup.
        for w in &rep.rows {
            assert_eq!(w.envelope_ratio, w.sup);
        }
        assert!(rep.slope.is_finite());
        assert!(rep.drift >= 1.0);
        // Offsets of 4+ steps at this spacing exceed the r0/8 window.
        assert!(rep.soft_window);

        // Guard rails: a short ladder and a sub-floor offset are rejected.
        assert!(matches!(
            interface_hessian_report(&op, link, &[6, 5, 4]),
            Err(GreenError::TooFewRadii(3))
        ));
        assert!(matches!(
            interface_hessian_report(&op, link, &[6, 5, 4, 3]),
            Err(GreenError::RadiusBelowFloor(3))
        ));
    }

    #[test]
    fn caccioppoli_constant_stable_under_refinement() {
        let mut consts = Vec::new();
        for h in [0.125, 0.0625] {
            let dom = aug(&fixtures::two_half_square(Spacing::Value(h)));
            let q = q_affine(&dom).extend_to_omega0(&dom).unwrap();
            let op = DiscreteOperator::assemble(&dom, &q, Impedance::default()).unwrap();
            let y = dom.step_id(&[(0.5 / h) as i64, (0.5 / h) as i64, 0]).unwrap();
            let col = green_column(&op, y, [0; 3]).unwrap();
            let mon = caccioppoli_monitor(&op, &col, &[0.25]);
            consts.push(mon[0].1);
        }
        assert!(consts.iter().all(|c| c.is_finite() && *c > 0.0));
        let ratio = consts[1] / consts[0];
        assert!((0.25..=4.0).contains(&ratio), "unstable constant: {consts:?}");
    }
}
