//! Stability experiments over the piecewise-linear potential class.
//!
//! Three layers, in order of abstraction:
//!
//! * the logarithmic modulus of continuity ω_b and its iterated compositions,
//!   with the monotonicity, concavity, and scaling laws the iteration argument
//!   leans on, assertable pointwise on sampled grids;
//! * randomized sweeps measuring the empirical Lipschitz ratio between the
//!   coefficient distance E = sup|q₁ − q₂| (corner-exact) and the aperture ε₀
//!   of the generated Cauchy-data subspaces, with rank correlation and
//!   degenerate-pair checks — the claim is verified as a bounded ratio plus a
//!   strong monotone association, never as a fixed constant, because the
//!   constant depends on a-priori data no experiment can observe;
//! * projected-Landweber reconstruction of the affine coefficients from
//!   impedance-generated boundary pairs: adjoint-state gradients of a
//!   generation-datum least squares in the weighted trace metric, a fixed step
//!   1/L̂ estimated by power iteration on the Gauss–Newton Hessian, halved on
//!   misfit increase, and coefficient-wise projection onto the a-priori box.
//!
//! The misfit is a least squares over generation data rather than the aperture
//! itself: the aperture is non-smooth at subspace crossings, while least
//! squares admits exact adjoint gradients. The aperture is still reported per
//! iterate as a diagnostic column in the trace.
//!
//! The boundary recovery probe (value jump and normal slope at the first
//! interface contact point) lives with the kernel machinery in `probes` and is
//! re-exported here.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cauchy::{
    aperture, generate_cauchy_space, subspace_from_pairs, weighted_coordinates, BoundaryMetric,
    CauchyError, CauchyPair, CauchySubspace,
};
use crate::geometry::{validate_chain, DomainSpec, GeometryError, GridDomain};
use crate::pde::PdeError;
use crate::potential::PotentialError;
use crate::{AffineCoeff, C64, DiscreteOperator, Impedance, PiecewiseLinearPotential};

pub use crate::probes::{boundary_stability_probe, BoundaryProbeReport, BoundaryProbeRow};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Apertures at or below this are treated as zero when forming E/ε₀ ratios.
const RATIO_EPS_FLOOR: f64 = 1e-12;
/// Tolerance of the degenerate-pair and injectivity checks.
const DEGENERATE_TOL: f64 = 1e-10;
/// Relative drift allowed between the aperture at m and at the truncated
/// generation count before a record is flagged as unstabilized in m.
const STABILIZATION_REL: f64 = 0.25;
/// Absolute drift floor for the same check (below it, drift is noise).
const STABILIZATION_ABS: f64 = 1e-9;

/// Errors raised by the stability experiments.
#[derive(Debug, Error)]
pub enum StabilityError {
    /// Modulus exponent outside its domain.
    #[error("modulus exponent must be a positive finite number, got {0}")]
    BadExponent(f64),
    /// Order-zero modulus is a pure power and needs an exponent in (0,1).
    #[error("order-zero modulus exponent must lie in (0,1), got {0}")]
    BadPowerExponent(f64),
    /// Modulus argument outside its domain.
    #[error("modulus argument must be positive, got {0}")]
    NonPositiveArgument(f64),
    /// A sweep with nothing to draw.
    #[error("sweep needs at least one sample")]
    EmptySweep,
    /// Zero generation modes span no data space.
    #[error("generation count m must be positive")]
    ZeroModes,
    /// Coefficient vector does not match the fixture decomposition.
    #[error("got {got} coefficient sets for a domain with {expected} subdomains")]
    WrongCoefficientCount { expected: usize, got: usize },
    /// Step policy gave up: the misfit rose through five consecutive halvings.
    #[error(
        "misfit increased through {halvings} consecutive step halvings after {accepted} accepted steps ({} trace rows recorded)",
        trace.len()
    )]
    Diverged {
        /// Consecutive rejected trials at abort.
        halvings: usize,
        /// Accepted descent steps before the abort.
        accepted: usize,
        /// Full iteration trace up to the abort.
        trace: Vec<TraceRow>,
    },
    /// Domain construction failure.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// Potential class violation.
    #[error(transparent)]
    Potential(#[from] PotentialError),
    /// Assembly or solve failure.
    #[error(transparent)]
    Pde(#[from] PdeError),
    /// Trace-space failure.
    #[error(transparent)]
    Cauchy(#[from] CauchyError),
}

// ---------------------------------------------------------------------------
// Modulus of continuity
// ---------------------------------------------------------------------------

/// Logarithmic modulus of continuity ω_b, iterated j times.
///
/// The base function is 2^b e^{−2}|log t|^{−b} on (0, e^{−2}) with the constant
/// plateau e^{−2} everywhere to the right; the two branches meet continuously.
/// Order j = 0 is the plain power t^b with b ∈ (0,1) (the seed of the
/// composition ladder); order j ≥ 1 composes the base function j times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulus {
    /// Exponent parameter: b > 0 for j ≥ 1, the power α ∈ (0,1) for j = 0.
    pub b: f64,
    /// Composition order.
    pub j: usize,
}

impl Modulus {
    /// Validated constructor.
    pub fn new(b: f64, j: usize) -> Result<Self, StabilityError> {
        if !b.is_finite() || b <= 0.0 {
            return Err(StabilityError::BadExponent(b));
        }
        if j == 0 && b >= 1.0 {
            return Err(StabilityError::BadPowerExponent(b));
        }
        Ok(Modulus { b, j })
    }

    /// The single (uncomposed) logarithmic modulus ω_b.
    pub fn base(b: f64) -> Result<Self, StabilityError> {
        Modulus::new(b, 1)
    }

    /// The order-zero power modulus t ↦ t^α, α ∈ (0,1).
    pub fn power(alpha: f64) -> Result<Self, StabilityError> {
        Modulus::new(alpha, 0)
    }

    /// The plateau level e^{−2}, which is also the sup of every order ≥ 1.
    pub fn plateau() -> f64 {
        (-2.0f64).exp()
    }

    /// Evaluates the modulus at t > 0.
    pub fn eval(&self, t: f64) -> Result<f64, StabilityError> {
        if !(t > 0.0) {
            return Err(StabilityError::NonPositiveArgument(t));
        }
        if self.j == 0 {
            return Ok(t.powf(self.b));
        }
        let mut v = t;
        for _ in 0..self.j {
            v = base_modulus(self.b, v);
        }
        Ok(v)
    }
}

/// One application of the base modulus.
fn base_modulus(b: f64, t: f64) -> f64 {
    let plateau = Modulus::plateau();
    if t >= plateau {
        plateau
    } else {
        // On (0, e^{−2}) the logarithm is below −2, so |log t| > 2 and the
        // value stays strictly under the plateau.
        2.0f64.powf(b) * plateau * (-t.ln()).powf(-b)
    }
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks on ties. `None` when fewer
/// than two points or when either side is constant (ranks carry no order).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

// ---------------------------------------------------------------------------
// Lipschitz sweep
// ---------------------------------------------------------------------------

/// Configuration of a randomized stability sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Random pairs to draw (one degenerate pair is injected on top).
    pub n_samples: usize,
    /// Master seed; every record carries its derived per-sample seed.
    pub seed: u64,
    /// Generation count of each Cauchy subspace.
    pub m: usize,
    /// A-priori sup bound of the potential class; draws fill its box.
    pub e0: f64,
}

/// One potential pair with its measured distances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRecord {
    /// Sample index (0 is the injected degenerate pair).
    pub sample: usize,
    /// Seed this sample's draws came from.
    pub seed: u64,
    /// Coefficients of the first potential.
    pub q1: Vec<AffineCoeff>,
    /// Coefficients of the second potential.
    pub q2: Vec<AffineCoeff>,
    /// Corner-exact sup distance ‖q₁ − q₂‖_∞ over Ω.
    pub e: f64,
    /// Aperture between the generated Cauchy subspaces.
    pub eps0: f64,
    /// Aperture recomputed at the truncated generation count used by the
    /// stabilization check; absent when the count is too small to truncate.
    pub eps0_trunc: Option<f64>,
    /// Empirical Lipschitz ratio E/ε₀; absent for the degenerate pair and
    /// whenever the aperture sits at the numerical floor.
    pub ratio: Option<f64>,
    /// Whether the aperture was insensitive to truncating the generation count.
    pub stabilized: bool,
    /// True on the injected identical pair.
    pub degenerate: bool,
}

/// Aggregates of a sweep over its usable records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Fingerprint of the fixture specification.
    pub fixture: String,
    /// Grid spacing.
    pub h: f64,
    /// Generation count.
    pub m: usize,
    /// Requested sample count (degenerate injection not included).
    pub n_samples: usize,
    /// Master seed.
    pub seed: u64,
    /// Records entering the ratio statistics.
    pub n_used: usize,
    /// Largest E/ε₀ — the empirical Lipschitz constant.
    pub max_ratio: f64,
    /// Smallest E/ε₀.
    pub min_ratio: f64,
    /// Median E/ε₀.
    pub median_ratio: f64,
    /// Spearman rank correlation between E and ε₀ (null when undefined).
    pub spearman: Option<f64>,
    /// Anomaly flags; empty on a clean run.
    pub flags: Vec<String>,
}

/// A completed sweep: per-pair records plus their summary.
#[derive(Clone, Debug)]
pub struct Sweep {
    /// One record per drawn pair, injection first.
    pub records: Vec<SweepRecord>,
    /// Aggregates and flags.
    pub summary: SweepSummary,
}

impl Sweep {
    /// Records as CSV, one row per pair; coefficient sets ride along as quoted
    /// JSON so a row regenerates its pair exactly.
    pub fn records_csv(&self) -> String {
        let mut out =
            String::from("sample,seed,degenerate,stabilized,e,eps0,eps0_trunc,ratio,q1,q2\n");
        for r in &self.records {
            let eps0_trunc = r.eps0_trunc.map(|v| v.to_string()).unwrap_or_default();
            let ratio = r.ratio.map(|v| v.to_string()).unwrap_or_default();
            let q1 = serde_json::to_string(&r.q1).expect("coefficients serialize");
            let q2 = serde_json::to_string(&r.q2).expect("coefficients serialize");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.sample,
                r.seed,
                r.degenerate,
                r.stabilized,
                r.e,
                r.eps0,
                eps0_trunc,
                ratio,
                csv_quote(&q1),
                csv_quote(&q2),
            ));
        }
        out
    }
}

impl SweepSummary {
    /// Pretty JSON with a trailing newline; field order is fixed by the struct.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// RFC-4180 quoting: wrap in double quotes, double any inner quote.
fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Short SHA-256 fingerprint of a domain specification.
pub fn fixture_hash(spec: &DomainSpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Largest |x_d| over Ω per axis (1 beyond the dimension): the gradient box is
/// shrunk by these so the corner-exact sup of any draw stays within E₀.
fn coordinate_bounds(spec: &DomainSpec) -> [f64; 3] {
    let mut rd = [1.0f64; 3];
    for d in 0..spec.dim {
        rd[d] = spec.omega[d][0]
            .abs()
            .max(spec.omega[d][1].abs())
            .max(1e-9);
    }
    rd
}

/// Per-sample seed derivation: record this value to replay one sample alone.
fn sample_seed(master: u64, index: usize) -> u64 {
    master
        ^ (index as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Uniform draw in the in-class box: |a| ≤ E₀/2 and |A_d| ≤ E₀/(2·dim·R_d),
/// which keeps the corner-exact sup below E₀ for every draw.
fn draw_coeffs(
    rng: &mut ChaCha12Rng,
    nsub: usize,
    dim: usize,
    e0: f64,
    rd: &[f64; 3],
) -> Vec<AffineCoeff> {
    (0..nsub)
        .map(|_| {
            let a = 0.5 * e0 * (2.0 * rng.random::<f64>() - 1.0);
            let mut grad = [0.0; 3];
            for d in 0..dim {
                grad[d] =
                    e0 / (2.0 * dim as f64 * rd[d]) * (2.0 * rng.random::<f64>() - 1.0);
            }
            AffineCoeff { a, grad }
        })
        .collect()
}

/// Distances of one potential pair: corner-exact E, the aperture ε₀ at the
/// full generation count, and whether ε₀ was stable under truncating the
/// count by a quarter (computed from the recorded pairs, no extra solves).
struct PairEval {
    e: f64,
    eps0: f64,
    eps0_trunc: Option<f64>,
    stabilized: bool,
}

fn pair_distance(
    dom: &Arc<GridDomain>,
    metric: &BoundaryMetric,
    q1: &PiecewiseLinearPotential,
    q2: &PiecewiseLinearPotential,
    m: usize,
    bc: Impedance,
) -> Result<PairEval, StabilityError> {
    let e = q1.difference(q2)?.sup_norm(dom)?;
    let op1 = DiscreteOperator::assemble(dom, q1, bc)?;
    let op2 = DiscreteOperator::assemble(dom, q2, bc)?;
    let s1 = generate_cauchy_space(&op1, metric, m)?;
    let s2 = generate_cauchy_space(&op2, metric, m)?;
    let eps0 = aperture(&s1, &s2)?.value;
    let (eps0_trunc, stabilized) = if m >= 2 {
        let m_small = m - (m / 4).max(1);
        let t1 = subspace_from_pairs(metric, &s1.pairs[..m_small])?;
        let t2 = subspace_from_pairs(metric, &s2.pairs[..m_small])?;
        let eps_small = aperture(&t1, &t2)?.value;
        let ok = (eps0 - eps_small).abs() <= (STABILIZATION_REL * eps0).max(STABILIZATION_ABS);
        (Some(eps_small), ok)
    } else {
        (None, true)
    };
    Ok(PairEval {
        e,
        eps0,
        eps0_trunc,
        stabilized,
    })
}

/// Randomized Lipschitz sweep: draws `n_samples` potential pairs uniformly in
/// the E₀ box, injects one identical pair at index 0, and measures E against
/// the aperture ε₀ for each. Summary statistics run over the non-degenerate,
/// stabilized records; anomalies turn into flags rather than errors.
pub fn stability_sweep(spec: &DomainSpec, cfg: &SweepConfig) -> Result<Sweep, StabilityError> {
    if cfg.n_samples == 0 {
        return Err(StabilityError::EmptySweep);
    }
    if cfg.m == 0 {
        return Err(StabilityError::ZeroModes);
    }
    // The fixture must carry a valid chain in natural order before any data
    // are generated from it.
    {
        let aug = GridDomain::build_augmented(spec)?;
        let order: Vec<u8> = (1..=aug.n_subdomains() as u8).collect();
        validate_chain(&aug, &order)?;
    }
    let dom = Arc::new(GridDomain::build_physical(spec)?);
    let metric = BoundaryMetric::from_domain(&dom)?;
    let rd = coordinate_bounds(spec);
    let bc = Impedance::default();
    let nsub = dom.n_subdomains();
    let dim = dom.dim;

    let indices: Vec<usize> = (0..=cfg.n_samples).collect();
    let results = crate::par::map_indexed(indices, |i| -> Result<SweepRecord, StabilityError> {
        let seed = sample_seed(cfg.seed, i);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let q1c = draw_coeffs(&mut rng, nsub, dim, cfg.e0, &rd);
        let q2c = if i == 0 {
            q1c.clone()
        } else {
            draw_coeffs(&mut rng, nsub, dim, cfg.e0, &rd)
        };
        let q1 = PiecewiseLinearPotential::new(q1c.clone(), cfg.e0);
        let q2 = PiecewiseLinearPotential::new(q2c.clone(), cfg.e0);
        let pe = pair_distance(&dom, &metric, &q1, &q2, cfg.m, bc)?;
        let degenerate = i == 0;
        let ratio = if !degenerate && pe.eps0 > RATIO_EPS_FLOOR {
            Some(pe.e / pe.eps0)
        } else {
            None
        };
        Ok(SweepRecord {
            sample: i,
            seed,
            q1: q1c,
            q2: q2c,
            e: pe.e,
            eps0: pe.eps0,
            eps0_trunc: pe.eps0_trunc,
            ratio,
            stabilized: pe.stabilized,
            degenerate,
        })
    });
    let records: Vec<SweepRecord> = results.into_iter().collect::<Result<_, _>>()?;

    let mut flags = Vec::new();
    if records[0].eps0 > DEGENERATE_TOL {
        flags.push(format!(
            "degenerate_pair_failed:eps0={}",
            records[0].eps0
        ));
    }
    let injectivity_violations = records
        .iter()
        .filter(|r| (r.eps0 <= DEGENERATE_TOL) != (r.e <= DEGENERATE_TOL))
        .count();
    if injectivity_violations > 0 {
        flags.push(format!("injectivity_violation:{injectivity_violations}"));
    }
    let unstabilized = records
        .iter()
        .filter(|r| !r.degenerate && !r.stabilized)
        .count();
    if unstabilized > 0 {
        flags.push(format!("unstabilized:{unstabilized}"));
    }

    let used: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| !r.degenerate && r.stabilized && r.ratio.is_some())
        .collect();
    let mut ratios: Vec<f64> = used.iter().map(|r| r.ratio.unwrap()).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let (max_ratio, min_ratio, median_ratio) = if ratios.is_empty() {
        flags.push("no_usable_ratios".into());
        (0.0, 0.0, 0.0)
    } else {
        let n = ratios.len();
        let median = if n % 2 == 1 {
            ratios[n / 2]
        } else {
            0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
        };
        (ratios[n - 1], ratios[0], median)
    };
    let es: Vec<f64> = used.iter().map(|r| r.e).collect();
    let eps: Vec<f64> = used.iter().map(|r| r.eps0).collect();
    let rho = spearman(&es, &eps);
    if rho.is_none() {
        flags.push("spearman_undefined".into());
    }

    let summary = SweepSummary {
        fixture: fixture_hash(spec),
        h: dom.h,
        m: cfg.m,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        n_used: used.len(),
        max_ratio,
        min_ratio,
        median_ratio,
        spearman: rho,
        flags,
    };
    Ok(Sweep { records, summary })
}

/// Records for the deterministic scaling ladder (q, q + δ·1) at each given δ:
/// E is exactly |δ| and the aperture should shrink with it at first order.
pub fn scaling_pair_records(
    spec: &DomainSpec,
    q: &PiecewiseLinearPotential,
    m: usize,
    deltas: &[f64],
) -> Result<Vec<SweepRecord>, StabilityError> {
    if m == 0 {
        return Err(StabilityError::ZeroModes);
    }
    let dom = Arc::new(GridDomain::build_physical(spec)?);
    let metric = BoundaryMetric::from_domain(&dom)?;
    let bc = Impedance::default();
    let mut out = Vec::with_capacity(deltas.len());
    for (i, &delta) in deltas.iter().enumerate() {
        let shifted: Vec<AffineCoeff> = q
            .coeffs
            .iter()
            .map(|c| AffineCoeff {
                a: c.a + delta,
                grad: c.grad,
            })
            .collect();
        let q2 = PiecewiseLinearPotential::new(shifted.clone(), q.e0_bound + delta.abs());
        let pe = pair_distance(&dom, &metric, q, &q2, m, bc)?;
        let ratio = if pe.eps0 > RATIO_EPS_FLOOR {
            Some(pe.e / pe.eps0)
        } else {
            None
        };
        out.push(SweepRecord {
            sample: i,
            seed: 0,
            q1: q.coeffs.clone(),
            q2: shifted,
            e: pe.e,
            eps0: pe.eps0,
            eps0_trunc: pe.eps0_trunc,
            ratio,
            stabilized: pe.stabilized,
            degenerate: false,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Projected-Landweber reconstruction
// ---------------------------------------------------------------------------

/// Configuration of a reconstruction run.
#[derive(Clone, Debug)]
pub struct ReconstructConfig {
    /// Generation count of the observed and modeled data.
    pub m: usize,
    /// Trial-step budget (accepted and rejected steps both count).
    pub max_iters: usize,
    /// Misfit level treated as converged.
    pub misfit_tol: f64,
    /// Euclidean gradient norm treated as converged.
    pub grad_tol: f64,
    /// Power-iteration count for the Gauss–Newton norm estimate.
    pub power_iters: usize,
    /// Multiplier on the 1/L̂ step (1 is the plain policy).
    pub step_scale: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            m: 12,
            max_iters: 500,
            misfit_tol: 1e-18,
            grad_tol: 1e-10,
            power_iters: 40,
            step_scale: 1.0,
        }
    }
}

/// One accepted iterate of a reconstruction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    /// Accepted-step index (0 is the projected initial guess).
    pub iter: usize,
    /// Generation-datum least squares misfit.
    pub misfit: f64,
    /// Aperture between the modeled and observed subspaces (diagnostic).
    pub aperture: f64,
    /// Coefficient error against the synthetic truth, relative to its norm.
    pub coeff_error: f64,
}

/// Reconstruction trace as CSV.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,misfit,aperture,coeff_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iter, r.misfit, r.aperture, r.coeff_error
        ));
    }
    out
}

/// Result of a reconstruction run.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Recovered coefficients.
    pub theta: Vec<AffineCoeff>,
    /// One row per accepted iterate, the projected initial guess included.
    pub trace: Vec<TraceRow>,
    /// Whether a convergence tolerance was met within the budget.
    pub converged: bool,
    /// Accepted descent steps.
    pub accepted: usize,
    /// Final step size.
    pub step: f64,
    /// Power-iteration estimate L̂ of the Gauss–Newton Hessian norm at the
    /// initial guess.
    pub lipschitz: f64,
}

/// Forward evaluation at one coefficient vector: the assembled operator, the
/// generation solutions, their trace pairs, and the weighted residuals
/// against the observations.
struct ForwardState {
    op: DiscreteOperator,
    us: Vec<Vec<C64>>,
    pairs: Vec<CauchyPair>,
    res: Vec<Vec<C64>>,
    misfit: f64,
}

/// The fixed parts of one inverse problem: domain, metric, generation data,
/// observations, and the a-priori box.
struct InverseProblem {
    dom: Arc<GridDomain>,
    metric: BoundaryMetric,
    bc: Impedance,
    gs: Vec<Vec<C64>>,
    obs: CauchySubspace,
    obs_coords: Vec<Vec<C64>>,
    e0: f64,
    rd: [f64; 3],
    dim: usize,
    nsub: usize,
}

impl InverseProblem {
    fn new(
        spec: &DomainSpec,
        truth: &PiecewiseLinearPotential,
        m: usize,
    ) -> Result<Self, StabilityError> {
        if m == 0 {
            return Err(StabilityError::ZeroModes);
        }
        let dom = Arc::new(GridDomain::build_physical(spec)?);
        let nsub = dom.n_subdomains();
        if truth.coeffs.len() != nsub {
            return Err(StabilityError::WrongCoefficientCount {
                expected: nsub,
                got: truth.coeffs.len(),
            });
        }
        let metric = BoundaryMetric::from_domain(&dom)?;
        let bc = Impedance::default();
        let op_true = DiscreteOperator::assemble(&dom, truth, bc)?;
        let obs = generate_cauchy_space(&op_true, &metric, m)?;
        let obs_coords = obs
            .pairs
            .iter()
            .map(|p| weighted_coordinates(&metric, p))
            .collect::<Result<Vec<_>, _>>()?;
        let gs: Vec<Vec<C64>> = (0..m)
            .map(|k| {
                metric
                    .eigenfunction(k)
                    .into_iter()
                    .map(|v| C64::new(v, 0.0))
                    .collect()
            })
            .collect();
        let rd = coordinate_bounds(spec);
        let dim = dom.dim;
        Ok(InverseProblem {
            dom,
            metric,
            bc,
            gs,
            obs,
            obs_coords,
            e0: truth.e0_bound,
            rd,
            dim,
            nsub,
        })
    }

    fn n_params(&self) -> usize {
        self.nsub * (1 + self.dim)
    }

    /// Coefficient-wise projection onto the in-class box (the same box the
    /// sweep draws from), zeroing gradient components beyond the dimension.
    fn clamp(&self, coeffs: &[AffineCoeff]) -> Vec<AffineCoeff> {
        let ca = 0.5 * self.e0;
        coeffs
            .iter()
            .map(|c| {
                let mut grad = [0.0; 3];
                for d in 0..self.dim {
                    let cg = self.e0 / (2.0 * self.dim as f64 * self.rd[d]);
                    grad[d] = c.grad[d].clamp(-cg, cg);
                }
                AffineCoeff {
                    a: c.a.clamp(-ca, ca),
                    grad,
                }
            })
            .collect()
    }

    fn forward(&self, coeffs: &[AffineCoeff]) -> Result<ForwardState, StabilityError> {
        let q = PiecewiseLinearPotential::new(coeffs.to_vec(), self.e0);
        let op = DiscreteOperator::assemble(&self.dom, &q, self.bc)?;
        let us = op.solve_windows_many(self.gs.clone())?;
        let mut pairs = Vec::with_capacity(us.len());
        let mut res = Vec::with_capacity(us.len());
        let mut misfit = 0.0;
        for (k, u) in us.iter().enumerate() {
            let pair = CauchyPair {
                f: op.window_trace(u),
                g: op.normal_trace(u, &self.gs[k]),
            };
            let coords = weighted_coordinates(&self.metric, &pair)?;
            let r: Vec<C64> = coords
                .iter()
                .zip(&self.obs_coords[k])
                .map(|(a, b)| a - b)
                .collect();
            misfit += r.iter().map(|z| z.norm_sqr()).sum::<f64>();
            pairs.push(pair);
            res.push(r);
        }
        Ok(ForwardState {
            op,
            us,
            pairs,
            res,
            misfit,
        })
    }

    /// Adjoint-state gradient of the misfit. With M the assembled (symmetric)
    /// operator, u_k the generation solutions and r_k the weighted residuals,
    /// each datum contributes one adjoint solve M λ_k = Oᵀ v_k with
    /// v_k = X₊ r̄₁ − iτ X₋ r̄₂, and
    /// ∂J/∂θ_p = −2 Σ_k Σ_i w_i β_p(x_i) Re(λ_k[i]·u_k[i]),
    /// where β_p is the indicator (or coordinate-weighted indicator) of the
    /// subdomain owning parameter p.
    fn gradient(&self, st: &ForwardState) -> Result<Vec<f64>, StabilityError> {
        let s = self.metric.modes();
        let w = st.op.row_weights().to_vec();
        let n = st.op.unknowns().len();
        let robin = st.op.robin_nodes().to_vec();
        let minus_itau = C64::new(0.0, -self.bc.tau);

        let mut srcs = Vec::with_capacity(st.res.len());
        for r in &st.res {
            let r1c: Vec<C64> = r[..s].iter().map(|z| z.conj()).collect();
            let r2c: Vec<C64> = r[s..].iter().map(|z| z.conj()).collect();
            let a = self.metric.half_power(&r1c);
            let b = self.metric.neg_half_power(&r2c);
            let mut f = vec![C64::new(0.0, 0.0); n];
            for (bi, &node) in robin.iter().enumerate() {
                let rank = st
                    .op
                    .rank_of(node as usize)
                    .expect("impedance node has a rank");
                // solve() multiplies by the row weight, so divide it back out
                // to place the bare adjoint source at this row.
                f[rank] = (a[bi] + minus_itau * b[bi]) / w[rank];
            }
            srcs.push(f);
        }
        let lambdas = st.op.solve_many(srcs)?;

        let mut grad = vec![0.0; self.n_params()];
        let stride = 1 + self.dim;
        for (lam, u) in lambdas.iter().zip(&st.us) {
            for (i, &node) in st.op.unknowns().iter().enumerate() {
                let lab = self.dom.subdomain[node as usize];
                debug_assert!(lab >= 1 && (lab as usize) <= self.nsub);
                let j = (lab - 1) as usize;
                let x = self.dom.coords(node as usize);
                let t = -2.0 * w[i] * (lam[i] * u[i]).re;
                let p0 = j * stride;
                grad[p0] += t;
                for d in 0..self.dim {
                    grad[p0 + 1 + d] += t * x[d];
                }
            }
        }
        Ok(grad)
    }

    /// Gauss–Newton Hessian 2·Re(DF*DF) at the state: the columns of the
    /// weighted Jacobian are built by one solve per (parameter, datum) and
    /// the small Gram matrix is formed exactly.
    fn gauss_newton_hessian(&self, st: &ForwardState) -> Result<Vec<Vec<f64>>, StabilityError> {
        let np = self.n_params();
        let s = self.metric.modes();
        let stride = 1 + self.dim;
        let minus_itau = C64::new(0.0, -self.bc.tau);

        let mut rhs = Vec::with_capacity(np * st.us.len());
        for p in 0..np {
            let j = p / stride;
            let comp = p % stride;
            for u in &st.us {
                let f: Vec<C64> = st
                    .op
                    .unknowns()
                    .iter()
                    .enumerate()
                    .map(|(i, &node)| {
                        let lab = self.dom.subdomain[node as usize];
                        if (lab as usize) != j + 1 {
                            return C64::new(0.0, 0.0);
                        }
                        let beta = if comp == 0 {
                            1.0
                        } else {
                            self.dom.coords(node as usize)[comp - 1]
                        };
                        u[i] * beta
                    })
                    .collect();
                rhs.push(f);
            }
        }
        let sols = st.op.solve_many(rhs)?;

        // One stacked Jacobian column per parameter, over all data.
        let mut cols: Vec<Vec<C64>> = Vec::with_capacity(np);
        for p in 0..np {
            let mut col = Vec::with_capacity(2 * s * st.us.len());
            for k in 0..st.us.len() {
                let v = &sols[p * st.us.len() + k];
                let de: Vec<C64> = st.op.window_trace(v).iter().map(|z| -z).collect();
                col.extend(self.metric.half_power(&de));
                col.extend(
                    self.metric
                        .neg_half_power(&de)
                        .into_iter()
                        .map(|z| minus_itau * z),
                );
            }
            cols.push(col);
        }
        let mut hess = vec![vec![0.0f64; np]; np];
        for p in 0..np {
            for q in p..np {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..cols[p].len() {
                    acc += cols[p][i].conj() * cols[q][i];
                }
                let v = 2.0 * acc.re;
                hess[p][q] = v;
                hess[q][p] = v;
            }
        }
        Ok(hess)
    }

    /// Power-iteration estimate of the Gauss–Newton Hessian norm at the state.
    fn gauss_newton_norm(
        &self,
        st: &ForwardState,
        power_iters: usize,
    ) -> Result<f64, StabilityError> {
        let hess = self.gauss_newton_hessian(st)?;
        let np = self.n_params();
        let mut v = vec![1.0 / (np as f64).sqrt(); np];
        let mut lam = 0.0;
        for _ in 0..power_iters.max(1) {
            let hv: Vec<f64> = (0..np)
                .map(|p| (0..np).map(|q| hess[p][q] * v[q]).sum())
                .collect();
            lam = (0..np).map(|p| v[p] * hv[p]).sum();
            let nrm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Ok(0.0);
            }
            v = hv.into_iter().map(|x| x / nrm).collect();
        }
        Ok(lam.max(0.0))
    }

    /// Aperture between the modeled and observed subspaces, reusing the
    /// forward pairs (no extra solves).
    fn aperture_diag(&self, st: &ForwardState) -> Result<f64, StabilityError> {
        let model = subspace_from_pairs(&self.metric, &st.pairs)?;
        Ok(aperture(&model, &self.obs)?.value)
    }
}

/// Projected-Landweber reconstruction from generation data of a synthetic
/// truth. The step is fixed at `step_scale`/L̂ and halved whenever a trial
/// increases the misfit; five consecutive increases abort with the trace.
pub fn reconstruct(
    spec: &DomainSpec,
    truth: &PiecewiseLinearPotential,
    theta0: &[AffineCoeff],
    cfg: &ReconstructConfig,
) -> Result<Reconstruction, StabilityError> {
    let ip = InverseProblem::new(spec, truth, cfg.m)?;
    if theta0.len() != ip.nsub {
        return Err(StabilityError::WrongCoefficientCount {
            expected: ip.nsub,
            got: theta0.len(),
        });
    }
    let truth_norm = truth.coeff_norm();
    let coeff_error = |coeffs: &[AffineCoeff]| -> f64 {
        let d = PiecewiseLinearPotential::new(coeffs.to_vec(), ip.e0)
            .difference(truth)
            .expect("same coefficient count")
            .coeff_norm();
        if truth_norm > 0.0 {
            d / truth_norm
        } else {
            d
        }
    };
    let grad_norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stride = 1 + ip.dim;

    let mut theta = ip.clamp(theta0);
    let mut st = ip.forward(&theta)?;
    let lipschitz = ip.gauss_newton_norm(&st, cfg.power_iters)?;
    let mut step = if lipschitz > 0.0 {
        cfg.step_scale / lipschitz
    } else {
        cfg.step_scale
    };
    let mut grad = ip.gradient(&st)?;
    let mut trace = vec![TraceRow {
        iter: 0,
        misfit: st.misfit,
        aperture: ip.aperture_diag(&st)?,
        coeff_error: coeff_error(&theta),
    }];
    let mut accepted = 0usize;
    let mut halvings = 0usize;
    let mut converged = st.misfit <= cfg.misfit_tol || grad_norm(&grad) <= cfg.grad_tol;

    let mut trials = 0usize;
    while !converged && trials < cfg.max_iters {
        let stepped: Vec<AffineCoeff> = theta
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let p0 = j * stride;
                let mut grad_c = [0.0; 3];
                for d in 0..ip.dim {
                    grad_c[d] = c.grad[d] - step * grad[p0 + 1 + d];
                }
                AffineCoeff {
                    a: c.a - step * grad[p0],
                    grad: grad_c,
                }
            })
            .collect();
        let cand = ip.clamp(&stepped);
        let stc = ip.forward(&cand)?;
        trials += 1;
        if stc.misfit > st.misfit {
            step *= 0.5;
            halvings += 1;
            if halvings >= 5 {
                return Err(StabilityError::Diverged {
                    halvings,
                    accepted,
                    trace,
                });
            }
            continue;
        }
        halvings = 0;
        accepted += 1;
        theta = cand;
        st = stc;
        grad = ip.gradient(&st)?;
        trace.push(TraceRow {
            iter: accepted,
            misfit: st.misfit,
            aperture: ip.aperture_diag(&st)?,
            coeff_error: coeff_error(&theta),
        });
        converged = st.misfit <= cfg.misfit_tol || grad_norm(&grad) <= cfg.grad_tol;
    }

    Ok(Reconstruction {
        theta,
        trace,
        converged,
        accepted,
        step,
        lipschitz,
    })
}
