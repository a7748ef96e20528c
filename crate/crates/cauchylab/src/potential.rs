//! Piecewise-linear potentials: one affine function a_j + A_j·x per subdomain,
//! an a-priori sup bound E_0, and the extension to the augmented domain that sets
//! the potential to the constant 1 on the exterior slab.
//!
//! Norms are exact: the sup norm of a piecewise-affine function is attained at a
//! subdomain corner, so it is computed by corner enumeration rather than grid
//! sampling, and is therefore independent of the spacing h.

use crate::geometry::{GridDomain, SUB_NONE, SUB_SLAB};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients of one affine piece q_j(x) = a + grad · x.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AffineCoeff {
    /// Constant term a_j.
    pub a: f64,
    /// Linear term A_j (unused axes must be zero).
    pub grad: [f64; 3],
}

impl AffineCoeff {
    /// Zero coefficients.
    pub const ZERO: AffineCoeff = AffineCoeff {
        a: 0.0,
        grad: [0.0; 3],
    };

    /// Evaluates the affine function at a point.
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        self.a + self.grad[0] * x[0] + self.grad[1] * x[1] + self.grad[2] * x[2]
    }

    fn sub(&self, other: &AffineCoeff) -> AffineCoeff {
        AffineCoeff {
            a: self.a - other.a,
            grad: [
                self.grad[0] - other.grad[0],
                self.grad[1] - other.grad[1],
                self.grad[2] - other.grad[2],
            ],
        }
    }
}

/// Errors from potential evaluation and validation.
#[derive(Debug, Error)]
pub enum PotentialError {
    /// Coefficient count does not match the domain's subdomain count.
    #[error("potential has {got} coefficient sets, domain has {expected} subdomains")]
    WrongCount {
        /// Subdomains in the domain.
        expected: usize,
        /// Coefficient sets supplied.
        got: usize,
    },
    /// Evaluation requested at a node outside the domain.
    #[error("node {0} is exterior")]
    Exterior(usize),
    /// Evaluation on the slab of a potential that was never extended.
    #[error("potential not extended to the augmented domain")]
    NotExtended,
    /// The a-priori bound is violated.
    #[error("|q| = {value:.6} at corner {corner:?} of subdomain {subdomain} exceeds E0 = {e0}")]
    BoundViolated {
        /// Offending subdomain label.
        subdomain: u8,
        /// Corner where the affine maximum is attained.
        corner: [f64; 3],
        /// Attained absolute value.
        value: f64,
        /// The bound.
        e0: f64,
    },
}

/// A piecewise-linear potential over the subdomains of a fixture.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PiecewiseLinearPotential {
    /// `coeffs[j]` belongs to subdomain j+1.
    pub coeffs: Vec<AffineCoeff>,
    /// A-priori bound E_0 on the sup norm.
    pub e0_bound: f64,
    /// Value on the exterior slab once extended (the constant 1 by construction).
    #[serde(default)]
    pub slab: Option<AffineCoeff>,
}

impl PiecewiseLinearPotential {
    /// Builds a potential from per-subdomain coefficients.
    pub fn new(coeffs: Vec<AffineCoeff>, e0_bound: f64) -> Self {
        PiecewiseLinearPotential {
            coeffs,
            e0_bound,
            slab: None,
        }
    }

    /// The zero potential for `n` subdomains.
    pub fn zero(n: usize, e0_bound: f64) -> Self {
        Self::new(vec![AffineCoeff::ZERO; n], e0_bound)
    }

    /// Constant potential `value` on all subdomains.
    pub fn constant(n: usize, value: f64, e0_bound: f64) -> Self {
        Self::new(
            vec![
                AffineCoeff {
                    a: value,
                    grad: [0.0; 3],
                };
                n
            ],
            e0_bound,
        )
    }

    fn check_count(&self, dom: &GridDomain) -> Result<(), PotentialError> {
        if self.coeffs.len() != dom.n_subdomains() {
            return Err(PotentialError::WrongCount {
                expected: dom.n_subdomains(),
                got: self.coeffs.len(),
            });
        }
        Ok(())
    }

    /// Evaluates at a lattice node. Interface nodes use the lower subdomain index;
    /// slab nodes require the extended potential.
    pub fn eval(&self, dom: &GridDomain, node: usize) -> Result<f64, PotentialError> {
        self.check_count(dom)?;
        let label = dom.subdomain[node];
        if label == SUB_NONE {
            return Err(PotentialError::Exterior(node));
        }
        if label == SUB_SLAB && dom.augmented {
            let c = self.slab.ok_or(PotentialError::NotExtended)?;
            return Ok(c.eval(&dom.coords(node)));
        }
        Ok(self.coeffs[label as usize - 1].eval(&dom.coords(node)))
    }

    /// Evaluates on every active node, in active order.
    pub fn values_on(&self, dom: &GridDomain) -> Result<Vec<f64>, PotentialError> {
        let mut out = Vec::with_capacity(dom.n_active());
        for &id in &dom.active {
            out.push(self.eval(dom, id as usize)?);
        }
        Ok(out)
    }

    /// max_j (|a_j| + |A_j|) with the Euclidean gradient norm; slab excluded.
    pub fn coeff_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|c| {
                let g = (c.grad[0] * c.grad[0] + c.grad[1] * c.grad[1] + c.grad[2] * c.grad[2])
                    .sqrt();
                c.a.abs() + g
            })
            .fold(0.0, f64::max)
    }

    /// Exact sup norm over Ω by corner enumeration of each subdomain box.
    pub fn sup_norm(&self, dom: &GridDomain) -> Result<f64, PotentialError> {
        self.check_count(dom)?;
        let mut best = 0.0f64;
        for (j, b) in dom.spec.subdomains.iter().enumerate() {
            let c = &self.coeffs[j];
            for corner in box_corners(b, dom.dim) {
                best = best.max(c.eval(&corner).abs());
            }
        }
        Ok(best)
    }

    /// Checks the a-priori bound sup|q| ≤ E_0, reporting the first offending corner.
    pub fn validate_bound(&self, dom: &GridDomain) -> Result<(), PotentialError> {
        self.check_count(dom)?;
        for (j, b) in dom.spec.subdomains.iter().enumerate() {
            let c = &self.coeffs[j];
            for corner in box_corners(b, dom.dim) {
                let v = c.eval(&corner).abs();
                if v > self.e0_bound * (1.0 + 1e-12) {
                    return Err(PotentialError::BoundViolated {
                        subdomain: (j + 1) as u8,
                        corner,
                        value: v,
                        e0: self.e0_bound,
                    });
                }
            }
        }
        Ok(())
    }

    /// Extension to the augmented domain: identical on Ω, the constant 1 on the slab.
    pub fn extend_to_omega0(&self, dom: &GridDomain) -> Result<Self, PotentialError> {
        if !dom.augmented {
            return Err(PotentialError::NotExtended);
        }
        self.check_count(dom)?;
        let mut q = self.clone();
        q.slab = Some(AffineCoeff {
            a: 1.0,
            grad: [0.0; 3],
        });
        Ok(q)
    }

    /// Coefficient-wise difference; extended slabs cancel exactly.
    pub fn difference(&self, other: &Self) -> Result<Self, PotentialError> {
        if self.coeffs.len() != other.coeffs.len() {
            return Err(PotentialError::WrongCount {
                expected: self.coeffs.len(),
                got: other.coeffs.len(),
            });
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.sub(b))
            .collect();
        let slab = match (self.slab, other.slab) {
            (Some(a), Some(b)) => Some(a.sub(&b)),
            _ => None,
        };
        Ok(PiecewiseLinearPotential {
            coeffs,
            e0_bound: self.e0_bound + other.e0_bound,
            slab,
        })
    }
}

/// The 2^dim corners of a box spec.
fn box_corners(b: &[[f64; 2]], dim: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(1 << dim);
    for mask in 0..(1u32 << dim) {
        let mut x = [0.0f64; 3];
        for (a, r) in b.iter().enumerate().take(dim) {
            x[a] = r[((mask >> a) & 1) as usize];
        }
        out.push(x);
    }
    out
}
