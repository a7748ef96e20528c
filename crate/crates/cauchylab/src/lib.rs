//! Numerical laboratory for studying how stably a piecewise-linear potential in
//! Δu + qu = 0 can be recovered from Cauchy data on an accessible boundary window.
//!
//! The crate builds uniform-grid box domains with an exterior slab attached across
//! the accessible window, discretizes the Schrödinger operator with an impedance
//! condition on the far slab face, constructs discrete Green functions and Cauchy-data
//! subspaces, and drives quantitative experiments: subspace apertures, singular-solution
//! probes near interfaces, three-spheres exponents, stability sweeps, and a projected
//! gradient reconstruction loop.

pub mod cauchy;
pub mod geometry;
pub mod green;
pub mod pde;
pub mod potential;
pub mod probes;
pub mod stability;

pub use geometry::{DomainSpec, GridDomain, NodeClass};
pub use pde::{DiscreteOperator, Impedance};
pub use potential::{AffineCoeff, PiecewiseLinearPotential};

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex64;

pub mod par;
