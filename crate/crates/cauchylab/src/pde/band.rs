//! Banded complex-symmetric linear algebra: storage, symmetric matvec, and an
//! in-place LDLᵀ factorization without pivoting.
//!
//! The discrete operators assembled in this crate are complex symmetric (never
//! Hermitian: the impedance condition puts −iτ/h on boundary diagonals) with a
//! negative-definite real part. That makes the unpivoted factorization stable here:
//! every Schur complement inherits a definite real part, so pivots stay away from
//! zero. A residual check after iterative refinement guards the claim at runtime.
//!
//! Storage is lower-band, column-major: entry (j + r, j) of the matrix lives at
//! `a[j * (kl + 1) + r]` for 0 ≤ r ≤ kl. The upper triangle is implied by symmetry.

use crate::C64;
use thiserror::Error;

/// Errors from factorization and solves.
#[derive(Debug, Error)]
pub enum BandError {
    /// A pivot collapsed; the matrix is (numerically) singular.
    #[error("pivot breakdown at column {col}: |d| = {magnitude:.3e}")]
    PivotBreakdown {
        /// Column index of the failing pivot.
        col: usize,
        /// Magnitude of the failing pivot.
        magnitude: f64,
    },
    /// Attempt to write an entry outside the band.
    #[error("entry ({i}, {j}) outside bandwidth {kl}")]
    OutOfBand {
        /// Row index.
        i: usize,
        /// Column index.
        j: usize,
        /// Bandwidth.
        kl: usize,
    },
}

/// Complex-symmetric banded matrix, lower triangle stored.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    /// Matrix order.
    pub n: usize,
    /// Half-bandwidth (sub-diagonal count).
    pub kl: usize,
    a: Vec<C64>,
}

impl BandMatrix {
    /// All-zero matrix of order `n` with half-bandwidth `kl`.
    pub fn zeros(n: usize, kl: usize) -> Self {
        BandMatrix {
            n,
            kl,
            a: vec![C64::new(0.0, 0.0); n * (kl + 1)],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Result<usize, BandError> {
        debug_assert!(i >= j);
        let r = i - j;
        if r > self.kl || i >= self.n {
            return Err(BandError::OutOfBand { i, j, kl: self.kl });
        }
        Ok(j * (self.kl + 1) + r)
    }

    /// Adds `v` to entry (i, j); only the lower triangle (i ≥ j) is addressable.
    pub fn add(&mut self, i: usize, j: usize, v: C64) -> Result<(), BandError> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let s = self.slot(i, j)?;
        self.a[s] += v;
        Ok(())
    }

    /// Entry (i, j) honoring symmetry.
    pub fn get(&self, i: usize, j: usize) -> C64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.kl {
            return C64::new(0.0, 0.0);
        }
        self.a[j * (self.kl + 1) + (i - j)]
    }

    /// Symmetric matrix-vector product.
    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.n);
        let ld = self.kl + 1;
        let mut y = vec![C64::new(0.0, 0.0); self.n];
        for j in 0..self.n {
            let m = self.kl.min(self.n - 1 - j);
            let col = &self.a[j * ld..j * ld + m + 1];
            y[j] += col[0] * x[j];
            for r in 1..=m {
                let v = col[r];
                y[j + r] += v * x[j];
                y[j] += v * x[j + r];
            }
        }
        y
    }

    /// Largest absolute row sum (an upper bound for the spectral norm).
    pub fn norm_inf(&self) -> f64 {
        let ld = self.kl + 1;
        let mut rows = vec![0.0f64; self.n];
        for j in 0..self.n {
            let m = self.kl.min(self.n - 1 - j);
            rows[j] += self.a[j * ld].norm();
            for r in 1..=m {
                let v = self.a[j * ld + r].norm();
                rows[j + r] += v;
                rows[j] += v;
            }
        }
        rows.into_iter().fold(0.0, f64::max)
    }

    /// Unpivoted LDLᵀ factorization (plain transpose, no conjugation).
    pub fn factor(&self) -> Result<BandFactor, BandError> {
        let n = self.n;
        let kl = self.kl;
        let ld = kl + 1;
        let mut f = self.a.clone();
        // Breakdown threshold: pivots of the operators built here are O(1/h²);
        // anything this small signals a genuinely singular system.
        let tiny = 1e-300f64;
        for j in 0..n {
            let d = f[j * ld];
            let mag = d.norm();
            if !(mag > tiny) || !mag.is_finite() {
                return Err(BandError::PivotBreakdown {
                    col: j,
                    magnitude: mag,
                });
            }
            let m = kl.min(n - 1 - j);
            let inv = C64::new(1.0, 0.0) / d;
            for r in 1..=m {
                f[j * ld + r] *= inv;
            }
            // Rank-one trailing update: column j touches columns j+1 ..= j+m, and
            // each target column is written by no other source column this step.
            for c in 1..=m {
                let scale = f[j * ld + c] * d;
                if scale.norm_sqr() == 0.0 {
                    continue;
                }
                let base = (j + c) * ld;
                for s in 0..=(m - c) {
                    let l = f[j * ld + c + s];
                    f[base + s] -= l * scale;
                }
            }
        }
        Ok(BandFactor { n, kl, f })
    }
}

/// Factored form A = L·D·Lᵀ with unit lower-triangular banded L.
#[derive(Clone, Debug)]
pub struct BandFactor {
    n: usize,
    kl: usize,
    f: Vec<C64>,
}

impl BandFactor {
    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [C64]) {
        assert_eq!(b.len(), self.n);
        let ld = self.kl + 1;
        // Forward: L z = b.
        for j in 0..self.n {
            let zj = b[j];
            if zj.norm_sqr() == 0.0 {
                continue;
            }
            let m = self.kl.min(self.n - 1 - j);
            for r in 1..=m {
                b[j + r] -= self.f[j * ld + r] * zj;
            }
        }
        // Diagonal: D y = z.
        for j in 0..self.n {
            b[j] /= self.f[j * ld];
        }
        // Backward: Lᵀ x = y.
        for j in (0..self.n).rev() {
            let m = self.kl.min(self.n - 1 - j);
            let mut acc = b[j];
            for r in 1..=m {
                acc -= self.f[j * ld + r] * b[j + r];
            }
            b[j] = acc;
        }
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Euclidean norm of a complex vector.
pub fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
