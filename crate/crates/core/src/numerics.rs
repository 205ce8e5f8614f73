//! Dense symmetric linear algebra: Cholesky factorization, log-determinants,
//! positive-definite solves and feasibility margins.
//!
//! Everything here works on small dense matrices (tens of rows). Strict
//! positive definiteness is always tested through a Cholesky factorization,
//! never through an eigensolver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Margin used to operationalize strict matrix inequalities `M ≻ 0`.
pub const EPSILON: f64 = 1e-8;

/// A dense symmetric matrix. Construction symmetrizes as `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim("SymMatrix", "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
        }
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        Ok(SymMatrix(s))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `M - shift·I`.
    pub fn shifted(&self, shift: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] -= shift;
        }
        SymMatrix(m)
    }

    fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("matrix contains NaN or Inf".into()))
        }
    }
}

/// Outcome of a Cholesky-based positive-definiteness test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdReport {
    pub is_pd: bool,
    /// Smallest squared Cholesky diagonal entry; 0 when the factorization failed.
    pub margin: f64,
    /// `log det M`, only present when `is_pd`.
    pub logdet: Option<f64>,
    /// Index of the first nonpositive pivot when the factorization failed.
    pub failed_pivot: Option<usize>,
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn factor(m: &SymMatrix) -> Result<Self> {
        m.check_finite()?;
        match factor_lower(m.as_matrix()) {
            Ok(l) => Ok(Cholesky { l }),
            Err((pivot, value)) => Err(Error::NotPositiveDefinite { pivot, value }),
        }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `M X = B` by forward and back substitution.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.l.nrows();
        if b.nrows() != n {
            return Err(Error::dim("solve_pd", format!("{n} rows"), b.nrows()));
        }
        let mut x = b.clone();
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let inv = self.solve(&DMatrix::identity(n, n)).expect("identity has matching rows");
        SymMatrix::new(inv).expect("square").into_matrix()
    }
}

fn factor_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err((j, d));
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky-based positive-definiteness test with log-determinant.
///
/// Returns an error only for non-finite input; a failed factorization is
/// reported through `is_pd = false`.
pub fn cholesky_logdet(m: &SymMatrix) -> Result<PdReport> {
    m.check_finite()?;
    Ok(match factor_lower(m.as_matrix()) {
        Ok(l) => {
            let n = l.nrows();
            let margin = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            let logdet = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
            PdReport {
                is_pd: true,
                margin: if n == 0 { f64::INFINITY } else { margin },
                logdet: Some(logdet),
                failed_pivot: None,
            }
        }
        Err((pivot, _)) => PdReport { is_pd: false, margin: 0.0, logdet: None, failed_pivot: Some(pivot) },
    })
}

/// Solves `M X = B` for positive-definite `M`.
pub fn solve_pd(m: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::factor(m)?.solve(b)
}

/// `true` iff `M - eps·I` is strictly positive definite.
pub fn pd_margin(m: &SymMatrix, eps: f64) -> Result<bool> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!("eps must be >= 0, got {eps}")));
    }
    Ok(cholesky_logdet(&m.shifted(eps))?.is_pd)
}

/// Largest shift `s` with `M - s·I ≻ 0`, i.e. the smallest eigenvalue,
/// located by bisection on Cholesky feasibility.
pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    m.check_finite()?;
    let a = m.as_matrix();
    let n = a.nrows();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    // Gershgorin bracket.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
        lo = lo.min(a[(i, i)] - r);
        hi = hi.max(a[(i, i)] + r);
    }
    let scale = hi.abs().max(lo.abs()).max(1e-300);
    lo -= 1e-12 * scale;
    for _ in 0..200 {
        if hi - lo <= 1e-13 * scale {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if factor_lower(m.shifted(mid).as_matrix()).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
