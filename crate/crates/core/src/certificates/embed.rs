//! Embeddings of stable LTI systems and contracting implicit RNNs into the
//! robust-star set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{cirnn_is_feasible, CertKind, CertifiedBundle};
use crate::error::{Error, Result};
use crate::models::{Activation, CiRnn, Dims, ImplicitParams};

const LYAPUNOV_TOL: f64 = 1e-14;
const LYAPUNOV_MAX_TERMS: usize = 1_000_000;

/// `x⁺ = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSystem {
    #[serde(rename = "A", with = "crate::models::io::rows")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::models::io::rows")]
    pub b: DMatrix<f64>,
    #[serde(rename = "C", with = "crate::models::io::rows")]
    pub c: DMatrix<f64>,
    #[serde(rename = "D", with = "crate::models::io::rows")]
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let p = self.c.nrows();
        if self.a.shape() != (n, n) || self.b.nrows() != n || self.c.ncols() != n || self.d.shape() != (p, m) {
            return Err(Error::dim(
                "LTI system",
                "A n×n, B n×m, C p×n, D p×m",
                format!(
                    "A {:?}, B {:?}, C {:?}, D {:?}",
                    self.a.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.d.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Direct recursion from `x0` (zero when absent).
    pub fn simulate(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> DMatrix<f64> {
        let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(self.a.nrows()));
        let mut y = DMatrix::zeros(u.nrows(), self.c.nrows());
        for t in 0..u.nrows() {
            let ut = u.row(t).transpose();
            y.row_mut(t).copy_from(&(&self.c * &x + &self.d * &ut).transpose());
            x = &self.a * &x + &self.b * &ut;
        }
        y
    }
}

/// Solves `P - Aᵀ P A = I` by summing `Σ (Aᵀ)ᵏ Aᵏ` until the increment's
/// Frobenius norm drops below 1e-14.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::dim("Lyapunov", "square A", format!("{:?}", a.shape())));
    }
    let n = a.nrows();
    let mut p = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    let a_t = a.transpose();
    for _ in 0..LYAPUNOV_MAX_TERMS {
        term = &a_t * &term * a;
        let norm = term.norm();
        if !norm.is_finite() || norm > 1e150 {
            return Err(Error::NotStable("Lyapunov series diverges".into()));
        }
        p += &term;
        if norm < LYAPUNOV_TOL {
            return Ok(super::SymMatrix::new(p)?.into_matrix());
        }
    }
    Err(Error::NotStable(format!("Lyapunov series did not converge in {LYAPUNOV_MAX_TERMS} terms")))
}

/// Writes a stable LTI system as a robust-star model with
/// `E = P = 𝒫`, `F = 𝒫A`, `B2 = 𝒫B`, `B1 = 0`, `C2 = 0`, `Λ = I`, `q = n`.
pub fn embed_lti(sys: &LtiSystem) -> Result<CertifiedBundle> {
    sys.validate()?;
    let lyap = solve_discrete_lyapunov(&sys.a)?;
    let n = sys.a.nrows();
    let dims = Dims { n, q: n, m: sys.b.ncols(), p: sys.c.nrows() };
    let mut theta = ImplicitParams::identity_seed(dims, Activation::Relu);
    theta.e = lyap.clone();
    theta.f = &lyap * &sys.a;
    theta.b2 = &lyap * &sys.b;
    theta.c1 = sys.c.clone();
    theta.d12 = sys.d.clone();
    CertifiedBundle::new(theta, lyap, CertKind::RobustStar, None)
}

pub(super) fn cirnn_as_implicit(c: &CiRnn, pci: &DVector<f64>) -> Result<CertifiedBundle> {
    c.validate()?;
    let Dims { n, m, p, .. } = c.dims();
    if pci.len() != n || pci.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("ci-RNN certificate must be a positive diagonal of length n".into()));
    }
    let lambda = pci.map(|v| 1.0 / v);
    let scale_rows = |x: &DMatrix<f64>| {
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= lambda[i];
        }
        out
    };
    let dims = Dims { n, q: n, m, p };
    let mut theta = ImplicitParams::zeros(dims, c.activation);
    theta.e = c.e.clone();
    theta.b1 = DMatrix::identity(n, n);
    theta.c1 = c.c.clone();
    theta.d12 = c.d.clone();
    theta.c2 = scale_rows(&c.f);
    theta.d22 = scale_rows(&c.b);
    theta.bias = c.bias.component_mul(&lambda);
    theta.lambda = lambda;
    CertifiedBundle::new(theta, DMatrix::from_diagonal(pci), CertKind::RobustStar, None)
}

/// Writes a ci-RNN with contraction certificate `pci` as a robust-star model:
/// `F = 0`, `E = ℰ`, `B1 = I`, `Λ = 𝒫⁻¹`, `C2 = Λℱ`, `D22 = Λℬ`, `b = Λ𝔟`, `P = 𝒫`.
pub fn embed_cirnn(c: &CiRnn, pci: &DVector<f64>) -> Result<CertifiedBundle> {
    let mut probe = c.clone();
    probe.p = pci.clone();
    if !cirnn_is_feasible(&probe)? {
        return Err(Error::Infeasible("ci-RNN does not satisfy the contraction LMI with the given P".into()));
    }
    cirnn_as_implicit(c, pci)
}
