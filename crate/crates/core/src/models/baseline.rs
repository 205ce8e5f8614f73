//! Elman RNN and contracting implicit RNN baselines.
//!
//! Both are special cases of the explicit feedback form, so they simulate and
//! back-propagate through [`ExplicitModel`].

use nalgebra::{DMatrix, DVector};

use super::{Activation, Dims, ExplicitModel};
use crate::error::{Error, Result};

/// `x⁺ = Φ(A x + B u + b)`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Elman {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub activation: Activation,
}

impl Elman {
    pub fn zeros(n: usize, m: usize, p: usize, activation: Activation) -> Self {
        Elman {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
            bias: DVector::zeros(n),
            c: DMatrix::zeros(p, n),
            d: DMatrix::zeros(p, m),
            activation,
        }
    }

    pub fn dims(&self) -> Dims {
        let n = self.a.nrows();
        Dims { n, q: n, m: self.b.ncols(), p: self.c.nrows() }
    }

    pub fn to_explicit(&self) -> ExplicitModel {
        let Dims { n, m, p, .. } = self.dims();
        ExplicitModel {
            f: DMatrix::zeros(n, n),
            b1: DMatrix::identity(n, n),
            b2: DMatrix::zeros(n, m),
            c1: self.c.clone(),
            d11: DMatrix::zeros(p, n),
            d12: self.d.clone(),
            c2: self.a.clone(),
            bias: self.bias.clone(),
            d22: self.b.clone(),
            activation: self.activation,
        }
    }

    pub fn pullback(&self, g: &ExplicitModel) -> Elman {
        Elman {
            a: g.c2.clone(),
            b: g.d22.clone(),
            bias: g.bias.clone(),
            c: g.c1.clone(),
            d: g.d12.clone(),
            activation: self.activation,
        }
    }
}

/// Contracting implicit RNN: `E z⁺ = Φ(F z + B u + b)`, `y = C z + D u`,
/// certified by a diagonal `P` satisfying the contraction LMI.
///
/// With `fixed_e` set, `E = I` is not a decision variable (the s-RNN).
#[derive(Debug, Clone, PartialEq)]
pub struct CiRnn {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Diagonal of the contraction certificate.
    pub p: DVector<f64>,
    pub activation: Activation,
    pub fixed_e: bool,
}

impl CiRnn {
    pub fn dims(&self) -> Dims {
        let n = self.f.nrows();
        Dims { n, q: n, m: self.b.ncols(), p: self.c.nrows() }
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { n, m, p, .. } = self.dims();
        let shapes = [
            ("E", self.e.shape(), (n, n)),
            ("F", self.f.shape(), (n, n)),
            ("B", self.b.shape(), (n, m)),
            ("C", self.c.shape(), (p, n)),
            ("D", self.d.shape(), (p, m)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::dim(name, format!("{}x{}", want.0, want.1), format!("{}x{}", got.0, got.1)));
            }
        }
        if self.bias.len() != n || self.p.len() != n {
            return Err(Error::dim("ci-RNN bias/P", n, self.bias.len().max(self.p.len())));
        }
        Ok(())
    }

    pub fn to_explicit_with_inverse(&self) -> Result<(ExplicitModel, DMatrix<f64>)> {
        self.validate()?;
        let Dims { n, m, p, .. } = self.dims();
        let e_inv = self.e.clone().lu().try_inverse().ok_or(Error::Singular("E"))?;
        let model = ExplicitModel {
            f: DMatrix::zeros(n, n),
            b1: e_inv.clone(),
            b2: DMatrix::zeros(n, m),
            c1: self.c.clone(),
            d11: DMatrix::zeros(p, n),
            d12: self.d.clone(),
            c2: self.f.clone(),
            bias: self.bias.clone(),
            d22: self.b.clone(),
            activation: self.activation,
        };
        Ok((model, e_inv))
    }

    pub fn pullback(&self, e_inv: &DMatrix<f64>, g: &ExplicitModel) -> CiRnn {
        let e_inv_t = e_inv.transpose();
        let ge =
            if self.fixed_e { DMatrix::zeros(self.e.nrows(), self.e.ncols()) } else { -(&e_inv_t * &g.b1 * &e_inv_t) };
        CiRnn {
            e: ge,
            f: g.c2.clone(),
            b: g.d22.clone(),
            bias: g.bias.clone(),
            c: g.c1.clone(),
            d: g.d12.clone(),
            p: DVector::zeros(self.p.len()),
            activation: self.activation,
            fixed_e: self.fixed_e,
        }
    }
}
