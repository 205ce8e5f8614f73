//! The implicit Robust RNN parameterization and its explicit, simulable form.
//!
//! Implicit form:
//!
//! ```text
//!     E x⁺ = F x + B1 w + B2 u
//!       y  = C1 x + D11 w + D12 u
//!     Λ v  = C2 x + b + D22 u,        w = Φ(v)
//! ```
//!
//! The explicit form is obtained by inverting `E` and the diagonal `Λ`.

use nalgebra::{DMatrix, DVector};

use super::{Activation, Dims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitParams {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    /// Diagonal of Λ.
    pub lambda: DVector<f64>,
    pub c2: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub d22: DMatrix<f64>,
    pub beta: f64,
    pub activation: Activation,
}

impl ImplicitParams {
    pub fn zeros(dims: Dims, activation: Activation) -> Self {
        let Dims { n, q, m, p } = dims;
        ImplicitParams {
            e: DMatrix::zeros(n, n),
            f: DMatrix::zeros(n, n),
            b1: DMatrix::zeros(n, q),
            b2: DMatrix::zeros(n, m),
            c1: DMatrix::zeros(p, n),
            d11: DMatrix::zeros(p, q),
            d12: DMatrix::zeros(p, m),
            lambda: DVector::zeros(q),
            c2: DMatrix::zeros(q, n),
            bias: DVector::zeros(q),
            d22: DMatrix::zeros(q, m),
            beta: activation.slope_bound(),
            activation,
        }
    }

    /// `E = I`, `Λ = I`, every other block zero.
    pub fn identity_seed(dims: Dims, activation: Activation) -> Self {
        let mut t = Self::zeros(dims, activation);
        t.e = DMatrix::identity(dims.n, dims.n);
        t.lambda = DVector::from_element(dims.q, 1.0);
        t
    }

    pub fn dims(&self) -> Dims {
        Dims { n: self.e.nrows(), q: self.lambda.len(), m: self.b2.ncols(), p: self.c1.nrows() }
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { n, q, m, p } = self.dims();
        let checks: [(&str, &DMatrix<f64>, usize, usize); 9] = [
            ("E", &self.e, n, n),
            ("F", &self.f, n, n),
            ("B1", &self.b1, n, q),
            ("B2", &self.b2, n, m),
            ("C1", &self.c1, p, n),
            ("D11", &self.d11, p, q),
            ("D12", &self.d12, p, m),
            ("C2", &self.c2, q, n),
            ("D22", &self.d22, q, m),
        ];
        for (name, mat, r, c) in checks {
            if mat.shape() != (r, c) {
                return Err(Error::dim(name, format!("{r}x{c}"), format!("{}x{}", mat.nrows(), mat.ncols())));
            }
        }
        if self.bias.len() != q {
            return Err(Error::dim("b", q, self.bias.len()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidInput(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Builds the explicit model together with `E⁻¹`.
    pub fn to_explicit_with_inverse(&self) -> Result<(ExplicitModel, DMatrix<f64>)> {
        self.validate()?;
        if let Some(i) = self.lambda.iter().position(|&l| !(l > 0.0)) {
            return Err(Error::InvalidInput(format!("Lambda entry {i} is not positive ({})", self.lambda[i])));
        }
        let e_inv = self.e.clone().lu().try_inverse().ok_or(Error::Singular("E"))?;
        if !e_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("E"));
        }
        let inv_lambda = self.lambda.map(|l| 1.0 / l);
        let scale_rows = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for (i, mut row) in out.row_iter_mut().enumerate() {
                row *= inv_lambda[i];
            }
            out
        };
        let model = ExplicitModel {
            f: &e_inv * &self.f,
            b1: &e_inv * &self.b1,
            b2: &e_inv * &self.b2,
            c1: self.c1.clone(),
            d11: self.d11.clone(),
            d12: self.d12.clone(),
            c2: scale_rows(&self.c2),
            bias: self.bias.component_mul(&inv_lambda),
            d22: scale_rows(&self.d22),
            activation: self.activation,
        };
        Ok((model, e_inv))
    }

    pub fn to_explicit(&self) -> Result<ExplicitModel> {
        Ok(self.to_explicit_with_inverse()?.0)
    }

    /// Simulates by solving the `E` and `Λ` equations at every step rather
    /// than forming the explicit model. Used as an independent check.
    pub fn simulate_implicit(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<super::Trajectory> {
        self.validate()?;
        let Dims { n, p, .. } = self.dims();
        let lu = self.e.clone().lu();
        let steps = u.nrows();
        let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut ys = DMatrix::zeros(steps, p);
        let mut xs = DMatrix::zeros(steps + 1, n);
        xs.row_mut(0).copy_from(&x.transpose());
        for t in 0..steps {
            let ut = u.row(t).transpose();
            let rhs = &self.c2 * &x + &self.bias + &self.d22 * &ut;
            let v = rhs.component_div(&self.lambda);
            let w = self.activation.apply(&v);
            let y = &self.c1 * &x + &self.d11 * &w + &self.d12 * &ut;
            ys.row_mut(t).copy_from(&y.transpose());
            let ex = &self.f * &x + &self.b1 * &w + &self.b2 * &ut;
            x = lu.solve(&ex).ok_or(Error::Singular("E"))?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: t });
            }
            xs.row_mut(t + 1).copy_from(&x.transpose());
        }
        Ok(super::Trajectory { y: ys, x: xs })
    }

    /// Pulls a gradient with respect to the explicit blocks back to the
    /// implicit parameters. `e_inv` must be the inverse used to build `expl`.
    pub fn pullback(&self, expl: &ExplicitModel, e_inv: &DMatrix<f64>, g: &ExplicitModel) -> ImplicitParams {
        let e_inv_t = e_inv.transpose();
        let mut out = ImplicitParams::zeros(self.dims(), self.activation);
        out.beta = 0.0;
        out.f = &e_inv_t * &g.f;
        out.b1 = &e_inv_t * &g.b1;
        out.b2 = &e_inv_t * &g.b2;
        let inner = &g.f * expl.f.transpose() + &g.b1 * expl.b1.transpose() + &g.b2 * expl.b2.transpose();
        out.e = -(&e_inv_t * inner);
        out.c1 = g.c1.clone();
        out.d11 = g.d11.clone();
        out.d12 = g.d12.clone();
        for i in 0..self.lambda.len() {
            let inv = 1.0 / self.lambda[i];
            let mut acc = g.bias[i] * expl.bias[i];
            for j in 0..g.c2.ncols() {
                out.c2[(i, j)] = g.c2[(i, j)] * inv;
                acc += g.c2[(i, j)] * expl.c2[(i, j)];
            }
            for j in 0..g.d22.ncols() {
                out.d22[(i, j)] = g.d22[(i, j)] * inv;
                acc += g.d22[(i, j)] * expl.d22[(i, j)];
            }
            out.bias[i] = g.bias[i] * inv;
            out.lambda[i] = -acc * inv;
        }
        out
    }
}

/// Simulable form of the feedback interconnection.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitModel {
    pub f: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub d22: DMatrix<f64>,
    pub activation: Activation,
}

/// Intermediate values of one forward pass, kept for back-propagation.
#[derive(Debug, Clone)]
pub struct Tape {
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub y: DMatrix<f64>,
}

impl Tape {
    pub fn states(&self) -> DMatrix<f64> {
        let n = self.x.first().map_or(0, |x| x.len());
        DMatrix::from_fn(self.x.len(), n, |t, i| self.x[t][i])
    }
}

impl ExplicitModel {
    pub fn zeros_like(&self) -> Self {
        ExplicitModel {
            f: DMatrix::zeros(self.f.nrows(), self.f.ncols()),
            b1: DMatrix::zeros(self.b1.nrows(), self.b1.ncols()),
            b2: DMatrix::zeros(self.b2.nrows(), self.b2.ncols()),
            c1: DMatrix::zeros(self.c1.nrows(), self.c1.ncols()),
            d11: DMatrix::zeros(self.d11.nrows(), self.d11.ncols()),
            d12: DMatrix::zeros(self.d12.nrows(), self.d12.ncols()),
            c2: DMatrix::zeros(self.c2.nrows(), self.c2.ncols()),
            bias: DVector::zeros(self.bias.len()),
            d22: DMatrix::zeros(self.d22.nrows(), self.d22.ncols()),
            activation: self.activation,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { n: self.f.nrows(), q: self.c2.nrows(), m: self.b2.ncols(), p: self.c1.nrows() }
    }

    pub fn forward(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<Tape> {
        let Dims { n, q, m, p } = self.dims();
        if u.ncols() != m {
            return Err(Error::dim("input sequence", format!("{m} columns"), u.ncols()));
        }
        if let Some(x0) = x0 {
            if x0.len() != n {
                return Err(Error::dim("initial state", n, x0.len()));
            }
        }
        let steps = u.nrows();
        let mut tape = Tape {
            x: Vec::with_capacity(steps + 1),
            v: Vec::with_capacity(steps),
            w: Vec::with_capacity(steps),
            y: DMatrix::zeros(steps, p),
        };
        let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut ut = DVector::zeros(m);
        for t in 0..steps {
            ut.copy_from(&u.row(t).transpose());
            let mut v = &self.c2 * &x + &self.d22 * &ut;
            v += &self.bias;
            let w = if q > 0 { self.activation.apply(&v) } else { v.clone() };
            let y = &self.c1 * &x + &self.d11 * &w + &self.d12 * &ut;
            tape.y.row_mut(t).copy_from(&y.transpose());
            let next = &self.f * &x + &self.b1 * &w + &self.b2 * &ut;
            if !next.iter().all(|s| s.is_finite()) || !y.iter().all(|s| s.is_finite()) {
                return Err(Error::NonFinite { step: t });
            }
            tape.x.push(std::mem::replace(&mut x, next));
            tape.v.push(v);
            tape.w.push(w);
        }
        tape.x.push(x);
        Ok(tape)
    }

    /// Reverse-mode pass through the unrolled recursion.
    ///
    /// `gy` is the gradient of a scalar loss with respect to the outputs.
    /// Returns the parameter gradient (same shape as `self`) and the
    /// gradient with respect to the input sequence.
    pub fn backward(&self, tape: &Tape, u: &DMatrix<f64>, gy: &DMatrix<f64>) -> (ExplicitModel, DMatrix<f64>) {
        let Dims { n, m, .. } = self.dims();
        let steps = u.nrows();
        let mut g = self.zeros_like();
        let mut gu = DMatrix::zeros(steps, m);
        let mut gx_next = DVector::<f64>::zeros(n);
        let f_t = self.f.transpose();
        let b1_t = self.b1.transpose();
        let b2_t = self.b2.transpose();
        let c1_t = self.c1.transpose();
        let c2_t = self.c2.transpose();
        let d11_t = self.d11.transpose();
        let d12_t = self.d12.transpose();
        let d22_t = self.d22.transpose();
        for t in (0..steps).rev() {
            let ut = u.row(t).transpose();
            let gyt = gy.row(t).transpose();
            let x = &tape.x[t];
            let w = &tape.w[t];
            let v = &tape.v[t];
            let gw = &b1_t * &gx_next + &d11_t * &gyt;
            let gv = DVector::from_fn(gw.len(), |i, _| gw[i] * self.activation.derivative(v[i]));
            g.f.ger(1.0, &gx_next, x, 1.0);
            g.b1.ger(1.0, &gx_next, w, 1.0);
            g.b2.ger(1.0, &gx_next, &ut, 1.0);
            g.c1.ger(1.0, &gyt, x, 1.0);
            g.d11.ger(1.0, &gyt, w, 1.0);
            g.d12.ger(1.0, &gyt, &ut, 1.0);
            g.c2.ger(1.0, &gv, x, 1.0);
            g.d22.ger(1.0, &gv, &ut, 1.0);
            g.bias += &gv;
            let gut = &b2_t * &gx_next + &d12_t * &gyt + &d22_t * &gv;
            gu.row_mut(t).copy_from(&gut.transpose());
            gx_next = &f_t * &gx_next + &c1_t * &gyt + &c2_t * &gv;
        }
        (g, gu)
    }
}
