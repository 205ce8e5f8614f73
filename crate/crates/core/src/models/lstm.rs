//! Single-layer LSTM baseline with a linear output map.
//!
//! Gate order everywhere is input, forget, candidate, output. Gates use the
//! sigmoid; the candidate and the cell read-out use `tanh`. The step from
//! `x_t` to `x_{t+1}` consumes `u_t`, and `y_t = C x_{t+1} + D u_t`.

use nalgebra::{DMatrix, DVector};

use super::activation::sigmoid;
use crate::error::{Error, Result};

pub const GATES: usize = 4;
const CANDIDATE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// Hidden-to-gate weights, `n×n` each.
    pub w_x: [DMatrix<f64>; GATES],
    /// Input-to-gate weights, `n×m` each.
    pub w_u: [DMatrix<f64>; GATES],
    pub bias: [DVector<f64>; GATES],
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// When false, `D` stays at zero and is not trained.
    pub feedthrough: bool,
}

#[derive(Debug, Clone)]
pub struct LstmTape {
    pub h: Vec<DVector<f64>>,
    pub cell: Vec<DVector<f64>>,
    gates: Vec<[DVector<f64>; GATES]>,
    pub y: DMatrix<f64>,
}

impl LstmTape {
    pub fn states(&self) -> DMatrix<f64> {
        let n = self.h.first().map_or(0, |x| x.len());
        DMatrix::from_fn(self.h.len(), n, |t, i| self.h[t][i])
    }
}

impl Lstm {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        Lstm {
            w_x: std::array::from_fn(|_| DMatrix::zeros(n, n)),
            w_u: std::array::from_fn(|_| DMatrix::zeros(n, m)),
            bias: std::array::from_fn(|_| DVector::zeros(n)),
            c: DMatrix::zeros(p, n),
            d: DMatrix::zeros(p, m),
            feedthrough: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.n(), self.d.ncols(), self.c.nrows());
        z.feedthrough = self.feedthrough;
        z
    }

    pub fn n(&self) -> usize {
        self.c.ncols()
    }

    pub fn forward(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<LstmTape> {
        let n = self.n();
        let m = self.d.ncols();
        if u.ncols() != m {
            return Err(Error::dim("input sequence", format!("{m} columns"), u.ncols()));
        }
        let steps = u.nrows();
        let mut h = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
        if h.len() != n {
            return Err(Error::dim("initial state", n, h.len()));
        }
        let mut c = DVector::zeros(n);
        let mut tape = LstmTape {
            h: Vec::with_capacity(steps + 1),
            cell: Vec::with_capacity(steps + 1),
            gates: Vec::with_capacity(steps),
            y: DMatrix::zeros(steps, self.c.nrows()),
        };
        tape.h.push(h.clone());
        tape.cell.push(c.clone());
        for t in 0..steps {
            let ut = u.row(t).transpose();
            let gates: [DVector<f64>; GATES] = std::array::from_fn(|k| {
                let a = &self.w_x[k] * &h + &self.w_u[k] * &ut + &self.bias[k];
                if k == CANDIDATE {
                    a.map(f64::tanh)
                } else {
                    a.map(sigmoid)
                }
            });
            let [i, f, g, o] = &gates;
            c = f.component_mul(&c) + i.component_mul(g);
            h = o.component_mul(&c.map(f64::tanh));
            let y = &self.c * &h + &self.d * &ut;
            if !h.iter().all(|v| v.is_finite()) || !c.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step: t });
            }
            tape.y.row_mut(t).copy_from(&y.transpose());
            tape.h.push(h.clone());
            tape.cell.push(c.clone());
            tape.gates.push(gates);
        }
        Ok(tape)
    }

    /// Back-propagation through time. Returns the parameter gradient and
    /// the gradient with respect to the inputs.
    pub fn backward(&self, tape: &LstmTape, u: &DMatrix<f64>, gy: &DMatrix<f64>) -> (Lstm, DMatrix<f64>) {
        let n = self.n();
        let steps = u.nrows();
        let mut g = self.zeros_like();
        let mut gu = DMatrix::zeros(steps, u.ncols());
        let mut gh = DVector::<f64>::zeros(n);
        let mut gc = DVector::<f64>::zeros(n);
        let c_t = self.c.transpose();
        let d_t = self.d.transpose();
        for t in (0..steps).rev() {
            let ut = u.row(t).transpose();
            let gyt = gy.row(t).transpose();
            let h_prev = &tape.h[t];
            let c_prev = &tape.cell[t];
            let h_new = &tape.h[t + 1];
            let c_new = &tape.cell[t + 1];
            let [i, f, gg, o] = &tape.gates[t];

            g.c.ger(1.0, &gyt, h_new, 1.0);
            if self.feedthrough {
                g.d.ger(1.0, &gyt, &ut, 1.0);
            }
            gh += &c_t * &gyt;
            let tc = c_new.map(f64::tanh);
            let go = gh.component_mul(&tc);
            gc += gh.component_mul(o).component_mul(&tc.map(|v| 1.0 - v * v));
            let gf = gc.component_mul(c_prev);
            let gi = gc.component_mul(gg);
            let gcand = gc.component_mul(i);
            let pre = [
                gi.component_mul(&i.map(|s| s * (1.0 - s))),
                gf.component_mul(&f.map(|s| s * (1.0 - s))),
                gcand.component_mul(&gg.map(|s| 1.0 - s * s)),
                go.component_mul(&o.map(|s| s * (1.0 - s))),
            ];
            let mut gh_prev = DVector::zeros(n);
            let mut gut = &d_t * &gyt;
            for (k, pk) in pre.iter().enumerate() {
                g.w_x[k].ger(1.0, pk, h_prev, 1.0);
                g.w_u[k].ger(1.0, pk, &ut, 1.0);
                g.bias[k] += pk;
                gh_prev += self.w_x[k].tr_mul(pk);
                gut += self.w_u[k].tr_mul(pk);
            }
            gu.row_mut(t).copy_from(&gut.transpose());
            gc = gc.component_mul(f);
            gh = gh_prev;
        }
        (g, gu)
    }
}
