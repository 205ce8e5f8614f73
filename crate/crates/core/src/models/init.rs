use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Activation, CiRnn, Dims, Elman, ImplicitParams, Lstm, Model, ModelKind};
use crate::certificates::{self, CertKind, CertifiedBundle};
use crate::error::{Error, Result};

const MAX_HALVINGS: usize = 200;

struct Gaussian {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Gaussian {
    fn new(seed: u64, std: f64) -> Self {
        Gaussian { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, std).expect("finite std") }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.normal.sample(&mut self.rng))
    }
}

/// Draws a strictly feasible starting point for `kind`, deterministic in `seed`.
///
/// Constrained kinds start from `E = P = I`, `Λ = I` with Gaussian blocks of
/// standard deviation `1/√n`, then halve the blocks entering the LMI until
/// it holds with margin [`crate::numerics::EPSILON`]. Baselines are plain
/// Gaussian draws.
pub fn init_feasible(kind: ModelKind, dims: Dims, gamma: Option<f64>, seed: u64) -> Result<Model> {
    let Dims { n, q, m, p } = dims;
    if n == 0 || q == 0 || m == 0 || p == 0 {
        return Err(Error::InvalidInput(format!("all dimensions must be >= 1, got {dims:?}")));
    }
    let std = 1.0 / (n as f64).sqrt();
    let mut g = Gaussian::new(seed, std);
    match kind {
        ModelKind::RobustStar | ModelKind::RobustGamma => {
            let gamma = match (kind, gamma) {
                (ModelKind::RobustGamma, Some(gm)) if gm > 0.0 => Some(gm),
                (ModelKind::RobustGamma, other) => {
                    return Err(Error::InvalidInput(format!("robust-gamma needs gamma > 0, got {other:?}")))
                }
                _ => None,
            };
            let mut theta = ImplicitParams::identity_seed(dims, Activation::Relu);
            theta.f = g.matrix(n, n);
            theta.b1 = g.matrix(n, q);
            theta.b2 = g.matrix(n, m);
            theta.c2 = g.matrix(q, n);
            theta.d22 = g.matrix(q, m);
            theta.c1 = g.matrix(p, n);
            theta.d11 = g.matrix(p, q);
            theta.d12 = g.matrix(p, m);
            let cert_kind = if gamma.is_some() { CertKind::RobustGamma } else { CertKind::RobustStar };
            let mut bundle = CertifiedBundle::new(theta, DMatrix::identity(n, n), cert_kind, gamma)?;
            for _ in 0..MAX_HALVINGS {
                if certificates::is_feasible(&bundle)? {
                    return Ok(Model::Robust(bundle));
                }
                let t = &mut bundle.theta;
                t.f *= 0.5;
                t.b1 *= 0.5;
                t.c2 *= 0.5;
                if gamma.is_some() {
                    t.b2 *= 0.5;
                    t.c1 *= 0.5;
                    t.d11 *= 0.5;
                    t.d12 *= 0.5;
                    t.d22 *= 0.5;
                }
            }
            Err(Error::Infeasible(format!("initialization did not reach feasibility after {MAX_HALVINGS} halvings")))
        }
        ModelKind::Cirnn | ModelKind::Srnn => {
            let mut c = CiRnn {
                e: DMatrix::identity(n, n),
                f: g.matrix(n, n),
                b: g.matrix(n, m),
                bias: DVector::zeros(n),
                c: g.matrix(p, n),
                d: g.matrix(p, m),
                p: DVector::from_element(n, 1.0),
                activation: Activation::Relu,
                fixed_e: kind == ModelKind::Srnn,
            };
            for _ in 0..MAX_HALVINGS {
                if certificates::cirnn_is_feasible(&c)? {
                    return Ok(Model::CiRnn(c));
                }
                c.f *= 0.5;
            }
            Err(Error::Infeasible("ci-RNN initialization did not reach feasibility".into()))
        }
        ModelKind::Rnn => Ok(Model::Elman(Elman {
            a: g.matrix(n, n),
            b: g.matrix(n, m),
            bias: DVector::zeros(n),
            c: g.matrix(p, n),
            d: g.matrix(p, m),
            activation: Activation::Relu,
        })),
        ModelKind::Lstm => {
            let mut l = Lstm::zeros(n, m, p);
            for k in 0..super::lstm::GATES {
                l.w_x[k] = g.matrix(n, n);
                l.w_u[k] = g.matrix(n, m);
            }
            l.c = g.matrix(p, n);
            Ok(Model::Lstm(l))
        }
    }
}
