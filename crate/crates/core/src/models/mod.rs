//! Model zoo behind one simulation and back-propagation interface.

pub mod activation;
pub mod baseline;
pub mod implicit;
pub mod init;
pub mod io;
pub mod lstm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use activation::Activation;
pub use baseline::{CiRnn, Elman};
pub use implicit::{ExplicitModel, ImplicitParams, Tape};
pub use init::init_feasible;
pub use lstm::Lstm;

use crate::certificates::{CertKind, CertifiedBundle};
use crate::error::{Error, Result};

/// State, nonlinearity-channel, input and output dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub q: usize,
    pub m: usize,
    pub p: usize,
}

/// Metadata carried with every sequence pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchMeta {
    pub seed: u64,
    pub sigma_u: f64,
    pub tau: f64,
}

/// Paired input/output sequences; rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub dt: f64,
    pub meta: BatchMeta,
}

impl SeqBatch {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, dt: f64, meta: BatchMeta) -> Result<Self> {
        if u.nrows() == 0 || u.nrows() != y.nrows() {
            return Err(Error::dim("SeqBatch", format!("T >= 1 and equal lengths (u has {})", u.nrows()), y.nrows()));
        }
        Ok(SeqBatch { u, y, dt, meta })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }
}

/// Outputs `y` (T×p) and states `x` ((T+1)×n) of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Rnn,
    Lstm,
    Srnn,
    Cirnn,
    RobustStar,
    RobustGamma,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
            ModelKind::Srnn => "srnn",
            ModelKind::Cirnn => "cirnn",
            ModelKind::RobustStar => "robust-star",
            ModelKind::RobustGamma => "robust-gamma",
        }
    }

    pub fn is_constrained(self) -> bool {
        !matches!(self, ModelKind::Rnn | ModelKind::Lstm)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rnn" => ModelKind::Rnn,
            "lstm" => ModelKind::Lstm,
            "srnn" => ModelKind::Srnn,
            "cirnn" => ModelKind::Cirnn,
            "robust-star" => ModelKind::RobustStar,
            "robust-gamma" => ModelKind::RobustGamma,
            other => return Err(Error::InvalidInput(format!("unknown model kind '{other}'"))),
        })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every trainable model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Robust(CertifiedBundle),
    Elman(Elman),
    CiRnn(CiRnn),
    Lstm(Lstm),
}

/// Forward-pass record needed by [`Model::backprop`].
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ModelTape {
    Explicit { model: ExplicitModel, e_inv: Option<DMatrix<f64>>, tape: Tape },
    Lstm(lstm::LstmTape),
}

impl ModelTape {
    pub fn y(&self) -> &DMatrix<f64> {
        match self {
            ModelTape::Explicit { tape, .. } => &tape.y,
            ModelTape::Lstm(t) => &t.y,
        }
    }

    pub fn states(&self) -> DMatrix<f64> {
        match self {
            ModelTape::Explicit { tape, .. } => tape.states(),
            ModelTape::Lstm(t) => t.states(),
        }
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Robust(b) => match b.kind {
                CertKind::RobustGamma => ModelKind::RobustGamma,
                CertKind::RobustStar | CertKind::CiRnnContraction => ModelKind::RobustStar,
            },
            Model::Elman(_) => ModelKind::Rnn,
            Model::CiRnn(c) if c.fixed_e => ModelKind::Srnn,
            Model::CiRnn(_) => ModelKind::Cirnn,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Model::Robust(b) => b.theta.dims(),
            Model::Elman(e) => e.dims(),
            Model::CiRnn(c) => c.dims(),
            Model::Lstm(l) => Dims { n: l.n(), q: l.n(), m: l.d.ncols(), p: l.c.nrows() },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.dims().n
    }

    pub fn record(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<ModelTape> {
        let (model, e_inv) = match self {
            Model::Robust(b) => {
                let (m, inv) = b.theta.to_explicit_with_inverse()?;
                (m, Some(inv))
            }
            Model::Elman(e) => (e.to_explicit(), None),
            Model::CiRnn(c) => {
                let (m, inv) = c.to_explicit_with_inverse()?;
                (m, Some(inv))
            }
            Model::Lstm(l) => return Ok(ModelTape::Lstm(l.forward(u, x0)?)),
        };
        let tape = model.forward(u, x0)?;
        Ok(ModelTape::Explicit { model, e_inv, tape })
    }

    pub fn simulate(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<Trajectory> {
        let rec = self.record(u, x0)?;
        let x = rec.states();
        Ok(Trajectory { y: rec.y().clone(), x })
    }

    /// Gradient of a scalar function of the outputs, given `gy = ∂ℓ/∂y`.
    /// The parameter gradient is returned in the shape of `self`.
    pub fn backprop(&self, rec: &ModelTape, u: &DMatrix<f64>, gy: &DMatrix<f64>) -> (Model, DMatrix<f64>) {
        match (self, rec) {
            (Model::Lstm(l), ModelTape::Lstm(t)) => {
                let (g, gu) = l.backward(t, u, gy);
                (Model::Lstm(g), gu)
            }
            (_, ModelTape::Explicit { model, e_inv, tape }) => {
                let (ge, gu) = model.backward(tape, u, gy);
                let g = match self {
                    Model::Robust(b) => {
                        let gt = b.theta.pullback(model, e_inv.as_ref().expect("robust tape has E⁻¹"), &ge);
                        let n = b.p.nrows();
                        Model::Robust(CertifiedBundle {
                            theta: gt,
                            p: DMatrix::zeros(n, n),
                            kind: b.kind,
                            gamma: b.gamma,
                        })
                    }
                    Model::Elman(e) => Model::Elman(e.pullback(&ge)),
                    Model::CiRnn(c) => Model::CiRnn(c.pullback(e_inv.as_ref().expect("ci-RNN tape has E⁻¹"), &ge)),
                    Model::Lstm(_) => unreachable!("LSTM never records an explicit tape"),
                };
                (g, gu)
            }
            _ => panic!("tape does not belong to this model"),
        }
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Model::Robust(b) => {
                let t = &b.theta;
                vec![
                    t.e.as_slice(),
                    t.f.as_slice(),
                    t.b1.as_slice(),
                    t.b2.as_slice(),
                    t.c1.as_slice(),
                    t.d11.as_slice(),
                    t.d12.as_slice(),
                    t.lambda.as_slice(),
                    t.c2.as_slice(),
                    t.bias.as_slice(),
                    t.d22.as_slice(),
                    b.p.as_slice(),
                ]
            }
            Model::Elman(e) => vec![e.a.as_slice(), e.b.as_slice(), e.bias.as_slice(), e.c.as_slice(), e.d.as_slice()],
            Model::CiRnn(c) => {
                let mut v = Vec::with_capacity(7);
                if !c.fixed_e {
                    v.push(c.e.as_slice());
                }
                v.extend([
                    c.f.as_slice(),
                    c.b.as_slice(),
                    c.bias.as_slice(),
                    c.c.as_slice(),
                    c.d.as_slice(),
                    c.p.as_slice(),
                ]);
                v
            }
            Model::Lstm(l) => {
                let mut v: Vec<&[f64]> = Vec::with_capacity(14);
                v.extend(l.w_x.iter().map(|m| m.as_slice()));
                v.extend(l.w_u.iter().map(|m| m.as_slice()));
                v.extend(l.bias.iter().map(|m| m.as_slice()));
                v.push(l.c.as_slice());
                if l.feedthrough {
                    v.push(l.d.as_slice());
                }
                v
            }
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Robust(b) => {
                let t = &mut b.theta;
                vec![
                    t.e.as_mut_slice(),
                    t.f.as_mut_slice(),
                    t.b1.as_mut_slice(),
                    t.b2.as_mut_slice(),
                    t.c1.as_mut_slice(),
                    t.d11.as_mut_slice(),
                    t.d12.as_mut_slice(),
                    t.lambda.as_mut_slice(),
                    t.c2.as_mut_slice(),
                    t.bias.as_mut_slice(),
                    t.d22.as_mut_slice(),
                    b.p.as_mut_slice(),
                ]
            }
            Model::Elman(e) => vec![
                e.a.as_mut_slice(),
                e.b.as_mut_slice(),
                e.bias.as_mut_slice(),
                e.c.as_mut_slice(),
                e.d.as_mut_slice(),
            ],
            Model::CiRnn(c) => {
                let mut v = Vec::with_capacity(7);
                if !c.fixed_e {
                    v.push(c.e.as_mut_slice());
                }
                v.extend([
                    c.f.as_mut_slice(),
                    c.b.as_mut_slice(),
                    c.bias.as_mut_slice(),
                    c.c.as_mut_slice(),
                    c.d.as_mut_slice(),
                    c.p.as_mut_slice(),
                ]);
                v
            }
            Model::Lstm(l) => {
                let feed = l.feedthrough;
                let mut v: Vec<&mut [f64]> = Vec::with_capacity(14);
                v.extend(l.w_x.iter_mut().map(|m| m.as_mut_slice()));
                v.extend(l.w_u.iter_mut().map(|m| m.as_mut_slice()));
                v.extend(l.bias.iter_mut().map(|m| m.as_mut_slice()));
                v.push(l.c.as_mut_slice());
                if feed {
                    v.push(l.d.as_mut_slice());
                }
                v
            }
        }
    }

    /// Number of scalar decision variables.
    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Decision variables flattened in a fixed order (blocks in declaration
    /// order, each block column-major).
    pub fn params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(Error::dim("parameter vector", total, values.len()));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn certificate(&self) -> Option<CertifiedBundle> {
        match self {
            Model::Robust(b) => Some(b.clone()),
            Model::CiRnn(c) => crate::certificates::cirnn_certificate(c).ok(),
            _ => None,
        }
    }
}
