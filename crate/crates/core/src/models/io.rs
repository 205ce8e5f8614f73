//! JSON model documents.
//!
//! ```json
//! { "kind": "robust-gamma", "dims": {"n":10,"q":10,"m":1,"p":1},
//!   "beta": 1.0, "activation": "relu",
//!   "matrices": { "E": [[...], ...], "Lambda": [[...]], ... },
//!   "P": [[...]], "gamma": 3.0 }
//! ```
//!
//! Matrices are arrays of rows; vectors are stored as single-column
//! matrices. Floats are written in shortest round-trip form, so a
//! write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Activation, CiRnn, Dims, Elman, ImplicitParams, Lstm, Model, ModelKind};
use crate::certificates::{CertKind, CertifiedBundle};
use crate::error::{Error, Result};

const LSTM_GATES: [char; 4] = ['i', 'f', 'g', 'o'];

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// `#[serde(with = "rows")]` adapter for `DMatrix<f64>`.
pub mod rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub dims: Dims,
    pub beta: f64,
    pub activation: Activation,
    pub matrices: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// LSTM only: whether `D` is a trained input feedthrough.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedthrough: Option<bool>,
}

fn col(v: &DVector<f64>) -> Vec<Vec<f64>> {
    v.iter().map(|&x| vec![x]).collect()
}

impl ModelFile {
    pub fn from_model(model: &Model) -> Self {
        let mut mats = BTreeMap::new();
        let mut put = |name: &str, m: Vec<Vec<f64>>| {
            mats.insert(name.to_string(), m);
        };
        let (beta, activation, p, gamma, feedthrough) = match model {
            Model::Robust(b) => {
                let t = &b.theta;
                put("E", matrix_rows(&t.e));
                put("F", matrix_rows(&t.f));
                put("B1", matrix_rows(&t.b1));
                put("B2", matrix_rows(&t.b2));
                put("C1", matrix_rows(&t.c1));
                put("D11", matrix_rows(&t.d11));
                put("D12", matrix_rows(&t.d12));
                put("Lambda", col(&t.lambda));
                put("C2", matrix_rows(&t.c2));
                put("b", col(&t.bias));
                put("D22", matrix_rows(&t.d22));
                (t.beta, t.activation, Some(matrix_rows(&b.p)), b.gamma, None)
            }
            Model::Elman(e) => {
                put("A", matrix_rows(&e.a));
                put("B", matrix_rows(&e.b));
                put("b", col(&e.bias));
                put("C", matrix_rows(&e.c));
                put("D", matrix_rows(&e.d));
                (e.activation.slope_bound(), e.activation, None, None, None)
            }
            Model::CiRnn(c) => {
                put("E", matrix_rows(&c.e));
                put("F", matrix_rows(&c.f));
                put("B", matrix_rows(&c.b));
                put("b", col(&c.bias));
                put("C", matrix_rows(&c.c));
                put("D", matrix_rows(&c.d));
                let p = DMatrix::from_diagonal(&c.p);
                (c.activation.slope_bound(), c.activation, Some(matrix_rows(&p)), None, None)
            }
            Model::Lstm(l) => {
                for (k, g) in LSTM_GATES.iter().enumerate() {
                    put(&format!("W_x{g}"), matrix_rows(&l.w_x[k]));
                    put(&format!("W_i{g}"), matrix_rows(&l.w_u[k]));
                    put(&format!("b_{g}"), col(&l.bias[k]));
                }
                put("C", matrix_rows(&l.c));
                put("D", matrix_rows(&l.d));
                (1.0, Activation::Tanh, None, None, Some(l.feedthrough))
            }
        };
        ModelFile { kind: model.kind(), dims: model.dims(), beta, activation, matrices: mats, p, gamma, feedthrough }
    }

    fn take(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let m = self.matrices.get(name).ok_or_else(|| Error::InvalidInput(format!("matrices.{name} is missing")))?;
        let m = matrix_from_rows(m).map_err(|e| Error::InvalidInput(format!("matrices.{name}: {e}")))?;
        if m.shape() != (rows, cols) {
            return Err(Error::dim(
                &format!("matrices.{name}"),
                format!("{rows}x{cols}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("matrices.{name} contains non-finite values")));
        }
        Ok(m)
    }

    fn take_vec(&self, name: &str, len: usize) -> Result<DVector<f64>> {
        Ok(self.take(name, len, 1)?.column(0).into_owned())
    }

    fn take_p(&self, n: usize) -> Result<DMatrix<f64>> {
        let rows = self.p.as_ref().ok_or_else(|| Error::InvalidInput("P is missing".into()))?;
        let p = matrix_from_rows(rows).map_err(|e| Error::InvalidInput(format!("P: {e}")))?;
        if p.shape() != (n, n) {
            return Err(Error::dim("P", format!("{n}x{n}"), format!("{}x{}", p.nrows(), p.ncols())));
        }
        Ok(p)
    }

    pub fn to_model(&self) -> Result<Model> {
        let Dims { n, q, m, p } = self.dims;
        let known: &[&str] = match self.kind {
            ModelKind::RobustStar | ModelKind::RobustGamma => {
                &["E", "F", "B1", "B2", "C1", "D11", "D12", "Lambda", "C2", "b", "D22"]
            }
            ModelKind::Rnn => &["A", "B", "b", "C", "D"],
            ModelKind::Cirnn | ModelKind::Srnn => &["E", "F", "B", "b", "C", "D"],
            ModelKind::Lstm => {
                &["W_xi", "W_xf", "W_xg", "W_xo", "W_ii", "W_if", "W_ig", "W_io", "b_i", "b_f", "b_g", "b_o", "C", "D"]
            }
        };
        if let Some(extra) = self.matrices.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::InvalidInput(format!("unknown matrix '{extra}' for kind {}", self.kind)));
        }
        match self.kind {
            ModelKind::RobustStar | ModelKind::RobustGamma => {
                let theta = ImplicitParams {
                    e: self.take("E", n, n)?,
                    f: self.take("F", n, n)?,
                    b1: self.take("B1", n, q)?,
                    b2: self.take("B2", n, m)?,
                    c1: self.take("C1", p, n)?,
                    d11: self.take("D11", p, q)?,
                    d12: self.take("D12", p, m)?,
                    lambda: self.take_vec("Lambda", q)?,
                    c2: self.take("C2", q, n)?,
                    bias: self.take_vec("b", q)?,
                    d22: self.take("D22", q, m)?,
                    beta: self.beta,
                    activation: self.activation,
                };
                let kind =
                    if self.kind == ModelKind::RobustGamma { CertKind::RobustGamma } else { CertKind::RobustStar };
                Ok(Model::Robust(CertifiedBundle::new(theta, self.take_p(n)?, kind, self.gamma)?))
            }
            ModelKind::Rnn => Ok(Model::Elman(Elman {
                a: self.take("A", n, n)?,
                b: self.take("B", n, m)?,
                bias: self.take_vec("b", n)?,
                c: self.take("C", p, n)?,
                d: self.take("D", p, m)?,
                activation: self.activation,
            })),
            ModelKind::Cirnn | ModelKind::Srnn => Ok(Model::CiRnn(CiRnn {
                e: self.take("E", n, n)?,
                f: self.take("F", n, n)?,
                b: self.take("B", n, m)?,
                bias: self.take_vec("b", n)?,
                c: self.take("C", p, n)?,
                d: self.take("D", p, m)?,
                p: self.take_p(n)?.diagonal(),
                activation: self.activation,
                fixed_e: self.kind == ModelKind::Srnn,
            })),
            ModelKind::Lstm => {
                let mut l = Lstm::zeros(n, m, p);
                for (k, g) in LSTM_GATES.iter().enumerate() {
                    l.w_x[k] = self.take(&format!("W_x{g}"), n, n)?;
                    l.w_u[k] = self.take(&format!("W_i{g}"), n, m)?;
                    l.bias[k] = self.take_vec(&format!("b_{g}"), n)?;
                }
                l.c = self.take("C", p, n)?;
                l.d = self.take("D", p, m)?;
                l.feedthrough = self.feedthrough.unwrap_or(false);
                Ok(Model::Lstm(l))
            }
        }
    }
}

pub fn model_to_json(model: &Model) -> String {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model documents always serialize")
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
    file.to_model()
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, model_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| Error::format(path, e))
}
