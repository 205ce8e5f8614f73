//! Simulation-error fitting with a log-det barrier, ADAM steps and a
//! feasibility-preserving backtracking line search.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    self, assemble_lmi, cirnn_feasibility, contraction_lmi, contraction_lmi_adjoint, lmi_adjoint, CertifiedBundle,
};
use crate::error::{Error, Result};
use crate::evaluation::nse;
use crate::models::{CiRnn, Model, SeqBatch};
use crate::numerics::Cholesky;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub alpha0: f64,
    pub alpha_final: f64,
    pub lr_decay: f64,
    pub alpha_decay: f64,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_backtracks: usize,
    pub seed: u64,
    /// Hard cap on epochs regardless of the schedule.
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            alpha0: 1e-3,
            alpha_final: 1e-7,
            lr_decay: 0.25,
            alpha_decay: 0.1,
            patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_backtracks: 50,
            seed: 0,
            max_epochs: 1000,
        }
    }
}

impl TrainConfig {
    /// `alpha0 <= alpha_final` is accepted: training then stops at the first
    /// schedule trigger.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: String| Err(Error::InvalidInput(format!("train config: {field} = {v}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", self.lr0.to_string());
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return bad("alpha0", self.alpha0.to_string());
        }
        if !(self.alpha_final >= 0.0) {
            return bad("alpha_final", self.alpha_final.to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay", self.lr_decay.to_string());
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay < 1.0) {
            return bad("alpha_decay", self.alpha_decay.to_string());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", self.adam_beta1.to_string());
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", self.adam_beta2.to_string());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", self.adam_eps.to_string());
        }
        if self.patience == 0 {
            return bad("patience", "0".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean simulation loss over the batches visited this epoch (barrier
    /// terms excluded).
    pub mean_batch_loss: f64,
    pub val_nse: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Smallest LMI margin over the iterates accepted this epoch; `None` for
    /// unconstrained models.
    pub lmi_margin: Option<f64>,
    pub seconds: f64,
    pub accepted: usize,
    pub rejected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_nse: f64,
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,val_nse,alpha,lr,lmi_margin,seconds";

impl TrainHistory {
    pub fn best_val_nse(&self) -> f64 {
        self.records.iter().map(|r| r.val_nse).fold(self.initial_val_nse, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let margin = r.lmi_margin.map(|m| format!("{m:.16e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.6}",
                r.epoch, r.mean_batch_loss, r.val_nse, r.alpha, r.lr, margin, r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `Σ_t ‖ỹ_t − y_t‖²` from zero initial state.
pub fn sim_loss(model: &Model, batch: &SeqBatch) -> Result<f64> {
    let y = model.simulate(&batch.u, None)?.y;
    check_shape(&y, &batch.y)?;
    let loss = (&batch.y - y).norm_squared();
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: batch.len() });
    }
    Ok(loss)
}

fn check_shape(y: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    if y.shape() != target.shape() {
        return Err(Error::dim("batch outputs", format!("{:?}", y.shape()), format!("{:?}", target.shape())));
    }
    Ok(())
}

fn require_pd(m: &crate::numerics::SymMatrix) -> Result<Cholesky> {
    Cholesky::factor(m).map_err(|_| Error::Infeasible("LMI is not positive definite".into()))
}

fn robust_barrier(b: &CertifiedBundle, alpha: f64) -> Result<f64> {
    let chol = require_pd(&assemble_lmi(b)?)?;
    if b.theta.lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Infeasible("Lambda has a non-positive entry".into()));
    }
    let log_lambda: f64 = b.theta.lambda.iter().map(|l| l.ln()).sum();
    Ok(-alpha * chol.logdet() - alpha * log_lambda)
}

fn cirnn_barrier(c: &CiRnn, alpha: f64) -> Result<f64> {
    let chol = require_pd(&contraction_lmi(&c.e, &c.f, &c.p)?)?;
    Ok(-alpha * chol.logdet())
}

/// `α·(−log det M) + α·(−Σ log λ)` for robust models, `α·(−log det M)` for
/// ci-RNNs and zero for unconstrained models.
pub fn barrier_term(model: &Model, alpha: f64) -> Result<f64> {
    match model {
        Model::Robust(b) => robust_barrier(b, alpha),
        Model::CiRnn(c) => cirnn_barrier(c, alpha),
        Model::Elman(_) | Model::Lstm(_) => Ok(0.0),
    }
}

pub fn barrier_objective(model: &Model, batch: &SeqBatch, alpha: f64) -> Result<f64> {
    Ok(sim_loss(model, batch)? + barrier_term(model, alpha)?)
}

/// Objective value split into its parts, with its gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub sim_loss: f64,
    pub barrier: f64,
    /// Flat gradient in [`Model::params`] order.
    pub gradient: Vec<f64>,
}

/// Gradient of the barrier term alone, flattened in [`Model::params`] order.
pub fn barrier_gradient(model: &Model, alpha: f64) -> Result<Vec<f64>> {
    let grad = match model {
        Model::Robust(b) => {
            let chol = require_pd(&assemble_lmi(b)?)?;
            let g = chol.inverse() * -alpha;
            let (mut gt, gp) = lmi_adjoint(b, &g)?;
            gt.lambda -= b.theta.lambda.map(|l| alpha / l);
            Model::Robust(CertifiedBundle { theta: gt, p: gp, kind: b.kind, gamma: b.gamma })
        }
        Model::CiRnn(c) => {
            let n = c.f.nrows();
            let chol = require_pd(&contraction_lmi(&c.e, &c.f, &c.p)?)?;
            let g = chol.inverse() * -alpha;
            let (ge, gf, gp) = contraction_lmi_adjoint(&g, n);
            let mut out = c.clone();
            out.e = ge;
            out.f = gf;
            out.b.fill(0.0);
            out.bias.fill(0.0);
            out.c.fill(0.0);
            out.d.fill(0.0);
            out.p = gp;
            Model::CiRnn(out)
        }
        Model::Elman(_) | Model::Lstm(_) => return Ok(vec![0.0; model.num_params()]),
    };
    Ok(grad.params())
}

/// Objective and exact gradient by back-propagation through time plus the
/// barrier adjoint `−α M⁻¹`.
pub fn evaluate(model: &Model, batch: &SeqBatch, alpha: f64) -> Result<Evaluation> {
    let barrier = barrier_term(model, alpha)?;
    let rec = model.record(&batch.u, None)?;
    check_shape(rec.y(), &batch.y)?;
    let resid = rec.y() - &batch.y;
    let sim_loss = resid.norm_squared();
    if !sim_loss.is_finite() {
        return Err(Error::NonFinite { step: batch.len() });
    }
    let (g, _) = model.backprop(&rec, &batch.u, &(resid * 2.0));
    let mut gradient = g.params();
    if alpha != 0.0 {
        for (a, b) in gradient.iter_mut().zip(barrier_gradient(model, alpha)?) {
            *a += b;
        }
    }
    Ok(Evaluation { sim_loss, barrier, gradient })
}

pub fn gradient(model: &Model, batch: &SeqBatch, alpha: f64) -> Result<Vec<f64>> {
    Ok(evaluate(model, batch, alpha)?.gradient)
}

/// Strict feasibility with margin ε for constrained models; always true
/// otherwise.
pub fn is_feasible(model: &Model) -> Result<bool> {
    match model {
        Model::Robust(b) => certificates::is_feasible(b),
        Model::CiRnn(c) => certificates::cirnn_is_feasible(c),
        Model::Elman(_) | Model::Lstm(_) => Ok(true),
    }
}

/// Smallest eigenvalue of the model's LMI, if it has one.
pub fn lmi_margin(model: &Model) -> Result<Option<f64>> {
    match model {
        Model::Robust(b) => Ok(Some(certificates::feasibility_margin(b)?.lmi_margin)),
        Model::CiRnn(c) => Ok(Some(cirnn_feasibility(c)?.lmi_margin)),
        Model::Elman(_) | Model::Lstm(_) => Ok(None),
    }
}

pub fn val_nse(model: &Model, val: &SeqBatch) -> Result<f64> {
    let y = model.simulate(&val.u, None)?.y;
    nse(&y, &val.y)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(len: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            out[i] = -lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        out
    }
}

/// Tries `x + step`, halving the step until the iterate is strictly feasible.
/// Returns the accepted model, or `None` after `max_backtracks` halvings.
fn line_search(model: &Model, x: &[f64], step: &mut [f64], max_backtracks: usize) -> Result<Option<Model>> {
    let mut trial = model.clone();
    let mut cand = vec![0.0; x.len()];
    for k in 0..=max_backtracks {
        if k > 0 {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
        for i in 0..x.len() {
            cand[i] = x[i] + step[i];
        }
        if cand.iter().any(|v| !v.is_finite()) {
            continue;
        }
        trial.set_params(&cand)?;
        if is_feasible(&trial)? {
            return Ok(Some(trial));
        }
    }
    Ok(None)
}

/// Fits `model0` to `train`, keeping every accepted iterate strictly
/// feasible. Returns the parameters with the best validation NSE.
///
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model0: &Model,
    train: &[SeqBatch],
    val: &SeqBatch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("need at least one training batch".into()));
    }
    if !is_feasible(model0)? {
        return Err(Error::Infeasible(format!("initial {} model is not strictly feasible", model0.kind())));
    }
    let mut model = model0.clone();
    let mut adam = Adam::new(model.num_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-shuffle", 0));
    let mut lr = cfg.lr0;
    let mut alpha = cfg.alpha0;
    let initial = val_nse(&model, val)?;
    let mut best = (initial, model.clone());
    let mut stale = 0usize;
    let mut history = TrainHistory { initial_val_nse: initial, records: Vec::new() };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut visited, mut accepted, mut rejected) = (0.0, 0usize, 0usize, 0usize);
        let mut margin: Option<f64> = None;
        let mut warnings = Vec::new();
        for &i in &order {
            let ev = match evaluate(&model, &train[i], alpha) {
                Ok(ev) => ev,
                Err(Error::NonFinite { step }) => {
                    warnings.push(format!("batch {i} diverged at step {step}"));
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            loss_sum += ev.sim_loss;
            visited += 1;
            let x = model.params();
            let mut step = adam.step(&ev.gradient, lr);
            match line_search(&model, &x, &mut step, cfg.max_backtracks)? {
                Some(next) => {
                    model = next;
                    accepted += 1;
                    if let Some(m) = lmi_margin(&model)? {
                        margin = Some(margin.map_or(m, |old: f64| old.min(m)));
                    }
                }
                None => rejected += 1,
            }
        }
        if accepted == 0 {
            warnings.push("no step accepted this epoch".into());
            margin = lmi_margin(&model)?;
        }
        let nse_now = match val_nse(&model, val) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if nse_now < best.0 {
            best = (nse_now, model.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_batch_loss: if visited > 0 { loss_sum / visited as f64 } else { f64::NAN },
            val_nse: nse_now,
            alpha,
            lr,
            lmi_margin: margin,
            seconds: start.elapsed().as_secs_f64(),
            accepted,
            rejected,
            warning: (!warnings.is_empty()).then(|| warnings.join("; ")),
        };
        on_epoch(&record);
        history.records.push(record);

        if stale >= cfg.patience {
            lr *= cfg.lr_decay;
            alpha *= cfg.alpha_decay;
            model = best.1.clone();
            adam = Adam::new(model.num_params(), cfg);
            stale = 0;
            if alpha < cfg.alpha_final * (1.0 - 1e-9) {
                break;
            }
        }
    }
    Ok((best.1, history))
}
