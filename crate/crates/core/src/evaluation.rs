//! Fit and robustness metrics: NSE, a gradient-ascent Lipschitz lower bound
//! and empirical incremental-gain and contraction trials.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{gen_input, MsdConfig, SignalConfig};
use crate::certificates::{certified_gamma, CertifiedBundle};
use crate::error::{Error, Result};
use crate::models::{Dims, Model, SeqBatch};
use crate::seeds::derive_seed;

/// `‖ỹ − y‖ / ‖ỹ‖` over the whole sequence.
pub fn nse(y: &DMatrix<f64>, ytilde: &DMatrix<f64>) -> Result<f64> {
    if y.shape() != ytilde.shape() {
        return Err(Error::dim("nse", format!("{:?}", ytilde.shape()), format!("{:?}", y.shape())));
    }
    let den = ytilde.norm();
    if den == 0.0 {
        return Err(Error::InvalidInput("nse is undefined for an all-zero target".into()));
    }
    Ok((ytilde - y).norm() / den)
}

pub fn batch_nse(model: &Model, batch: &SeqBatch) -> Result<f64> {
    match model.simulate(&batch.u, None) {
        Ok(t) => nse(&t.y, &batch.y),
        Err(Error::NonFinite { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step: f64,
    pub restarts: usize,
    pub init_std: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Distribution of the base input.
    pub sigma_u: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 500,
            step: 0.01,
            restarts: 5,
            init_std: 1e-3,
            horizon: 1000,
            sigma_u: 3.0,
            tau: 20.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations > 0
            && self.restarts > 0
            && self.horizon > 0
            && self.step > 0.0
            && self.init_std > 0.0
            && self.sigma_u >= 0.0
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("attack config has a non-positive field: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub gamma_hat: f64,
    pub gamma_cert: Option<f64>,
    pub restart_ratios: Vec<f64>,
    /// Times the perturbation collapsed and was redrawn.
    pub reinflations: usize,
}

/// Slack allowed between the attack's lower bound and a certified bound.
pub const BOUND_SLACK: f64 = 1e-6;

impl RobustnessReport {
    /// Lower bound does not exceed the certified upper bound.
    pub fn is_consistent(&self) -> bool {
        self.gamma_cert.is_none_or(|g| self.gamma_hat <= g + BOUND_SLACK)
    }
}

/// Tightest gain bound provable with the model's own certificate, if it has
/// one. Robust-gamma models report their `γ` when bisection cannot do better.
pub fn certified_bound(model: &Model) -> Result<Option<f64>> {
    let Some(b) = model.certificate() else { return Ok(None) };
    let g = certified_gamma(&b, 1e-9)?;
    Ok(Some(b.gamma.map_or(g, |own| own.min(g))))
}

struct AdamState {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl AdamState {
    fn new(r: usize, c: usize) -> Self {
        AdamState { m: DMatrix::zeros(r, c), v: DMatrix::zeros(r, c) }
    }

    /// Ascent step.
    fn step(&mut self, x: &mut DMatrix<f64>, g: &DMatrix<f64>, lr: f64, t: i32) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - f64::powi(b1, t);
        let c2 = 1.0 - f64::powi(b2, t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

fn base_input(cfg: &AttackConfig, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let msd = MsdConfig::default();
    let mut u = DMatrix::zeros(cfg.horizon, m);
    for j in 0..m {
        let sig = SignalConfig {
            tau: cfg.tau,
            sigma_u: cfg.sigma_u,
            len: cfg.horizon,
            seed: derive_seed(seed, "channel", j as u64),
        };
        u.set_column(j, &gen_input(&sig, &msd)?.column(0));
    }
    Ok(u)
}

fn perturbation(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    DMatrix::from_fn(shape.0, shape.1, |_, _| normal.sample(rng))
}

/// Runs one restart; returns the best raw ratio seen and the number of
/// re-inflations.
fn attack_restart(model: &Model, cfg: &AttackConfig, restart: usize) -> Result<(f64, usize)> {
    let seed = derive_seed(cfg.seed, "attack", restart as u64);
    let m = model.dims().m;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "delta", 0));
    let mut u = base_input(cfg, m, seed)?;
    let mut v = &u + perturbation(&mut rng, u.shape(), cfg.init_std);
    let mut adam_u = AdamState::new(u.nrows(), m);
    let mut adam_v = AdamState::new(u.nrows(), m);
    let mut best = 0.0f64;
    let mut reinflations = 0;
    for it in 1..=cfg.iterations {
        let du = &u - &v;
        let du_sq = du.norm_squared();
        if !(du_sq > 1e-24 * (1.0 + u.norm_squared())) {
            v = &u + perturbation(&mut rng, u.shape(), cfg.init_std);
            reinflations += 1;
            continue;
        }
        let ru = model.record(&u, None)?;
        let rv = model.record(&v, None)?;
        let dy = ru.y() - rv.y();
        let dy_sq = dy.norm_squared();
        let ratio = (dy_sq / du_sq).sqrt();
        if ratio.is_finite() {
            best = best.max(ratio);
        }
        if it == cfg.iterations {
            break;
        }
        // ∇ of ½log‖dy‖² − ½log‖du‖².
        let (mut gu, mut gv) = (-&du / du_sq, &du / du_sq);
        if dy_sq > 0.0 {
            let gy = &dy / dy_sq;
            gu += model.backprop(&ru, &u, &gy).1;
            gv += model.backprop(&rv, &v, &(-gy)).1;
        }
        adam_u.step(&mut u, &gu, cfg.step, it as i32);
        adam_v.step(&mut v, &gv, cfg.step, it as i32);
    }
    Ok((best, reinflations))
}

/// Gradient-ascent lower bound on the incremental gain from zero initial
/// state. Restarts run in parallel with independent seeds.
pub fn lipschitz_attack(model: &Model, cfg: &AttackConfig) -> Result<RobustnessReport> {
    cfg.validate()?;
    let runs: Vec<(f64, usize)> =
        (0..cfg.restarts).into_par_iter().map(|r| attack_restart(model, cfg, r)).collect::<Result<_>>()?;
    let restart_ratios: Vec<f64> = runs.iter().map(|r| r.0).collect();
    Ok(RobustnessReport {
        gamma_hat: restart_ratios.iter().copied().fold(0.0, f64::max),
        gamma_cert: certified_bound(model)?,
        restart_ratios,
        reinflations: runs.iter().map(|r| r.1).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
}

fn state_draw(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    DVector::from_fn(n, |_, _| normal.sample(rng))
}

fn weighted(w: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    d.dot(&(w * d))
}

/// Ratio `‖Δy‖² / (γ²‖Δu‖² + γ V₀)` for random pairs of initial states and
/// inputs; `0/0` counts as 0. Half of the trials use nearby inputs.
pub fn gain_trial(b: &CertifiedBundle, gamma: f64, trials: usize, horizon: usize, seed: u64) -> Result<TrialReport> {
    let weight = b.storage_weight()?;
    let model = Model::Robust(b.clone());
    let Dims { n, m, .. } = b.theta.dims();
    let ratios = (0..trials)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, "gain-trial", k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let xa = state_draw(&mut rng, n);
            let xb = state_draw(&mut rng, n);
            let cfg = AttackConfig { horizon, ..Default::default() };
            let ua = base_input(&cfg, m, derive_seed(s, "a", 0))?;
            let ub = if k % 2 == 0 {
                base_input(&cfg, m, derive_seed(s, "b", 0))?
            } else {
                &ua + perturbation(&mut rng, ua.shape(), 0.1)
            };
            let ya = model.simulate(&ua, Some(&xa))?.y;
            let yb = model.simulate(&ub, Some(&xb))?.y;
            let lhs = (ya - yb).norm_squared();
            let rhs = gamma * gamma * (ua - ub).norm_squared() + gamma * weighted(&weight, &(xa - xb));
            Ok(if lhs == 0.0 && rhs == 0.0 { 0.0 } else { lhs / rhs })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TrialReport { max_ratio: ratios.iter().copied().fold(0.0, f64::max), ratios })
}

/// Largest one-step decay `V_{t+1}/V_t` of the storage function between two
/// trajectories from different initial states under a shared input.
pub fn contraction_trial(b: &CertifiedBundle, trials: usize, horizon: usize, seed: u64) -> Result<TrialReport> {
    let weight = b.storage_weight()?;
    let model = Model::Robust(b.clone());
    let Dims { n, m, .. } = b.theta.dims();
    let ratios = (0..trials)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, "contraction-trial", k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let xa = state_draw(&mut rng, n);
            let xb = state_draw(&mut rng, n);
            let cfg = AttackConfig { horizon, ..Default::default() };
            let u = base_input(&cfg, m, s)?;
            let ta = model.simulate(&u, Some(&xa))?.x;
            let tb = model.simulate(&u, Some(&xb))?.x;
            let mut worst = 0.0f64;
            let mut prev = weighted(&weight, &(xa - xb));
            for t in 1..ta.nrows() {
                let d = (ta.row(t) - tb.row(t)).transpose();
                let cur = weighted(&weight, &d);
                if prev > 1e-20 {
                    worst = worst.max(cur / prev);
                }
                prev = cur;
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TrialReport { max_ratio: ratios.iter().copied().fold(0.0, f64::max), ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub sigma_u: f64,
    pub realization: usize,
    pub nse: f64,
}

/// NSE of every model on every test sequence.
pub fn nse_sweep(models: &[(String, Model)], tests: &[(f64, Vec<SeqBatch>)]) -> Result<Vec<SweepRow>> {
    let mut jobs = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for (si, (_, batches)) in tests.iter().enumerate() {
            jobs.extend((0..batches.len()).map(|r| (mi, si, r)));
        }
    }
    jobs.par_iter()
        .map(|&(mi, si, r)| {
            let (sigma, batches) = &tests[si];
            Ok(SweepRow {
                model: models[mi].0.clone(),
                sigma_u: *sigma,
                realization: r,
                nse: batch_nse(&models[mi].1, &batches[r])?,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Median NSE of `model` at `sigma_u` over sweep rows.
pub fn median_nse(rows: &[SweepRow], model: &str, sigma_u: f64) -> f64 {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.model == model && r.sigma_u == sigma_u).map(|r| r.nse).collect();
    median(&mut v)
}

pub const SWEEP_HEADER: &str = "model,sigma_u,realization,nse";
pub const SUMMARY_HEADER: &str = "model,nse_median,gamma_hat,gamma_cert";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.16e}", r.model, r.sigma_u, r.realization, r.nse);
    }
    s
}

pub fn parse_sweep_csv(path: &Path, text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_HEADER) {
        return Err(Error::format(path, format!("expected header '{SWEEP_HEADER}'")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(path, format!("line {}: malformed row", i + 2));
            if c.len() != 4 {
                return Err(bad());
            }
            Ok(SweepRow {
                model: c[0].to_string(),
                sigma_u: c[1].trim().parse().map_err(|_| bad())?,
                realization: c[2].trim().parse().map_err(|_| bad())?,
                nse: c[3].trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub nse_median: f64,
    pub gamma_hat: f64,
    pub gamma_cert: Option<f64>,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let cert = r.gamma_cert.map(|g| format!("{g:.16e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.16e},{:.16e},{}", r.model, r.nse_median, r.gamma_hat, cert);
    }
    s
}
