//! Four-mass nonlinear spring-damper chain, excitation signals and datasets.
//!
//! Mass 1 is tied to a wall by spring/damper 1; spring/damper `i` joins
//! mass `i-1` to mass `i`. The input force acts on mass 1 and the measured
//! output is the position of mass 4.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BatchMeta, SeqBatch};
use crate::seeds::derive_seed;

pub const STATE_DIM: usize = 8;
pub type MsdState = [f64; STATE_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdConfig {
    pub masses: [f64; 4],
    pub dampers: [f64; 4],
    pub springs: [f64; 4],
    /// Hz.
    pub sample_rate: f64,
    /// Integrator step in seconds.
    pub step: f64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        MsdConfig {
            masses: [0.25, 1.0 / 3.0, 5.0 / 12.0, 0.5],
            dampers: [0.25, 1.0 / 3.0, 5.0 / 12.0, 0.5],
            springs: [1.0, 5.0 / 6.0, 2.0 / 3.0, 0.5],
            sample_rate: 5.0,
            step: 0.01,
        }
    }
}

impl MsdConfig {
    /// Integrator steps per sample.
    pub fn substeps(&self) -> usize {
        (1.0 / (self.sample_rate * self.step)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().all(|&x| x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("msd.{name} must be positive and finite, got {v:?}")))
            }
        };
        pos("masses", &self.masses)?;
        pos("springs", &self.springs)?;
        pos("sample_rate", &[self.sample_rate])?;
        pos("step", &[self.step])?;
        if self.dampers.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput(format!("msd.dampers must be non-negative, got {:?}", self.dampers)));
        }
        let ratio = 1.0 / (self.sample_rate * self.step);
        if self.substeps() == 0 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::InvalidInput(format!(
                "msd.step = {} does not divide the sample interval {}",
                self.step,
                1.0 / self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Normalized piecewise-linear spring profile.
pub fn spring_gamma(d: f64) -> f64 {
    if d <= -1.0 {
        d + 0.75
    } else if d < 1.0 {
        0.25 * d
    } else {
        d - 0.75
    }
}

/// `∫₀ᵈ Γ(s) ds`.
pub fn spring_potential(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.125 * d * d
    } else {
        0.5 * a * a - 0.75 * a + 0.375
    }
}

pub fn msd_derivative(state: &MsdState, force: f64, cfg: &MsdConfig) -> MsdState {
    let (x, v) = state.split_at(4);
    let mut link = [0.0; 5];
    for i in 0..4 {
        let (xp, vp) = if i == 0 { (0.0, 0.0) } else { (x[i - 1], v[i - 1]) };
        link[i] = cfg.springs[i] * spring_gamma(x[i] - xp) + cfg.dampers[i] * (v[i] - vp);
    }
    let mut out = [0.0; STATE_DIM];
    for i in 0..4 {
        out[i] = v[i];
        let ext = if i == 0 { force } else { 0.0 };
        out[4 + i] = (ext - link[i] + link[i + 1]) / cfg.masses[i];
    }
    out
}

/// Kinetic plus spring energy.
pub fn msd_energy(state: &MsdState, cfg: &MsdConfig) -> f64 {
    let mut e = 0.0;
    for i in 0..4 {
        let xp = if i == 0 { 0.0 } else { state[i - 1] };
        e += 0.5 * cfg.masses[i] * state[4 + i] * state[4 + i];
        e += cfg.springs[i] * spring_potential(state[i] - xp);
    }
    e
}

fn axpy(x: &MsdState, a: f64, k: &MsdState) -> MsdState {
    std::array::from_fn(|i| x[i] + a * k[i])
}

/// One classical Runge-Kutta step with the force held constant.
pub fn rk4_step(state: &MsdState, force: f64, h: f64, cfg: &MsdConfig) -> MsdState {
    let k1 = msd_derivative(state, force, cfg);
    let k2 = msd_derivative(&axpy(state, 0.5 * h, &k1), force, cfg);
    let k3 = msd_derivative(&axpy(state, 0.5 * h, &k2), force, cfg);
    let k4 = msd_derivative(&axpy(state, h, &k3), force, cfg);
    std::array::from_fn(|i| state[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

fn spring_stretch(state: &MsdState, i: usize) -> f64 {
    state[i] - if i == 0 { 0.0 } else { state[i - 1] }
}

/// Breakpoint of `Γ` strictly crossed by spring `i` between `a` and `b`.
fn crossed_breakpoint(a: &MsdState, b: &MsdState, i: usize) -> Option<f64> {
    let (da, db) = (spring_stretch(a, i), spring_stretch(b, i));
    [-1.0, 1.0].into_iter().find(|&k| (da - k) * (db - k) < 0.0 && (da - k).abs() > 1e-12)
}

/// Runge-Kutta step of length `h` that stops exactly at every breakpoint of
/// the spring profile, so each sub-step integrates a linear vector field.
pub fn rk4_step_split(state: &MsdState, force: f64, h: f64, cfg: &MsdConfig) -> MsdState {
    let mut x = *state;
    let mut left = h;
    for _ in 0..64 {
        let end = rk4_step(&x, force, left, cfg);
        let mut first = left;
        for i in 0..4 {
            if let Some(k) = crossed_breakpoint(&x, &end, i) {
                let side = spring_stretch(&x, i) - k;
                let (mut lo, mut hi) = (0.0, first.min(left));
                if (spring_stretch(&rk4_step(&x, force, hi, cfg), i) - k) * side > 0.0 {
                    continue;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if (spring_stretch(&rk4_step(&x, force, mid, cfg), i) - k) * side > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                first = first.min(hi);
            }
        }
        if first >= left {
            return end;
        }
        x = rk4_step(&x, force, first, cfg);
        left -= first;
        if left <= 0.0 {
            break;
        }
    }
    x
}

/// Integrates from `x0` with the force `fine[k]` on step `k`, returning the
/// state at every multiple of `substeps` (including the initial state).
pub fn integrate(cfg: &MsdConfig, x0: MsdState, fine: &[f64], substeps: usize) -> Result<Vec<MsdState>> {
    let mut x = x0;
    let mut out = Vec::with_capacity(fine.len() / substeps.max(1) + 1);
    out.push(x);
    for (k, &f) in fine.iter().enumerate() {
        x = rk4_step_split(&x, f, cfg.step, cfg);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { time: (k + 1) as f64 * cfg.step });
        }
        if (k + 1) % substeps == 0 {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    /// Upper bound of the uniform hold time, seconds.
    pub tau: f64,
    /// Standard deviation of the held values.
    pub sigma_u: f64,
    /// Number of samples.
    #[serde(rename = "T")]
    pub len: usize,
    pub seed: u64,
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidInput(format!("signal.tau must be > 0, got {}", self.tau)));
        }
        if !(self.sigma_u >= 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::InvalidInput(format!("signal.sigma_u must be >= 0, got {}", self.sigma_u)));
        }
        if self.len == 0 {
            return Err(Error::InvalidInput("signal.T must be >= 1".into()));
        }
        Ok(())
    }
}

/// A piecewise-constant excitation on the integrator grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    /// Force on each integrator step.
    pub fine: Vec<f64>,
    /// Force at each sample instant.
    pub samples: Vec<f64>,
    /// Continuous-time hold durations drawn, in order.
    pub holds: Vec<f64>,
}

/// Draws hold times `U(0, τ)` and values `N(0, σ_u²)`; switch instants are
/// rounded up to the integrator grid.
pub fn gen_input_signal(sig: &SignalConfig, msd: &MsdConfig) -> Result<InputSignal> {
    sig.validate()?;
    msd.validate()?;
    let sub = msd.substeps();
    let n_fine = sig.len * sub;
    let mut rng = ChaCha8Rng::seed_from_u64(sig.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut fine = vec![0.0; n_fine];
    let mut holds = Vec::new();
    let mut value = sig.sigma_u * normal.sample(&mut rng);
    let mut t = 0.0;
    let mut idx = 0usize;
    while idx < n_fine {
        let d: f64 = rng.random_range(0.0..sig.tau);
        holds.push(d);
        t += d;
        let next = ((t / msd.step).ceil() as usize).min(n_fine);
        fine[idx.min(n_fine)..next.max(idx)].fill(value);
        idx = idx.max(next);
        value = sig.sigma_u * normal.sample(&mut rng);
    }
    let samples = (0..sig.len).map(|k| fine[k * sub]).collect();
    Ok(InputSignal { fine, samples, holds })
}

/// Sampled excitation, `T×1`.
pub fn gen_input(sig: &SignalConfig, msd: &MsdConfig) -> Result<DMatrix<f64>> {
    let s = gen_input_signal(sig, msd)?;
    Ok(DMatrix::from_vec(sig.len, 1, s.samples))
}

/// Noise-free response (position of mass 4 at each sample) from rest.
pub fn simulate_clean(msd: &MsdConfig, input: &InputSignal) -> Result<Vec<f64>> {
    let sub = msd.substeps();
    let states = integrate(msd, [0.0; STATE_DIM], &input.fine, sub)?;
    Ok(states.iter().take(input.samples.len()).map(|s| s[3]).collect())
}

pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub msd: MsdConfig,
    pub tau: f64,
    pub sigma_u: f64,
    pub train_batches: usize,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    pub test_sigmas: Vec<f64>,
    pub test_realizations: usize,
    /// Output SNR in dB; `None` disables measurement noise.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            msd: MsdConfig::default(),
            tau: 20.0,
            sigma_u: 3.0,
            train_batches: 100,
            train_len: 1000,
            val_len: 5000,
            test_len: 1000,
            test_sigmas: vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0],
            test_realizations: 30,
            noise_snr_db: Some(30.0),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.msd.validate()?;
        if self.train_batches == 0 || self.train_len == 0 || self.val_len == 0 || self.test_len == 0 {
            return Err(Error::InvalidInput("dataset split sizes must be >= 1".into()));
        }
        if let Some(s) = self.test_sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!("test_sigmas contains invalid value {s}")));
        }
        if let Some(snr) = self.noise_snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidInput("noise_snr_db must be finite (omit it to disable noise)".into()));
            }
        }
        SignalConfig { tau: self.tau, sigma_u: self.sigma_u, len: 1, seed: 0 }.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SeqBatch>,
    pub val: SeqBatch,
    /// One entry per test `σ_u`, in grid order.
    pub tests: Vec<(f64, Vec<SeqBatch>)>,
}

impl Dataset {
    pub fn test_set(&self, sigma_u: f64) -> Option<&[SeqBatch]> {
        self.tests.iter().find(|(s, _)| *s == sigma_u).map(|(_, b)| b.as_slice())
    }
}

/// Generates one measured sequence: clean response plus white noise with
/// standard deviation `rms(clean)·10^(−snr/20)`.
pub fn make_sequence(msd: &MsdConfig, sig: &SignalConfig, snr_db: Option<f64>) -> Result<SeqBatch> {
    let input = gen_input_signal(sig, msd)?;
    let clean = simulate_clean(msd, &input)?;
    let mut y = clean.clone();
    if let Some(snr) = snr_db {
        let std = rms(&clean) * 10f64.powf(-snr / 20.0);
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sig.seed, "noise", 0));
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
            y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    SeqBatch::new(
        DMatrix::from_vec(sig.len, 1, input.samples),
        DMatrix::from_vec(sig.len, 1, y),
        1.0 / msd.sample_rate,
        BatchMeta { seed: sig.seed, sigma_u: sig.sigma_u, tau: sig.tau },
    )
}

#[derive(Debug, Clone, Copy)]
enum Split {
    Train(usize),
    Val,
    Test(usize, usize),
}

fn split_signal(cfg: &DatasetConfig, split: Split) -> SignalConfig {
    let (tag, idx, len, sigma) = match split {
        Split::Train(i) => ("train".to_string(), i, cfg.train_len, cfg.sigma_u),
        Split::Val => ("val".to_string(), 0, cfg.val_len, cfg.sigma_u),
        Split::Test(k, r) => (format!("test-{}", cfg.test_sigmas[k]), r, cfg.test_len, cfg.test_sigmas[k]),
    };
    SignalConfig { tau: cfg.tau, sigma_u: sigma, len, seed: derive_seed(cfg.seed, &tag, idx as u64) }
}

/// All splits; sequences are generated in parallel from per-sequence seeds.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs: Vec<Split> = (0..cfg.train_batches).map(Split::Train).collect();
    jobs.push(Split::Val);
    let mut it = run_jobs(cfg, &jobs)?.into_iter();
    let train = it.by_ref().take(cfg.train_batches).collect();
    let val = it.next().expect("validation job present");
    Ok(Dataset { train, val, tests: make_test_sets(cfg)? })
}

/// Test sequences only. Realization `r` at a given `σ_u` does not depend on
/// the rest of the grid.
pub fn make_test_sets(cfg: &DatasetConfig) -> Result<Vec<(f64, Vec<SeqBatch>)>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for k in 0..cfg.test_sigmas.len() {
        jobs.extend((0..cfg.test_realizations).map(|r| Split::Test(k, r)));
    }
    let mut it = run_jobs(cfg, &jobs)?.into_iter();
    Ok(cfg.test_sigmas.iter().map(|&s| (s, it.by_ref().take(cfg.test_realizations).collect())).collect())
}

fn run_jobs(cfg: &DatasetConfig, jobs: &[Split]) -> Result<Vec<SeqBatch>> {
    jobs.par_iter().map(|&s| make_sequence(&cfg.msd, &split_signal(cfg, s), cfg.noise_snr_db)).collect()
}

// ---- on-disk format ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqEntry {
    pub file: String,
    pub seed: u64,
    pub sigma_u: f64,
    pub tau: f64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestEntry {
    pub sigma_u: f64,
    pub sequences: Vec<SeqEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub sample_rate: f64,
    pub train: Vec<SeqEntry>,
    pub val: SeqEntry,
    pub tests: Vec<TestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sequence_csv(b: &SeqBatch) -> String {
    let mut s = String::with_capacity(b.len() * 72);
    s.push_str("t,u,y\n");
    for k in 0..b.len() {
        let _ = writeln!(s, "{:.16e},{:.16e},{:.16e}", k as f64 * b.dt, b.u[(k, 0)], b.y[(k, 0)]);
    }
    s
}

fn parse_sequence_csv(path: &Path, text: &str, dt: f64, meta: BatchMeta) -> Result<SeqBatch> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t,u,y") {
        return Err(Error::format(path, "expected header 't,u,y'"));
    }
    let (mut u, mut y) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 columns", i + 2)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)));
        num(cols[0])?;
        u.push(num(cols[1])?);
        y.push(num(cols[2])?);
    }
    let t = u.len();
    SeqBatch::new(DMatrix::from_vec(t, 1, u), DMatrix::from_vec(t, 1, y), dt, meta).map_err(|e| Error::format(path, e))
}

fn entry(file: String, b: &SeqBatch) -> SeqEntry {
    SeqEntry { file, seed: b.meta.seed, sigma_u: b.meta.sigma_u, tau: b.meta.tau, len: b.len() }
}

/// Writes `manifest.json` and one CSV per sequence into `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, &SeqBatch)> = Vec::new();
    let train: Vec<SeqEntry> = ds
        .train
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let f = format!("train_{i:04}.csv");
            files.push((f.clone(), b));
            entry(f, b)
        })
        .collect();
    files.push(("val.csv".into(), &ds.val));
    let val = entry("val.csv".into(), &ds.val);
    let tests = ds
        .tests
        .iter()
        .enumerate()
        .map(|(k, (sigma, batches))| TestEntry {
            sigma_u: *sigma,
            sequences: batches
                .iter()
                .enumerate()
                .map(|(r, b)| {
                    let f = format!("test_{k:02}_{r:04}.csv");
                    files.push((f.clone(), b));
                    entry(f, b)
                })
                .collect(),
        })
        .collect();
    let manifest = DatasetManifest { config: cfg.clone(), sample_rate: cfg.msd.sample_rate, train, val, tests };
    files.par_iter().try_for_each(|(f, b)| {
        let p = dir.join(f);
        std::fs::write(&p, sequence_csv(b)).map_err(|e| Error::io(p, e))
    })?;
    let mp = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, text).map_err(|e| Error::io(mp, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mp = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(mp, e))
}

fn read_entry(dir: &Path, e: &SeqEntry, dt: f64) -> Result<SeqBatch> {
    let p: PathBuf = dir.join(&e.file);
    let text = std::fs::read_to_string(&p).map_err(|err| Error::io(&p, err))?;
    let b = parse_sequence_csv(&p, &text, dt, BatchMeta { seed: e.seed, sigma_u: e.sigma_u, tau: e.tau })?;
    if b.len() != e.len {
        return Err(Error::format(p, format!("manifest says {} rows, file has {}", e.len, b.len())));
    }
    Ok(b)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetConfig, Dataset)> {
    let m = read_manifest(dir)?;
    let dt = 1.0 / m.sample_rate;
    let train = m.train.par_iter().map(|e| read_entry(dir, e, dt)).collect::<Result<Vec<_>>>()?;
    let val = read_entry(dir, &m.val, dt)?;
    let tests = m
        .tests
        .iter()
        .map(|t| Ok((t.sigma_u, t.sequences.par_iter().map(|e| read_entry(dir, e, dt)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m.config, Dataset { train, val, tests }))
}
