//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use robust_rnn::certificates::{CertKind, CertifiedBundle};
use robust_rnn::models::{init_feasible, BatchMeta, Dims, ImplicitParams, Model, ModelKind, SeqBatch};
use robust_rnn::training;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(r, c, |_, _| n.sample(rng))
}

/// Strict positive definiteness via nalgebra's own Cholesky.
pub fn nalgebra_pd(m: &DMatrix<f64>) -> bool {
    let s = (m + m.transpose()) * 0.5;
    nalgebra::linalg::Cholesky::new(s).is_some()
}

fn inv(p: &DMatrix<f64>) -> DMatrix<f64> {
    p.clone().try_inverse().expect("invertible P")
}

/// Robust-star condition in its `P⁻¹` form:
/// `[[E+Eᵀ−P, −βC2ᵀ], [−βC2, 2Λ]] − [Fᵀ; B1ᵀ] P⁻¹ [F, B1] ≻ 0` with `P ≻ 0`.
pub fn direct_star(t: &ImplicitParams, p: &DMatrix<f64>) -> bool {
    if !nalgebra_pd(p) || t.lambda.iter().any(|&l| l <= 0.0) {
        return false;
    }
    let (n, q) = (t.f.nrows(), t.b1.ncols());
    let mut a = DMatrix::zeros(n + q, n + q);
    a.view_mut((0, 0), (n, n)).copy_from(&(&t.e + t.e.transpose() - p));
    a.view_mut((n, 0), (q, n)).copy_from(&(&t.c2 * -t.beta));
    a.view_mut((0, n), (n, q)).copy_from(&(t.c2.transpose() * -t.beta));
    a.view_mut((n, n), (q, q)).copy_from(&DMatrix::from_diagonal(&(&t.lambda * 2.0)));
    let mut fb = DMatrix::zeros(n, n + q);
    fb.view_mut((0, 0), (n, n)).copy_from(&t.f);
    fb.view_mut((0, n), (n, q)).copy_from(&t.b1);
    let s = a - fb.transpose() * inv(p) * &fb;
    nalgebra_pd(&s)
}

/// Robust-gamma condition in its `P⁻¹` form with the `(1/γ)` output term.
pub fn direct_gamma(t: &ImplicitParams, p: &DMatrix<f64>, gamma: f64) -> bool {
    if !nalgebra_pd(p) || t.lambda.iter().any(|&l| l <= 0.0) || gamma <= 0.0 {
        return false;
    }
    let (n, q, m) = (t.f.nrows(), t.b1.ncols(), t.b2.ncols());
    let k = n + q + m;
    let mut a = DMatrix::zeros(k, k);
    a.view_mut((0, 0), (n, n)).copy_from(&(&t.e + t.e.transpose() - p));
    a.view_mut((n, 0), (q, n)).copy_from(&(&t.c2 * -t.beta));
    a.view_mut((0, n), (n, q)).copy_from(&(t.c2.transpose() * -t.beta));
    a.view_mut((n, n), (q, q)).copy_from(&DMatrix::from_diagonal(&(&t.lambda * 2.0)));
    a.view_mut((n, n + q), (q, m)).copy_from(&(&t.d22 * -t.beta));
    a.view_mut((n + q, n), (m, q)).copy_from(&(t.d22.transpose() * -t.beta));
    a.view_mut((n + q, n + q), (m, m)).copy_from(&(DMatrix::identity(m, m) * gamma));
    let mut row_x = DMatrix::zeros(n, k);
    row_x.view_mut((0, 0), (n, n)).copy_from(&t.f);
    row_x.view_mut((0, n), (n, q)).copy_from(&t.b1);
    row_x.view_mut((0, n + q), (n, m)).copy_from(&t.b2);
    let mut row_y = DMatrix::zeros(t.c1.nrows(), k);
    row_y.view_mut((0, 0), t.c1.shape()).copy_from(&t.c1);
    row_y.view_mut((0, n), t.d11.shape()).copy_from(&t.d11);
    row_y.view_mut((0, n + q), t.d12.shape()).copy_from(&t.d12);
    let s = a - row_x.transpose() * inv(p) * &row_x - row_y.transpose() * &row_y / gamma;
    nalgebra_pd(&s)
}

/// A generic parameter draw whose blocks scale with `s`; small `s` is
/// feasible, large `s` is not.
pub fn random_theta(rng: &mut ChaCha8Rng, dims: Dims, s: f64) -> (ImplicitParams, DMatrix<f64>) {
    let Dims { n, q, m, p } = dims;
    let std = 1.0 / (n as f64).sqrt();
    let mut t = ImplicitParams::identity_seed(dims, robust_rnn::models::Activation::Relu);
    t.e = DMatrix::identity(n, n) + gauss(rng, n, n, 0.1 * std);
    t.lambda = DVector::from_fn(q, |_, _| rng.random_range(0.5..2.0));
    t.f = gauss(rng, n, n, s * std);
    t.b1 = gauss(rng, n, q, s * std);
    t.b2 = gauss(rng, n, m, s * std);
    t.c1 = gauss(rng, p, n, s * std);
    t.d11 = gauss(rng, p, q, s * std);
    t.d12 = gauss(rng, p, m, s * std);
    t.c2 = gauss(rng, q, n, s * std);
    t.d22 = gauss(rng, q, m, s * std);
    t.bias = gauss(rng, q, 1, 0.5).column(0).into_owned();
    let a = gauss(rng, n, n, 0.1 * std);
    let pm = DMatrix::identity(n, n) + (&a + a.transpose()) * 0.5;
    (t, pm)
}

/// Feasible model of `kind` moved away from its symmetric starting point.
pub fn generic_feasible(kind: ModelKind, dims: Dims, gamma: Option<f64>, seed: u64) -> Model {
    let mut model = init_feasible(kind, dims, gamma, seed).unwrap();
    if let Model::CiRnn(c) = &mut model {
        // Halving F moves the contraction LMI well inside the feasible set.
        c.f *= 0.5;
    }
    let mut r = rng(seed ^ 0xabcdef);
    let base = model.params();
    for _ in 0..100 {
        let noise = gauss(&mut r, base.len(), 1, 0.02);
        let cand: Vec<f64> = base.iter().zip(noise.iter()).map(|(a, b)| a + b).collect();
        let mut trial = model.clone();
        trial.set_params(&cand).unwrap();
        if let Model::Robust(b) = &mut trial {
            b.p = (&b.p + b.p.transpose()) * 0.5;
        }
        if training::is_feasible(&trial).unwrap() {
            model = trial;
            break;
        }
    }
    model
}

pub fn bundle(model: &Model) -> CertifiedBundle {
    match model {
        Model::Robust(b) => b.clone(),
        _ => panic!("not a robust model"),
    }
}

pub fn star_bundle(t: ImplicitParams, p: DMatrix<f64>) -> CertifiedBundle {
    CertifiedBundle::new(t, p, CertKind::RobustStar, None).unwrap()
}

/// Batch of `len` steps with smooth random input and arbitrary targets.
pub fn random_batch(rng: &mut ChaCha8Rng, len: usize, m: usize, p: usize) -> SeqBatch {
    let u = gauss(rng, len, m, 1.0);
    let y = gauss(rng, len, p, 1.0);
    SeqBatch::new(u, y, 0.2, BatchMeta::default()).unwrap()
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Largest relative finite-difference error of the training gradient over
/// `coords` random coordinates.
pub fn gradient_fd_error(model: &Model, batch: &SeqBatch, alpha: f64, coords: usize, h: f64, seed: u64) -> f64 {
    let g = training::gradient(model, batch, alpha).unwrap();
    let x = model.params();
    let f = |v: &[f64]| {
        let mut m = model.clone();
        m.set_params(v).unwrap();
        training::barrier_objective(&m, batch, alpha).unwrap()
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = r.random_range(0..x.len());
        let fd = central_difference(f, &x, i, h);
        worst = worst.max(rel_err(g[i], fd, 1e-6));
    }
    worst
}

/// Simulates `x⁺ = A x + B u`, `y = C x + D u` step by step.
pub fn lti_reference(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut x = DVector::zeros(a.nrows());
    let mut y = DMatrix::zeros(u.nrows(), c.nrows());
    for t in 0..u.nrows() {
        let ut = u.row(t).transpose();
        y.set_row(t, &(c * &x + d * &ut).transpose());
        x = a * &x + b * &ut;
    }
    y
}

/// Spectral radius from nalgebra's eigenvalue routine.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
