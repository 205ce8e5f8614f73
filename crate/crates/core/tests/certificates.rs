mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use robust_rnn::certificates::*;
use robust_rnn::evaluation::{lipschitz_attack, AttackConfig};
use robust_rnn::models::{Activation, CiRnn, Dims, Model};
use robust_rnn::numerics::{pd_margin, EPSILON};

#[test]
fn lifted_and_inverse_forms_agree() {
    let mut r = rng(1);
    let (mut feasible, mut total) = (0, 0);
    for _ in 0..300 {
        let dims =
            Dims { n: r.random_range(1..6), q: r.random_range(1..5), m: r.random_range(1..3), p: r.random_range(1..3) };
        let s = r.random_range(0.0..1.6);
        let (t, p) = random_theta(&mut r, dims, s);
        let star = pd_margin(&assemble_lmi(&star_bundle(t.clone(), p.clone())).unwrap(), 0.0).unwrap();
        assert_eq!(star, direct_star(&t, &p), "robust-star at s = {s}");
        let gamma = r.random_range(0.5..5.0);
        let lifted = pd_margin(&gamma_lmi(&t, &p, gamma).unwrap(), 0.0).unwrap();
        assert_eq!(lifted, direct_gamma(&t, &p, gamma), "robust-gamma at s = {s}, gamma = {gamma}");
        feasible += star as usize;
        total += 1;
    }
    assert!(feasible > total / 5 && feasible < 4 * total / 5, "{feasible}/{total}");
}

#[test]
fn random_stable_lti_systems_embed() {
    let mut r = rng(3);
    for k in 0..20 {
        let n = r.random_range(1..=10);
        let raw = gauss(&mut r, n, n, 1.0);
        let rho = spectral_radius(&raw).max(1e-12);
        let a = raw * (r.random_range(0.0..0.95) / rho);
        let sys =
            LtiSystem { a, b: gauss(&mut r, n, 2, 1.0), c: gauss(&mut r, 1, n, 1.0), d: gauss(&mut r, 1, 2, 1.0) };
        let b = embed_lti(&sys).unwrap();
        let rep = feasibility_margin(&b).unwrap();
        assert!(rep.feasible && rep.lmi_margin >= EPSILON, "system {k}: {rep:?}");
        let u = gauss(&mut r, 100, 2, 1.0);
        let y = Model::Robust(b).simulate(&u, None).unwrap().y;
        let want = lti_reference(&sys.a, &sys.b, &sys.c, &sys.d, &u);
        assert!((&y - &want).abs().max() <= 1e-9 * (1.0 + want.abs().max()), "system {k}");
    }
}

fn random_contracting_cirnn(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> CiRnn {
    loop {
        let c = CiRnn {
            e: DMatrix::identity(n, n) + gauss(r, n, n, 0.2),
            f: gauss(r, n, n, 0.6 / (n as f64).sqrt()),
            b: gauss(r, n, 1, 1.0),
            bias: gauss(r, n, 1, 0.3).column(0).into_owned(),
            c: gauss(r, 1, n, 1.0),
            d: gauss(r, 1, 1, 1.0),
            p: DVector::from_fn(n, |_, _| r.random_range(0.5..1.5)),
            activation: Activation::Tanh,
            fixed_e: false,
        };
        if cirnn_is_feasible(&c).unwrap() {
            return c;
        }
    }
}

/// `ℰ x⁺ = σ(ℱ x + ℬ u + 𝔟)`, `y = 𝒞 x + 𝒟 u`, solved directly.
fn cirnn_reference(c: &CiRnn, u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.f.nrows();
    let mut x = DVector::zeros(n);
    let mut y = DMatrix::zeros(u.nrows(), 1);
    for t in 0..u.nrows() {
        let ut = u.row(t).transpose();
        y.set_row(t, &(&c.c * &x + &c.d * &ut).transpose());
        let z = (&c.f * &x + &c.b * &ut + &c.bias).map(f64::tanh);
        x = c.e.clone().lu().solve(&z).unwrap();
    }
    y
}

#[test]
fn random_cirnns_embed() {
    let mut r = rng(4);
    for k in 0..20 {
        let n = r.random_range(1..=8);
        let c = random_contracting_cirnn(&mut r, n);
        let b = embed_cirnn(&c, &c.p).unwrap();
        let rep = feasibility_margin(&b).unwrap();
        assert!(rep.feasible && rep.lmi_margin >= EPSILON, "ci-RNN {k}: {rep:?}");
        let u = gauss(&mut r, 100, 1, 1.0);
        let y = Model::Robust(b).simulate(&u, None).unwrap().y;
        let want = cirnn_reference(&c, &u);
        assert!((&y - &want).abs().max() <= 1e-9, "ci-RNN {k}");
    }
}

#[test]
fn attack_never_beats_the_certified_bound() {
    let mut r = rng(8);
    for seed in 0..3 {
        let model =
            generic_feasible(robust_rnn::models::ModelKind::RobustStar, Dims { n: 3, q: 3, m: 1, p: 1 }, None, seed);
        let cert = certified_gamma(&bundle(&model), 1e-6).unwrap();
        let cfg = AttackConfig { iterations: 60, restarts: 2, horizon: 80, seed: r.random(), ..Default::default() };
        let rep = lipschitz_attack(&model, &cfg).unwrap();
        assert!(rep.gamma_hat <= cert + 1e-6, "{} > {cert}", rep.gamma_hat);
        assert!(rep.is_consistent());
    }
}

fn activations() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Tanh), Just(Activation::Sigmoid)]
}

proptest! {
    #[test]
    fn iqc_is_nonnegative(
        act in activations(),
        pairs in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0, 1e-3f64..1e3), 1..12),
    ) {
        let beta = act.slope_bound();
        let lambda: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let dv: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
        let dw: Vec<f64> = pairs.iter().map(|p| act.eval(p.0) - act.eval(p.1)).collect();
        prop_assert!(iqc_quadratic_form(&lambda, beta, &dv, &dw) >= 0.0);
    }

    #[test]
    fn bisected_gamma_is_feasible(seed in 0u64..1000) {
        let mut r = rng(seed);
        let (t, p) = random_theta(&mut r, Dims { n: 3, q: 2, m: 1, p: 1 }, 0.3);
        prop_assume!(direct_star(&t, &p));
        let b = star_bundle(t, p);
        let g = certified_gamma(&b, 1e-6).unwrap();
        prop_assert!(pd_margin(&gamma_lmi(&b.theta, &b.p, g).unwrap(), EPSILON).unwrap());
        prop_assert!(direct_gamma(&b.theta, &b.p, g * (1.0 + 1e-9)));
    }
}
