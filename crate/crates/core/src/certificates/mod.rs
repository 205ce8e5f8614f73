//! Convex stability and gain certificates.
//!
//! Constraints are assembled in lifted Schur-complement form, which is
//! linear in every decision variable `(θ, P)`:
//!
//! ```text
//! robust-star:   ⎡E+Eᵀ-P  -βC2ᵀ   Fᵀ ⎤
//!                ⎢-βC2     2Λ     B1ᵀ⎥ ≻ 0
//!                ⎣F        B1     P  ⎦
//!
//! robust-gamma:  ⎡E+Eᵀ-P  -βC2ᵀ    0      Fᵀ   C1ᵀ ⎤
//!                ⎢-βC2     2Λ     -βD22   B1ᵀ  D11ᵀ⎥
//!                ⎢0       -βD22ᵀ   γI     B2ᵀ  D12ᵀ⎥ ≻ 0
//!                ⎢F        B1      B2     P    0   ⎥
//!                ⎣C1       D11     D12    0    γI  ⎦
//! ```

mod embed;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use embed::{embed_cirnn, embed_lti, solve_discrete_lyapunov, LtiSystem};

use crate::error::{Error, Result};
use crate::models::{CiRnn, ImplicitParams};
use crate::numerics::{self, pd_margin, SymMatrix, EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertKind {
    RobustStar,
    RobustGamma,
    CiRnnContraction,
}

/// Model parameters together with the certificate `P` and the constraint
/// they are meant to satisfy.
///
/// For [`CertKind::CiRnnContraction`] the parameters are a ci-RNN written
/// in implicit form (`F = 0`, `B1 = I`, `Λ = P⁻¹`), and the contraction LMI
/// reads the ci-RNN state map back as `Λ⁻¹ C2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedBundle {
    pub theta: ImplicitParams,
    pub p: DMatrix<f64>,
    pub kind: CertKind,
    /// Present iff `kind == RobustGamma`.
    pub gamma: Option<f64>,
}

impl CertifiedBundle {
    pub fn new(theta: ImplicitParams, p: DMatrix<f64>, kind: CertKind, gamma: Option<f64>) -> Result<Self> {
        let b = CertifiedBundle { theta, p, kind, gamma };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        let n = self.theta.dims().n;
        if self.p.shape() != (n, n) {
            return Err(Error::dim("P", format!("{n}x{n}"), format!("{}x{}", self.p.nrows(), self.p.ncols())));
        }
        match (self.kind, self.gamma) {
            (CertKind::RobustGamma, Some(g)) if g > 0.0 => Ok(()),
            (CertKind::RobustGamma, g) => {
                Err(Error::InvalidInput(format!("robust-gamma bundle needs gamma > 0, got {g:?}")))
            }
            (_, Some(_)) => Err(Error::InvalidInput("gamma is only meaningful for robust-gamma bundles".into())),
            (_, None) => Ok(()),
        }
    }

    /// Storage-function weight `Eᵀ P⁻¹ E`.
    pub fn storage_weight(&self) -> Result<DMatrix<f64>> {
        let p = SymMatrix::new(self.p.clone())?;
        let pe = numerics::solve_pd(&p, &self.theta.e)?;
        Ok(SymMatrix::new(self.theta.e.transpose() * pe)?.into_matrix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub lmi_margin: f64,
    pub p_margin: f64,
    pub lambda_min: f64,
    pub feasible: bool,
}

/// Square block matrix with fixed block sizes.
struct BlockLayout {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl BlockLayout {
    fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            offsets.push(acc);
            acc += s;
        }
        BlockLayout { offsets, sizes: sizes.to_vec() }
    }

    fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Places `x` at block `(r, c)` and, off the diagonal, `xᵀ` at `(c, r)`.
    fn put(&self, m: &mut DMatrix<f64>, r: usize, c: usize, x: &DMatrix<f64>) {
        debug_assert_eq!(x.shape(), (self.sizes[r], self.sizes[c]));
        m.view_mut((self.offsets[r], self.offsets[c]), x.shape()).copy_from(x);
        if r != c {
            m.view_mut((self.offsets[c], self.offsets[r]), (x.ncols(), x.nrows())).copy_from(&x.transpose());
        }
    }

    fn add_diag(&self, m: &mut DMatrix<f64>, r: usize, d: &[f64]) {
        for (i, v) in d.iter().enumerate() {
            m[(self.offsets[r] + i, self.offsets[r] + i)] += v;
        }
    }

    fn block(&self, g: &DMatrix<f64>, r: usize, c: usize) -> DMatrix<f64> {
        g.view((self.offsets[r], self.offsets[c]), (self.sizes[r], self.sizes[c])).into_owned()
    }

    /// Adjoint of [`Self::put`]: `G_rc + G_crᵀ` off the diagonal, `G_rr` on it.
    fn pull(&self, g: &DMatrix<f64>, r: usize, c: usize) -> DMatrix<f64> {
        if r == c {
            self.block(g, r, r)
        } else {
            self.block(g, r, c) + self.block(g, c, r).transpose()
        }
    }

    fn pull_diag(&self, g: &DMatrix<f64>, r: usize) -> DVector<f64> {
        DVector::from_fn(self.sizes[r], |i, _| g[(self.offsets[r] + i, self.offsets[r] + i)])
    }
}

fn diag_matrix(d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(d)
}

fn star_layout(t: &ImplicitParams) -> BlockLayout {
    let d = t.dims();
    BlockLayout::new(&[d.n, d.q, d.n])
}

fn gamma_layout(t: &ImplicitParams) -> BlockLayout {
    let d = t.dims();
    BlockLayout::new(&[d.n, d.q, d.m, d.n, d.p])
}

fn star_lmi(t: &ImplicitParams, p: &DMatrix<f64>) -> Result<SymMatrix> {
    let l = star_layout(t);
    let mut m = DMatrix::zeros(l.dim(), l.dim());
    l.put(&mut m, 0, 0, &(&t.e + t.e.transpose() - p));
    l.put(&mut m, 1, 0, &(&t.c2 * -t.beta));
    l.put(&mut m, 1, 1, &diag_matrix(&(&t.lambda * 2.0)));
    l.put(&mut m, 2, 0, &t.f);
    l.put(&mut m, 2, 1, &t.b1);
    l.put(&mut m, 2, 2, p);
    SymMatrix::new(m)
}

/// The robust-gamma LMI at an explicit `γ` (used by [`bisect_gamma`]).
pub fn gamma_lmi(t: &ImplicitParams, p: &DMatrix<f64>, gamma: f64) -> Result<SymMatrix> {
    t.validate()?;
    let d = t.dims();
    let l = gamma_layout(t);
    let mut m = DMatrix::zeros(l.dim(), l.dim());
    l.put(&mut m, 0, 0, &(&t.e + t.e.transpose() - p));
    l.put(&mut m, 1, 0, &(&t.c2 * -t.beta));
    l.put(&mut m, 1, 1, &diag_matrix(&(&t.lambda * 2.0)));
    l.put(&mut m, 1, 2, &(&t.d22 * -t.beta));
    l.add_diag(&mut m, 2, &vec![gamma; d.m]);
    l.put(&mut m, 3, 0, &t.f);
    l.put(&mut m, 3, 1, &t.b1);
    l.put(&mut m, 3, 2, &t.b2);
    l.put(&mut m, 3, 3, p);
    l.put(&mut m, 4, 0, &t.c1);
    l.put(&mut m, 4, 1, &t.d11);
    l.put(&mut m, 4, 2, &t.d12);
    l.add_diag(&mut m, 4, &vec![gamma; d.p]);
    SymMatrix::new(m)
}

/// Contraction LMI `[[E+Eᵀ-P, Fᵀ], [F, P]]` with diagonal `P`.
pub fn contraction_lmi(e: &DMatrix<f64>, f: &DMatrix<f64>, p_diag: &DVector<f64>) -> Result<SymMatrix> {
    let n = e.nrows();
    if e.shape() != (n, n) || f.shape() != (n, n) || p_diag.len() != n {
        return Err(Error::dim(
            "contraction LMI",
            format!("{n}x{n} blocks"),
            format!("F {:?}, P {}", f.shape(), p_diag.len()),
        ));
    }
    let l = BlockLayout::new(&[n, n]);
    let p = diag_matrix(p_diag);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    l.put(&mut m, 0, 0, &(e + e.transpose() - &p));
    l.put(&mut m, 1, 0, f);
    l.put(&mut m, 1, 1, &p);
    SymMatrix::new(m)
}

/// Gradient of `⟨G, M(E, F, p)⟩` for the contraction LMI.
pub fn contraction_lmi_adjoint(g: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let l = BlockLayout::new(&[n, n]);
    let g00 = l.block(g, 0, 0);
    let ge = &g00 + g00.transpose();
    let gf = l.pull(g, 1, 0);
    let gp = l.pull_diag(g, 1) - l.pull_diag(g, 0);
    (ge, gf, gp)
}

/// The bundle's LMI in lifted form.
pub fn assemble_lmi(b: &CertifiedBundle) -> Result<SymMatrix> {
    b.validate()?;
    match b.kind {
        CertKind::RobustStar => star_lmi(&b.theta, &b.p),
        CertKind::RobustGamma => gamma_lmi(&b.theta, &b.p, b.gamma.expect("validated")),
        CertKind::CiRnnContraction => {
            let t = &b.theta;
            let mut f = t.c2.clone();
            for (i, mut row) in f.row_iter_mut().enumerate() {
                row /= t.lambda[i];
            }
            let p_diag = b.p.diagonal();
            contraction_lmi(&t.e, &f, &p_diag)
        }
    }
}

/// Gradient of `⟨G, M(θ, P)⟩` with respect to `(θ, P)` for the robust kinds,
/// where `M` is [`assemble_lmi`]. Blocks of `θ` absent from the LMI get zero.
pub fn lmi_adjoint(b: &CertifiedBundle, g: &DMatrix<f64>) -> Result<(ImplicitParams, DMatrix<f64>)> {
    let t = &b.theta;
    let mut gt = ImplicitParams::zeros(t.dims(), t.activation);
    gt.beta = 0.0;
    let gp;
    match b.kind {
        CertKind::RobustStar => {
            let l = star_layout(t);
            let g00 = l.block(g, 0, 0);
            gt.e = &g00 + g00.transpose();
            gp = l.block(g, 2, 2) - g00;
            gt.c2 = l.pull(g, 1, 0) * -t.beta;
            gt.lambda = l.pull_diag(g, 1) * 2.0;
            gt.f = l.pull(g, 2, 0);
            gt.b1 = l.pull(g, 2, 1);
        }
        CertKind::RobustGamma => {
            let l = gamma_layout(t);
            let g00 = l.block(g, 0, 0);
            gt.e = &g00 + g00.transpose();
            gp = l.block(g, 3, 3) - g00;
            gt.c2 = l.pull(g, 1, 0) * -t.beta;
            gt.lambda = l.pull_diag(g, 1) * 2.0;
            gt.d22 = l.pull(g, 1, 2) * -t.beta;
            gt.f = l.pull(g, 3, 0);
            gt.b1 = l.pull(g, 3, 1);
            gt.b2 = l.pull(g, 3, 2);
            gt.c1 = l.pull(g, 4, 0);
            gt.d11 = l.pull(g, 4, 1);
            gt.d12 = l.pull(g, 4, 2);
        }
        CertKind::CiRnnContraction => {
            return Err(Error::InvalidInput(
                "contraction bundles are trained through the ci-RNN parameterization".into(),
            ))
        }
    }
    Ok((gt, gp))
}

fn lambda_min(t: &ImplicitParams) -> f64 {
    t.lambda.iter().copied().fold(f64::INFINITY, f64::min)
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Cheap strict-feasibility test with margin [`EPSILON`] (three Cholesky
/// factorizations, no margin estimation).
pub fn is_feasible(b: &CertifiedBundle) -> Result<bool> {
    let m = assemble_lmi(b)?;
    if !finite(m.as_matrix()) || !finite(&b.p) {
        return Ok(false);
    }
    if b.kind != CertKind::CiRnnContraction && !(lambda_min(&b.theta) >= EPSILON) {
        return Ok(false);
    }
    Ok(pd_margin(&SymMatrix::new(b.p.clone())?, EPSILON)? && pd_margin(&m, EPSILON)?)
}

/// Margins of the LMI, of `P` and of `Λ`. Margins are smallest eigenvalues.
pub fn feasibility_margin(b: &CertifiedBundle) -> Result<FeasibilityReport> {
    let m = assemble_lmi(b)?;
    let lam = if b.kind == CertKind::CiRnnContraction {
        b.p.diagonal().iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        lambda_min(&b.theta)
    };
    if !finite(m.as_matrix()) || !finite(&b.p) {
        return Ok(FeasibilityReport {
            lmi_margin: f64::NEG_INFINITY,
            p_margin: f64::NEG_INFINITY,
            lambda_min: lam,
            feasible: false,
        });
    }
    let p = SymMatrix::new(b.p.clone())?;
    let lmi_margin = certified_min_eigenvalue(&m)?;
    let p_margin = certified_min_eigenvalue(&p)?;
    let feasible = lam >= EPSILON && p_margin >= EPSILON && lmi_margin >= EPSILON;
    Ok(FeasibilityReport { lmi_margin, p_margin, lambda_min: lam, feasible })
}

/// Bisected smallest eigenvalue, raised to ε when `M − εI` factors, so that
/// the reported margin agrees with [`is_feasible`].
fn certified_min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    let lo = numerics::min_eigenvalue(m)?;
    Ok(if lo < EPSILON && pd_margin(m, EPSILON)? { EPSILON } else { lo })
}

pub fn cirnn_is_feasible(c: &CiRnn) -> Result<bool> {
    let m = contraction_lmi(&c.e, &c.f, &c.p)?;
    if !finite(m.as_matrix()) {
        return Ok(false);
    }
    Ok(c.p.iter().all(|&v| v >= EPSILON) && pd_margin(&m, EPSILON)?)
}

pub fn cirnn_feasibility(c: &CiRnn) -> Result<FeasibilityReport> {
    let m = contraction_lmi(&c.e, &c.f, &c.p)?;
    let lam = c.p.iter().copied().fold(f64::INFINITY, f64::min);
    if !finite(m.as_matrix()) {
        return Ok(FeasibilityReport {
            lmi_margin: f64::NEG_INFINITY,
            p_margin: lam,
            lambda_min: lam,
            feasible: false,
        });
    }
    let lmi_margin = certified_min_eigenvalue(&m)?;
    let feasible = lam >= EPSILON && lmi_margin >= EPSILON;
    Ok(FeasibilityReport { lmi_margin, p_margin: lam, lambda_min: lam, feasible })
}

/// The ci-RNN's own contraction certificate as a bundle.
pub fn cirnn_certificate(c: &CiRnn) -> Result<CertifiedBundle> {
    let mut b = embed::cirnn_as_implicit(c, &c.p)?;
    b.kind = CertKind::CiRnnContraction;
    Ok(b)
}

/// `[Δv; Δw]ᵀ M(Λ) [Δv; Δw]` with `M(Λ) = [[0, βΛ], [βΛ, -2Λ]]`.
pub fn iqc_quadratic_form(lambda: &[f64], beta: f64, dv: &[f64], dw: &[f64]) -> f64 {
    lambda.iter().zip(dv.iter().zip(dw)).map(|(l, (v, w))| l * (2.0 * beta * v * w - 2.0 * w * w)).sum()
}

/// Smallest `γ ∈ [lo, hi]` (to relative tolerance `tol`) for which the
/// robust-gamma LMI holds at the fixed `θ` and the given `P`.
///
/// `P` is not re-optimized per `γ`, so the result is a certified but
/// possibly conservative upper bound on the incremental gain.
pub fn bisect_gamma(theta: &ImplicitParams, p: &DMatrix<f64>, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo > 0.0 && hi >= lo && tol > 0.0) {
        return Err(Error::InvalidInput(format!("need 0 < lo <= hi and tol > 0 (lo={lo}, hi={hi}, tol={tol})")));
    }
    let psym = SymMatrix::new(p.clone())?;
    if !pd_margin(&psym, EPSILON)? || !(lambda_min(theta) >= EPSILON) {
        return Err(Error::Infeasible("P or Lambda is not strictly positive".into()));
    }
    let feasible = |g: f64| -> Result<bool> { pd_margin(&gamma_lmi(theta, p, g)?, EPSILON) };
    if !feasible(hi)? {
        return Err(Error::Infeasible(format!("gain LMI does not hold at gamma = {hi}")));
    }
    if feasible(lo)? {
        return Ok(lo);
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > tol * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Searches upward from `start` by doubling for a `γ` at which the gain LMI
/// holds with the bundle's `P`, then bisects down.
pub fn certified_gamma(b: &CertifiedBundle, tol: f64) -> Result<f64> {
    let mut hi = 1.0;
    let mut found = false;
    for _ in 0..60 {
        if pd_margin(&gamma_lmi(&b.theta, &b.p, hi)?, EPSILON)? {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    if !found {
        return Err(Error::Infeasible("no certifiable gain bound below 2^60".into()));
    }
    bisect_gamma(&b.theta, &b.p, 1e-6, hi, tol)
}

/// On-disk certificate document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub kind: CertKind,
    pub gamma: Option<f64>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub margins: FeasibilityReport,
    pub epsilon: f64,
    /// Tightest certified gain bound for the fixed model and `P`, if computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_certified: Option<f64>,
}

impl CertificateFile {
    pub fn from_bundle(b: &CertifiedBundle, gamma_certified: Option<f64>) -> Result<Self> {
        Ok(CertificateFile {
            kind: b.kind,
            gamma: b.gamma,
            p: crate::models::io::matrix_rows(&b.p),
            margins: feasibility_margin(b)?,
            epsilon: EPSILON,
            gamma_certified,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Dims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seed_bundle(kind: CertKind, gamma: Option<f64>) -> CertifiedBundle {
        let dims = Dims { n: 2, q: 2, m: 1, p: 1 };
        CertifiedBundle::new(
            ImplicitParams::identity_seed(dims, Activation::Relu),
            DMatrix::identity(2, 2),
            kind,
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn star_seed_is_block_diagonal() {
        let m = assemble_lmi(&seed_bundle(CertKind::RobustStar, None)).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0]));
        assert_eq!(m.as_matrix(), &expect);
    }

    #[test]
    fn gamma_seed_is_block_diagonal() {
        let m = assemble_lmi(&seed_bundle(CertKind::RobustGamma, Some(3.0))).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 2.0, 2.0, 3.0, 1.0, 1.0, 3.0]));
        assert_eq!(m.as_matrix(), &expect);
    }

    #[test]
    fn large_p_breaks_feasibility() {
        let mut b = seed_bundle(CertKind::RobustStar, None);
        b.p = DMatrix::identity(2, 2) * 3.0;
        let m = assemble_lmi(&b).unwrap();
        assert_eq!(m.as_matrix()[(0, 0)], -1.0);
        assert!(!numerics::cholesky_logdet(&m).unwrap().is_pd);
    }

    #[test]
    fn feasibility_report_examples() {
        let b = seed_bundle(CertKind::RobustStar, None);
        let r = feasibility_margin(&b).unwrap();
        assert!(r.feasible && r.lmi_margin >= 1.0 - EPSILON);

        let mut big = b.clone();
        big.theta.f = DMatrix::from_element(2, 2, 0.1) * 1e6;
        assert!(!feasibility_margin(&big).unwrap().feasible);

        let mut zero_lambda = b.clone();
        zero_lambda.theta.lambda[1] = 0.0;
        let r = feasibility_margin(&zero_lambda).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.lambda_min, 0.0);
    }

    #[test]
    fn gamma_presence_is_validated() {
        let dims = Dims { n: 1, q: 1, m: 1, p: 1 };
        let t = ImplicitParams::identity_seed(dims, Activation::Relu);
        let p = DMatrix::identity(1, 1);
        assert!(CertifiedBundle::new(t.clone(), p.clone(), CertKind::RobustGamma, None).is_err());
        assert!(CertifiedBundle::new(t.clone(), p.clone(), CertKind::RobustStar, Some(1.0)).is_err());
        assert!(CertifiedBundle::new(t, DMatrix::identity(2, 2), CertKind::RobustStar, None).is_err());
    }

    #[test]
    fn iqc_examples() {
        assert_eq!(iqc_quadratic_form(&[1.0], 1.0, &[0.0], &[0.0]), 0.0);
        assert_eq!(iqc_quadratic_form(&[1.0], 1.0, &[2.0], &[1.0]), 2.0);
    }

    #[test]
    fn lmi_adjoint_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (kind, gamma) in [(CertKind::RobustStar, None), (CertKind::RobustGamma, Some(2.5))] {
            let dims = Dims { n: 3, q: 2, m: 2, p: 2 };
            let mut t = ImplicitParams::identity_seed(dims, Activation::Relu);
            let mut r = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
            t.e = r(3, 3);
            t.f = r(3, 3);
            t.b1 = r(3, 2);
            t.b2 = r(3, 2);
            t.c1 = r(2, 3);
            t.d11 = r(2, 2);
            t.d12 = r(2, 2);
            t.c2 = r(2, 3);
            t.d22 = r(2, 2);
            t.lambda = DVector::from_vec(vec![0.7, 1.3]);
            let p = r(3, 3);
            let b = CertifiedBundle { theta: t, p, kind, gamma };
            let dim = assemble_lmi(&b).unwrap().dim();
            let g = SymMatrix::new(r(dim, dim)).unwrap().into_matrix();
            let (gt, gp) = lmi_adjoint(&b, &g).unwrap();
            let inner = |b: &CertifiedBundle| assemble_lmi(b).unwrap().as_matrix().component_mul(&g).sum();
            // The LMI is affine in (θ, P): one perturbation per block suffices.
            let base = inner(&b);
            let mut pert = b.clone();
            pert.theta.e[(0, 1)] += 1.0;
            assert!((inner(&pert) - base - gt.e[(0, 1)]).abs() < 1e-12);
            let mut pert = b.clone();
            pert.p[(2, 0)] += 1.0;
            assert!((inner(&pert) - base - gp[(2, 0)]).abs() < 1e-12);
            let mut pert = b.clone();
            pert.theta.lambda[1] += 1.0;
            assert!((inner(&pert) - base - gt.lambda[1]).abs() < 1e-12);
            let mut pert = b.clone();
            pert.theta.c2[(1, 2)] += 1.0;
            assert!((inner(&pert) - base - gt.c2[(1, 2)]).abs() < 1e-12);
            if kind == CertKind::RobustGamma {
                let mut pert = b.clone();
                pert.theta.d22[(0, 1)] += 1.0;
                assert!((inner(&pert) - base - gt.d22[(0, 1)]).abs() < 1e-12);
                let mut pert = b.clone();
                pert.theta.d11[(1, 0)] += 1.0;
                assert!((inner(&pert) - base - gt.d11[(1, 0)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bisect_zero_model_returns_lo() {
        let dims = Dims { n: 2, q: 2, m: 1, p: 1 };
        let t = ImplicitParams::identity_seed(dims, Activation::Relu);
        let g = bisect_gamma(&t, &DMatrix::identity(2, 2), 0.01, 10.0, 1e-6).unwrap();
        assert_eq!(g, 0.01);
    }

    #[test]
    fn bisect_errors_when_hi_is_infeasible() {
        let dims = Dims { n: 1, q: 1, m: 1, p: 1 };
        let mut t = ImplicitParams::identity_seed(dims, Activation::Relu);
        t.b2[(0, 0)] = 1.0;
        t.c1[(0, 0)] = 1.0;
        assert!(bisect_gamma(&t, &DMatrix::identity(1, 1), 0.1, 0.5, 1e-6).is_err());
    }

    #[test]
    fn gamma_monotonicity_on_random_feasible_bundles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for seed in 0..40 {
            let gamma = rng.random_range(0.5..5.0);
            let model = crate::models::init_feasible(
                crate::models::ModelKind::RobustGamma,
                Dims { n: 4, q: 3, m: 1, p: 2 },
                Some(gamma),
                seed,
            )
            .unwrap();
            let crate::models::Model::Robust(b) = model else { unreachable!() };
            for factor in [1.0, 1.5, 4.0, 100.0] {
                assert!(pd_margin(&gamma_lmi(&b.theta, &b.p, gamma * factor).unwrap(), EPSILON).unwrap());
            }
            checked += 1;
        }
        assert_eq!(checked, 40);
    }
}
