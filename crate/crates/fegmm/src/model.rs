//! The moment-function interface g(z; θ, α_i) and its derivative suite.
//!
//! A model supplies the moment vector together with first derivatives in θ
//! and α and the stacked second-derivative blocks used by the bias formulas.
//! Second derivatives are stacked row-wise in the order of the α components:
//! block j of [`MomentModel::g_alpha_alpha`] is ∂G_α/∂α_j (d_g × d_α) and
//! block j of [`MomentModel::g_theta_alpha`] is ∂G_θ/∂α_j (d_g × d_θ).
//!
//! Built-in models document the observation layout they expect from the CSV
//! schema:
//!
//! * [`LinearRcIv`]: z = (y, x1[0..d1], x2[0..d2], w2[0..dw]). Instruments
//!   are w = (x1, w2); only the regressors with common coefficients (x2) are
//!   endogenous.
//! * [`VarianceComponents`]: z = (y).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::panel::IndividualBlock;

/// Dimensions of a moment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Number of moment conditions d_g.
    pub d_g: usize,
    /// Dimension of the common parameter θ.
    pub d_theta: usize,
    /// Dimension of each individual effect α_i.
    pub d_alpha: usize,
}

impl ModelDims {
    /// The inner problem needs d_g >= d_alpha; the full-model order condition
    /// d_g >= d_theta + d_alpha is checked at the estimator level.
    pub fn check_inner(&self) -> Result<()> {
        if self.d_g < self.d_alpha {
            return Err(Error::InvalidArgument(format!(
                "d_g = {} < d_alpha = {}: inner problem under-identified",
                self.d_g, self.d_alpha
            )));
        }
        Ok(())
    }
}

/// Moment function with derivative suite. Implementations must be re-entrant
/// and side-effect-free; concurrent evaluation from many workers is part of
/// the contract.
pub trait MomentModel: Sync {
    fn dims(&self) -> ModelDims;

    /// Length of the raw observation vector z_it this model expects.
    fn arity(&self) -> usize;

    /// g(z; θ, α), a d_g-vector.
    fn g(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64>;

    /// ∂g/∂θ' (d_g × d_theta).
    fn g_theta(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64>;

    /// ∂g/∂α' (d_g × d_alpha).
    fn g_alpha(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64>;

    /// Blocks ∂G_α/∂α_j for j = 0..d_alpha, each d_g × d_alpha.
    fn g_alpha_alpha(
        &self,
        z: &[f64],
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>>;

    /// Blocks ∂G_θ/∂α_j for j = 0..d_alpha, each d_g × d_theta.
    fn g_theta_alpha(
        &self,
        z: &[f64],
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>>;

    fn has_analytic_second(&self) -> bool {
        true
    }

    /// True when g is affine in α with G_α free of (θ, α); enables the
    /// closed-form weighted-least-squares inner solve.
    fn linear_in_alpha(&self) -> bool {
        false
    }

    /// True when g is affine in θ with G_θ free of (θ, α).
    fn linear_in_theta(&self) -> bool {
        false
    }
}

/// ĝ_i(θ, α) = T_i^{-1} Σ_t g(z_it; θ, α).
pub fn sample_moment(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d_g = model.dims().d_g;
    let mut acc = DVector::zeros(d_g);
    for (t, obs) in block.obs.iter().enumerate() {
        let gt = model.g(&obs.values, theta, alpha);
        if gt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: block.id.clone(),
                t,
                message: "moment evaluation is non-finite".into(),
            });
        }
        acc += gt;
    }
    Ok(acc / block.len() as f64)
}

/// (Ĝ_θi, Ĝ_αi) = time averages of the pointwise Jacobians.
pub fn sample_jacobians(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dims = model.dims();
    let mut gt = DMatrix::zeros(dims.d_g, dims.d_theta);
    let mut ga = DMatrix::zeros(dims.d_g, dims.d_alpha);
    for (t, obs) in block.obs.iter().enumerate() {
        let jt = model.g_theta(&obs.values, theta, alpha);
        let ja = model.g_alpha(&obs.values, theta, alpha);
        if jt.iter().chain(ja.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: block.id.clone(),
                t,
                message: "Jacobian evaluation is non-finite".into(),
            });
        }
        gt += jt;
        ga += ja;
    }
    let t_len = block.len() as f64;
    Ok((gt / t_len, ga / t_len))
}

/// Time averages of the stacked second-derivative blocks
/// (Ĝ_αα_{i,j} and Ĝ_θα_{i,j} for j = 0..d_alpha).
pub fn sample_second_derivatives(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let dims = model.dims();
    let mut gaa: Vec<DMatrix<f64>> =
        (0..dims.d_alpha).map(|_| DMatrix::zeros(dims.d_g, dims.d_alpha)).collect();
    let mut gta: Vec<DMatrix<f64>> =
        (0..dims.d_alpha).map(|_| DMatrix::zeros(dims.d_g, dims.d_theta)).collect();
    for obs in &block.obs {
        for (acc, b) in gaa.iter_mut().zip(model.g_alpha_alpha(&obs.values, theta, alpha)) {
            *acc += b;
        }
        for (acc, b) in gta.iter_mut().zip(model.g_theta_alpha(&obs.values, theta, alpha)) {
            *acc += b;
        }
    }
    let t_len = block.len() as f64;
    for m in gaa.iter_mut().chain(gta.iter_mut()) {
        *m /= t_len;
    }
    (gaa, gta)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// A model specified by its moment function alone.
pub trait MomentFn: Sync {
    fn dims(&self) -> ModelDims;
    fn arity(&self) -> usize;
    fn g(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64>;
}

const FD_FIRST_STEP: f64 = 1e-6;
const FD_SECOND_STEP: f64 = 1e-4;

fn fd_step(x: f64, base: f64) -> f64 {
    base * (1.0 + x.abs())
}

/// Wraps a g-only model with central-difference first and second derivatives.
pub struct FiniteDifference<M> {
    inner: M,
}

impl<M: MomentFn> FiniteDifference<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }

    fn diff<F>(&self, eval: F, x: &DVector<f64>, d_g: usize, base: f64) -> DMatrix<f64>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let mut out = DMatrix::zeros(d_g, x.len());
        let mut xp = x.clone();
        for k in 0..x.len() {
            let h = fd_step(x[k], base);
            xp[k] = x[k] + h;
            let up = eval(&xp);
            xp[k] = x[k] - h;
            let dn = eval(&xp);
            xp[k] = x[k];
            out.set_column(k, &((up - dn) / (2.0 * h)));
        }
        out
    }
}

impl<M: MomentFn> MomentModel for FiniteDifference<M> {
    fn dims(&self) -> ModelDims {
        self.inner.dims()
    }

    fn arity(&self) -> usize {
        self.inner.arity()
    }

    fn g(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        self.inner.g(z, theta, alpha)
    }

    fn g_theta(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64> {
        let d_g = self.dims().d_g;
        self.diff(|th| self.inner.g(z, th, alpha), theta, d_g, FD_FIRST_STEP)
    }

    fn g_alpha(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DMatrix<f64> {
        let d_g = self.dims().d_g;
        self.diff(|a| self.inner.g(z, theta, a), alpha, d_g, FD_FIRST_STEP)
    }

    fn g_alpha_alpha(
        &self,
        z: &[f64],
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        // Direct four-point second differences of g; differencing the
        // numeric first derivatives again would amplify their rounding noise
        // past the documented accuracy.
        let d_g = self.dims().d_g;
        let d_a = alpha.len();
        let mut blocks = Vec::with_capacity(d_a);
        let mut a = alpha.clone();
        for j in 0..d_a {
            let hj = fd_step(alpha[j], FD_SECOND_STEP);
            let mut block = DMatrix::zeros(d_g, d_a);
            for k in 0..d_a {
                let hk = fd_step(alpha[k], FD_SECOND_STEP);
                let mut eval = |sj: f64, sk: f64| {
                    a.copy_from(alpha);
                    a[j] += sj * hj;
                    a[k] += sk * hk;
                    self.inner.g(z, theta, &a)
                };
                let col = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0)
                    + eval(-1.0, -1.0))
                    / (4.0 * hj * hk);
                block.set_column(k, &col);
            }
            a.copy_from(alpha);
            blocks.push(block);
        }
        blocks
    }

    fn g_theta_alpha(
        &self,
        z: &[f64],
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        let d_g = self.dims().d_g;
        let d_a = alpha.len();
        let d_t = theta.len();
        let mut blocks = Vec::with_capacity(d_a);
        let mut a = alpha.clone();
        let mut th = theta.clone();
        for j in 0..d_a {
            let hj = fd_step(alpha[j], FD_SECOND_STEP);
            let mut block = DMatrix::zeros(d_g, d_t);
            for k in 0..d_t {
                let hk = fd_step(theta[k], FD_SECOND_STEP);
                let mut eval = |sj: f64, sk: f64| {
                    a.copy_from(alpha);
                    th.copy_from(theta);
                    a[j] += sj * hj;
                    th[k] += sk * hk;
                    self.inner.g(z, &th, &a)
                };
                let col = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0)
                    + eval(-1.0, -1.0))
                    / (4.0 * hj * hk);
                block.set_column(k, &col);
            }
            a.copy_from(alpha);
            th.copy_from(theta);
            blocks.push(block);
        }
        blocks
    }

    fn has_analytic_second(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// Built-in models
// ---------------------------------------------------------------------------

/// Linear correlated random-coefficient IV model.
///
/// g(z; θ, α) = w (y − x1'α − x2'θ) with w = (x1, w2). Observation layout:
/// z = (y, x1, x2, w2).
#[derive(Debug, Clone)]
pub struct LinearRcIv {
    d1: usize,
    d2: usize,
    dw: usize,
}

impl LinearRcIv {
    pub fn new(d1: usize, d2: usize, dw: usize) -> Self {
        assert!(d1 >= 1, "x1 must have at least one column");
        Self { d1, d2, dw }
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn dw(&self) -> usize {
        self.dw
    }

    pub fn y(&self, z: &[f64]) -> f64 {
        z[0]
    }

    pub fn x1<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[1..1 + self.d1]
    }

    pub fn x2<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[1 + self.d1..1 + self.d1 + self.d2]
    }

    pub fn w2<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[1 + self.d1 + self.d2..1 + self.d1 + self.d2 + self.dw]
    }

    /// Instrument vector w = (x1, w2).
    pub fn w(&self, z: &[f64]) -> DVector<f64> {
        let mut w = DVector::zeros(self.d1 + self.dw);
        w.as_mut_slice()[..self.d1].copy_from_slice(self.x1(z));
        w.as_mut_slice()[self.d1..].copy_from_slice(self.w2(z));
        w
    }

    fn residual(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
        let mut r = self.y(z);
        for (xv, av) in self.x1(z).iter().zip(alpha.iter()) {
            r -= xv * av;
        }
        for (xv, tv) in self.x2(z).iter().zip(theta.iter()) {
            r -= xv * tv;
        }
        r
    }
}

impl MomentModel for LinearRcIv {
    fn dims(&self) -> ModelDims {
        ModelDims { d_g: self.d1 + self.dw, d_theta: self.d2, d_alpha: self.d1 }
    }

    fn arity(&self) -> usize {
        1 + self.d1 + self.d2 + self.dw
    }

    fn g(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        self.w(z) * self.residual(z, theta, alpha)
    }

    fn g_theta(&self, z: &[f64], _theta: &DVector<f64>, _alpha: &DVector<f64>) -> DMatrix<f64> {
        let w = self.w(z);
        let x2 = DVector::from_column_slice(self.x2(z));
        -w * x2.transpose()
    }

    fn g_alpha(&self, z: &[f64], _theta: &DVector<f64>, _alpha: &DVector<f64>) -> DMatrix<f64> {
        let w = self.w(z);
        let x1 = DVector::from_column_slice(self.x1(z));
        -w * x1.transpose()
    }

    fn g_alpha_alpha(
        &self,
        _z: &[f64],
        _theta: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        (0..d.d_alpha).map(|_| DMatrix::zeros(d.d_g, d.d_alpha)).collect()
    }

    fn g_theta_alpha(
        &self,
        _z: &[f64],
        _theta: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        (0..d.d_alpha).map(|_| DMatrix::zeros(d.d_g, d.d_theta)).collect()
    }

    fn linear_in_alpha(&self) -> bool {
        true
    }

    fn linear_in_theta(&self) -> bool {
        true
    }
}

/// Variance-of-effects toy model: g(z; ·, α) = y − α with z = (y).
#[derive(Debug, Clone, Default)]
pub struct VarianceComponents;

impl VarianceComponents {
    pub fn new() -> Self {
        Self
    }
}

impl MomentModel for VarianceComponents {
    fn dims(&self) -> ModelDims {
        ModelDims { d_g: 1, d_theta: 0, d_alpha: 1 }
    }

    fn arity(&self) -> usize {
        1
    }

    fn g(&self, z: &[f64], _theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, z[0] - alpha[0])
    }

    fn g_theta(&self, _z: &[f64], _theta: &DVector<f64>, _alpha: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(1, 0)
    }

    fn g_alpha(&self, _z: &[f64], _theta: &DVector<f64>, _alpha: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, -1.0)
    }

    fn g_alpha_alpha(
        &self,
        _z: &[f64],
        _theta: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 1)]
    }

    fn g_theta_alpha(
        &self,
        _z: &[f64],
        _theta: &DVector<f64>,
        _alpha: &DVector<f64>,
    ) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 0)]
    }

    fn linear_in_alpha(&self) -> bool {
        true
    }

    fn linear_in_theta(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Derivative validation
// ---------------------------------------------------------------------------

/// Worst relative disagreement between analytic and finite-difference
/// derivatives over a set of evaluation points.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeCheck {
    pub max_rel_first: f64,
    pub max_rel_second: f64,
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

/// Spot-check the analytic derivative suite against central differences of g
/// (first order) and of the analytic first derivatives (second order).
pub fn check_derivatives(
    model: &dyn MomentModel,
    points: &[(Vec<f64>, DVector<f64>, DVector<f64>)],
) -> DerivativeCheck {
    let d_g = model.dims().d_g;
    let mut worst_first: f64 = 0.0;
    let mut worst_second: f64 = 0.0;
    for (z, theta, alpha) in points {
        // First derivatives against differences of g.
        let mut x = theta.clone();
        let mut fd_theta = DMatrix::zeros(d_g, theta.len());
        for k in 0..theta.len() {
            let h = fd_step(theta[k], FD_FIRST_STEP);
            x[k] = theta[k] + h;
            let up = model.g(z, &x, alpha);
            x[k] = theta[k] - h;
            let dn = model.g(z, &x, alpha);
            x[k] = theta[k];
            fd_theta.set_column(k, &((up - dn) / (2.0 * h)));
        }
        worst_first = worst_first.max(rel_err(&model.g_theta(z, theta, alpha), &fd_theta));

        let mut a = alpha.clone();
        let mut fd_alpha = DMatrix::zeros(d_g, alpha.len());
        for k in 0..alpha.len() {
            let h = fd_step(alpha[k], FD_FIRST_STEP);
            a[k] = alpha[k] + h;
            let up = model.g(z, theta, &a);
            a[k] = alpha[k] - h;
            let dn = model.g(z, theta, &a);
            a[k] = alpha[k];
            fd_alpha.set_column(k, &((up - dn) / (2.0 * h)));
        }
        worst_first = worst_first.max(rel_err(&model.g_alpha(z, theta, alpha), &fd_alpha));

        // Second derivatives against differences of the first derivatives.
        let gaa = model.g_alpha_alpha(z, theta, alpha);
        let gta = model.g_theta_alpha(z, theta, alpha);
        for j in 0..alpha.len() {
            let h = fd_step(alpha[j], FD_SECOND_STEP);
            a[j] = alpha[j] + h;
            let up_a = model.g_alpha(z, theta, &a);
            let up_t = model.g_theta(z, theta, &a);
            a[j] = alpha[j] - h;
            let dn_a = model.g_alpha(z, theta, &a);
            let dn_t = model.g_theta(z, theta, &a);
            a[j] = alpha[j];
            worst_second = worst_second.max(rel_err(&gaa[j], &((up_a - dn_a) / (2.0 * h))));
            worst_second = worst_second.max(rel_err(&gta[j], &((up_t - dn_t) / (2.0 * h))));
        }
    }
    DerivativeCheck { max_rel_first: worst_first, max_rel_second: worst_second }
}

/// Deterministic standard-normal evaluation points for derivative checks.
pub fn random_points(
    model: &dyn MomentModel,
    count: usize,
    seed: u64,
) -> Vec<(Vec<f64>, DVector<f64>, DVector<f64>)> {
    let dims = model.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        // Box-Muller free: sum of uniforms is fine for probe points, but use
        // a plain uniform spread over [-2, 2] to stay scale-neutral.
        rng.gen_range(-2.0..2.0)
    };
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..model.arity()).map(|_| draw(&mut rng)).collect();
            let theta = DVector::from_fn(dims.d_theta, |_, _| draw(&mut rng));
            let alpha = DVector::from_fn(dims.d_alpha, |_, _| draw(&mut rng));
            (z, theta, alpha)
        })
        .collect()
}
