//! Per-individual inner GMM solves, the profiled score, and the
//! one-step/two-step outer estimators of the common parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    sample_jacobians, sample_moment, sample_second_derivatives, MomentModel,
};
use crate::panel::{validate, IndividualBlock, PanelDataset};
use crate::par;
use crate::weighting::{autocovariance, optimal_weight, WeightKind, WeightMatrix};

/// Solver tolerances. `tol_inner` is scaled by (1 + |objective|) when testing
/// the inner first-order conditions.
#[derive(Debug, Clone, Copy)]
pub struct GmmOptions {
    pub tol_inner: f64,
    pub tol_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { tol_inner: 1e-10, tol_outer: 1e-8, max_inner: 100, max_outer: 200 }
    }
}

/// Solution of one individual's inner program at a fixed θ.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub alpha: DVector<f64>,
    pub lambda: DVector<f64>,
    /// ĝ' W^{-1} ĝ at the solution.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Σ̂_α, Ĥ_α and P̂_α built from Ĝ_α and a weighting matrix:
/// Σ = (G'W^{-1}G)^{-1}, H = Σ G'W^{-1}, P = W^{-1} − W^{-1} G H.
#[derive(Debug, Clone)]
pub struct Projections {
    pub sigma: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

pub fn projections(g_alpha: &DMatrix<f64>, weight: &WeightMatrix) -> Result<Projections> {
    let winv_g = weight.solve_mat(g_alpha);
    let gram = g_alpha.transpose() * &winv_g;
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| Error::Singular("G_alpha' W^-1 G_alpha is singular".into()))?;
    let sigma = chol.inverse();
    let h = &sigma * winv_g.transpose();
    let p = weight.inverse() - &winv_g * &h;
    Ok(Projections { sigma, h, p })
}

fn check_finite(id: &str, what: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric { id: id.into(), t: 0, message: format!("{what} is non-finite") });
    }
    Ok(())
}

/// Solve the inner program arg inf_α ĝ_i(θ, α)' W^{-1} ĝ_i(θ, α) and recover
/// the multipliers λ = −W^{-1} ĝ.
///
/// Models linear in α are solved in closed form by weighted least squares;
/// otherwise Newton iterates the reparametrized first-order conditions in
/// γ = (α, λ) with the analytic block Jacobian, damped by a halving line
/// search, falling back to Levenberg–Marquardt on the quadratic form when
/// Newton stalls.
pub fn solve_individual(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    weight: &WeightMatrix,
    init: Option<&DVector<f64>>,
    opts: &GmmOptions,
) -> Result<InnerSolution> {
    let dims = model.dims();
    dims.check_inner()?;
    if weight.dim() != dims.d_g {
        return Err(Error::InvalidArgument(format!(
            "weight dimension {} does not match d_g = {}",
            weight.dim(),
            dims.d_g
        )));
    }

    if model.linear_in_alpha() {
        let zero = DVector::zeros(dims.d_alpha);
        let g0 = sample_moment(block, model, theta, &zero)?;
        let (_, g_alpha) = sample_jacobians(block, model, theta, &zero)?;
        let proj = projections(&g_alpha, weight)
            .map_err(|_| Error::WeakIdentification(block.id.clone()))?;
        let alpha = -(&proj.h * &g0);
        check_finite(&block.id, "inner WLS solution", &alpha)?;
        let g_hat = &g0 + &g_alpha * &alpha;
        let lambda = -weight.solve_vec(&g_hat);
        let objective = weight.quad_inv(&g_hat);
        return Ok(InnerSolution { alpha, lambda, objective, converged: true, iterations: 1 });
    }

    let alpha0 = match init {
        Some(a) => a.clone(),
        None => DVector::zeros(dims.d_alpha),
    };

    // Newton on the reparametrized FOC, with a degeneracy guard: a runaway
    // iterate can satisfy the FOC trivially where Ĝ_α collapses, so a
    // "converged" point with a near-singular inner gram is rejected.
    let mut iterations = 0usize;
    let newton = newton_foc(block, model, theta, weight, &alpha0, opts, &mut iterations)?;
    let alpha = match newton {
        Some(a) => a,
        None => {
            // Direct minimization of the quadratic form, then a Newton polish.
            let lm = lm_minimize(block, model, theta, weight, &alpha0, opts, &mut iterations)?;
            match newton_foc(block, model, theta, weight, &lm, opts, &mut iterations)? {
                Some(a) => a,
                None => {
                    let g = sample_moment(block, model, theta, &lm)?;
                    let (_, ga) = sample_jacobians(block, model, theta, &lm)?;
                    let lambda = -weight.solve_vec(&g);
                    let r = (ga.transpose() * &lambda).amax();
                    let tol = opts.tol_inner.max(1e-9) * (1.0 + weight.quad_inv(&g).abs());
                    if r < tol && gram_is_sound(&ga, weight) {
                        lm
                    } else {
                        return Err(Error::NonConvergence(format!(
                            "inner solve for id {} stalled at FOC residual {:.3e} (alpha = {:?})",
                            block.id,
                            r,
                            lm.as_slice()
                        )));
                    }
                }
            }
        }
    };

    let g_hat = sample_moment(block, model, theta, &alpha)?;
    // λ from the FOC block ĝ + Ŵ λ = 0, exactly.
    let lambda = -weight.solve_vec(&g_hat);
    let objective = weight.quad_inv(&g_hat);
    check_finite(&block.id, "inner solution", &alpha)?;
    Ok(InnerSolution { alpha, lambda, objective, converged: true, iterations })
}

/// The inner gram Ĝ_α' W^{-1} Ĝ_α must stay comfortably nonsingular for a
/// stationary point to count as a solution.
fn gram_is_sound(g_alpha: &DMatrix<f64>, weight: &WeightMatrix) -> bool {
    let gram = g_alpha.transpose() * weight.solve_mat(g_alpha);
    let d_a = gram.nrows();
    let trace = gram.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return false;
    }
    let min_eig = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    min_eig > 1e-10 * (1.0 + trace / d_a as f64)
}

fn newton_foc(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    weight: &WeightMatrix,
    alpha0: &DVector<f64>,
    opts: &GmmOptions,
    iterations: &mut usize,
) -> Result<Option<DVector<f64>>> {
    let dims = model.dims();
    let d_a = dims.d_alpha;
    let d_g = dims.d_g;

    let residual = |lambda: &DVector<f64>, g_hat: &DVector<f64>, g_alpha: &DMatrix<f64>| {
        let top = g_alpha.transpose() * lambda;
        let bot = g_hat + weight.matrix() * lambda;
        let mut r = DVector::zeros(d_a + d_g);
        r.rows_mut(0, d_a).copy_from(&top);
        r.rows_mut(d_a, d_g).copy_from(&bot);
        r
    };

    let mut alpha = alpha0.clone();
    let mut g_hat = sample_moment(block, model, theta, &alpha)?;
    let mut lambda = -weight.solve_vec(&g_hat);

    for _ in 0..opts.max_inner {
        *iterations += 1;
        let (_, g_alpha) = sample_jacobians(block, model, theta, &alpha)?;
        let r = residual(&lambda, &g_hat, &g_alpha);
        let objective = weight.quad_inv(&g_hat);
        if r.amax() < opts.tol_inner * (1.0 + objective.abs()) {
            return Ok(if gram_is_sound(&g_alpha, weight) { Some(alpha) } else { None });
        }

        // Block Jacobian of the FOC system in γ = (α, λ).
        let (gaa, _) = sample_second_derivatives(block, model, theta, &alpha);
        let mut jac = DMatrix::zeros(d_a + d_g, d_a + d_g);
        for k in 0..d_a {
            let col = gaa[k].transpose() * &lambda;
            jac.view_mut((0, k), (d_a, 1)).copy_from(&col);
        }
        jac.view_mut((0, d_a), (d_a, d_g)).copy_from(&g_alpha.transpose());
        jac.view_mut((d_a, 0), (d_g, d_a)).copy_from(&g_alpha);
        jac.view_mut((d_a, d_a), (d_g, d_g)).copy_from(weight.matrix());

        let delta = match jac.lu().solve(&(-&r)) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => return Ok(None),
        };

        // Halving line search on the FOC residual norm.
        let base_norm = r.norm();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_alpha = &alpha + delta.rows(0, d_a) * step;
            let cand_lambda = &lambda + delta.rows(d_a, d_g) * step;
            let cand_g = sample_moment(block, model, theta, &cand_alpha)?;
            let (_, cand_ga) = sample_jacobians(block, model, theta, &cand_alpha)?;
            let cand_r = residual(&cand_lambda, &cand_g, &cand_ga);
            if cand_r.norm() < base_norm {
                alpha = cand_alpha;
                lambda = cand_lambda;
                g_hat = cand_g;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(None);
        }
    }
    Ok(None)
}

fn lm_minimize(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    weight: &WeightMatrix,
    alpha0: &DVector<f64>,
    opts: &GmmOptions,
    iterations: &mut usize,
) -> Result<DVector<f64>> {
    let d_a = model.dims().d_alpha;
    let mut alpha = alpha0.clone();
    let mut mu = 1e-3;
    for _ in 0..(2 * opts.max_inner) {
        *iterations += 1;
        let g_hat = sample_moment(block, model, theta, &alpha)?;
        let (_, g_alpha) = sample_jacobians(block, model, theta, &alpha)?;
        let winv_g = weight.solve_mat(&g_alpha);
        let grad = g_alpha.transpose() * weight.solve_vec(&g_hat) * 2.0;
        let objective = weight.quad_inv(&g_hat);
        if grad.amax() < opts.tol_inner.max(1e-12) * (1.0 + objective.abs()) {
            break;
        }
        let gn = g_alpha.transpose() * &winv_g * 2.0;
        let damped = &gn + DMatrix::identity(d_a, d_a) * mu;
        let Some(step) = damped.lu().solve(&(-&grad)) else {
            mu *= 10.0;
            continue;
        };
        let cand = &alpha + &step;
        let cand_g = sample_moment(block, model, theta, &cand)?;
        let cand_obj = weight.quad_inv(&cand_g);
        if cand_obj.is_finite() && cand_obj < objective {
            alpha = cand;
            mu = (mu * 0.3).max(1e-12);
        } else {
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
    }
    Ok(alpha)
}

fn solve_all(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    weights: &[WeightMatrix],
    warm: Option<&[DVector<f64>]>,
    opts: &GmmOptions,
) -> Result<Vec<InnerSolution>> {
    let items: Vec<usize> = (0..panel.blocks.len()).collect();
    let results = par::map_slice(&items, |&i| {
        let init = warm.map(|w| &w[i]);
        solve_individual(&panel.blocks[i], model, theta, &weights[i], init, opts)
    });
    let mut weak_ids = Vec::new();
    let mut first_other: Option<Error> = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => out.push(s),
            Err(Error::WeakIdentification(id)) => weak_ids.push(id),
            Err(e) => {
                if first_other.is_none() {
                    first_other = Some(e);
                }
            }
        }
    }
    if !weak_ids.is_empty() {
        return Err(Error::WeakIdentification(weak_ids.join(", ")));
    }
    if let Some(e) = first_other {
        return Err(e);
    }
    Ok(out)
}

/// Profile score ŝ(θ) = −n^{-1} Σ_i Ĝ_θi(θ, α̂_i(θ))' λ̂_i(θ).
pub fn profile_score(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    weights: &[WeightMatrix],
    opts: &GmmOptions,
) -> Result<DVector<f64>> {
    let solutions = solve_all(panel, model, theta, weights, None, opts)?;
    score_from_solutions(panel, model, theta, &solutions)
}

fn score_from_solutions(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    solutions: &[InnerSolution],
) -> Result<DVector<f64>> {
    let d_theta = model.dims().d_theta;
    let mut s = DVector::zeros(d_theta);
    for (block, sol) in panel.blocks.iter().zip(solutions) {
        let (g_theta, _) = sample_jacobians(block, model, theta, &sol.alpha)?;
        s -= g_theta.transpose() * &sol.lambda;
    }
    Ok(s / panel.n() as f64)
}

/// Ĵ_s(θ) = n^{-1} Σ_i Ĝ_θi' P̂_αi Ĝ_θi with P̂ built from each
/// individual's weighting matrix.
pub fn profile_jacobian(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alphas: &[DVector<f64>],
    weights: &[WeightMatrix],
) -> Result<DMatrix<f64>> {
    let d_theta = model.dims().d_theta;
    let mut j = DMatrix::zeros(d_theta, d_theta);
    for (i, block) in panel.blocks.iter().enumerate() {
        let (g_theta, g_alpha) = sample_jacobians(block, model, theta, &alphas[i])?;
        let proj = projections(&g_alpha, &weights[i])
            .map_err(|_| Error::WeakIdentification(block.id.clone()))?;
        j += g_theta.transpose() * &proj.p * g_theta;
    }
    Ok(j / panel.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    OneStep,
    TwoStep,
}

/// A fitted model: θ̂, the per-individual solutions at θ̂, and the weighting
/// matrices that produced them.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub theta: DVector<f64>,
    /// One entry per panel block, in block order.
    pub solutions: Vec<InnerSolution>,
    /// Weights used in the reported stage.
    pub weights: Vec<WeightMatrix>,
    /// First-step weights (equal to `weights` for a one-step fit).
    pub first_weights: Vec<WeightMatrix>,
    pub step: StepKind,
    pub score_norm: f64,
    pub j_s: DMatrix<f64>,
    pub theta_se: Option<DVector<f64>>,
    /// Stage-1 report of a two-step fit.
    pub stage1: Option<Box<FitReport>>,
}

impl FitReport {
    pub fn alphas(&self) -> Vec<DVector<f64>> {
        self.solutions.iter().map(|s| s.alpha.clone()).collect()
    }
}

/// Broadcast a single weight to every individual.
pub fn broadcast_weights(w: &WeightMatrix, n: usize) -> Vec<WeightMatrix> {
    std::iter::repeat_with(|| w.clone()).take(n).collect()
}

pub fn identity_weights(panel: &PanelDataset, d_g: usize) -> Vec<WeightMatrix> {
    broadcast_weights(&WeightMatrix::identity(d_g), panel.n())
}

/// One-step FE-GMM: quasi-Newton root finding on the profile score using
/// Ĵ_s(θ) as the Jacobian. Exact in one step for models linear in θ and α.
pub fn solve_common(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    weights: &[WeightMatrix],
    theta_init: &DVector<f64>,
    opts: &GmmOptions,
) -> Result<FitReport> {
    validate(panel, model)?;
    let dims = model.dims();
    if dims.d_g < dims.d_theta + dims.d_alpha {
        return Err(Error::InvalidArgument(format!(
            "order condition failed: d_g = {} < d_theta + d_alpha = {}",
            dims.d_g,
            dims.d_theta + dims.d_alpha
        )));
    }
    if weights.len() != panel.n() {
        return Err(Error::InvalidArgument("one weight matrix per individual required".into()));
    }
    if theta_init.len() != dims.d_theta {
        return Err(Error::InvalidArgument("theta_init has wrong dimension".into()));
    }

    let mut theta = theta_init.clone();
    let mut solutions = solve_all(panel, model, &theta, weights, None, opts)?;

    if dims.d_theta == 0 {
        let weights_vec = weights.to_vec();
        return Ok(FitReport {
            theta,
            solutions,
            first_weights: weights_vec.clone(),
            weights: weights_vec,
            step: StepKind::OneStep,
            score_norm: 0.0,
            j_s: DMatrix::zeros(0, 0),
            theta_se: None,
            stage1: None,
        });
    }

    let mut score = score_from_solutions(panel, model, &theta, &solutions)?;
    let mut trajectory: Vec<Vec<f64>> = vec![theta.as_slice().to_vec()];
    let mut converged = score.amax() < opts.tol_outer;

    for _ in 0..opts.max_outer {
        if converged {
            break;
        }
        let alphas: Vec<DVector<f64>> = solutions.iter().map(|s| s.alpha.clone()).collect();
        let j_s = profile_jacobian(panel, model, &theta, &alphas, weights)?;
        let delta = j_s
            .clone()
            .lu()
            .solve(&score)
            .ok_or_else(|| Error::Singular("profile Jacobian J_s is singular".into()))?;

        let base_norm = score.norm();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand_theta = &theta - &delta * step;
            let cand_solutions =
                solve_all(panel, model, &cand_theta, weights, Some(&alphas), opts)?;
            let cand_score = score_from_solutions(panel, model, &cand_theta, &cand_solutions)?;
            if cand_score.norm() < base_norm || cand_score.amax() < opts.tol_outer {
                theta = cand_theta;
                solutions = cand_solutions;
                score = cand_score;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trajectory.push(theta.as_slice().to_vec());
        if !accepted {
            return Err(Error::NonConvergence(format!(
                "outer iteration stalled; score norm {:.3e}, trajectory {:?}",
                score.amax(),
                trajectory
            )));
        }
        converged = score.amax() < opts.tol_outer;
    }

    if !converged {
        return Err(Error::NonConvergence(format!(
            "outer iteration did not reach tolerance after {} steps; trajectory {:?}",
            opts.max_outer, trajectory
        )));
    }

    let alphas: Vec<DVector<f64>> = solutions.iter().map(|s| s.alpha.clone()).collect();
    let j_s = profile_jacobian(panel, model, &theta, &alphas, weights)?;
    let weights_vec = weights.to_vec();
    let mut report = FitReport {
        theta,
        solutions,
        first_weights: weights_vec.clone(),
        weights: weights_vec,
        step: StepKind::OneStep,
        score_norm: score.amax(),
        j_s,
        theta_se: None,
        stage1: None,
    };
    report.theta_se = Some(theta_standard_errors(panel, model, &report)?);
    Ok(report)
}

/// Two-step FE-GMM: stage 1 with the supplied first-step weights, stage 2
/// with per-individual optimal weights estimated at the stage-1 solution.
pub fn two_step(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    w_first: &[WeightMatrix],
    theta_init: &DVector<f64>,
    opts: &GmmOptions,
) -> Result<FitReport> {
    two_step_with(panel, model, w_first, theta_init, opts, |block, theta, alpha| {
        optimal_weight(block, model, theta, alpha)
    })
}

/// Two-step driver with a caller-supplied second-step weight updater.
pub fn two_step_with(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    w_first: &[WeightMatrix],
    theta_init: &DVector<f64>,
    opts: &GmmOptions,
    updater: impl Fn(&IndividualBlock, &DVector<f64>, &DVector<f64>) -> Result<WeightMatrix>,
) -> Result<FitReport> {
    let stage1 = solve_common(panel, model, w_first, theta_init, opts)
        .map_err(|e| Error::NonConvergence(format!("stage 1: {e}")))?;
    let mut stage2_weights = Vec::with_capacity(panel.n());
    for (block, sol) in panel.blocks.iter().zip(&stage1.solutions) {
        stage2_weights.push(updater(block, &stage1.theta, &sol.alpha)?);
    }
    let mut report = solve_common(panel, model, &stage2_weights, &stage1.theta, opts)
        .map_err(|e| Error::NonConvergence(format!("stage 2: {e}")))?;
    report.step = StepKind::TwoStep;
    report.first_weights = w_first.to_vec();
    report.stage1 = Some(Box::new(stage1));
    Ok(report)
}

/// Standard errors for θ̂. With optimal weights, SE = sqrt(diag(Ĵ_s^{-1}) /
/// (n T̄)); otherwise the one-step sandwich
/// sqrt(diag(Ĵ_s^{-1} V̂_s Ĵ_s^{-1}) / (n T̄)) with
/// V̂_s = n^{-1} Σ Ĝ_θ' P̂ Ω̂_0 P̂ Ĝ_θ.
pub fn theta_standard_errors(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    fit: &FitReport,
) -> Result<DVector<f64>> {
    Ok(theta_covariance(panel, model, fit)?
        .diagonal()
        .map(|v| v.max(0.0).sqrt()))
}

/// Asymptotic covariance of θ̂ divided by n T̄ (ready for square-rooting).
pub fn theta_covariance(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    fit: &FitReport,
) -> Result<DMatrix<f64>> {
    let d_theta = model.dims().d_theta;
    if d_theta == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let denom = panel.n() as f64 * panel.mean_t();
    let j_inv = fit
        .j_s
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| fit.j_s.clone().try_inverse())
        .ok_or_else(|| Error::Singular("J_s is singular".into()))?;
    let optimal = fit.weights.iter().all(|w| w.kind() == WeightKind::Optimal);
    if optimal {
        return Ok(j_inv / denom);
    }
    // Sandwich for non-optimal weights.
    let mut v = DMatrix::zeros(d_theta, d_theta);
    for (i, block) in panel.blocks.iter().enumerate() {
        let sol = &fit.solutions[i];
        let (g_theta, g_alpha) = sample_jacobians(block, model, &fit.theta, &sol.alpha)?;
        let proj = projections(&g_alpha, &fit.weights[i])?;
        let omega0 = autocovariance(block, model, &fit.theta, &sol.alpha, 0)?;
        let pg = &proj.p * &g_theta;
        v += pg.transpose() * omega0 * pg;
    }
    v /= panel.n() as f64;
    Ok(&j_inv * v * &j_inv / denom)
}
