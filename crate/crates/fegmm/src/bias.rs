//! Analytic estimators of the O(1/T) incidental-parameter bias of the
//! profile score and the three corrections built on them (one-shot, iterated,
//! and score-corrected).
//!
//! All spectral time-series averages are plain truncated sums (no kernel
//! taper) with a per-individual trimming lag ℓ_i; the default policy is
//! ℓ_i = floor(T_i^{1/3}), which grows without bound while ℓ/T → 0.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{
    profile_jacobian, projections, solve_individual, FitReport, GmmOptions, InnerSolution,
    Projections,
};
use crate::model::{sample_jacobians, sample_second_derivatives, MomentModel};
use crate::panel::{IndividualBlock, PanelDataset};
use crate::par;
use crate::weighting::{autocovariance, WeightMatrix};

/// Trimming policy for spectral sums.
#[derive(Debug, Clone, Copy)]
pub enum TrimSpec {
    /// ℓ_i = floor(T_i^{1/3}), clamped to T_i − 1.
    CubeRoot,
    /// A global ℓ, clamped per individual to T_i − 1.
    Fixed(usize),
}

impl TrimSpec {
    pub fn ell(&self, t_len: usize) -> usize {
        let cap = t_len.saturating_sub(1);
        match self {
            TrimSpec::CubeRoot => ((t_len as f64).powf(1.0 / 3.0).floor() as usize).min(cap),
            TrimSpec::Fixed(l) => (*l).min(cap),
        }
    }
}

/// Truncated spectral sum T^{-1} Σ_j Σ_t a_t · b_{t-j} for per-period
/// evaluations `a` and `b`. One-sided sums run j = 0..ℓ; the two-sided
/// variant runs j = -ℓ..ℓ with t restricted so both indices stay in range.
pub fn spectral_sum(
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    ell: usize,
    two_sided: bool,
) -> Result<DMatrix<f64>> {
    let t_len = a.len();
    if b.len() != t_len {
        return Err(Error::InvalidArgument("evaluator series differ in length".into()));
    }
    if t_len == 0 || ell >= t_len {
        return Err(Error::InvalidArgument(format!(
            "trimming lag {ell} out of range for T = {t_len}"
        )));
    }
    let (rows, cols) = (a[0].nrows(), b[0].ncols());
    let mut acc = DMatrix::zeros(rows, cols);
    let lags: Vec<i64> = if two_sided {
        (-(ell as i64)..=ell as i64).collect()
    } else {
        (0..=ell as i64).collect()
    };
    for j in lags {
        let lo = j.max(0) as usize;
        let hi = (t_len as i64 + j.min(0)) as usize;
        for t in lo..hi {
            acc += &a[t] * &b[(t as i64 - j) as usize];
        }
    }
    Ok(acc / t_len as f64)
}

/// Which asymptotic regime the bias pieces are computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasStep {
    /// Second-step weights estimated from the data: pieces I, G, Ω plus the
    /// first-step-weight piece W.
    TwoStep,
    /// Deterministic first-step weight held fixed: pieces I, G and the
    /// non-optimal-weight piece (stored in the `w` slots), plus a variance
    /// term. The weight is treated as non-random.
    OneStepDeterministicW,
}

/// Per-individual building blocks and bias pieces, all evaluated at the
/// supplied (θ, α̂_i).
#[derive(Debug, Clone)]
pub struct IndividualBias {
    pub sigma: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Σ and H built from the first-step weight.
    pub sigma_w: DMatrix<f64>,
    pub h_w: DMatrix<f64>,
    /// Own-score bias of the effect estimator (moment curvature).
    pub b_lambda_i: DVector<f64>,
    pub b_alpha_i: DVector<f64>,
    /// Bias from estimating the moment Jacobian.
    pub b_lambda_g: DVector<f64>,
    pub b_alpha_g: DVector<f64>,
    /// Bias from estimating the weighting matrix (zero in the one-step
    /// regime, where the weight is not estimated).
    pub b_lambda_omega: DVector<f64>,
    pub b_alpha_omega: DVector<f64>,
    /// Two-step: bias from the first-step weight choice. One-step: the
    /// non-optimal-weight piece.
    pub b_lambda_w: DVector<f64>,
    pub b_alpha_w: DVector<f64>,
    /// Score-bias contribution from the effect-estimator bias.
    pub b_s_b: DVector<f64>,
    /// Correlation contribution to the score bias.
    pub b_s_c: DVector<f64>,
    /// Variance contribution (one-step regime only).
    pub b_s_v: Option<DVector<f64>>,
    pub j_si: DMatrix<f64>,
    pub ell: usize,
}

impl IndividualBias {
    /// Total bias of the effect estimator: E[α̂_i − α_i] ≈ b_alpha() / T_i.
    pub fn b_alpha(&self) -> DVector<f64> {
        &self.b_alpha_i + &self.b_alpha_g + &self.b_alpha_omega + &self.b_alpha_w
    }

    pub fn b_lambda_total(&self) -> DVector<f64> {
        &self.b_lambda_i + &self.b_lambda_g + &self.b_lambda_omega + &self.b_lambda_w
    }

    /// Score-bias contribution of this individual.
    pub fn b_s(&self) -> DVector<f64> {
        let mut b = &self.b_s_b + &self.b_s_c;
        if let Some(v) = &self.b_s_v {
            b += v;
        }
        b
    }
}

/// Bias blocks for a whole panel plus the equal-weight aggregates.
#[derive(Debug, Clone)]
pub struct BiasBlocks {
    pub per: Vec<IndividualBias>,
    /// B̂_s = n^{-1} Σ_i per-individual score bias.
    pub b_s: DVector<f64>,
    /// Ĵ_s = n^{-1} Σ_i Ĝ_θi' P̂_αi Ĝ_θi.
    pub j_s: DMatrix<f64>,
}

impl BiasBlocks {
    /// B̂ = −Ĵ_s^{-1} B̂_s; E[θ̂ − θ_0] ≈ B̂ / T.
    pub fn bias_of_theta(&self) -> Result<DVector<f64>> {
        if self.b_s.len() == 0 {
            return Ok(DVector::zeros(0));
        }
        self.j_s
            .clone()
            .lu()
            .solve(&self.b_s)
            .map(|x| -x)
            .ok_or_else(|| Error::Singular("J_s is singular in bias evaluation".into()))
    }
}

fn individual_bias(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
    weight: &WeightMatrix,
    first_weight: &WeightMatrix,
    step: BiasStep,
    trim: TrimSpec,
) -> Result<IndividualBias> {
    let dims = model.dims();
    let t_len = block.len();
    let ell = trim.ell(t_len);

    // Per-period evaluations at (θ, α̂_i).
    let mut g_t: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    let mut ga_t: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    let mut gt_t: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    for obs in &block.obs {
        g_t.push(model.g(&obs.values, theta, alpha));
        ga_t.push(model.g_alpha(&obs.values, theta, alpha));
        gt_t.push(model.g_theta(&obs.values, theta, alpha));
    }
    for (t, g) in g_t.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: block.id.clone(),
                t,
                message: "moment evaluation is non-finite".into(),
            });
        }
    }

    let (g_theta_bar, g_alpha_bar) = sample_jacobians(block, model, theta, alpha)?;
    let (gaa, gta) = sample_second_derivatives(block, model, theta, alpha);

    let proj = projections(&g_alpha_bar, weight).map_err(|_| Error::Validation {
        id: block.id.clone(),
        message: "singular Sigma_alpha in bias blocks".into(),
    })?;
    let proj_w = projections(&g_alpha_bar, first_weight).map_err(|_| Error::Validation {
        id: block.id.clone(),
        message: "singular Sigma_alpha (first-step weight) in bias blocks".into(),
    })?;
    let Projections { sigma, h, p } = proj;
    let Projections { sigma: sigma_w, h: h_w, p: p_w } = proj_w;

    // Projected moments, reused across the spectral sums.
    let pg: Vec<DVector<f64>> = g_t.iter().map(|g| &p * g).collect();
    let pg_w: Vec<DVector<f64>> = g_t.iter().map(|g| &p_w * g).collect();
    let hg: Vec<DVector<f64>> = g_t.iter().map(|g| &h * g).collect();
    let hg_w: Vec<DVector<f64>> = g_t.iter().map(|g| &h_w * g).collect();

    let d_g = dims.d_g;
    let d_a = dims.d_alpha;
    let d_t = dims.d_theta;
    let tf = t_len as f64;

    match step {
        BiasStep::TwoStep => {
            // Curvature piece: −Σ_k Ĝ_αα_k Σ̂[:,k]/2 plus the trimmed
            // spectral sum Σ_j T^{-1} Σ_t Ĝ_α,t Ĥ ĝ_{t-j}.
            let mut k_i = DVector::zeros(d_g);
            for k in 0..d_a {
                k_i -= &gaa[k] * sigma.column(k) * 0.5;
            }
            let mut s_i = DVector::zeros(d_g);
            let mut s_g = DVector::zeros(d_a);
            let mut s_om = DVector::zeros(d_g);
            let mut b_s_c = DVector::zeros(d_t);
            for j in 0..=ell {
                for t in j..t_len {
                    s_i += &ga_t[t] * &hg[t - j];
                    s_g += ga_t[t].transpose() * &pg[t - j];
                    s_om += &g_t[t] * g_t[t].dot(&pg[t - j]);
                    b_s_c += gt_t[t].transpose() * &pg[t - j];
                }
            }
            s_i /= tf;
            s_g /= tf;
            s_om /= tf;
            b_s_c /= tf;
            k_i += &s_i;

            // Derivative of the lag-0 moment covariance in each α component,
            // by the product rule on the pointwise evaluations.
            let mut s_w = DVector::zeros(d_g);
            for k in 0..d_a {
                let mut om_k = DMatrix::zeros(d_g, d_g);
                for t in 0..t_len {
                    let dcol = ga_t[t].column(k);
                    om_k += dcol * g_t[t].transpose();
                    om_k += &g_t[t] * dcol.transpose();
                }
                om_k /= tf;
                let diff = (h_w.row(k) - h.row(k)).transpose();
                s_w += om_k * diff;
            }

            let b_lambda_i = &p * &k_i;
            let b_alpha_i = &h * &k_i;
            let b_lambda_g = h.transpose() * &s_g;
            let b_alpha_g = -(&sigma * &s_g);
            let b_lambda_omega = &p * &s_om;
            let b_alpha_omega = &h * &s_om;
            let b_lambda_w = &p * &s_w;
            let b_alpha_w = &h * &s_w;

            let b_s_b = -(g_theta_bar.transpose()
                * (&b_lambda_i + &b_lambda_g + &b_lambda_omega + &b_lambda_w));
            let j_si = g_theta_bar.transpose() * &p * &g_theta_bar;

            Ok(IndividualBias {
                sigma,
                h,
                p,
                sigma_w,
                h_w,
                b_lambda_i,
                b_alpha_i,
                b_lambda_g,
                b_alpha_g,
                b_lambda_omega,
                b_alpha_omega,
                b_lambda_w,
                b_alpha_w,
                b_s_b,
                b_s_c,
                b_s_v: None,
                j_si,
                ell,
            })
        }
        BiasStep::OneStepDeterministicW => {
            // All projections come from the deterministic weight.
            let omega0 = autocovariance(block, model, theta, alpha, 0)?;
            let hw_om_hw = &h_w * &omega0 * h_w.transpose(); // d_a × d_a
            let pw_om_hw = &p_w * &omega0 * h_w.transpose(); // d_g × d_a
            let hw_om_pw = &h_w * &omega0 * &p_w; // d_a × d_g

            let mut k_i = DVector::zeros(d_g);
            for k in 0..d_a {
                k_i -= &gaa[k] * hw_om_hw.column(k) * 0.5;
            }
            let mut s_i = DVector::zeros(d_g);
            let mut s_g = DVector::zeros(d_a);
            let mut b_s_c = DVector::zeros(d_t);
            for j in 0..=ell {
                for t in j..t_len {
                    s_i += &ga_t[t] * &hg_w[t - j];
                    s_g += ga_t[t].transpose() * &pg_w[t - j];
                    b_s_c += gt_t[t].transpose() * &pg_w[t - j];
                }
            }
            s_i /= tf;
            s_g /= tf;
            b_s_c /= tf;
            k_i += &s_i;

            // Non-optimal-weight piece of the effect bias.
            let mut v_1s = DVector::zeros(d_a);
            for k in 0..d_a {
                v_1s += gaa[k].transpose() * pw_om_hw.column(k) * 0.5;
            }
            for j in 0..d_g {
                // (a, k) entry Ĝ_αα_k[j, a]: row j of each block, transposed.
                let mut m_j = DMatrix::zeros(d_a, d_a);
                for k in 0..d_a {
                    m_j.set_column(k, &gaa[k].row(j).transpose());
                }
                let u_j = hw_om_pw.column(j);
                v_1s += m_j * u_j * 0.5;
            }

            // Variance term of the score bias.
            let mut b_s_v = DVector::zeros(d_t);
            for k in 0..d_a {
                b_s_v -= gta[k].transpose() * pw_om_hw.column(k) * 0.5;
            }
            for j in 0..d_g {
                let mut n_j = DMatrix::zeros(d_t, d_a);
                for k in 0..d_a {
                    n_j.set_column(k, &gta[k].row(j).transpose());
                }
                b_s_v -= n_j * hw_om_pw.column(j) * 0.5;
            }

            let b_lambda_i = &p_w * &k_i;
            let b_alpha_i = &h_w * &k_i;
            let b_lambda_g = h_w.transpose() * &s_g;
            let b_alpha_g = -(&sigma_w * &s_g);
            let b_lambda_w = -(h_w.transpose() * &v_1s);
            let b_alpha_w = &sigma_w * &v_1s;

            let b_s_b = -(g_theta_bar.transpose() * (&b_lambda_i + &b_lambda_g + &b_lambda_w));
            let j_si = g_theta_bar.transpose() * &p_w * &g_theta_bar;

            Ok(IndividualBias {
                sigma: sigma_w.clone(),
                h: h_w.clone(),
                p: p_w,
                sigma_w,
                h_w,
                b_lambda_i,
                b_alpha_i,
                b_lambda_g,
                b_alpha_g,
                b_lambda_omega: DVector::zeros(d_g),
                b_alpha_omega: DVector::zeros(d_a),
                b_lambda_w,
                b_alpha_w,
                b_s_b,
                b_s_c,
                b_s_v: Some(b_s_v),
                j_si,
                ell,
            })
        }
    }
}

/// Compute all per-individual bias pieces and the aggregates at (θ, {α̂_i}).
#[allow(clippy::too_many_arguments)]
pub fn bias_blocks(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alphas: &[DVector<f64>],
    weights: &[WeightMatrix],
    first_weights: &[WeightMatrix],
    step: BiasStep,
    trim: TrimSpec,
) -> Result<BiasBlocks> {
    if alphas.len() != panel.n() || weights.len() != panel.n() || first_weights.len() != panel.n()
    {
        return Err(Error::InvalidArgument(
            "alphas/weights must have one entry per individual".into(),
        ));
    }
    let idx: Vec<usize> = (0..panel.n()).collect();
    let per: Vec<IndividualBias> = par::map_slice(&idx, |&i| {
        individual_bias(
            &panel.blocks[i],
            model,
            theta,
            &alphas[i],
            &weights[i],
            &first_weights[i],
            step,
            trim,
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let d_t = model.dims().d_theta;
    let mut b_s = DVector::zeros(d_t);
    let mut j_s = DMatrix::zeros(d_t, d_t);
    for ib in &per {
        b_s += ib.b_s();
        j_s += &ib.j_si;
    }
    let n = panel.n() as f64;
    Ok(BiasBlocks { per, b_s: b_s / n, j_s: j_s / n })
}

/// Ĵ_s(θ) = n^{-1} Σ_i Ĝ_θi(θ)' P̂_αi(θ) Ĝ_θi(θ).
pub fn jacobian_estimate(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alphas: &[DVector<f64>],
    weights: &[WeightMatrix],
) -> Result<DMatrix<f64>> {
    profile_jacobian(panel, model, theta, alphas, weights)
}

// ---------------------------------------------------------------------------
// Corrections
// ---------------------------------------------------------------------------

/// One evaluation of the bias machinery at a trial θ.
#[derive(Debug, Clone)]
pub struct BiasEval {
    pub b_s: DVector<f64>,
    pub j_s: DMatrix<f64>,
    pub score: DVector<f64>,
    pub alphas: Vec<DVector<f64>>,
}

/// Anything that can evaluate the score bias as a function of θ. The generic
/// pipeline re-solves the inner problems and recomputes the blocks; closed
/// forms can supply cheaper exact evaluations.
pub trait BiasSource {
    fn eval(&self, theta: &DVector<f64>) -> Result<BiasEval>;
    fn t_bar(&self) -> f64;
}

/// Generic bias source: inner solves with the fit's (fixed) weights, then
/// the analytic blocks.
pub struct GenericBias<'a> {
    pub panel: &'a PanelDataset,
    pub model: &'a dyn MomentModel,
    pub weights: &'a [WeightMatrix],
    pub first_weights: &'a [WeightMatrix],
    pub step: BiasStep,
    pub trim: TrimSpec,
    pub opts: GmmOptions,
}

impl<'a> GenericBias<'a> {
    pub fn from_fit(
        panel: &'a PanelDataset,
        model: &'a dyn MomentModel,
        fit: &'a FitReport,
        trim: TrimSpec,
        opts: GmmOptions,
    ) -> Self {
        let step = match fit.step {
            crate::gmm::StepKind::TwoStep => BiasStep::TwoStep,
            crate::gmm::StepKind::OneStep => BiasStep::OneStepDeterministicW,
        };
        Self {
            panel,
            model,
            weights: &fit.weights,
            first_weights: &fit.first_weights,
            step,
            trim,
            opts,
        }
    }

    fn solve_at(&self, theta: &DVector<f64>) -> Result<Vec<InnerSolution>> {
        let idx: Vec<usize> = (0..self.panel.n()).collect();
        par::map_slice(&idx, |&i| {
            solve_individual(
                &self.panel.blocks[i],
                self.model,
                theta,
                &self.weights[i],
                None,
                &self.opts,
            )
        })
        .into_iter()
        .collect()
    }
}

impl BiasSource for GenericBias<'_> {
    fn eval(&self, theta: &DVector<f64>) -> Result<BiasEval> {
        let solutions = self.solve_at(theta)?;
        let alphas: Vec<DVector<f64>> = solutions.iter().map(|s| s.alpha.clone()).collect();
        let blocks = bias_blocks(
            self.panel,
            self.model,
            theta,
            &alphas,
            self.weights,
            self.first_weights,
            self.step,
            self.trim,
        )?;
        let d_t = self.model.dims().d_theta;
        let mut score = DVector::zeros(d_t);
        for (block, sol) in self.panel.blocks.iter().zip(&solutions) {
            let (g_theta, _) = sample_jacobians(block, self.model, theta, &sol.alpha)?;
            score -= g_theta.transpose() * &sol.lambda;
        }
        score /= self.panel.n() as f64;
        Ok(BiasEval { b_s: blocks.b_s, j_s: blocks.j_s, score, alphas })
    }

    fn t_bar(&self) -> f64 {
        self.panel.mean_t()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMethod {
    Bc,
    Ibc,
    Sbc,
}

#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub method: CorrectionMethod,
    pub theta: DVector<f64>,
    pub iterations: usize,
    /// Effects re-solved at the corrected θ.
    pub alphas: Vec<DVector<f64>>,
    /// B̂ at the final θ.
    pub bias: DVector<f64>,
    /// Defining-equation residual at return.
    pub residual: f64,
}

const CORRECTION_TOL: f64 = 1e-10;
const CORRECTION_MAX_ITER: usize = 100;

fn bias_of(eval: &BiasEval) -> Result<DVector<f64>> {
    if eval.b_s.len() == 0 {
        return Ok(DVector::zeros(0));
    }
    eval.j_s
        .clone()
        .lu()
        .solve(&eval.b_s)
        .map(|x| -x)
        .ok_or_else(|| Error::Singular("J_s is singular in bias evaluation".into()))
}

/// θ̂^BC = θ̂ − B̂(θ̂)/T̄, with the effects re-solved at θ̂^BC.
pub fn correct_bc(source: &dyn BiasSource, theta_hat: &DVector<f64>) -> Result<CorrectionResult> {
    let at_hat = source.eval(theta_hat)?;
    let bias = bias_of(&at_hat)?;
    let theta = theta_hat - &bias / source.t_bar();
    let at_c = source.eval(&theta)?;
    let bias_final = bias_of(&at_c)?;
    Ok(CorrectionResult {
        method: CorrectionMethod::Bc,
        theta,
        iterations: 1,
        alphas: at_c.alphas,
        bias: bias_final,
        residual: 0.0,
    })
}

/// Iterated correction: the fixed point of θ = θ̂ − B̂(θ)/T̄, reached by
/// damped iteration started at θ̂^BC.
pub fn correct_ibc(source: &dyn BiasSource, theta_hat: &DVector<f64>) -> Result<CorrectionResult> {
    let t_bar = source.t_bar();
    let bc = correct_bc(source, theta_hat)?;
    let mut theta = bc.theta.clone();
    let mut eval = source.eval(&theta)?;
    let mut residual = f64::INFINITY;
    for it in 0..CORRECTION_MAX_ITER {
        let bias = bias_of(&eval)?;
        let target = theta_hat - &bias / t_bar;
        residual = (&theta - &target).amax();
        if residual < CORRECTION_TOL {
            return Ok(CorrectionResult {
                method: CorrectionMethod::Ibc,
                theta,
                iterations: it + 1,
                alphas: eval.alphas,
                bias,
                residual,
            });
        }
        // Damped update; halve the step until the fixed-point residual drops.
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = &theta + (&target - &theta) * damping;
            let cand_eval = source.eval(&cand)?;
            let cand_bias = bias_of(&cand_eval)?;
            let cand_target = theta_hat - &cand_bias / t_bar;
            let cand_res = (&cand - &cand_target).amax();
            if cand_res < residual {
                theta = cand;
                eval = cand_eval;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence(format!(
                "iterated correction stalled at residual {residual:.3e}"
            )));
        }
    }
    Err(Error::NonConvergence(format!(
        "iterated correction did not converge in {CORRECTION_MAX_ITER} iterations (residual {residual:.3e})"
    )))
}

/// Score-corrected estimator: the root of ŝ(θ) − B̂_s(θ)/T̄ = 0 by
/// quasi-Newton with Ĵ_s as the Jacobian.
pub fn correct_sbc(
    source: &dyn BiasSource,
    theta_init: &DVector<f64>,
) -> Result<CorrectionResult> {
    let t_bar = source.t_bar();
    let mut theta = theta_init.clone();
    let mut eval = source.eval(&theta)?;
    let mut iterations = 0;
    loop {
        let f = &eval.score - &eval.b_s / t_bar;
        let residual = f.amax();
        if residual < CORRECTION_TOL {
            let bias = bias_of(&eval)?;
            return Ok(CorrectionResult {
                method: CorrectionMethod::Sbc,
                theta,
                iterations,
                alphas: eval.alphas,
                bias,
                residual,
            });
        }
        if iterations >= CORRECTION_MAX_ITER {
            return Err(Error::NonConvergence(format!(
                "score-corrected solve did not converge (residual {residual:.3e})"
            )));
        }
        iterations += 1;
        let delta = eval
            .j_s
            .clone()
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::Singular("J_s is singular in SBC".into()))?;
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &theta - &delta * damping;
            let cand_eval = source.eval(&cand)?;
            let cand_f = &cand_eval.score - &cand_eval.b_s / t_bar;
            if cand_f.norm() < f.norm() {
                theta = cand;
                eval = cand_eval;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence(format!(
                "score-corrected solve stalled at residual {residual:.3e}"
            )));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{identity_weights, solve_common, two_step, StepKind};
    use crate::model::{LinearRcIv, ModelDims};
    use crate::panel::Observation;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_from_rows(id: &str, rows: &[Vec<f64>]) -> IndividualBlock {
        let times = (0..rows.len() as i64).collect();
        let obs = rows.iter().map(|r| Observation::new(r.clone()).unwrap()).collect();
        IndividualBlock::new(id, times, obs).unwrap()
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn trim_policy() {
        assert_eq!(TrimSpec::CubeRoot.ell(23), 2);
        assert_eq!(TrimSpec::CubeRoot.ell(27), 3);
        assert_eq!(TrimSpec::CubeRoot.ell(2), 1);
        assert_eq!(TrimSpec::Fixed(5).ell(4), 3);
    }

    #[test]
    fn spectral_sum_ell_zero_is_lag0_autocovariance_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let series: Vec<DMatrix<f64>> = (0..7)
            .map(|_| DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let a: Vec<DMatrix<f64>> = series.clone();
        let b: Vec<DMatrix<f64>> = series.iter().map(|v| v.transpose()).collect();
        let got = spectral_sum(&a, &b, 0, false).unwrap();
        let mut want = DMatrix::zeros(2, 2);
        for v in &series {
            want += v * v.transpose();
        }
        want /= 7.0;
        assert!((got - want).abs().max() < 1e-14);
    }

    #[test]
    fn spectral_sum_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 11;
        let a: Vec<DMatrix<f64>> = (0..t_len)
            .map(|_| DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<DMatrix<f64>> = (0..t_len)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        for ell in [0usize, 2, 4] {
            for two_sided in [false, true] {
                let got = spectral_sum(&a, &b, ell, two_sided).unwrap();
                let mut want = DMatrix::zeros(2, 2);
                let lags: Vec<i64> = if two_sided {
                    (-(ell as i64)..=ell as i64).collect()
                } else {
                    (0..=ell as i64).collect()
                };
                for j in lags {
                    for t in 0..t_len as i64 {
                        let s = t - j;
                        if s >= 0 && s < t_len as i64 {
                            want += &a[t as usize] * &b[s as usize];
                        }
                    }
                }
                want /= t_len as f64;
                assert!((got - want).abs().max() < 1e-13);
            }
        }
        assert!(spectral_sum(&a, &b, t_len, false).is_err());
    }

    #[test]
    fn white_noise_spectral_sum_is_dominated_by_lag_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t_len = 20_000;
        let a: Vec<DMatrix<f64>> =
            (0..t_len).map(|_| DMatrix::from_element(1, 1, normal(&mut rng))).collect();
        let lag0 = spectral_sum(&a, &a, 0, false).unwrap()[(0, 0)];
        let trimmed = spectral_sum(&a, &a, 3, false).unwrap()[(0, 0)];
        assert!((trimmed - lag0).abs() < 5.0 / (t_len as f64).sqrt());
        assert!((lag0 - 1.0).abs() < 5.0 / (t_len as f64).sqrt());
    }

    /// Nonlinear model with analytic suite for the transcription oracle:
    /// g(z; θ, α) = (1, z1, z2)' (y − e^α (1 + θ x)).
    #[derive(Clone)]
    struct CurvedToy;

    impl CurvedToy {
        fn instruments(z: &[f64]) -> DVector<f64> {
            DVector::from_vec(vec![1.0, z[2], z[3]])
        }
    }

    impl MomentModel for CurvedToy {
        fn dims(&self) -> ModelDims {
            ModelDims { d_g: 3, d_theta: 1, d_alpha: 1 }
        }
        fn arity(&self) -> usize {
            4 // (y, x, z1, z2)
        }
        fn g(&self, z: &[f64], th: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
            Self::instruments(z) * (z[0] - a[0].exp() * (1.0 + th[0] * z[1]))
        }
        fn g_theta(&self, z: &[f64], _th: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_column_slice(
                3,
                1,
                (Self::instruments(z) * (-a[0].exp() * z[1])).as_slice(),
            )
        }
        fn g_alpha(&self, z: &[f64], th: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_column_slice(
                3,
                1,
                (Self::instruments(z) * (-a[0].exp() * (1.0 + th[0] * z[1]))).as_slice(),
            )
        }
        fn g_alpha_alpha(
            &self,
            z: &[f64],
            th: &DVector<f64>,
            a: &DVector<f64>,
        ) -> Vec<DMatrix<f64>> {
            vec![DMatrix::from_column_slice(
                3,
                1,
                (Self::instruments(z) * (-a[0].exp() * (1.0 + th[0] * z[1]))).as_slice(),
            )]
        }
        fn g_theta_alpha(
            &self,
            z: &[f64],
            _th: &DVector<f64>,
            a: &DVector<f64>,
        ) -> Vec<DMatrix<f64>> {
            vec![DMatrix::from_column_slice(
                3,
                1,
                (Self::instruments(z) * (-a[0].exp() * z[1])).as_slice(),
            )]
        }
    }

    fn curved_panel(n: usize, t_len: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for i in 0..n {
            let a = 0.4 + 0.2 * normal(&mut rng);
            let mut rows = Vec::new();
            for _ in 0..t_len {
                let z1 = normal(&mut rng);
                let z2 = normal(&mut rng);
                let x = 0.5 * z1 - 0.3 * z2 + 0.5 * normal(&mut rng);
                let y = a.exp() * (1.0 + 0.3 * x) + 0.3 * normal(&mut rng);
                rows.push(vec![y, x, z1, z2]);
            }
            blocks.push(block_from_rows(&format!("i{i}"), &rows));
        }
        PanelDataset::new(blocks).unwrap()
    }

    /// Brute-force transcription of the two-step bias pieces with explicit
    /// loops; written independently of `individual_bias`.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn brute_force_two_step(
        block: &IndividualBlock,
        model: &dyn MomentModel,
        theta: &DVector<f64>,
        alpha: &DVector<f64>,
        omega: &DMatrix<f64>,
        w_first: &DMatrix<f64>,
        ell: usize,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)
    {
        let dims = model.dims();
        let t_len = block.len();
        let tf = t_len as f64;
        let inv = |m: &DMatrix<f64>| m.clone().try_inverse().unwrap();

        let mut g_bar_a = DMatrix::zeros(dims.d_g, dims.d_alpha);
        let mut g_bar_t = DMatrix::zeros(dims.d_g, dims.d_theta);
        for obs in &block.obs {
            g_bar_a += model.g_alpha(&obs.values, theta, alpha);
            g_bar_t += model.g_theta(&obs.values, theta, alpha);
        }
        g_bar_a /= tf;
        g_bar_t /= tf;

        let om_inv = inv(omega);
        let sigma = inv(&(g_bar_a.transpose() * &om_inv * &g_bar_a));
        let h = &sigma * g_bar_a.transpose() * &om_inv;
        let p = &om_inv - &om_inv * &g_bar_a * &h;
        let w_inv = inv(w_first);
        let sigma_w = inv(&(g_bar_a.transpose() * &w_inv * &g_bar_a));
        let h_w = &sigma_w * g_bar_a.transpose() * &w_inv;

        let g_at = |t: usize| model.g(&block.obs[t].values, theta, alpha);
        let ga_at = |t: usize| model.g_alpha(&block.obs[t].values, theta, alpha);
        let gt_at = |t: usize| model.g_theta(&block.obs[t].values, theta, alpha);

        let mut gaa_bar: Vec<DMatrix<f64>> = (0..dims.d_alpha)
            .map(|_| DMatrix::zeros(dims.d_g, dims.d_alpha))
            .collect();
        for obs in &block.obs {
            for (acc, b) in
                gaa_bar.iter_mut().zip(model.g_alpha_alpha(&obs.values, theta, alpha))
            {
                *acc += b;
            }
        }
        for m in gaa_bar.iter_mut() {
            *m /= tf;
        }
        let mut k_i = DVector::zeros(dims.d_g);
        for j in 0..dims.d_alpha {
            let col: DVector<f64> = sigma.column(j).into();
            k_i -= &gaa_bar[j] * col * 0.5;
        }
        for j in 0..=ell {
            for t in j..t_len {
                k_i += ga_at(t) * (&h * g_at(t - j)) / tf;
            }
        }
        let b_lambda_i = &p * &k_i;

        let mut s_g = DVector::zeros(dims.d_alpha);
        for j in 0..=ell {
            for t in j..t_len {
                s_g += ga_at(t).transpose() * (&p * g_at(t - j)) / tf;
            }
        }
        let b_lambda_g = h.transpose() * &s_g;

        let mut s_om = DVector::zeros(dims.d_g);
        for j in 0..=ell {
            for t in j..t_len {
                let gt = g_at(t);
                let scalar = (gt.transpose() * (&p * g_at(t - j)))[(0, 0)];
                s_om += &gt * scalar / tf;
            }
        }
        let b_lambda_omega = &p * &s_om;

        let mut s_w = DVector::zeros(dims.d_g);
        for k in 0..dims.d_alpha {
            let mut om_k = DMatrix::zeros(dims.d_g, dims.d_g);
            for t in 0..t_len {
                let d: DVector<f64> = ga_at(t).column(k).into();
                om_k += &d * g_at(t).transpose() + g_at(t) * d.transpose();
            }
            om_k /= tf;
            let row_diff: DVector<f64> = (h_w.row(k) - h.row(k)).transpose();
            s_w += om_k * row_diff;
        }
        let b_lambda_w = &p * &s_w;

        let b_s_b = -(g_bar_t.transpose()
            * (&b_lambda_i + &b_lambda_g + &b_lambda_omega + &b_lambda_w));
        let mut b_s_c = DVector::zeros(dims.d_theta);
        for j in 0..=ell {
            for t in j..t_len {
                b_s_c += gt_at(t).transpose() * (&p * g_at(t - j)) / tf;
            }
        }
        (b_lambda_i, b_lambda_g, b_lambda_omega, b_lambda_w, b_s_b, b_s_c)
    }

    #[test]
    fn two_step_blocks_match_brute_force_transcription() {
        let model = CurvedToy;
        let panel = curved_panel(3, 14, 21);
        let w_first = identity_weights(&panel, 3);
        let opts = GmmOptions::default();
        let fit = two_step(&panel, &model, &w_first, &DVector::from_element(1, 0.2), &opts)
            .unwrap();
        assert_eq!(fit.step, StepKind::TwoStep);
        let alphas = fit.alphas();
        let blocks = bias_blocks(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &fit.weights,
            &fit.first_weights,
            BiasStep::TwoStep,
            TrimSpec::Fixed(2),
        )
        .unwrap();

        let mut agg = DVector::zeros(1);
        for (i, ib) in blocks.per.iter().enumerate() {
            let (bi, bg, bo, bw, bsb, bsc) = brute_force_two_step(
                &panel.blocks[i],
                &model,
                &fit.theta,
                &alphas[i],
                fit.weights[i].matrix(),
                fit.first_weights[i].matrix(),
                ib.ell,
            );
            assert!((&ib.b_lambda_i - bi).amax() < 1e-10, "curvature piece, individual {i}");
            assert!((&ib.b_lambda_g - bg).amax() < 1e-10, "jacobian piece, individual {i}");
            assert!((&ib.b_lambda_omega - bo).amax() < 1e-10, "weight piece, individual {i}");
            assert!((&ib.b_lambda_w - bw).amax() < 1e-10, "first-step piece, individual {i}");
            assert!((&ib.b_s_b - bsb).amax() < 1e-10, "B term, individual {i}");
            assert!((&ib.b_s_c - bsc).amax() < 1e-10, "C term, individual {i}");
            agg += ib.b_s();
        }
        agg /= panel.n() as f64;
        // Aggregation identity, bit for bit.
        assert_eq!(agg[0].to_bits(), blocks.b_s[0].to_bits());

        // Decomposition identity from the stored pieces.
        for (i, ib) in blocks.per.iter().enumerate() {
            let (g_theta_bar, _) =
                sample_jacobians(&panel.blocks[i], &model, &fit.theta, &alphas[i]).unwrap();
            let recon = -(g_theta_bar.transpose() * ib.b_lambda_total());
            assert!((recon - &ib.b_s_b).amax() < 1e-14);
        }
    }

    #[test]
    fn linear_rc_effect_bias_pieces_vanish_within_noise() {
        // Homoskedastic i.i.d. errors and exogenous x1: the effect-estimator
        // bias pieces are zero in population; sample versions are
        // O(1/sqrt(T)).
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let model = LinearRcIv::new(2, 1, 2);
        let t_len = 400;
        let mut blocks = Vec::new();
        for i in 0..4 {
            let a0 = normal(&mut rng);
            let a1 = 1.0 + 0.2 * normal(&mut rng);
            let mut rows = Vec::new();
            for _ in 0..t_len {
                let p = normal(&mut rng);
                let z1 = normal(&mut rng);
                let z2 = normal(&mut rng);
                let v = normal(&mut rng);
                let eps = 0.6 * v + 0.8 * normal(&mut rng);
                let x = 0.7 * z1 - 0.5 * z2 + v;
                let y = a0 + a1 * p + 0.6 * x + eps;
                rows.push(vec![y, 1.0, p, x, z1, z2]);
            }
            blocks.push(block_from_rows(&format!("i{i}"), &rows));
        }
        let panel = PanelDataset::new(blocks).unwrap();
        let w_first = identity_weights(&panel, 4);
        let fit =
            two_step(&panel, &model, &w_first, &DVector::zeros(1), &GmmOptions::default())
                .unwrap();
        let alphas = fit.alphas();
        let blocks = bias_blocks(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &fit.weights,
            &fit.first_weights,
            BiasStep::TwoStep,
            TrimSpec::Fixed(2),
        )
        .unwrap();
        // Unit-variance errors keep the multipliers on the moment scale, so
        // each piece is mean-zero noise of order 1/sqrt(T).
        let bound = 5.0 / (t_len as f64).sqrt();
        let mean_abs = |pick: &dyn Fn(&IndividualBias) -> &DVector<f64>| {
            let mut total = 0.0;
            let mut count = 0usize;
            for ib in &blocks.per {
                total += pick(ib).iter().map(|v| v.abs()).sum::<f64>();
                count += pick(ib).len();
            }
            total / count as f64
        };
        assert!(mean_abs(&|ib| &ib.b_lambda_i) < bound, "curvature piece");
        assert!(mean_abs(&|ib| &ib.b_lambda_g) < bound, "jacobian piece");
        assert!(mean_abs(&|ib| &ib.b_lambda_w) < bound, "first-step piece");
        assert!(mean_abs(&|ib| &ib.b_alpha_i) < bound);
        assert!(mean_abs(&|ib| &ib.b_alpha_g) < bound);
        assert!(mean_abs(&|ib| &ib.b_alpha_w) < bound);
    }

    #[test]
    fn correlation_term_vanishes_for_exogenous_just_identified_model() {
        // Exogenous regressors, serially independent moments and no second
        // derivatives: every correlation-term summand has mean zero, so the
        // cross-sectional mean stays within a generous MC bound.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let model = LinearRcIv::new(1, 1, 1);
        let n = 300;
        let t_len = 60;
        let mut blocks = Vec::new();
        for i in 0..n {
            let a = normal(&mut rng);
            let mut rows = Vec::new();
            for _ in 0..t_len {
                let x = normal(&mut rng);
                let y = a + 0.8 * x + 0.5 * normal(&mut rng);
                rows.push(vec![y, 1.0, x, x]);
            }
            blocks.push(block_from_rows(&format!("i{i}"), &rows));
        }
        let panel = PanelDataset::new(blocks).unwrap();
        let w_first = identity_weights(&panel, 2);
        let fit =
            two_step(&panel, &model, &w_first, &DVector::zeros(1), &GmmOptions::default())
                .unwrap();
        let alphas = fit.alphas();
        let blocks = bias_blocks(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &fit.weights,
            &fit.first_weights,
            BiasStep::TwoStep,
            TrimSpec::CubeRoot,
        )
        .unwrap();
        let mean_c = blocks.per.iter().map(|ib| ib.b_s_c[0]).sum::<f64>() / n as f64;
        assert!(mean_c.abs() < 15.0 / ((n * t_len) as f64).sqrt(), "mean C = {mean_c}");
    }

    #[test]
    fn first_step_weight_piece_is_exactly_zero_when_weights_are_proportional() {
        let model = CurvedToy;
        let panel = curved_panel(2, 12, 33);
        let opts = GmmOptions::default();
        let w_first = identity_weights(&panel, 3);
        let fit = solve_common(&panel, &model, &w_first, &DVector::from_element(1, 0.2), &opts)
            .unwrap();
        let alphas = fit.alphas();
        // Blocks with Ω̂ = c·I and W = I: H and H^W coincide, so the
        // first-step-weight piece is identically zero.
        let scaled: Vec<WeightMatrix> = w_first.iter().map(|w| w.scale(2.7).unwrap()).collect();
        let blocks = bias_blocks(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &scaled,
            &w_first,
            BiasStep::TwoStep,
            TrimSpec::CubeRoot,
        )
        .unwrap();
        for ib in &blocks.per {
            assert!(ib.b_lambda_w.amax() < 1e-13);
            assert!(ib.b_alpha_w.amax() < 1e-13);
        }
    }

    #[test]
    fn one_step_blocks_match_brute_force_transcription() {
        let model = CurvedToy;
        let panel = curved_panel(3, 16, 55);
        let w = identity_weights(&panel, 3);
        let opts = GmmOptions::default();
        let fit = solve_common(&panel, &model, &w, &DVector::from_element(1, 0.2), &opts)
            .unwrap();
        let alphas = fit.alphas();
        let blocks = bias_blocks(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &fit.weights,
            &fit.first_weights,
            BiasStep::OneStepDeterministicW,
            TrimSpec::Fixed(2),
        )
        .unwrap();

        for (i, ib) in blocks.per.iter().enumerate() {
            // Independent transcription with explicit loops and inversions.
            let block = &panel.blocks[i];
            let dims = MomentModel::dims(&model);
            let t_len = block.len();
            let tf = t_len as f64;
            let theta = &fit.theta;
            let alpha = &alphas[i];
            let inv = |m: &DMatrix<f64>| m.clone().try_inverse().unwrap();
            let w_mat = fit.weights[i].matrix().clone();

            let (g_bar_t, g_bar_a) = sample_jacobians(block, &model, theta, alpha).unwrap();
            let w_inv = inv(&w_mat);
            let sigma_w = inv(&(g_bar_a.transpose() * &w_inv * &g_bar_a));
            let h_w = &sigma_w * g_bar_a.transpose() * &w_inv;
            let p_w = &w_inv - &w_inv * &g_bar_a * &h_w;

            let mut omega0 = DMatrix::zeros(dims.d_g, dims.d_g);
            for obs in &block.obs {
                let g = model.g(&obs.values, theta, alpha);
                omega0 += &g * g.transpose();
            }
            omega0 /= tf;

            let hw_om_hw = &h_w * &omega0 * h_w.transpose();
            let pw_om_hw = &p_w * &omega0 * h_w.transpose();
            let hw_om_pw = &h_w * &omega0 * &p_w;

            let mut gaa_bar = DMatrix::zeros(dims.d_g, dims.d_alpha);
            let mut gta_bar = DMatrix::zeros(dims.d_g, dims.d_theta);
            for obs in &block.obs {
                gaa_bar += &model.g_alpha_alpha(&obs.values, theta, alpha)[0];
                gta_bar += &model.g_theta_alpha(&obs.values, theta, alpha)[0];
            }
            gaa_bar /= tf;
            gta_bar /= tf;

            let mut k_i = DVector::zeros(dims.d_g);
            let col: DVector<f64> = hw_om_hw.column(0).into();
            k_i -= &gaa_bar * col * 0.5;
            for j in 0..=ib.ell {
                for t in j..t_len {
                    let ga = model.g_alpha(&block.obs[t].values, theta, alpha);
                    let g = model.g(&block.obs[t - j].values, theta, alpha);
                    k_i += ga * (&h_w * g) / tf;
                }
            }
            assert!((&ib.b_lambda_i - &p_w * &k_i).amax() < 1e-10);

            let mut s_g = DVector::zeros(dims.d_alpha);
            for j in 0..=ib.ell {
                for t in j..t_len {
                    let ga = model.g_alpha(&block.obs[t].values, theta, alpha);
                    let g = model.g(&block.obs[t - j].values, theta, alpha);
                    s_g += ga.transpose() * (&p_w * g) / tf;
                }
            }
            assert!((&ib.b_lambda_g - h_w.transpose() * &s_g).amax() < 1e-10);

            // d_alpha = 1 here, so the contracted sums are single terms.
            let mut v_1s = DVector::zeros(1);
            let c0: DVector<f64> = pw_om_hw.column(0).into();
            v_1s += gaa_bar.transpose() * c0 * 0.5;
            for j in 0..dims.d_g {
                let m_j = DMatrix::from_element(1, 1, gaa_bar[(j, 0)]);
                let u_j: DVector<f64> = hw_om_pw.column(j).into();
                v_1s += m_j * u_j * 0.5;
            }
            assert!((&ib.b_lambda_w + h_w.transpose() * &v_1s).amax() < 1e-10);

            let mut b_s_v = DVector::zeros(1);
            let c0: DVector<f64> = pw_om_hw.column(0).into();
            b_s_v -= gta_bar.transpose() * c0 * 0.5;
            for j in 0..dims.d_g {
                let n_j = DMatrix::from_element(1, 1, gta_bar[(j, 0)]);
                let u_j: DVector<f64> = hw_om_pw.column(j).into();
                b_s_v -= n_j * u_j * 0.5;
            }
            assert!((ib.b_s_v.as_ref().unwrap() - &b_s_v).amax() < 1e-10);

            let recon = -(g_bar_t.transpose()
                * (&ib.b_lambda_i + &ib.b_lambda_g + &ib.b_lambda_w));
            assert!((&ib.b_s_b - recon).amax() < 1e-12);
        }
    }

    /// A bias source affine in θ, for exercising the correction drivers in
    /// isolation.
    struct AffineSource {
        theta_hat: DVector<f64>,
        j: DMatrix<f64>,
        b0: DVector<f64>,
        slope: DMatrix<f64>,
        t_bar: f64,
    }

    impl BiasSource for AffineSource {
        fn eval(&self, theta: &DVector<f64>) -> Result<BiasEval> {
            let b_s = &self.b0 + &self.slope * (theta - &self.theta_hat);
            let score = &self.j * (theta - &self.theta_hat);
            Ok(BiasEval { b_s, j_s: self.j.clone(), score, alphas: vec![] })
        }
        fn t_bar(&self) -> f64 {
            self.t_bar
        }
    }

    #[test]
    fn zero_bias_means_no_correction() {
        let src = AffineSource {
            theta_hat: DVector::from_element(1, 1.3),
            j: DMatrix::from_element(1, 1, 2.0),
            b0: DVector::zeros(1),
            slope: DMatrix::zeros(1, 1),
            t_bar: 10.0,
        };
        let bc = correct_bc(&src, &DVector::from_element(1, 1.3)).unwrap();
        assert_abs_diff_eq!(bc.theta[0], 1.3, epsilon = 1e-14);
        let sbc = correct_sbc(&src, &DVector::from_element(1, 1.3)).unwrap();
        assert_abs_diff_eq!(sbc.theta[0], 1.3, epsilon = 1e-14);
    }

    #[test]
    fn constant_bias_makes_ibc_equal_bc() {
        let src = AffineSource {
            theta_hat: DVector::from_element(1, 0.5),
            j: DMatrix::from_element(1, 1, 1.5),
            b0: DVector::from_element(1, 0.3),
            slope: DMatrix::zeros(1, 1),
            t_bar: 20.0,
        };
        let hat = DVector::from_element(1, 0.5);
        let bc = correct_bc(&src, &hat).unwrap();
        let ibc = correct_ibc(&src, &hat).unwrap();
        assert_abs_diff_eq!(bc.theta[0], ibc.theta[0], epsilon = 1e-12);
        // θ^BC = θ̂ + J^{-1} b0 / T̄.
        assert_abs_diff_eq!(bc.theta[0], 0.5 + 0.3 / 1.5 / 20.0, epsilon = 1e-12);
    }

    #[test]
    fn sbc_equals_ibc_for_affine_score_and_bias() {
        let src = AffineSource {
            theta_hat: DVector::from_element(1, 0.8),
            j: DMatrix::from_element(1, 1, 2.5),
            b0: DVector::from_element(1, -0.4),
            slope: DMatrix::from_element(1, 1, 0.6),
            t_bar: 15.0,
        };
        let hat = DVector::from_element(1, 0.8);
        let ibc = correct_ibc(&src, &hat).unwrap();
        let sbc = correct_sbc(&src, &hat).unwrap();
        assert!((ibc.theta[0] - sbc.theta[0]).abs() < 1e-9);
        assert!(ibc.residual < 1e-10);
        assert!(sbc.residual < 1e-10);
    }

    #[test]
    fn generic_corrections_run_on_nonlinear_model() {
        let model = CurvedToy;
        let panel = curved_panel(6, 20, 77);
        let w_first = identity_weights(&panel, 3);
        let opts = GmmOptions::default();
        let fit = two_step(&panel, &model, &w_first, &DVector::from_element(1, 0.2), &opts)
            .unwrap();
        let src = GenericBias::from_fit(&panel, &model, &fit, TrimSpec::CubeRoot, opts);
        let bc = correct_bc(&src, &fit.theta).unwrap();
        let ibc = correct_ibc(&src, &fit.theta).unwrap();
        let sbc = correct_sbc(&src, &fit.theta).unwrap();
        assert!(sbc.residual < 1e-10);
        assert!(ibc.residual < 1e-10);
        // Corrections are O(1/T) adjustments, so they stay near θ̂.
        assert!((bc.theta[0] - fit.theta[0]).abs() < 0.2);
        assert!((ibc.theta[0] - bc.theta[0]).abs() < 0.05);
    }

    #[test]
    fn score_bias_lag_increment_shrinks_with_t() {
        // |B̂_s(ℓ=3) − B̂_s(ℓ=2)| decays like 1/sqrt(T): compare means over a
        // few draws at a short and a long T.
        let gap = |t_len: usize, seed: u64| -> f64 {
            let model = CurvedToy;
            let panel = curved_panel(4, t_len, seed);
            let w_first = identity_weights(&panel, 3);
            let opts = GmmOptions::default();
            let fit =
                two_step(&panel, &model, &w_first, &DVector::from_element(1, 0.2), &opts)
                    .unwrap();
            let alphas = fit.alphas();
            let b = |ell: usize| {
                bias_blocks(
                    &panel,
                    &model,
                    &fit.theta,
                    &alphas,
                    &fit.weights,
                    &fit.first_weights,
                    BiasStep::TwoStep,
                    TrimSpec::Fixed(ell),
                )
                .unwrap()
                .b_s[0]
            };
            (b(3) - b(2)).abs()
        };
        let short: f64 = (0..6).map(|s| gap(24, 100 + s)).sum::<f64>() / 6.0;
        let long: f64 = (0..6).map(|s| gap(384, 200 + s)).sum::<f64>() / 6.0;
        assert!(
            long < short,
            "lag-increment gap should shrink with T: short {short}, long {long}"
        );
    }
}
