//! Plug-in, bias-corrected estimators and standard errors for averages over
//! the data ζ(z; θ, α_i) and for smooth functions of the individual effects
//! μ(α_i).
//!
//! Both corrections consume the per-individual blocks of [`crate::bias`]:
//! the effect-bias vectors B̂_α_i, the noise covariances Σ̂_α_i and, for ζ,
//! the influence projections Ĥ_αi. Estimates based on ζ average over both
//! panel dimensions and converge at the √(nT) rate; μ averages only across
//! individuals and converges at √n.

use nalgebra::{DMatrix, DVector};

use crate::bias::{BiasBlocks, TrimSpec};
use crate::error::{Error, Result};
use crate::model::MomentModel;
use crate::panel::PanelDataset;

/// Average-over-data functional with its derivative suite. The Hessian is
/// with respect to α only; θ enters the variance through the first
/// derivative.
pub trait Zeta: Sync {
    fn value(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> f64;
    fn d_alpha(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64>;
    fn d_theta(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64>;
    fn d_alpha_alpha(&self, z: &[f64], theta: &DVector<f64>, alpha: &DVector<f64>)
        -> DMatrix<f64>;
}

/// Smooth function of one individual effect.
pub trait Mu: Sync {
    fn value(&self, alpha: &DVector<f64>) -> f64;
    fn d_alpha(&self, alpha: &DVector<f64>) -> DVector<f64>;
    fn d_alpha_alpha(&self, alpha: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct FunctionalEstimate {
    pub point: f64,
    /// Estimated O(1/T) bias; the corrected estimate subtracts bias / T̄.
    pub bias: f64,
    pub corrected: f64,
    pub variance: f64,
    pub se: f64,
    /// Whether the HAC part of the variance was floored at its lag-0 term.
    pub variance_floored: bool,
}

/// Divisor convention for the dispersion-of-effects functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionDivisor {
    N,
    NMinusOne,
}

impl DispersionDivisor {
    fn apply(&self, sum: f64, n: usize) -> f64 {
        match self {
            DispersionDivisor::N => sum / n as f64,
            DispersionDivisor::NMinusOne => sum / (n as f64 - 1.0),
        }
    }
}

/// Estimate Ē E[ζ(z; θ, α_i)] with its bias correction and variance.
///
/// The bias aggregates three parts per individual: the trimmed spectral
/// covariance between ζ_α and the influence of α̂_i (ψ̃_α,it = −Ĥ_αi g_it),
/// the effect-bias image ζ̄_α' B̂_α_i, and the curvature term
/// tr(ζ̄_αα Σ̂_α)/2. The variance adds the two plug-in noise terms and a
/// trimmed HAC sum of demeaned ζ values.
pub fn estimate_zeta(
    panel: &PanelDataset,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alphas: &[DVector<f64>],
    blocks: &BiasBlocks,
    zeta: &dyn Zeta,
    trim: TrimSpec,
) -> Result<FunctionalEstimate> {
    let n = panel.n();
    if alphas.len() != n || blocks.per.len() != n {
        return Err(Error::InvalidArgument("alphas/blocks must match the panel".into()));
    }
    let d_theta = model.dims().d_theta;
    let j_s_inv = if d_theta > 0 {
        Some(
            blocks
                .j_s
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("J_s is singular in zeta variance".into()))?,
        )
    } else {
        None
    };

    let mut point = 0.0;
    for (i, block) in panel.blocks.iter().enumerate() {
        let t_len = block.len() as f64;
        let mut zbar = 0.0;
        for obs in &block.obs {
            zbar += zeta.value(&obs.values, theta, &alphas[i]);
        }
        point += zbar / t_len;
    }
    point /= n as f64;

    let mut bias = 0.0;
    let mut v_plugin = 0.0;
    let mut v_hac = 0.0;
    let mut v_hac_lag0 = 0.0;

    for (i, block) in panel.blocks.iter().enumerate() {
        let ib = &blocks.per[i];
        let alpha = &alphas[i];
        let t_len = block.len();
        let tf = t_len as f64;
        let ell = trim.ell(t_len);

        let values: Vec<f64> =
            block.obs.iter().map(|o| zeta.value(&o.values, theta, alpha)).collect();
        let d_al: Vec<DVector<f64>> =
            block.obs.iter().map(|o| zeta.d_alpha(&o.values, theta, alpha)).collect();
        let psi_alpha: Vec<DVector<f64>> = block
            .obs
            .iter()
            .map(|o| -(&ib.h * model.g(&o.values, theta, alpha)))
            .collect();

        // Spectral covariance between ζ_α and the effect influence.
        let mut spectral = 0.0;
        for j in 0..=ell {
            for t in j..t_len {
                spectral += d_al[t].dot(&psi_alpha[t - j]);
            }
        }
        spectral /= tf;

        let mut zalpha_bar = DVector::zeros(model.dims().d_alpha);
        for d in &d_al {
            zalpha_bar += d;
        }
        zalpha_bar /= tf;
        let mut zaa_bar = DMatrix::zeros(model.dims().d_alpha, model.dims().d_alpha);
        for o in &block.obs {
            zaa_bar += zeta.d_alpha_alpha(&o.values, theta, alpha);
        }
        zaa_bar /= tf;

        let curvature = 0.5 * (&zaa_bar * &ib.sigma).trace();
        bias += spectral + zalpha_bar.dot(&ib.b_alpha()) + curvature;

        // Plug-in noise terms of the variance.
        let mut vp = 0.0;
        for (t, o) in block.obs.iter().enumerate() {
            vp += d_al[t].dot(&(&ib.sigma * &d_al[t]));
            if let Some(j_inv) = &j_s_inv {
                let dth = zeta.d_theta(&o.values, theta, alpha);
                vp += dth.dot(&(j_inv * &dth));
            }
        }
        v_plugin += vp / tf;

        // Trimmed HAC sum of the demeaned values.
        let mut hac = 0.0;
        for j in 0..=ell {
            for t in j..t_len {
                hac += (values[t] - point) * (values[t - j] - point);
            }
        }
        v_hac += hac / tf;
        v_hac_lag0 += values.iter().map(|v| (v - point) * (v - point)).sum::<f64>() / tf;
    }

    let nf = n as f64;
    bias /= nf;
    v_plugin /= nf;
    v_hac /= nf;
    v_hac_lag0 /= nf;

    let mut variance_floored = false;
    if v_hac < 0.0 {
        v_hac = v_hac_lag0;
        variance_floored = true;
    }
    let variance = (v_plugin + v_hac).max(0.0);

    let t_bar = panel.mean_t();
    Ok(FunctionalEstimate {
        point,
        bias,
        corrected: point - bias / t_bar,
        variance,
        se: (variance / (nf * t_bar)).sqrt(),
        variance_floored,
    })
}

/// Estimate Ē[μ(α_i)] with its bias correction and variance. The variance
/// includes the Σ̂_α/T noise term, which improves calibration in short
/// panels.
pub fn estimate_mu(
    panel: &PanelDataset,
    alphas: &[DVector<f64>],
    blocks: &BiasBlocks,
    mu: &dyn Mu,
) -> Result<FunctionalEstimate> {
    let n = panel.n();
    if alphas.len() != n || blocks.per.len() != n {
        return Err(Error::InvalidArgument("alphas/blocks must match the panel".into()));
    }
    let nf = n as f64;
    let values: Vec<f64> = alphas.iter().map(|a| mu.value(a)).collect();
    let point = values.iter().sum::<f64>() / nf;

    let mut bias = 0.0;
    let mut noise = 0.0;
    for (i, alpha) in alphas.iter().enumerate() {
        let ib = &blocks.per[i];
        let grad = mu.d_alpha(alpha);
        let hess = mu.d_alpha_alpha(alpha);
        bias += grad.dot(&ib.b_alpha()) + 0.5 * (&hess * &ib.sigma).trace();
        noise += grad.dot(&(&ib.sigma * &grad)) / panel.blocks[i].len() as f64;
    }
    bias /= nf;
    noise /= nf;

    let dispersion = values.iter().map(|v| (v - point) * (v - point)).sum::<f64>() / nf;
    let variance = dispersion + noise;
    let t_bar = panel.mean_t();
    Ok(FunctionalEstimate {
        point,
        bias,
        corrected: point - bias / t_bar,
        variance,
        se: (variance / nf).sqrt(),
        variance_floored: false,
    })
}

/// μ(α) = α[index].
#[derive(Debug, Clone, Copy)]
pub struct MeanEffect {
    pub index: usize,
}

pub fn mean_effect(index: usize) -> MeanEffect {
    MeanEffect { index }
}

impl Mu for MeanEffect {
    fn value(&self, alpha: &DVector<f64>) -> f64 {
        alpha[self.index]
    }

    fn d_alpha(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(alpha.len());
        g[self.index] = 1.0;
        g
    }

    fn d_alpha_alpha(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(alpha.len(), alpha.len())
    }
}

/// μ(α) = (α[index] − center)² with the center treated as fixed.
#[derive(Debug, Clone, Copy)]
pub struct DeviationSquared {
    pub index: usize,
    pub center: f64,
}

impl Mu for DeviationSquared {
    fn value(&self, alpha: &DVector<f64>) -> f64 {
        let d = alpha[self.index] - self.center;
        d * d
    }

    fn d_alpha(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(alpha.len());
        g[self.index] = 2.0 * (alpha[self.index] - self.center);
        g
    }

    fn d_alpha_alpha(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(alpha.len(), alpha.len());
        h[(self.index, self.index)] = 2.0;
        h
    }
}

/// Mean and standard deviation of one effect component with matched SEs.
#[derive(Debug, Clone, Copy)]
pub struct EffectStats {
    pub mean: f64,
    pub var: f64,
    pub sd: f64,
    pub se_mean: f64,
    pub se_sd: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EffectMeanSd {
    pub raw: EffectStats,
    pub corrected: EffectStats,
    /// Bias estimates behind the corrections (mean and variance scale).
    pub bias_mean: f64,
    pub bias_var: f64,
}

/// Paired mean/dispersion summary of one component of the effects.
///
/// The raw path plugs the raw mean into the squared-deviation functional;
/// the corrected path plugs the corrected mean, subtracts the estimated
/// dispersion bias, and uses the corrected dispersion inside the standard
/// error of the mean, which keeps that SE honest when the raw dispersion is
/// inflated by estimation noise. The standard deviation is the square root,
/// with a delta-method standard error SE(σ̂) = SE(σ̂²)/(2σ̂).
pub fn effect_mean_sd(
    panel: &PanelDataset,
    alphas: &[DVector<f64>],
    blocks: &BiasBlocks,
    index: usize,
    divisor: DispersionDivisor,
) -> Result<EffectMeanSd> {
    let n = panel.n();
    if n < 2 {
        return Err(Error::InvalidArgument("dispersion needs at least two individuals".into()));
    }
    let nf = n as f64;
    let t_bar = panel.mean_t();

    let mean_fe = estimate_mu(panel, alphas, blocks, &MeanEffect { index })?;

    let noise_term = (0..n)
        .map(|i| blocks.per[i].sigma[(index, index)] / panel.blocks[i].len() as f64)
        .sum::<f64>()
        / nf;

    let stats_for = |center: f64, mean: f64, correct: bool| -> EffectStats {
        let devs: Vec<f64> = alphas.iter().map(|a| a[index] - center).collect();
        let sum_sq: f64 = devs.iter().map(|d| d * d).sum();
        let var_point = divisor.apply(sum_sq, n);
        let mut bias_var = 0.0;
        for (i, d) in devs.iter().enumerate() {
            let ib = &blocks.per[i];
            bias_var += 2.0 * d * ib.b_alpha()[index] + ib.sigma[(index, index)];
        }
        bias_var /= nf;
        let var_final = if correct { (var_point - bias_var / t_bar).max(0.0) } else { var_point };
        let sd = var_final.sqrt();

        // Variance of the dispersion estimate: fourth-moment term plus the
        // plug-in noise term.
        let mut v_disp = 0.0;
        for (i, d) in devs.iter().enumerate() {
            let mu_i = d * d;
            let grad = 2.0 * d;
            v_disp += (mu_i - var_point) * (mu_i - var_point)
                + grad * grad * blocks.per[i].sigma[(index, index)]
                    / panel.blocks[i].len() as f64;
        }
        v_disp /= nf;
        let se_var = (v_disp / nf).sqrt();
        let se_sd = if sd > 0.0 { se_var / (2.0 * sd) } else { f64::NAN };

        let se_mean = ((var_final + noise_term) / nf).sqrt();
        EffectStats { mean, var: var_final, sd, se_mean, se_sd }
    };

    let raw = stats_for(mean_fe.point, mean_fe.point, false);
    let corrected = stats_for(mean_fe.corrected, mean_fe.corrected, true);

    // Echo the dispersion bias at the corrected center.
    let mut bias_var = 0.0;
    for (i, a) in alphas.iter().enumerate() {
        let d = a[index] - mean_fe.corrected;
        let ib = &blocks.per[i];
        bias_var += 2.0 * d * ib.b_alpha()[index] + ib.sigma[(index, index)];
    }
    bias_var /= nf;

    Ok(EffectMeanSd { raw, corrected, bias_mean: mean_fe.bias, bias_var })
}

/// Two-sided test of `estimate == truth` at the given level (normal
/// critical values).
pub fn two_sided_reject(estimate: f64, truth: f64, se: f64, level: f64) -> bool {
    let crit = match level {
        l if (l - 0.05).abs() < 1e-12 => 1.959963984540054,
        l if (l - 0.01).abs() < 1e-12 => 2.5758293035489004,
        l if (l - 0.10).abs() < 1e-12 => 1.6448536269514722,
        _ => 1.959963984540054,
    };
    ((estimate - truth) / se).abs() > crit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::{bias_blocks, BiasStep};
    use crate::gmm::{identity_weights, solve_common, two_step, GmmOptions};
    use crate::model::{LinearRcIv, VarianceComponents};
    use crate::panel::{IndividualBlock, Observation};
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

    fn vc_panel(n: usize, t_len: usize, sd_alpha: f64, sd_eps: f64, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for i in 0..n {
            let a = sd_alpha * normal(&mut rng);
            let rows: Vec<Vec<f64>> =
                (0..t_len).map(|_| vec![a + sd_eps * normal(&mut rng)]).collect();
            blocks.push(block_from_rows(&format!("i{i}"), &rows));
        }
        PanelDataset::new(blocks).unwrap()
    }

    fn vc_fit(panel: &PanelDataset) -> (Vec<DVector<f64>>, BiasBlocks) {
        let model = VarianceComponents::new();
        let w = identity_weights(panel, 1);
        let fit =
            two_step(panel, &model, &w, &DVector::zeros(0), &GmmOptions::default()).unwrap();
        let alphas = fit.alphas();
        let blocks = bias_blocks(
            panel,
            &model,
            &fit.theta,
            &alphas,
            &fit.weights,
            &fit.first_weights,
            BiasStep::TwoStep,
            TrimSpec::CubeRoot,
        )
        .unwrap();
        (alphas, blocks)
    }

    struct ConstZeta;

    impl Zeta for ConstZeta {
        fn value(&self, z: &[f64], _t: &DVector<f64>, _a: &DVector<f64>) -> f64 {
            z[0]
        }
        fn d_alpha(&self, _z: &[f64], _t: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(a.len())
        }
        fn d_theta(&self, _z: &[f64], t: &DVector<f64>, _a: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(t.len())
        }
        fn d_alpha_alpha(
            &self,
            _z: &[f64],
            _t: &DVector<f64>,
            a: &DVector<f64>,
        ) -> DMatrix<f64> {
            DMatrix::zeros(a.len(), a.len())
        }
    }

    #[test]
    fn zeta_without_parameter_dependence_has_zero_bias() {
        let panel = vc_panel(20, 8, 1.0, 0.5, 3);
        let (alphas, blocks) = vc_fit(&panel);
        let model = VarianceComponents::new();
        let est = estimate_zeta(
            &panel,
            &model,
            &DVector::zeros(0),
            &alphas,
            &blocks,
            &ConstZeta,
            TrimSpec::CubeRoot,
        )
        .unwrap();
        assert_abs_diff_eq!(est.bias, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(est.corrected, est.point, epsilon = 1e-14);
        assert!(est.variance > 0.0);
    }

    struct AlphaZeta;

    impl Zeta for AlphaZeta {
        fn value(&self, _z: &[f64], _t: &DVector<f64>, a: &DVector<f64>) -> f64 {
            a[0]
        }
        fn d_alpha(&self, _z: &[f64], _t: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
            let mut g = DVector::zeros(a.len());
            g[0] = 1.0;
            g
        }
        fn d_theta(&self, _z: &[f64], t: &DVector<f64>, _a: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(t.len())
        }
        fn d_alpha_alpha(
            &self,
            _z: &[f64],
            _t: &DVector<f64>,
            a: &DVector<f64>,
        ) -> DMatrix<f64> {
            DMatrix::zeros(a.len(), a.len())
        }
    }

    #[test]
    fn zeta_of_alpha_matches_mu_point_estimate() {
        let panel = vc_panel(15, 9, 1.0, 0.7, 5);
        let (alphas, blocks) = vc_fit(&panel);
        let model = VarianceComponents::new();
        let z = estimate_zeta(
            &panel,
            &model,
            &DVector::zeros(0),
            &alphas,
            &blocks,
            &AlphaZeta,
            TrimSpec::CubeRoot,
        )
        .unwrap();
        let m = estimate_mu(&panel, &alphas, &blocks, &MeanEffect { index: 0 }).unwrap();
        assert_abs_diff_eq!(z.point, m.point, epsilon = 1e-10);
    }

    /// ζ depending on data, θ and α together, against a direct transcription
    /// of the bias and variance displays with explicit loops.
    struct RichZeta;

    impl Zeta for RichZeta {
        fn value(&self, z: &[f64], t: &DVector<f64>, a: &DVector<f64>) -> f64 {
            // z layout (y, x1, x2, w2) for LinearRcIv(1, 1, 1).
            (z[1] + t[0]) * a[0] + 0.5 * a[0] * a[0] + z[2] * t[0]
        }
        fn d_alpha(&self, z: &[f64], t: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, z[1] + t[0] + a[0])
        }
        fn d_theta(&self, z: &[f64], _t: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, a[0] + z[2])
        }
        fn d_alpha_alpha(
            &self,
            _z: &[f64],
            _t: &DVector<f64>,
            _a: &DVector<f64>,
        ) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
    }

    #[test]
    fn zeta_matches_loop_transcription_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = LinearRcIv::new(1, 1, 1);
        let mut blocks_v = Vec::new();
        for i in 0..6 {
            let a = normal(&mut rng);
            let mut rows = Vec::new();
            for _ in 0..12 {
                let x = normal(&mut rng);
                let z = 0.8 * x + 0.4 * normal(&mut rng);
                let y = a + 0.9 * x + 0.5 * normal(&mut rng);
                rows.push(vec![y, 1.0, x, z]);
            }
            blocks_v.push(block_from_rows(&format!("i{i}"), &rows));
        }
        let panel = PanelDataset::new(blocks_v).unwrap();
        let w = identity_weights(&panel, 2);
        let fit =
            two_step(&panel, &model, &w, &DVector::zeros(1), &GmmOptions::default()).unwrap();
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
        let est = estimate_zeta(
            &panel,
            &model,
            &fit.theta,
            &alphas,
            &blocks,
            &RichZeta,
            TrimSpec::Fixed(2),
        )
        .unwrap();

        // Independent transcription.
        let zeta = RichZeta;
        let n = panel.n() as f64;
        let mut point = 0.0;
        for (i, b) in panel.blocks.iter().enumerate() {
            let mut zb = 0.0;
            for o in &b.obs {
                zb += zeta.value(&o.values, &fit.theta, &alphas[i]);
            }
            point += zb / b.len() as f64;
        }
        point /= n;
        assert_abs_diff_eq!(est.point, point, epsilon = 1e-13);

        let mut bias = 0.0;
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        let j_inv = blocks.j_s.clone().try_inverse().unwrap();
        for (i, b) in panel.blocks.iter().enumerate() {
            let ib = &blocks.per[i];
            let tf = b.len() as f64;
            let ell = 2usize;
            let mut spectral = 0.0;
            for j in 0..=ell {
                for t in j..b.len() {
                    let da = zeta.d_alpha(&b.obs[t].values, &fit.theta, &alphas[i]);
                    let g = model.g(&b.obs[t - j].values, &fit.theta, &alphas[i]);
                    let psi = -(&ib.h * g);
                    spectral += da.dot(&psi);
                }
            }
            spectral /= tf;
            let mut za = DVector::zeros(1);
            let mut zaa = DMatrix::zeros(1, 1);
            for o in &b.obs {
                za += zeta.d_alpha(&o.values, &fit.theta, &alphas[i]);
                zaa += zeta.d_alpha_alpha(&o.values, &fit.theta, &alphas[i]);
            }
            za /= tf;
            zaa /= tf;
            bias += spectral + za.dot(&ib.b_alpha()) + 0.5 * (&zaa * &ib.sigma).trace();

            for o in &b.obs {
                let da = zeta.d_alpha(&o.values, &fit.theta, &alphas[i]);
                let dt = zeta.d_theta(&o.values, &fit.theta, &alphas[i]);
                v1 += (da.dot(&(&ib.sigma * &da)) + dt.dot(&(&j_inv * &dt))) / tf;
            }
            for j in 0..=2usize {
                for t in j..b.len() {
                    let zt = zeta.value(&b.obs[t].values, &fit.theta, &alphas[i]) - point;
                    let zs = zeta.value(&b.obs[t - j].values, &fit.theta, &alphas[i]) - point;
                    v2 += zt * zs / tf;
                }
            }
        }
        bias /= n;
        v1 /= n;
        v2 /= n;
        assert_abs_diff_eq!(est.bias, bias, epsilon = 1e-12);
        if v2 > 0.0 {
            assert_abs_diff_eq!(est.variance, v1 + v2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(est.corrected, point - bias / panel.mean_t(), epsilon = 1e-13);
    }

    #[test]
    fn mu_linear_on_variance_components_has_no_bias() {
        let panel = vc_panel(25, 7, 1.0, 0.8, 11);
        let (alphas, blocks) = vc_fit(&panel);
        let est = estimate_mu(&panel, &alphas, &blocks, &MeanEffect { index: 0 }).unwrap();
        // α̂_i = ȳ_i: the curvature term vanishes (μ linear) and B̂_α is pure
        // noise, so the corrected estimate stays within a tight band of the
        // raw grand mean.
        let ybarbar: f64 = panel
            .blocks
            .iter()
            .map(|b| b.obs.iter().map(|o| o.values[0]).sum::<f64>() / b.len() as f64)
            .sum::<f64>()
            / panel.n() as f64;
        assert_abs_diff_eq!(est.point, ybarbar, epsilon = 1e-12);
        assert!((est.corrected - est.point).abs() < 0.05);
    }

    #[test]
    fn corrected_dispersion_removes_noise_inflation() {
        // E[raw dispersion] = (n-1)/n (σ_α² + σ_ε²/T); the corrected
        // estimator removes the σ_ε²/T part. MC at σ_α = σ_ε = 1, T = 10.
        let reps = 300;
        let (n, t_len) = (100, 10);
        let mut raw_mean = 0.0;
        let mut corr_mean = 0.0;
        for rep in 0..reps {
            let panel = vc_panel(n, t_len, 1.0, 1.0, 1000 + rep);
            let (alphas, blocks) = vc_fit(&panel);
            let est =
                effect_mean_sd(&panel, &alphas, &blocks, 0, DispersionDivisor::N).unwrap();
            raw_mean += est.raw.var;
            corr_mean += est.corrected.var;
        }
        raw_mean /= reps as f64;
        corr_mean /= reps as f64;
        assert!((raw_mean - 0.99 * 1.1).abs() < 0.02, "raw {raw_mean}");
        assert!((corr_mean - 1.0).abs() < 0.02, "corrected {corr_mean}");
    }

    #[test]
    fn affine_mu_maps_through_correction_linearly() {
        struct Affine {
            a: f64,
            b: f64,
        }
        impl Mu for Affine {
            fn value(&self, alpha: &DVector<f64>) -> f64 {
                self.a * alpha[0] + self.b
            }
            fn d_alpha(&self, alpha: &DVector<f64>) -> DVector<f64> {
                let mut g = DVector::zeros(alpha.len());
                g[0] = self.a;
                g
            }
            fn d_alpha_alpha(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(alpha.len(), alpha.len())
            }
        }
        let panel = vc_panel(12, 6, 1.0, 0.6, 29);
        let (alphas, blocks) = vc_fit(&panel);
        let base = estimate_mu(&panel, &alphas, &blocks, &MeanEffect { index: 0 }).unwrap();
        let affine =
            estimate_mu(&panel, &alphas, &blocks, &Affine { a: -2.5, b: 0.7 }).unwrap();
        assert_abs_diff_eq!(affine.corrected, -2.5 * base.corrected + 0.7, epsilon = 1e-12);
    }

    #[test]
    fn variances_are_nonnegative_and_divisor_flag_scales_dispersion() {
        let panel = vc_panel(30, 8, 1.2, 0.9, 31);
        let (alphas, blocks) = vc_fit(&panel);
        let n_div = effect_mean_sd(&panel, &alphas, &blocks, 0, DispersionDivisor::N).unwrap();
        let n1_div =
            effect_mean_sd(&panel, &alphas, &blocks, 0, DispersionDivisor::NMinusOne).unwrap();
        assert!(n_div.raw.var >= 0.0 && n1_div.raw.var >= 0.0);
        assert_abs_diff_eq!(n1_div.raw.var, n_div.raw.var * 30.0 / 29.0, epsilon = 1e-12);
        let m = estimate_mu(&panel, &alphas, &blocks, &MeanEffect { index: 0 }).unwrap();
        assert!(m.variance >= 0.0);
    }

    #[test]
    fn rejection_machinery_reproduces_nominal_size_on_exact_toy() {
        // Known-truth toy: the mean of n i.i.d. N(0,1) effects observed with
        // little noise, tested against 0 at the 5% level.
        let reps = 400;
        let mut rejections = 0;
        for rep in 0..reps {
            let panel = vc_panel(80, 60, 1.0, 0.3, 7000 + rep);
            let (alphas, blocks) = vc_fit(&panel);
            let est =
                effect_mean_sd(&panel, &alphas, &blocks, 0, DispersionDivisor::N).unwrap();
            if two_sided_reject(est.raw.mean, 0.0, est.raw.se_mean, 0.05) {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        // Binomial(400, 0.05) band plus the slight smallness of the n-divisor
        // dispersion.
        assert!((rate - 0.05).abs() < 0.035, "size {rate}");
    }

    #[test]
    fn one_step_fit_feeds_functionals() {
        let panel = vc_panel(10, 5, 1.0, 0.5, 41);
        let model = VarianceComponents::new();
        let w = identity_weights(&panel, 1);
        let fit =
            solve_common(&panel, &model, &w, &DVector::zeros(0), &GmmOptions::default())
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
            TrimSpec::CubeRoot,
        )
        .unwrap();
        let est = estimate_mu(&panel, &alphas, &blocks, &MeanEffect { index: 0 }).unwrap();
        assert!(est.se > 0.0);
    }
}
