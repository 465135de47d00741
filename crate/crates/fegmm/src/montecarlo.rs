//! Rational-addiction data-generating process and the simulation harness.
//!
//! The design simulates C_it = α_0i + α_1i P_it + θ1 C_{i,t-1} +
//! θ2 C_{i,t+1} + ψ ε_it with P_it = η_0i + η_1i Tax_it + u_it, solving the
//! second-order difference equation through its stationary representation
//! with roots φ1 < 1 < φ2. Replications are independent work items with
//! per-replication seeds derived by counter from the master seed, so results
//! are identical for any worker count.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{bias_blocks, BiasStep, TrimSpec};
use crate::error::{Error, Result};
use crate::functionals::{effect_mean_sd, two_sided_reject, DispersionDivisor};
use crate::linear_rc::{
    closed_form_alpha, closed_form_ibc, closed_form_theta, from_panel, pooled_fc_iv,
    pooled_fc_ols, score_bias, ClosedFormBias, LinearRcData,
};
use crate::model::{LinearRcIv, MomentModel};
use crate::panel::{IndividualBlock, Observation, PanelDataset};
use crate::par;
use crate::weighting::{optimal_weight, WeightMatrix};

/// Tax process used when no file-based series is supplied: a stationary
/// per-individual AR(1). Real excise-tax series are strongly heterogeneous
/// across states: most barely move inside a 23-year window while a few move
/// a lot. The per-state stationary scale is therefore two-regime: with
/// probability `active_share` a state is "active" with scale
/// `stationary_sd`, otherwise its scale is `inert_sd`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTax {
    pub persistence: f64,
    /// Stationary sd of an active state's tax series.
    pub stationary_sd: f64,
    pub mean: f64,
    #[serde(default = "default_active_share")]
    pub active_share: f64,
    #[serde(default = "default_inert_sd")]
    pub inert_sd: f64,
}

fn default_active_share() -> f64 {
    0.08
}

fn default_inert_sd() -> f64 {
    0.015
}

impl Default for SyntheticTax {
    fn default() -> Self {
        Self {
            persistence: 0.95,
            stationary_sd: 0.5,
            mean: 0.25,
            active_share: default_active_share(),
            inert_sd: default_inert_sd(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TaxSource {
    Synthetic(SyntheticTax),
    /// One series per individual, read from a file; must cover the padded
    /// horizon T + 2(S + 1).
    File(Vec<Vec<f64>>),
}

impl Default for TaxSource {
    fn default() -> Self {
        TaxSource::Synthetic(SyntheticTax::default())
    }
}

/// Calibrated simulation design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RationalAddictionDesign {
    pub n: usize,
    pub t: usize,
    pub mu0: f64,
    pub mu1: f64,
    pub mu_eta0: f64,
    pub mu_eta1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma_eta0: f64,
    pub sigma_eta1: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub sigma_u: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub psi: f64,
    #[serde(default)]
    pub tax: TaxSource,
    /// Series-truncation tolerance for the stationary solution.
    #[serde(default = "default_truncation_tol")]
    pub truncation_tol: f64,
}

fn default_truncation_tol() -> f64 {
    1e-10
}

impl RationalAddictionDesign {
    /// Calibrated defaults (n = 51, T = 23) with the configurable
    /// endogeneity scale ψ and effect correlation ρ1.
    pub fn calibrated(psi: f64, rho1: f64) -> Self {
        Self {
            n: 51,
            t: 23,
            mu0: 72.86,
            mu1: -31.26,
            mu_eta0: 0.81,
            mu_eta1: 0.13,
            sigma0: 18.54,
            sigma1: 10.60,
            sigma_eta0: 0.14,
            sigma_eta1: 2.05,
            rho0: -0.17,
            rho1,
            sigma_u: 0.15,
            theta1: 0.45,
            theta2: 0.27,
            psi,
            tax: TaxSource::default(),
            truncation_tol: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.t < 5 {
            return Err(Error::InvalidDesign("need n >= 2 and T >= 5".into()));
        }
        if 1.0 - 4.0 * self.theta1 * self.theta2 <= 0.0 {
            return Err(Error::InvalidDesign("1 - 4 θ1 θ2 must be positive (real roots)".into()));
        }
        if self.theta1 <= 0.0 {
            return Err(Error::InvalidDesign("θ1 must be positive".into()));
        }
        for (name, v) in [
            ("sigma0", self.sigma0),
            ("sigma1", self.sigma1),
            ("sigma_eta0", self.sigma_eta0),
            ("sigma_eta1", self.sigma_eta1),
            ("sigma_u", self.sigma_u),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidDesign(format!("{name} must be positive")));
            }
        }
        for (name, r) in [("rho0", self.rho0), ("rho1", self.rho1)] {
            if r.abs() >= 1.0 {
                return Err(Error::InvalidDesign(format!("|{name}| must be below 1")));
            }
        }
        if let TaxSource::Synthetic(t) = &self.tax {
            if t.persistence.abs() >= 1.0
                || t.stationary_sd <= 0.0
                || t.inert_sd <= 0.0
                || !(0.0..=1.0).contains(&t.active_share)
            {
                return Err(Error::InvalidDesign("invalid synthetic tax process".into()));
            }
        }
        Ok(())
    }

    /// Roots of the consumption difference equation:
    /// φ1 = (1 − √(1−4θ1θ2))/(2θ1), φ2 = (1 + √(1−4θ1θ2))/(2θ1).
    pub fn roots(&self) -> (f64, f64) {
        let disc = (1.0 - 4.0 * self.theta1 * self.theta2).sqrt();
        ((1.0 - disc) / (2.0 * self.theta1), (1.0 + disc) / (2.0 * self.theta1))
    }

    /// Number of terms after which both geometric tails fall below the
    /// truncation tolerance.
    pub fn truncation_terms(&self) -> usize {
        let (phi1, phi2) = self.roots();
        let rate = phi1.max(1.0 / phi2);
        (self.truncation_tol.ln() / rate.ln()).ceil() as usize
    }
}

/// True parameter values behind one simulated panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub theta1: f64,
    pub theta2: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    /// Usable panel length after creating the consumption lead and lag.
    pub usable_t: usize,
}

/// Column order of the emitted panel, shared with the estimation presets:
/// (C, 1, P, C_lag, C_lead, P_lag, P_lead, Tax, Tax_lag, Tax_lead).
pub const PANEL_COLUMNS: [&str; 10] =
    ["C", "const", "P", "C_lag", "C_lead", "P_lag", "P_lead", "Tax", "Tax_lag", "Tax_lead"];

/// The estimation model matching [`PANEL_COLUMNS`]: y = C, x1 = (1, P),
/// x2 = (C_lag, C_lead), w2 = (P_lag, P_lead, Tax, Tax_lag, Tax_lead).
pub fn iv_rc_model() -> LinearRcIv {
    LinearRcIv::new(2, 2, 5)
}

/// Variant with w2 = x2: the moments treat the consumption lead and lag as
/// exogenous (they are not), which is the point of the comparison.
pub fn ols_rc_model() -> LinearRcIv {
    LinearRcIv::new(2, 2, 2)
}

/// Project the emitted 10-column rows onto the 7-column layout of
/// [`ols_rc_model`]: (C, 1, P, C_lag, C_lead, C_lag, C_lead).
pub fn project_for_ols_rc(panel: &PanelDataset) -> Result<PanelDataset> {
    let picks = [0usize, 1, 2, 3, 4, 3, 4];
    let mut blocks = Vec::with_capacity(panel.n());
    for block in &panel.blocks {
        let obs = block
            .obs
            .iter()
            .map(|o| Observation::new(picks.iter().map(|&k| o.values[k]).collect()))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(IndividualBlock::new(block.id.clone(), block.times.clone(), obs)?);
    }
    PanelDataset::new(blocks)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Simulate one panel. Both infinite sums of the stationary solution are
/// truncated after S terms with S chosen from the design tolerance, and all
/// driving processes are simulated on the padded horizon so every truncated
/// term is available.
pub fn generate_panel(
    design: &RationalAddictionDesign,
    seed: u64,
) -> Result<(PanelDataset, TruthRecord)> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (phi1, phi2) = design.roots();
    let s_terms = design.truncation_terms();
    let t_len = design.t;

    // Padded time axis [-(s_terms + 2), t_len + s_terms + 2), indexed from 0.
    let pad = s_terms + 2;
    let horizon = t_len + 2 * pad;

    let c1 = 1.0 / (design.theta1 * phi1 * (phi2 - phi1));
    let c2 = 1.0 / (design.theta1 * phi2 * (phi2 - phi1));

    let mut blocks = Vec::with_capacity(design.n);
    let mut alpha0_true = Vec::with_capacity(design.n);
    let mut alpha1_true = Vec::with_capacity(design.n);

    for i in 0..design.n {
        // Correlated effect pairs (α_ji, η_ji), j = 0, 1.
        let draw_pair = |rng: &mut ChaCha8Rng, mu_a: f64, sd_a: f64, mu_e: f64, sd_e: f64, rho: f64| {
            let z1 = normal(rng);
            let z2 = normal(rng);
            let a = mu_a + sd_a * z1;
            let e = mu_e + sd_e * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
            (a, e)
        };
        let (alpha0, eta0) =
            draw_pair(&mut rng, design.mu0, design.sigma0, design.mu_eta0, design.sigma_eta0, design.rho0);
        let (alpha1, eta1) =
            draw_pair(&mut rng, design.mu1, design.sigma1, design.mu_eta1, design.sigma_eta1, design.rho1);
        alpha0_true.push(alpha0);
        alpha1_true.push(alpha1);

        let tax: Vec<f64> = match &design.tax {
            TaxSource::Synthetic(t) => {
                let active: f64 = rng.gen_range(0.0..1.0);
                let scale = if active < t.active_share { t.stationary_sd } else { t.inert_sd };
                let innov_sd = scale * (1.0 - t.persistence * t.persistence).sqrt();
                let mut series = Vec::with_capacity(horizon);
                let mut x = scale * normal(&mut rng);
                for _ in 0..horizon {
                    series.push(t.mean + x);
                    x = t.persistence * x + innov_sd * normal(&mut rng);
                }
                series
            }
            TaxSource::File(rows) => {
                let row = rows.get(i).ok_or_else(|| {
                    Error::InvalidDesign(format!("tax file has no series for individual {i}"))
                })?;
                if row.len() < horizon {
                    return Err(Error::InvalidDesign(format!(
                        "tax series for individual {i} has {} periods; the padded horizon needs {horizon}",
                        row.len()
                    )));
                }
                row[..horizon].to_vec()
            }
        };

        let price: Vec<f64> =
            tax.iter().map(|tx| eta0 + eta1 * tx + design.sigma_u * normal(&mut rng)).collect();
        let eps: Vec<f64> = (0..horizon).map(|_| normal(&mut rng)).collect();

        // h(t) = α0 + α1 P_{t-1} + ψ ε_{t-1} on the padded axis (t >= 1).
        let h = |t: usize| -> f64 {
            alpha0 + alpha1 * price[t - 1] + design.psi * eps[t - 1]
        };

        // C on the inner axis [pad - 1, pad + t_len + 1) so that the lead and
        // lag of every emitted period exist.
        let c_lo = pad - 1;
        let c_hi = pad + t_len + 1;
        let mut consumption = vec![0.0; horizon];
        for t in c_lo..c_hi {
            let mut forward = 0.0;
            let mut w = 1.0;
            for s in 1..=s_terms {
                w *= phi1;
                forward += w * h(t + s);
            }
            let mut backward = 0.0;
            let mut w = 1.0;
            for s in 0..=s_terms {
                backward += w * h(t - s);
                w /= phi2;
            }
            consumption[t] = c1 * forward + c2 * backward;
        }

        // Emit t = 2..T-1 in design time, i.e. pad+1..pad+t_len-1 on the
        // padded axis: the usable window after creating the lead and lag.
        let mut times = Vec::new();
        let mut obs = Vec::new();
        for t in (pad + 1)..(pad + t_len - 1) {
            let row = vec![
                consumption[t],
                1.0,
                price[t],
                consumption[t - 1],
                consumption[t + 1],
                price[t - 1],
                price[t + 1],
                tax[t],
                tax[t - 1],
                tax[t + 1],
            ];
            times.push((t - pad) as i64);
            obs.push(Observation::new(row)?);
        }
        blocks.push(IndividualBlock::new(format!("s{i:02}"), times, obs)?);
    }

    let usable_t = t_len - 2;
    let panel = PanelDataset::new(blocks)?;
    Ok((
        panel,
        TruthRecord {
            theta1: design.theta1,
            theta2: design.theta2,
            mu1: design.mu1,
            sigma1: design.sigma1,
            alpha0: alpha0_true,
            alpha1: alpha1_true,
            usable_t,
        },
    ))
}

/// Plug-back residuals of the structural equation on the emitted window;
/// the decisive correctness check for the generator.
pub fn structural_residuals(
    design: &RationalAddictionDesign,
    panel: &PanelDataset,
    truth: &TruthRecord,
    seed: u64,
) -> Result<f64> {
    // Regenerate the shocks with the same seed to recover ε_it.
    let (regenerated, _) = generate_panel(design, seed)?;
    let mut max_resid: f64 = 0.0;
    for (i, block) in panel.blocks.iter().enumerate() {
        for (t, obs) in block.obs.iter().enumerate() {
            let z = &obs.values;
            let (c, p, c_lag, c_lead) = (z[0], z[2], z[3], z[4]);
            let resid = c
                - truth.alpha0[i]
                - truth.alpha1[i] * p
                - design.theta1 * c_lag
                - design.theta2 * c_lead;
            // resid should equal ψ ε_it; compare against the regenerated
            // panel's implied shock to close the loop.
            let z2 = &regenerated.blocks[i].obs[t].values;
            let resid2 = z2[0]
                - truth.alpha0[i]
                - truth.alpha1[i] * z2[2]
                - design.theta1 * z2[3]
                - design.theta2 * z2[4];
            max_resid = max_resid.max((resid - resid2).abs());
        }
    }
    Ok(max_resid)
}

/// Maximum deviation of the generated series from the structural equation,
/// using the simulated shocks directly.
pub fn plug_back_error(design: &RationalAddictionDesign, seed: u64) -> Result<f64> {
    // Re-run the generator while retaining the shock series.
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (phi1, phi2) = design.roots();
    let s_terms = design.truncation_terms();
    let t_len = design.t;
    let pad = s_terms + 2;
    let horizon = t_len + 2 * pad;
    let c1 = 1.0 / (design.theta1 * phi1 * (phi2 - phi1));
    let c2 = 1.0 / (design.theta1 * phi2 * (phi2 - phi1));

    let mut worst: f64 = 0.0;
    for _ in 0..design.n {
        let draw_pair = |rng: &mut ChaCha8Rng, mu_a: f64, sd_a: f64, mu_e: f64, sd_e: f64, rho: f64| {
            let z1 = normal(rng);
            let z2 = normal(rng);
            (mu_a + sd_a * z1, mu_e + sd_e * (rho * z1 + (1.0 - rho * rho).sqrt() * z2))
        };
        let (alpha0, eta0) =
            draw_pair(&mut rng, design.mu0, design.sigma0, design.mu_eta0, design.sigma_eta0, design.rho0);
        let (alpha1, eta1) =
            draw_pair(&mut rng, design.mu1, design.sigma1, design.mu_eta1, design.sigma_eta1, design.rho1);
        let tax: Vec<f64> = match &design.tax {
            TaxSource::Synthetic(t) => {
                let active: f64 = rng.gen_range(0.0..1.0);
                let scale = if active < t.active_share { t.stationary_sd } else { t.inert_sd };
                let innov_sd = scale * (1.0 - t.persistence * t.persistence).sqrt();
                let mut series = Vec::with_capacity(horizon);
                let mut x = scale * normal(&mut rng);
                for _ in 0..horizon {
                    series.push(t.mean + x);
                    x = t.persistence * x + innov_sd * normal(&mut rng);
                }
                series
            }
            TaxSource::File(_) => {
                return Err(Error::InvalidDesign(
                    "plug-back check supports the synthetic tax source".into(),
                ))
            }
        };
        let price: Vec<f64> =
            tax.iter().map(|tx| eta0 + eta1 * tx + design.sigma_u * normal(&mut rng)).collect();
        let eps: Vec<f64> = (0..horizon).map(|_| normal(&mut rng)).collect();
        let h = |t: usize| alpha0 + alpha1 * price[t - 1] + design.psi * eps[t - 1];

        let c_lo = pad - 1;
        let c_hi = pad + t_len + 1;
        let mut consumption = vec![0.0; horizon];
        for t in c_lo..c_hi {
            let mut forward = 0.0;
            let mut w = 1.0;
            for s in 1..=s_terms {
                w *= phi1;
                forward += w * h(t + s);
            }
            let mut backward = 0.0;
            let mut w = 1.0;
            for s in 0..=s_terms {
                backward += w * h(t - s);
                w /= phi2;
            }
            consumption[t] = c1 * forward + c2 * backward;
        }
        for t in (pad + 1)..(pad + t_len - 1) {
            let resid = consumption[t]
                - alpha0
                - alpha1 * price[t]
                - design.theta1 * consumption[t - 1]
                - design.theta2 * consumption[t + 1]
                - design.psi * eps[t];
            worst = worst.max(resid.abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Estimator suite and table harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    OlsFc,
    IvFc,
    OlsRc,
    BcOls,
    IbcOls,
    IvRc,
    BcIv,
    IbcIv,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::OlsFc,
        EstimatorKind::IvFc,
        EstimatorKind::OlsRc,
        EstimatorKind::BcOls,
        EstimatorKind::IbcOls,
        EstimatorKind::IvRc,
        EstimatorKind::BcIv,
        EstimatorKind::IbcIv,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::OlsFc => "OLS-FC",
            EstimatorKind::IvFc => "IV-FC",
            EstimatorKind::OlsRc => "OLS-RC",
            EstimatorKind::BcOls => "BC-OLS",
            EstimatorKind::IbcOls => "IBC-OLS",
            EstimatorKind::IvRc => "IV-RC",
            EstimatorKind::BcIv => "BC-IV",
            EstimatorKind::IbcIv => "IBC-IV",
        }
    }

    fn is_fc(&self) -> bool {
        matches!(self, EstimatorKind::OlsFc | EstimatorKind::IvFc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetParam {
    Theta2,
    Mu1,
    Sigma1,
}

impl TargetParam {
    pub const ALL: [TargetParam; 3] = [TargetParam::Theta2, TargetParam::Mu1, TargetParam::Sigma1];

    pub fn label(&self) -> &'static str {
        match self {
            TargetParam::Theta2 => "theta2",
            TargetParam::Mu1 => "mu1",
            TargetParam::Sigma1 => "sigma1",
        }
    }
}

/// Point estimate and standard error for one estimator × parameter cell of
/// one replication.
#[derive(Debug, Clone, Copy)]
struct EstSe {
    est: f64,
    se: f64,
}

type RepResults = Vec<((EstimatorKind, TargetParam), EstSe)>;

/// Run every estimator on one simulated panel.
fn estimate_one(panel: &PanelDataset, trim_override: Option<usize>) -> Result<RepResults> {
    let mut out: RepResults = Vec::new();

    // Pooled fixed-coefficient rows.
    let iv_model = iv_rc_model();
    let data_iv = from_panel(panel, &iv_model)?;
    {
        let fc = pooled_fc_ols(&data_iv)?;
        // Layout: [P, C_lag, C_lead].
        out.push((
            (EstimatorKind::OlsFc, TargetParam::Mu1),
            EstSe { est: fc.fit.coef[0], se: fc.fit.se[0] },
        ));
        out.push((
            (EstimatorKind::OlsFc, TargetParam::Theta2),
            EstSe { est: fc.fit.coef[2], se: fc.fit.se[2] },
        ));
        let fc_iv = pooled_fc_iv(&data_iv)?;
        out.push((
            (EstimatorKind::IvFc, TargetParam::Mu1),
            EstSe { est: fc_iv.fit.coef[0], se: fc_iv.fit.se[0] },
        ));
        out.push((
            (EstimatorKind::IvFc, TargetParam::Theta2),
            EstSe { est: fc_iv.fit.coef[2], se: fc_iv.fit.se[2] },
        ));
    }

    // Random-coefficient rows: the OLS flavor treats x2 as its own
    // instruments, the IV flavor uses the full instrument set.
    let ols_panel = project_for_ols_rc(panel)?;
    rc_rows(&ols_panel, &ols_rc_model(), trim_override, EstimatorKind::OlsRc, &mut out)?;
    rc_rows(panel, &iv_rc_model(), trim_override, EstimatorKind::IvRc, &mut out)?;
    Ok(out)
}

/// The raw, one-shot-corrected and iterated-corrected rows for one flavor.
fn rc_rows(
    panel: &PanelDataset,
    model: &LinearRcIv,
    trim_override: Option<usize>,
    raw_kind: EstimatorKind,
    out: &mut RepResults,
) -> Result<()> {
    let data = from_panel(panel, model)?;
    let trim = match trim_override {
        Some(l) => TrimSpec::Fixed(l),
        None => TrimSpec::CubeRoot,
    };
    let (theta_hat, _) = closed_form_theta(&data)?;
    let (theta_ibc, _) = closed_form_ibc(&data, trim)?;
    let source = ClosedFormBias::new(&data, trim)?;
    let bc = crate::bias::correct_bc(&source, &theta_hat)?;

    let (bc_kind, ibc_kind) = match raw_kind {
        EstimatorKind::OlsRc => (EstimatorKind::BcOls, EstimatorKind::IbcOls),
        EstimatorKind::IvRc => (EstimatorKind::BcIv, EstimatorKind::IbcIv),
        _ => unreachable!(),
    };

    let raw = rc_summaries(panel, model, &data, &theta_hat, trim, false)?;
    push_rc(out, raw_kind, &raw);
    let bc_s = rc_summaries(panel, model, &data, &bc.theta, trim, true)?;
    push_rc(out, bc_kind, &bc_s);
    let ibc_s = rc_summaries(panel, model, &data, &theta_ibc, trim, true)?;
    push_rc(out, ibc_kind, &ibc_s);
    Ok(())
}

struct RcSummary {
    theta2: EstSe,
    mu1: EstSe,
    sigma1: EstSe,
}

fn push_rc(out: &mut RepResults, kind: EstimatorKind, s: &RcSummary) {
    out.push(((kind, TargetParam::Theta2), s.theta2));
    out.push(((kind, TargetParam::Mu1), s.mu1));
    out.push(((kind, TargetParam::Sigma1), s.sigma1));
}

/// Effects, blocks and functional summaries at a given θ.
///
/// The effect index 1 is the price coefficient (x1 = [1, P]); θ component 1
/// is the consumption-lead coefficient. Standard errors for θ use the
/// non-optimal-weight sandwich at the instrument-gram weights; effect
/// summaries use the corollary formulas with per-individual blocks built
/// from estimated lag-0 moment covariances.
fn rc_summaries(
    panel: &PanelDataset,
    model: &LinearRcIv,
    data: &LinearRcData,
    theta: &DVector<f64>,
    trim: TrimSpec,
    corrected: bool,
) -> Result<RcSummary> {
    let alphas: Vec<DVector<f64>> = data
        .individuals
        .iter()
        .map(|ind| closed_form_alpha(ind, theta))
        .collect::<Result<_>>()?;

    // Model-implied optimal weights σ̂²_ε,i Q̂_i: under homoskedastic
    // serially independent errors the optimal weight is proportional to
    // E[w w'], and the residual variance supplies the scale. Estimating the
    // full d_g × d_g lag-0 covariance from T observations instead would be
    // far too noisy here and shrink Σ̂_α badly.
    let grams = crate::linear_rc::instrument_gram_weights(panel, model)?;
    let omegas: Vec<WeightMatrix> = data
        .individuals
        .iter()
        .zip(&alphas)
        .zip(&grams)
        .map(|((ind, a), q)| {
            let resid = &ind.y - &ind.x1 * a - &ind.x2 * theta;
            let sigma2 = resid.dot(&resid) / ind.t_len() as f64;
            q.scale(sigma2.max(1e-12))
        })
        .collect::<Result<_>>()?;
    let blocks =
        bias_blocks(panel, model, theta, &alphas, &omegas, &grams, BiasStep::TwoStep, trim)?;

    // θ2: optimal-weight standard error sqrt(diag(Ĵ_s^{-1})/(nT̄)) at the
    // blocks' Ĵ_s (built from the estimated optimal weights above).
    let theta2_se = {
        let j_inv = blocks
            .j_s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("profile gram is singular".into()))?;
        (j_inv / (panel.n() as f64 * panel.mean_t())).diagonal().map(|x: f64| x.max(0.0).sqrt())
    };

    let effects = effect_mean_sd(panel, &alphas, &blocks, 1, DispersionDivisor::N)?;
    let stats = if corrected { effects.corrected } else { effects.raw };

    Ok(RcSummary {
        theta2: EstSe { est: theta[1], se: theta2_se[1] },
        mu1: EstSe { est: stats.mean, se: stats.se_mean },
        sigma1: EstSe { est: stats.sd, se: stats.se_sd },
    })
}

/// One row of the summary tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRow {
    pub psi: f64,
    pub rho1: f64,
    pub estimator: String,
    pub parameter: String,
    pub bias: f64,
    pub sd: f64,
    pub se_sd: f64,
    pub p05: f64,
    pub reps_used: usize,
    pub reps_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    pub reps: usize,
    pub n: usize,
    pub usable_t: usize,
    pub seed: u64,
}

/// Monte Carlo over one design cell. Per-replication seeds are derived by
/// counter from the master seed, so any worker count produces identical
/// output.
pub fn run_cell(
    design: &RationalAddictionDesign,
    reps: usize,
    master_seed: u64,
    trim_override: Option<usize>,
) -> Result<McSummary> {
    design.validate()?;
    let rep_outputs: Vec<Result<RepResults>> = par::map_range(reps, |rep| {
        let seed = derive_seed(master_seed, design, rep);
        let (panel, _truth) = generate_panel(design, seed)?;
        estimate_one(&panel, trim_override)
    });

    let truth = |param: TargetParam| match param {
        TargetParam::Theta2 => design.theta2,
        TargetParam::Mu1 => design.mu1,
        TargetParam::Sigma1 => design.sigma1,
    };

    let mut rows = Vec::new();
    let mut failed = 0usize;
    let mut ok_reps: Vec<&RepResults> = Vec::new();
    for r in &rep_outputs {
        match r {
            Ok(v) => ok_reps.push(v),
            Err(_) => failed += 1,
        }
    }

    for kind in EstimatorKind::ALL {
        for param in TargetParam::ALL {
            if kind.is_fc() && param == TargetParam::Sigma1 {
                continue; // fixed-coefficient fits have no dispersion row
            }
            let mut ests = Vec::new();
            let mut ses = Vec::new();
            for rep in &ok_reps {
                if let Some((_, v)) = rep.iter().find(|(k, _)| *k == (kind, param)) {
                    ests.push(v.est);
                    ses.push(v.se);
                }
            }
            if ests.is_empty() {
                continue;
            }
            let m = ests.iter().sum::<f64>() / ests.len() as f64;
            let var = ests.iter().map(|e| (e - m) * (e - m)).sum::<f64>()
                / (ests.len() as f64 - 1.0).max(1.0);
            let sd = var.sqrt();
            let mean_se = ses.iter().sum::<f64>() / ses.len() as f64;
            let t0 = truth(param);
            let rejections = ests
                .iter()
                .zip(&ses)
                .filter(|(e, s)| two_sided_reject(**e, t0, **s, 0.05))
                .count();
            rows.push(McRow {
                psi: design.psi,
                rho1: design.rho1,
                estimator: kind.label().to_string(),
                parameter: param.label().to_string(),
                bias: m - t0,
                sd,
                se_sd: if sd > 0.0 { mean_se / sd } else { f64::NAN },
                p05: rejections as f64 / ests.len() as f64,
                reps_used: ests.len(),
                reps_failed: failed,
            });
        }
    }
    Ok(McSummary { rows, reps, n: design.n, usable_t: design.t - 2, seed: master_seed })
}

fn derive_seed(master: u64, design: &RationalAddictionDesign, rep: usize) -> u64 {
    // Stable counter-style derivation over (ψ, ρ1, rep).
    let a = (design.psi * 1000.0).round() as u64;
    let b = ((design.rho1 + 1.0) * 1000.0).round() as u64;
    master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 32)
        .wrapping_add(b << 16)
        .wrapping_add(rep as u64)
}

/// Full grid ψ × ρ1.
pub fn run_table(
    psis: &[f64],
    rho1s: &[f64],
    reps: usize,
    master_seed: u64,
    trim_override: Option<usize>,
) -> Result<Vec<McSummary>> {
    let mut out = Vec::new();
    for &psi in psis {
        for &rho1 in rho1s {
            let design = RationalAddictionDesign::calibrated(psi, rho1);
            out.push(run_cell(&design, reps, master_seed, trim_override)?);
        }
    }
    Ok(out)
}

/// Text rendering of the summaries, one block per (parameter, ψ) with a row
/// per estimator and a column group per ρ1.
pub fn format_tables(summaries: &[McSummary]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let mut rho1s: Vec<f64> = summaries.iter().map(|s| s.rows[0].rho1).collect();
    rho1s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rho1s.dedup();
    let mut psis: Vec<f64> = summaries.iter().map(|s| s.rows[0].psi).collect();
    psis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    psis.dedup();

    for param in TargetParam::ALL {
        let _ = writeln!(out, "==== {} ====", param.label());
        for &psi in &psis {
            let _ = writeln!(out, "-- psi = {psi} --");
            let _ = write!(out, "{:<8}", "est.");
            for &r in &rho1s {
                let _ = write!(out, " | rho1={r:<4} bias     sd   se/sd   p.05");
            }
            let _ = writeln!(out);
            for kind in EstimatorKind::ALL {
                if kind.is_fc() && param == TargetParam::Sigma1 {
                    continue;
                }
                let mut line = format!("{:<8}", kind.label());
                let mut any = false;
                for &r in &rho1s {
                    let row = summaries.iter().flat_map(|s| &s.rows).find(|row| {
                        row.psi == psi
                            && row.rho1 == r
                            && row.estimator == kind.label()
                            && row.parameter == param.label()
                    });
                    match row {
                        Some(row) => {
                            any = true;
                            line.push_str(&format!(
                                " | {:>9.2} {:>6.2} {:>6.2} {:>6.2}",
                                row.bias, row.sd, row.se_sd, row.p05
                            ));
                        }
                        None => line.push_str(" |        --     --     --     --"),
                    }
                }
                if any {
                    let _ = writeln!(out, "{line}");
                }
            }
        }
        let _ = writeln!(out);
    }
    out
}

/// Convenience wrapper used by the closed-form bias in the harness tests.
pub fn score_bias_at(
    data: &LinearRcData,
    theta: &DVector<f64>,
    trim: TrimSpec,
) -> DVector<f64> {
    score_bias(data, theta, trim)
}
