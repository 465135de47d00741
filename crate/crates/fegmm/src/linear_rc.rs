//! Closed-form estimators and corrections for the linear correlated
//! random-coefficient IV model, plus pooled fixed-coefficient baselines.
//!
//! The model is y_it = x1_it'α_i + x2_it'θ + ε_it with instruments
//! w = (x1, w2); only x2 is endogenous. Tilde quantities are residuals of
//! per-individual sample projections on x1.

use nalgebra::{DMatrix, DVector};

use crate::bias::{BiasEval, BiasSource, TrimSpec};
use crate::error::{Error, Result};
use crate::model::{LinearRcIv, MomentModel};
use crate::panel::PanelDataset;
use crate::weighting::{WeightKind, WeightMatrix};

/// Matrices for one individual, with the x1-projection residuals cached.
#[derive(Debug, Clone)]
pub struct IndividualData {
    pub id: String,
    pub y: DVector<f64>,
    pub x1: DMatrix<f64>,
    pub x2: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    /// Residuals of y, x2 and w2 from the per-individual regression on x1.
    pub y_tilde: DVector<f64>,
    pub x2_tilde: DMatrix<f64>,
    pub w2_tilde: DMatrix<f64>,
    x1_gram: DMatrix<f64>,
}

impl IndividualData {
    pub fn t_len(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone)]
pub struct LinearRcData {
    pub individuals: Vec<IndividualData>,
    pub d1: usize,
    pub d2: usize,
    pub dw: usize,
}

impl LinearRcData {
    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn mean_t(&self) -> f64 {
        let total: usize = self.individuals.iter().map(|d| d.t_len()).sum();
        total as f64 / self.individuals.len() as f64
    }

    /// Moment count minus effect dimension: the prefactor of the
    /// correlation-term bias.
    pub fn overidentification(&self) -> usize {
        self.dw
    }
}

fn residualize(m: &DMatrix<f64>, x1: &DMatrix<f64>, gram_inv: &DMatrix<f64>) -> DMatrix<f64> {
    m - x1 * (gram_inv * (x1.transpose() * m))
}

/// Split a panel laid out for [`LinearRcIv`] into per-individual matrices.
pub fn from_panel(panel: &PanelDataset, model: &LinearRcIv) -> Result<LinearRcData> {
    let (d1, d2, dw) = (model.d1(), model.d2(), model.dw());
    let mut individuals = Vec::with_capacity(panel.n());
    for block in &panel.blocks {
        let t_len = block.len();
        let mut y = DVector::zeros(t_len);
        let mut x1 = DMatrix::zeros(t_len, d1);
        let mut x2 = DMatrix::zeros(t_len, d2);
        let mut w2 = DMatrix::zeros(t_len, dw);
        for (t, obs) in block.obs.iter().enumerate() {
            let z = &obs.values;
            if z.len() != model.arity() {
                return Err(Error::Validation {
                    id: block.id.clone(),
                    message: format!(
                        "observation arity {} does not match the model layout {}",
                        z.len(),
                        model.arity()
                    ),
                });
            }
            y[t] = model.y(z);
            for (k, v) in model.x1(z).iter().enumerate() {
                x1[(t, k)] = *v;
            }
            for (k, v) in model.x2(z).iter().enumerate() {
                x2[(t, k)] = *v;
            }
            for (k, v) in model.w2(z).iter().enumerate() {
                w2[(t, k)] = *v;
            }
        }
        let gram = x1.transpose() * &x1;
        let gram_inv = gram.clone().try_inverse().ok_or_else(|| Error::Validation {
            id: block.id.clone(),
            message: "X1'X1 is singular".into(),
        })?;
        let y_tilde = {
            let ym = DMatrix::from_column_slice(t_len, 1, y.as_slice());
            DVector::from_column_slice(residualize(&ym, &x1, &gram_inv).as_slice())
        };
        let x2_tilde = residualize(&x2, &x1, &gram_inv);
        let w2_tilde = residualize(&w2, &x1, &gram_inv);
        individuals.push(IndividualData {
            id: block.id.clone(),
            y,
            x1,
            x2,
            w2,
            y_tilde,
            x2_tilde,
            w2_tilde,
            x1_gram: gram,
        });
    }
    Ok(LinearRcData { individuals, d1, d2, dw })
}

/// α̂_i(θ) = (Σ x1 x1')^{-1} Σ x1 (y − x2'θ).
pub fn closed_form_alpha(ind: &IndividualData, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let target = &ind.y - &ind.x2 * theta;
    let rhs = ind.x1.transpose() * target;
    ind.x1_gram
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::WeakIdentification(ind.id.clone()))
}

/// Per-individual projected gram J_i = x̃2' w̃2 (w̃2'w̃2)^{-1} w̃2' x̃2 and
/// the matching cross term with ỹ, both divided by T_i.
fn projected_terms(ind: &IndividualData) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let wtw = ind.w2_tilde.transpose() * &ind.w2_tilde;
    let chol = wtw
        .cholesky()
        .ok_or_else(|| Error::WeakIdentification(ind.id.clone()))?;
    let wx = ind.w2_tilde.transpose() * &ind.x2_tilde;
    let wy = ind.w2_tilde.transpose() * &ind.y_tilde;
    let xw = wx.transpose();
    let tf = ind.t_len() as f64;
    let j = &xw * chol.solve(&wx) / tf;
    let v = &xw * chol.solve(&wy) / tf;
    Ok((j, DVector::from_column_slice(v.as_slice())))
}

/// The fixed-effects IV estimator of θ in closed form, together with the
/// profile gram J̄ = n^{-1} Σ_i J_i / T_i used by the bias expressions.
pub fn closed_form_theta(data: &LinearRcData) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d2 = data.d2;
    let mut j_bar = DMatrix::zeros(d2, d2);
    let mut v_bar = DVector::zeros(d2);
    for ind in &data.individuals {
        let (j, v) = projected_terms(ind)?;
        j_bar += j;
        v_bar += v;
    }
    let n = data.n() as f64;
    j_bar /= n;
    v_bar /= n;
    let theta = j_bar
        .clone()
        .lu()
        .solve(&v_bar)
        .ok_or_else(|| Error::Singular("projected gram is singular".into()))?;
    Ok((theta, j_bar))
}

/// Score-scale bias: −(d_g − d_α) n^{-1} Σ_i T_i^{-1} Σ_{j=-ℓ}^{ℓ} Σ_t
/// x̃2_it (ỹ_{i,t-j} − x̃2_{i,t-j}'θ). Two-sided trimmed sum.
pub fn score_bias(data: &LinearRcData, theta: &DVector<f64>, trim: TrimSpec) -> DVector<f64> {
    let c = data.overidentification() as f64;
    let mut acc = DVector::zeros(data.d2);
    for ind in &data.individuals {
        let t_len = ind.t_len();
        let ell = trim.ell(t_len) as i64;
        let resid = &ind.y_tilde - &ind.x2_tilde * theta;
        let mut inner = DVector::zeros(data.d2);
        for j in -ell..=ell {
            let lo = j.max(0) as usize;
            let hi = (t_len as i64 + j.min(0)) as usize;
            for t in lo..hi {
                let s = (t as i64 - j) as usize;
                inner += ind.x2_tilde.row(t).transpose() * resid[s];
            }
        }
        acc += inner / t_len as f64;
    }
    acc * (-c) / data.n() as f64
}

/// B̂(θ) = −J̄^{-1} × score bias; the estimated O(1/T) bias of θ̂.
pub fn closed_form_bias(
    data: &LinearRcData,
    j_bar: &DMatrix<f64>,
    theta: &DVector<f64>,
    trim: TrimSpec,
) -> Result<DVector<f64>> {
    if data.d2 == 0 {
        return Ok(DVector::zeros(0));
    }
    let b_s = score_bias(data, theta, trim);
    j_bar
        .clone()
        .lu()
        .solve(&b_s)
        .map(|x| -x)
        .ok_or_else(|| Error::Singular("projected gram is singular".into()))
}

/// One-shot iterated correction: the exact solution of
/// θ = θ̂ − B̂(θ)/T̄, which is linear in θ for this model.
pub fn closed_form_ibc(
    data: &LinearRcData,
    trim: TrimSpec,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (theta_hat, j_bar) = closed_form_theta(data)?;
    let d2 = data.d2;
    if d2 == 0 {
        return Ok((theta_hat.clone(), theta_hat));
    }
    let c = data.overidentification() as f64;
    let t_bar = data.mean_t();
    let n = data.n() as f64;

    // Split the two-sided sums into the ỹ part and the x̃2 x̃2' part.
    let mut m_bar = DVector::zeros(d2);
    let mut k_bar = DMatrix::zeros(d2, d2);
    for ind in &data.individuals {
        let t_len = ind.t_len();
        let ell = trim.ell(t_len) as i64;
        let mut m_i = DVector::zeros(d2);
        let mut k_i = DMatrix::zeros(d2, d2);
        for j in -ell..=ell {
            let lo = j.max(0) as usize;
            let hi = (t_len as i64 + j.min(0)) as usize;
            for t in lo..hi {
                let s = (t as i64 - j) as usize;
                let xt = ind.x2_tilde.row(t).transpose();
                m_i += &xt * ind.y_tilde[s];
                k_i += &xt * ind.x2_tilde.row(s);
            }
        }
        m_bar += m_i / t_len as f64;
        k_bar += k_i / t_len as f64;
    }
    m_bar /= n;
    k_bar /= n;

    let j_inv = j_bar
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("projected gram is singular".into()))?;
    // θ = θ̂ − c J̄^{-1}(m̄ − K̄ θ)/T̄  ⇔  (I − c J̄^{-1} K̄/T̄) θ = θ̂ − c J̄^{-1} m̄/T̄.
    let bracket = DMatrix::identity(d2, d2) - &j_inv * &k_bar * (c / t_bar);
    let rhs = &theta_hat - j_inv * m_bar * (c / t_bar);
    let theta_ibc = bracket
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("iterated-correction bracket is singular".into()))?;
    Ok((theta_ibc, theta_hat))
}

/// Per-individual weights T^{-1} Σ_t w w' (proportional to the optimal
/// weight under homoskedastic serially independent errors).
pub fn instrument_gram_weights(
    panel: &PanelDataset,
    model: &LinearRcIv,
) -> Result<Vec<WeightMatrix>> {
    let d_g = model.dims().d_g;
    panel
        .blocks
        .iter()
        .map(|b| {
            let mut q = DMatrix::zeros(d_g, d_g);
            for obs in &b.obs {
                let w = model.w(&obs.values);
                q += &w * w.transpose();
            }
            q /= b.len() as f64;
            WeightMatrix::new(q, WeightKind::User).map_err(|_| Error::Weighting {
                id: b.id.clone(),
                message: "instrument gram is not positive definite".into(),
            })
        })
        .collect()
}

/// Closed-form bias source for the correction drivers: the score is exactly
/// affine, ŝ(θ) = J̄ (θ − θ̂), and the score bias is the two-sided trimmed
/// sum above.
pub struct ClosedFormBias<'a> {
    data: &'a LinearRcData,
    trim: TrimSpec,
    theta_hat: DVector<f64>,
    j_bar: DMatrix<f64>,
}

impl<'a> ClosedFormBias<'a> {
    pub fn new(data: &'a LinearRcData, trim: TrimSpec) -> Result<Self> {
        let (theta_hat, j_bar) = closed_form_theta(data)?;
        Ok(Self { data, trim, theta_hat, j_bar })
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn j_bar(&self) -> &DMatrix<f64> {
        &self.j_bar
    }
}

impl BiasSource for ClosedFormBias<'_> {
    fn eval(&self, theta: &DVector<f64>) -> Result<BiasEval> {
        let b_s = score_bias(self.data, theta, self.trim);
        let score = &self.j_bar * (theta - &self.theta_hat);
        let alphas = self
            .data
            .individuals
            .iter()
            .map(|ind| closed_form_alpha(ind, theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(BiasEval { b_s, j_s: self.j_bar.clone(), score, alphas })
    }

    fn t_bar(&self) -> f64 {
        self.data.mean_t()
    }
}

// ---------------------------------------------------------------------------
// Pooled fixed-coefficient baselines
// ---------------------------------------------------------------------------

/// Pooled regression output on within-transformed data.
#[derive(Debug, Clone)]
pub struct PooledFit {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub n_obs: usize,
    pub dof: usize,
    pub sigma2: f64,
}

fn demean_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Within-transformed pooled OLS: demean y and X by group, stack, regress.
/// Classical standard errors with n_groups degrees of freedom absorbed.
pub fn within_ols(groups: &[(DVector<f64>, DMatrix<f64>)]) -> Result<PooledFit> {
    within_2sls_impl(groups.iter().map(|(y, x)| (y, x, x)).collect::<Vec<_>>().as_slice())
}

/// Within-transformed pooled 2SLS with instrument matrix Z per group.
pub fn within_2sls(
    groups: &[(DVector<f64>, DMatrix<f64>, DMatrix<f64>)],
) -> Result<PooledFit> {
    within_2sls_impl(groups.iter().map(|(y, x, z)| (y, x, z)).collect::<Vec<_>>().as_slice())
}

fn within_2sls_impl(groups: &[(&DVector<f64>, &DMatrix<f64>, &DMatrix<f64>)]) -> Result<PooledFit> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    let k = groups[0].1.ncols();
    let kz = groups[0].2.ncols();
    if kz < k {
        return Err(Error::InvalidArgument(format!(
            "order condition failed: {kz} instruments for {k} regressors"
        )));
    }
    let n_obs: usize = groups.iter().map(|(y, _, _)| y.len()).sum();
    let mut ztz = DMatrix::zeros(kz, kz);
    let mut ztx = DMatrix::zeros(kz, k);
    let mut zty = DVector::zeros(kz);
    let mut demeaned: Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
    for (y, x, z) in groups {
        let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        let yd = DVector::from_column_slice(demean_columns(&ym).as_slice());
        let xd = demean_columns(x);
        let zd = demean_columns(z);
        ztz += zd.transpose() * &zd;
        ztx += zd.transpose() * &xd;
        zty += zd.transpose() * &yd;
        demeaned.push((yd, xd, zd));
    }
    let ztz_chol = ztz
        .cholesky()
        .ok_or_else(|| Error::Singular("instrument gram is singular in pooled 2SLS".into()))?;
    let xhat_x = ztx.transpose() * ztz_chol.solve(&ztx); // X'Z (Z'Z)^{-1} Z'X
    let xhat_y = ztx.transpose() * ztz_chol.solve(&zty);
    let gram = xhat_x.clone();
    let coef = gram
        .clone()
        .lu()
        .solve(&xhat_y)
        .ok_or_else(|| Error::Singular("projected design is singular in pooled 2SLS".into()))?;

    let mut rss = 0.0;
    for (yd, xd, _) in &demeaned {
        let r = yd - xd * &coef;
        rss += r.dot(&r);
    }
    let dof = n_obs
        .checked_sub(k + groups.len())
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::InvalidArgument("not enough observations for pooled fit".into()))?;
    let sigma2 = rss / dof as f64;
    let cov = gram
        .try_inverse()
        .ok_or_else(|| Error::Singular("projected design is singular".into()))?
        * sigma2;
    let se = cov.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(PooledFit { coef, se, n_obs, dof, sigma2 })
}

/// Columns of x1 with within-individual variation (a column absorbed by the
/// additive effect, like an intercept, has none).
fn varying_x1_columns(data: &LinearRcData) -> Vec<usize> {
    (0..data.d1)
        .filter(|&k| {
            data.individuals.iter().any(|ind| {
                let col = ind.x1.column(k);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().any(|v| (v - mean).abs() > 1e-9 * (1.0 + mean.abs()))
            })
        })
        .collect()
}

/// Pooled fixed-coefficient fit with the regressor layout it used: the
/// varying x1 columns first (their indices are reported), then the x2
/// columns.
#[derive(Debug, Clone)]
pub struct PooledFcFit {
    pub fit: PooledFit,
    pub x1_columns: Vec<usize>,
}

/// Pooled within-OLS treating every coefficient as common.
pub fn pooled_fc_ols(data: &LinearRcData) -> Result<PooledFcFit> {
    let x1_cols = varying_x1_columns(data);
    let groups: Vec<(DVector<f64>, DMatrix<f64>)> = data
        .individuals
        .iter()
        .map(|ind| {
            let mut x = DMatrix::zeros(ind.t_len(), x1_cols.len() + data.d2);
            for (out_k, &k) in x1_cols.iter().enumerate() {
                x.set_column(out_k, &ind.x1.column(k));
            }
            for k in 0..data.d2 {
                x.set_column(x1_cols.len() + k, &ind.x2.column(k));
            }
            (ind.y.clone(), x)
        })
        .collect();
    Ok(PooledFcFit { fit: within_ols(&groups)?, x1_columns: x1_cols })
}

/// Pooled within-2SLS: the varying x1 columns instrument themselves and w2
/// instruments x2.
pub fn pooled_fc_iv(data: &LinearRcData) -> Result<PooledFcFit> {
    let x1_cols = varying_x1_columns(data);
    let groups: Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = data
        .individuals
        .iter()
        .map(|ind| {
            let mut x = DMatrix::zeros(ind.t_len(), x1_cols.len() + data.d2);
            for (out_k, &k) in x1_cols.iter().enumerate() {
                x.set_column(out_k, &ind.x1.column(k));
            }
            for k in 0..data.d2 {
                x.set_column(x1_cols.len() + k, &ind.x2.column(k));
            }
            let mut z = DMatrix::zeros(ind.t_len(), x1_cols.len() + data.dw);
            for (out_k, &k) in x1_cols.iter().enumerate() {
                z.set_column(out_k, &ind.x1.column(k));
            }
            for k in 0..data.dw {
                z.set_column(x1_cols.len() + k, &ind.w2.column(k));
            }
            (ind.y.clone(), x, z)
        })
        .collect();
    Ok(PooledFcFit { fit: within_2sls(&groups)?, x1_columns: x1_cols })
}

/// Probability limit of the pooled fixed-coefficient OLS slope in the
/// endogenous random-coefficient model: α1 + {Cov[ε,υ] + 2 E[π1] Var[z]
/// Cov[α1, π1]} / Var[x].
pub fn pooled_ols_limit(
    alpha1: f64,
    cov_eps_v: f64,
    e_pi1: f64,
    var_z: f64,
    cov_a1_pi1: f64,
    var_x: f64,
) -> f64 {
    alpha1 + (cov_eps_v + 2.0 * e_pi1 * var_z * cov_a1_pi1) / var_x
}

/// Probability limit of the pooled fixed-coefficient IV slope when the
/// first stage also imposes a fixed coefficient: α1 + Cov[α1, π1]/E[π1].
pub fn pooled_iv_limit(alpha1: f64, cov_a1_pi1: f64, e_pi1: f64) -> f64 {
    alpha1 + cov_a1_pi1 / e_pi1
}

/// Variant of the IV limit when the first stage is heterogeneous:
/// α1 + 2 E[π1] Cov[α1, π1] / (E[π1]² + Var[π1]). Exposed as a diagnostic
/// alongside [`pooled_iv_limit`]; which one applies depends on the pooled
/// implementation.
pub fn pooled_iv_limit_heterogeneous_first_stage(
    alpha1: f64,
    e_pi1: f64,
    cov_a1_pi1: f64,
    var_pi1: f64,
) -> f64 {
    alpha1 + 2.0 * e_pi1 * cov_a1_pi1 / (e_pi1 * e_pi1 + var_pi1)
}
