//! Sample autocovariances of moments and first/second-step weighting
//! matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{sample_moment, MomentModel};
use crate::panel::IndividualBlock;

/// Ridge policy for near-singular moment covariances: if the smallest
/// eigenvalue falls below `RIDGE_DETECT * trace / d_g`, add
/// `RIDGE_AMOUNT * trace / d_g` times the identity.
const RIDGE_DETECT: f64 = 1e-10;
const RIDGE_AMOUNT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Identity,
    User,
    Optimal,
}

/// A symmetric positive-definite d_g × d_g weighting matrix with its
/// Cholesky factorization.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    kind: WeightKind,
    ridged: bool,
}

impl WeightMatrix {
    pub fn new(matrix: DMatrix<f64>, kind: WeightKind) -> Result<Self> {
        Self::build(matrix, kind, false)
    }

    fn build(matrix: DMatrix<f64>, kind: WeightKind, ridged: bool) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("weight matrix must be square".into()));
        }
        let scale = matrix.amax().max(1.0);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "weight matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::Singular("weight matrix is not positive definite".into()))?;
        Ok(Self { matrix: sym, chol, kind, ridged })
    }

    pub fn identity(d_g: usize) -> Self {
        let m = DMatrix::identity(d_g, d_g);
        let chol = Cholesky::new(m.clone()).expect("identity is positive definite");
        Self { matrix: m, chol, kind: WeightKind::Identity, ridged: false }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    /// Whether a ridge was added during construction of an optimal weight.
    pub fn ridged(&self) -> bool {
        self.ridged
    }

    /// W^{-1} v.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// W^{-1} M.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// Explicit W^{-1}.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Quadratic form v' W^{-1} v.
    pub fn quad_inv(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        if c <= 0.0 {
            return Err(Error::InvalidArgument("weight scale must be positive".into()));
        }
        Self::build(&self.matrix * c, self.kind, self.ridged)
    }
}

/// Ω̂_ji(θ, α) = T^{-1} Σ_{t=j+1}^{T} g(z_it) g(z_{i,t-j})', the truncated
/// sum divided by T_i (not T_i − j).
pub fn autocovariance(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
    lag: usize,
) -> Result<DMatrix<f64>> {
    let t_len = block.len();
    if lag >= t_len {
        return Err(Error::InvalidArgument(format!(
            "lag {lag} out of range for T_i = {t_len}"
        )));
    }
    let d_g = model.dims().d_g;
    let gs: Vec<DVector<f64>> = block
        .obs
        .iter()
        .map(|obs| model.g(&obs.values, theta, alpha))
        .collect();
    for (t, g) in gs.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                id: block.id.clone(),
                t,
                message: "moment evaluation is non-finite".into(),
            });
        }
    }
    let mut acc = DMatrix::zeros(d_g, d_g);
    for t in lag..t_len {
        acc += &gs[t] * gs[t - lag].transpose();
    }
    Ok(acc / t_len as f64)
}

/// Second-step weight Ω̂_0i evaluated at first-step estimates, ridge
/// regularized if near-singular.
pub fn optimal_weight(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<WeightMatrix> {
    let omega0 = autocovariance(block, model, theta, alpha, 0)?;
    let sym = (&omega0 + omega0.transpose()) * 0.5;
    let d_g = sym.nrows() as f64;
    let trace = sym.trace();
    if !(trace > 0.0) {
        return Err(Error::Weighting {
            id: block.id.clone(),
            message: "moment covariance has non-positive trace".into(),
        });
    }
    let min_eig = sym
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let (candidate, ridged) = if min_eig < RIDGE_DETECT * trace / d_g {
        let eps = RIDGE_AMOUNT * trace / d_g;
        (&sym + DMatrix::identity(sym.nrows(), sym.ncols()) * eps, true)
    } else {
        (sym, false)
    };
    WeightMatrix::build(candidate, WeightKind::Optimal, ridged).map_err(|_| Error::Weighting {
        id: block.id.clone(),
        message: "moment covariance is not positive definite even after ridge".into(),
    })
}

/// ĝ_i at the supplied point; convenience used by weighting consumers.
pub fn moment_at(
    block: &IndividualBlock,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<DVector<f64>> {
    sample_moment(block, model, theta, alpha)
}
