//! Closed-form Gaussian posterior of the linear-Gaussian inverse problem.

use crate::error::{Error, Result};
use crate::gp::{self, GPConfig, Grid};
use crate::linalg::{cholesky, cholesky_jittered, cholesky_solve, sample_mvn, DenseMatrix};
use crate::rng::RngStream;
use crate::tomography::RayMatrix;

#[derive(Clone, Debug)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
    /// Lower factor of `cov` (jittered if the exact factorization failed).
    pub chol: DenseMatrix,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, cov: DenseMatrix) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::DimensionMismatch(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        let chol = match cholesky(&cov) {
            Ok(l) => l,
            Err(Error::NotPositiveDefinite { .. }) => cholesky_jittered(&cov, gp::COVARIANCE_JITTER)?,
            Err(e) => return Err(e),
        };
        Ok(GaussianDist { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// GP prior over a grid.
    pub fn gp_prior(grid: &Grid, cfg: &GPConfig) -> Result<Self> {
        let cov = gp::build_covariance(grid, cfg)?;
        let chol = gp::prior_cholesky(grid, cfg)?;
        Ok(GaussianDist {
            mean: vec![cfg.mean; grid.n_cells()],
            cov,
            chol,
        })
    }
}

/// Conditions the prior on `y_obs = A·x + noise`, `noise ~ N(0, noise_cov)`.
///
/// The innovation matrix `A·C·Aᵀ + Cn` is factorized, never inverted.
pub fn linear_gaussian_posterior(
    prior: &GaussianDist,
    a: &DenseMatrix,
    noise_cov: &DenseMatrix,
    y_obs: &[f64],
) -> Result<GaussianDist> {
    let (m, n) = a.shape();
    if n != prior.dim() || noise_cov.shape() != (m, m) || y_obs.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "operator {m}x{n}, prior dim {}, noise cov {}x{}, {} observations",
            prior.dim(),
            noise_cov.rows(),
            noise_cov.cols(),
            y_obs.len()
        )));
    }
    let cat = prior.cov.matmul_t(a)?;
    let mut innovation = a.matmul(&cat)?.add(noise_cov)?;
    innovation.symmetrize();
    let l = cholesky(&innovation).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot } => Error::NonFinite(format!(
            "singular innovation matrix (pivot {pivot})"
        )),
        other => other,
    })?;

    let predicted = a.matvec(&prior.mean)?;
    let residual: Vec<f64> = y_obs.iter().zip(&predicted).map(|(y, p)| y - p).collect();
    let w = cholesky_solve(&l, &DenseMatrix::column(&residual))?;
    let shift = cat.matmul(&w)?;
    let mean = prior
        .mean
        .iter()
        .zip(shift.data())
        .map(|(m, s)| m + s)
        .collect();

    let gain_t = cholesky_solve(&l, &cat.transpose())?;
    let mut cov = prior.cov.sub(&cat.matmul(&gain_t)?)?;
    cov.symmetrize();
    GaussianDist::new(mean, cov)
}

/// Convenience wrapper for a ray operator with i.i.d. Gaussian noise.
pub fn tomography_posterior(
    prior: &GaussianDist,
    a: &RayMatrix,
    noise_std: f64,
    y_obs: &[f64],
) -> Result<GaussianDist> {
    let noise_cov = DenseMatrix::from_diag(&vec![noise_std * noise_std; a.n_rays]);
    linear_gaussian_posterior(prior, &a.to_dense(), &noise_cov, y_obs)
}

/// `n` posterior draws, one per row.
pub fn posterior_sample(d: &GaussianDist, n: usize, rng: RngStream) -> Result<DenseMatrix> {
    sample_mvn(&d.mean, &d.chol, n, rng)
}
