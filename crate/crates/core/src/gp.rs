//! Gaussian-process prior over gridded slowness fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, sample_mvn, DenseMatrix};
use crate::rng::RngStream;

/// Relative diagonal jitter applied before factorizing the prior covariance.
pub const COVARIANCE_JITTER: f64 = 1e-10;

/// Regular 2-D grid. Rows index depth, columns the horizontal position;
/// cell `(r, c)` has flat index `r * n_cols + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Cell edge length in meters.
    pub cell_size: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            n_rows: 50,
            n_cols: 40,
            cell_size: 0.1,
        }
    }
}

impl Grid {
    pub fn new(n_rows: usize, n_cols: usize, cell_size: f64) -> Result<Self> {
        let g = Grid {
            n_rows,
            n_cols,
            cell_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::InvalidConfig("grid needs at least one cell".into()));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn width(&self) -> f64 {
        self.n_cols as f64 * self.cell_size
    }

    pub fn depth(&self) -> f64 {
        self.n_rows as f64 * self.cell_size
    }

    /// `(x, depth)` of the center of cell `idx`.
    pub fn cell_center(&self, idx: usize) -> (f64, f64) {
        let (r, c) = (idx / self.n_cols, idx % self.n_cols);
        (
            (c as f64 + 0.5) * self.cell_size,
            (r as f64 + 0.5) * self.cell_size,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GPConfig {
    /// meters
    pub lengthscale: f64,
    /// (ns/m)²
    pub variance: f64,
    /// ns/m
    pub mean: f64,
    /// Largest grid whose dense covariance may be assembled.
    pub max_cells: usize,
}

impl Default for GPConfig {
    fn default() -> Self {
        GPConfig {
            lengthscale: 2.5,
            variance: 0.16,
            mean: 0.5,
            max_cells: 4000,
        }
    }
}

impl GPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) || !(self.variance > 0.0) || !self.mean.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "GP lengthscale and variance must be positive (got {}, {})",
                self.lengthscale, self.variance
            )));
        }
        Ok(())
    }
}

/// Slowness image in ns/m, row-major over its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Field { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Field {
            grid,
            values: vec![value; grid.n_cells()],
        }
    }
}

/// Isotropic exponential covariance `σ² · exp(−h / ℓ)`.
pub fn exp_kernel(h: f64, cfg: &GPConfig) -> f64 {
    cfg.variance * (-h / cfg.lengthscale).exp()
}

pub fn build_covariance(grid: &Grid, cfg: &GPConfig) -> Result<DenseMatrix> {
    grid.validate()?;
    cfg.validate()?;
    let n = grid.n_cells();
    if n > cfg.max_cells {
        return Err(Error::InvalidConfig(format!(
            "grid has {n} cells, above the covariance cap of {}",
            cfg.max_cells
        )));
    }
    let centers: Vec<(f64, f64)> = (0..n).map(|i| grid.cell_center(i)).collect();
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        c.set(i, i, cfg.variance);
        for j in 0..i {
            let h = (centers[i].0 - centers[j].0).hypot(centers[i].1 - centers[j].1);
            let k = exp_kernel(h, cfg);
            c.set(i, j, k);
            c.set(j, i, k);
        }
    }
    Ok(c)
}

/// Lower factor of the jittered prior covariance.
pub fn prior_cholesky(grid: &Grid, cfg: &GPConfig) -> Result<DenseMatrix> {
    cholesky_jittered(&build_covariance(grid, cfg)?, COVARIANCE_JITTER)
}

/// `n` prior draws as rows of an `n × cells` matrix.
pub fn sample_field_matrix(
    grid: &Grid,
    cfg: &GPConfig,
    n: usize,
    rng: RngStream,
) -> Result<DenseMatrix> {
    let l = prior_cholesky(grid, cfg)?;
    sample_with_factor(grid, cfg, &l, n, rng)
}

/// Same as [`sample_field_matrix`] with a precomputed factor.
pub fn sample_with_factor(
    grid: &Grid,
    cfg: &GPConfig,
    chol: &DenseMatrix,
    n: usize,
    rng: RngStream,
) -> Result<DenseMatrix> {
    let mean = vec![cfg.mean; grid.n_cells()];
    let x = sample_mvn(&mean, chol, n, rng)?;
    let negative = x.data().iter().filter(|v| **v <= 0.0).count();
    if negative > 0 {
        log::warn!("{negative} sampled slowness values are non-positive");
    }
    Ok(x)
}

pub fn sample_fields(grid: &Grid, cfg: &GPConfig, n: usize, rng: RngStream) -> Result<Vec<Field>> {
    let x = sample_field_matrix(grid, cfg, n, rng)?;
    Ok(x.row_iter()
        .map(|r| Field {
            grid: *grid,
            values: r.to_vec(),
        })
        .collect())
}
