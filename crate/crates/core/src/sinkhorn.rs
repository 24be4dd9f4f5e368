//! Entropic optimal transport between point clouds with uniform weights.
//!
//! Sinkhorn iterations run on the dual potentials in the log domain, so the
//! regularization can range from `1e-3` to `1e2` without under/overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iter: usize,
    /// Cost exponent: `C_ij = ‖x_i − y_j‖_p^p`, `p ∈ {1, 2}`.
    pub p: u32,
    pub debiased: bool,
    /// Stop early once the row-marginal L1 residual falls below this value.
    /// Zero runs the full iteration budget and skips the residual bookkeeping.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 100.0,
            max_iter: 40,
            p: 2,
            debiased: false,
            tol: 0.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0) || self.max_iter == 0 || !(self.p == 1 || self.p == 2) {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn needs reg > 0, max_iter >= 1 and p in {{1, 2}} (got {}, {}, {})",
                self.reg, self.max_iter, self.p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: DenseMatrix,
    /// Transport cost `⟨plan, C⟩`.
    pub cost: f64,
    /// Dual value `⟨a, f⟩ + ⟨b, g⟩` of the entropic problem; its gradient
    /// with respect to `C` is the plan itself at convergence.
    pub objective: f64,
    /// Row-marginal L1 residual after each iteration; empty when `tol` is zero.
    pub residuals: Vec<f64>,
}

fn pair_cost(x: &[f64], y: &[f64], p: u32) -> f64 {
    match p {
        1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
        _ => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
    }
}

pub fn cost_matrix(xs: &DenseMatrix, ys: &DenseMatrix, p: u32) -> Result<DenseMatrix> {
    if xs.cols() != ys.cols() {
        return Err(Error::DimensionMismatch(format!(
            "point dimensions {} and {}",
            xs.cols(),
            ys.cols()
        )));
    }
    if xs.rows() == 0 || ys.rows() == 0 {
        return Err(Error::DimensionMismatch("empty point cloud".into()));
    }
    let (n, m) = (xs.rows(), ys.rows());
    let mut c = DenseMatrix::zeros(n, m);
    if p == 2 {
        // ‖x‖² + ‖y‖² − 2 x·y, clamped at zero against cancellation
        let g = xs.matmul_t(ys)?;
        let nx: Vec<f64> = xs.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        let ny: Vec<f64> = ys.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        for i in 0..n {
            let row = c.row_mut(i);
            for j in 0..m {
                row[j] = (nx[i] + ny[j] - 2.0 * g.get(i, j)).max(0.0);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                c.set(i, j, pair_cost(xs.row(i), ys.row(j), p));
            }
        }
    }
    if c.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport cost matrix".into()));
    }
    Ok(c)
}

/// `−reg · log Σ_j exp((pot_j − c_j) / reg + log_w)`.
#[inline]
fn soft_min(costs: &[f64], pot: &[f64], reg: f64, log_w: f64, scratch: &mut [f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for ((s, c), g) in scratch.iter_mut().zip(costs).zip(pot) {
        *s = (g - c) / reg;
        mx = mx.max(*s);
    }
    let sum: f64 = scratch.iter().map(|s| (s - mx).exp()).sum();
    -reg * (mx + sum.ln() + log_w)
}

/// Entropic OT on a precomputed cost matrix with uniform marginals.
pub fn entropic_ot_with_cost(c: &DenseMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = c.shape();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let ct = c.transpose();
    let reg = cfg.reg;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut scratch = vec![0.0; n.max(m)];
    let mut residuals = Vec::with_capacity(cfg.max_iter);
    for _ in 0..cfg.max_iter {
        for i in 0..n {
            f[i] = soft_min(c.row(i), &g, reg, log_b, &mut scratch[..m]);
        }
        for j in 0..m {
            g[j] = soft_min(ct.row(j), &f, reg, log_a, &mut scratch[..n]);
        }
        if cfg.tol <= 0.0 {
            continue;
        }
        // columns are exact after the g-update; measure the rows
        let mut res = 0.0;
        for i in 0..n {
            let row_mass: f64 = c
                .row(i)
                .iter()
                .zip(&g)
                .map(|(cij, gj)| ((f[i] + gj - cij) / reg + log_a + log_b).exp())
                .sum();
            res += (row_mass - 1.0 / n as f64).abs();
        }
        residuals.push(res);
        if res < cfg.tol {
            break;
        }
    }
    let mut plan = DenseMatrix::zeros(n, m);
    let mut cost = 0.0;
    let objective = (f.iter().sum::<f64>() / n as f64) + (g.iter().sum::<f64>() / m as f64);
    for i in 0..n {
        let crow = c.row(i);
        let prow = plan.row_mut(i);
        for j in 0..m {
            let pij = ((f[i] + g[j] - crow[j]) / reg + log_a + log_b).exp();
            prow[j] = pij;
            cost += pij * crow[j];
        }
    }
    if !cost.is_finite() || !objective.is_finite() {
        return Err(Error::NonFinite("sinkhorn plan".into()));
    }
    Ok(TransportPlan {
        plan,
        cost,
        objective,
        residuals,
    })
}

pub fn entropic_ot(xs: &DenseMatrix, ys: &DenseMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let c = cost_matrix(xs, ys, cfg.p)?;
    entropic_ot_with_cost(&c, cfg)
}

/// Debiased divergence `OT(x,y) − ½OT(x,x) − ½OT(y,y)` on entropic objectives.
pub fn sinkhorn_divergence(xs: &DenseMatrix, ys: &DenseMatrix, cfg: &SinkhornConfig) -> Result<f64> {
    let xy = entropic_ot(xs, ys, cfg)?.objective;
    let xx = entropic_ot(xs, xs, cfg)?.objective;
    let yy = entropic_ot(ys, ys, cfg)?.objective;
    Ok(xy - 0.5 * xx - 0.5 * yy)
}

/// `∂/∂x_i Σ_j plan_ij · c(x_i, y_j)` with the plan held fixed.
pub fn plan_gradient_x(xs: &DenseMatrix, ys: &DenseMatrix, plan: &DenseMatrix, p: u32) -> DenseMatrix {
    let (n, d) = xs.shape();
    let mut grad = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let xi = xs.row(i);
        let prow = plan.row(i);
        let gi = grad.row_mut(i);
        for (j, &pij) in prow.iter().enumerate() {
            let yj = ys.row(j);
            for k in 0..d {
                let diff = xi[k] - yj[k];
                gi[k] += pij
                    * match p {
                        1 => diff.signum() * (diff != 0.0) as u8 as f64,
                        _ => 2.0 * diff,
                    };
            }
        }
    }
    grad
}

/// Value and envelope gradient with respect to `xs` of the latent matching
/// term: the entropic objective, or the debiased divergence when
/// `cfg.debiased` is set. `ys` is treated as constant.
pub fn ot_value_and_grad(
    xs: &DenseMatrix,
    ys: &DenseMatrix,
    cfg: &SinkhornConfig,
) -> Result<(f64, DenseMatrix)> {
    let xy = entropic_ot(xs, ys, cfg)?;
    let mut grad = plan_gradient_x(xs, ys, &xy.plan, cfg.p);
    if !cfg.debiased {
        return Ok((xy.objective, grad));
    }
    let xx = entropic_ot(xs, xs, cfg)?;
    let yy = entropic_ot(ys, ys, cfg)?;
    // x enters both slots of OT(x, x)
    let g1 = plan_gradient_x(xs, xs, &xx.plan, cfg.p);
    let g2 = plan_gradient_x(xs, xs, &xx.plan.transpose(), cfg.p);
    for ((g, a), b) in grad.data_mut().iter_mut().zip(g1.data()).zip(g2.data()) {
        *g -= 0.5 * (a + b);
    }
    Ok((xy.objective - 0.5 * xx.objective - 0.5 * yy.objective, grad))
}
