//! Probability-content curve, curvature-based threshold selection and the
//! evaluation metrics of an inversion.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd_vec, DenseMatrix};
use crate::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use crate::subsim::SubSimTrace;
use crate::tomography::RayMatrix;

/// Largest curvature treated as numerically flat.
const FLAT_CURVATURE: f64 = 1e-9;

/// `√(ε / n_obs)`, comparable to a per-measurement noise level.
pub fn normalize_eps(eps: f64, n_obs: usize) -> f64 {
    (eps.max(0.0) / n_obs.max(1) as f64).sqrt()
}

/// Threshold grid `min,max,count,log|lin` in ns².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub log: bool,
}

impl Default for EpsGrid {
    fn default() -> Self {
        EpsGrid {
            min: 0.01,
            max: 3000.0,
            count: 60,
            log: true,
        }
    }
}

impl EpsGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) || self.count < 2 {
            return Err(Error::InvalidConfig(format!("invalid ε grid {self:?}")));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let k = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                let f = i as f64 / k;
                if self.log {
                    (self.min.ln() + f * (self.max.ln() - self.min.ln())).exp()
                } else {
                    self.min + f * (self.max - self.min)
                }
            })
            .collect()
    }
}

impl FromStr for EpsGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidConfig(format!("ε grid must be \"min,max,count,log|lin\", got {s:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let g = EpsGrid {
            min: parts[0].parse().map_err(|_| bad())?,
            max: parts[1].parse().map_err(|_| bad())?,
            count: parts[2].parse().map_err(|_| bad())?,
            log: match parts[3] {
                "log" | "true" => true,
                "lin" | "linear" | "false" => false,
                _ => return Err(bad()),
            },
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    /// Grid thresholds in ns², restricted to values the run reached.
    pub eps: Vec<f64>,
    pub eps_n: Vec<f64>,
    pub log_p: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub curvature: Vec<f64>,
    pub selected_eps_n: Option<f64>,
    pub stagnation_eps_n: Option<f64>,
}

impl ThresholdCurve {
    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,eps_n,log10_p,smoothed,curvature\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e},{:e}",
                self.eps[i],
                self.eps_n[i],
                self.log_p[i],
                self.smoothed.get(i).copied().unwrap_or(f64::NAN),
                self.curvature.get(i).copied().unwrap_or(f64::NAN)
            );
        }
        s
    }
}

/// `p̂(t)` of a finished run: for `t ∈ (t_ℓ, t_{ℓ−1}]`,
/// `α^{ℓ−1} · #{level-(ℓ−1) misfits ≤ t} / N`.
pub fn p_hat_at(trace: &SubSimTrace, t: f64) -> Result<Option<f64>> {
    if trace.levels.is_empty() || trace.level_dissimilarities.len() != trace.levels.len() {
        return Err(Error::EmptyTrace);
    }
    let last = trace.levels.len() - 1;
    if t < trace.levels[last].threshold {
        return Ok(None);
    }
    // first level whose threshold is below t; t then belongs to its population
    let l = trace.levels.iter().position(|lv| lv.threshold < t).unwrap_or(last);
    let pop = &trace.level_dissimilarities[l];
    let count = pop.iter().filter(|d| **d <= t).count();
    let alpha = trace.config.level_fraction;
    Ok(Some(alpha.powi(l as i32) * count as f64 / trace.config.n_particles as f64))
}

/// Unsmoothed curve over the grid points at or above the smallest threshold
/// the run reached.
pub fn probability_curve(trace: &SubSimTrace, grid: &[f64], n_obs: usize) -> Result<ThresholdCurve> {
    let mut curve = ThresholdCurve {
        eps: Vec::new(),
        eps_n: Vec::new(),
        log_p: Vec::new(),
        smoothed: Vec::new(),
        curvature: Vec::new(),
        selected_eps_n: None,
        stagnation_eps_n: None,
    };
    for &t in grid {
        if let Some(p) = p_hat_at(trace, t)? {
            if p <= 0.0 {
                continue;
            }
            curve.eps.push(t);
            curve.eps_n.push(normalize_eps(t, n_obs));
            curve.log_p.push(p.log10());
        }
    }
    curve.stagnation_eps_n = curve.eps_n.first().copied();
    Ok(curve)
}

/// Value, slope and second derivative at `x0` of the least-squares quadratic
/// through `(xs, ys)`; falls back to a line for two points.
fn local_quadratic(xs: &[f64], ys: &[f64], x0: f64) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    let scale = xs.iter().map(|x| (x - x0).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let deg = if n >= 3 { 2 } else { 1 };
    let k = deg + 1;
    let mut ata = DenseMatrix::zeros(k, k);
    let mut atb = vec![0.0; k];
    for (x, y) in xs.iter().zip(ys) {
        let u = (x - x0) / scale;
        let basis = [1.0, u, u * u];
        for i in 0..k {
            atb[i] += basis[i] * y;
            for j in 0..k {
                ata.set(i, j, ata.get(i, j) + basis[i] * basis[j]);
            }
        }
    }
    let c = solve_spd_vec(&ata, &atb)?;
    let second = if deg == 2 { 2.0 * c[2] / (scale * scale) } else { 0.0 };
    Ok((c[0], c[1] / scale, second))
}

fn window_bounds(i: usize, n: usize, window: usize) -> (usize, usize) {
    let h = window / 2;
    (i.saturating_sub(h), (i + h).min(n - 1))
}

fn check_window(n: usize, window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("smoothing window must be odd and at least 3, got {window}")));
    }
    if n < window {
        return Err(Error::InvalidConfig(format!("{n} curve points for a window of {window}")));
    }
    Ok(())
}

/// Local quadratic least-squares smoothing; windows shrink at the ends.
pub fn smooth_values(x: &[f64], y: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(x.len(), window)?;
    (0..x.len())
        .map(|i| {
            let (a, b) = window_bounds(i, x.len(), window);
            Ok(local_quadratic(&x[a..=b], &y[a..=b], x[i])?.0)
        })
        .collect()
}

pub fn smooth_log_curve(curve: &mut ThresholdCurve, window: usize) -> Result<()> {
    curve.smoothed = smooth_values(&curve.eps_n, &curve.log_p, window)?;
    Ok(())
}

/// `|f''| / (1 + f'²)^{3/2}` from local quadratic fits.
pub fn curvature_values(x: &[f64], y: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(x.len(), window)?;
    (0..x.len())
        .map(|i| {
            let (a, b) = window_bounds(i, x.len(), window);
            let (_, d1, d2) = local_quadratic(&x[a..=b], &y[a..=b], x[i])?;
            Ok(d2.abs() / (1.0 + d1 * d1).powf(1.5))
        })
        .collect()
}

pub fn curvature(curve: &mut ThresholdCurve, window: usize) -> Result<()> {
    if curve.smoothed.len() != curve.len() {
        return Err(Error::DimensionMismatch("curve has not been smoothed".into()));
    }
    curve.curvature = curvature_values(&curve.eps_n, &curve.smoothed, window)?;
    Ok(())
}

/// Grid point of maximal curvature strictly above the stagnation point, ties
/// toward larger `ε_n`. Returns `(selected, stagnation)`.
pub fn select_threshold(curve: &mut ThresholdCurve) -> Result<(f64, f64)> {
    if curve.curvature.len() != curve.len() || curve.is_empty() {
        return Err(Error::NoCurvaturePeak);
    }
    let stagnation = curve.eps_n[0];
    let mut best: Option<usize> = None;
    for i in 1..curve.len() {
        if best.is_none_or(|b| curve.curvature[i] >= curve.curvature[b]) {
            best = Some(i);
        }
    }
    match best {
        Some(b) if curve.curvature[b] > FLAT_CURVATURE => {
            curve.selected_eps_n = Some(curve.eps_n[b]);
            curve.stagnation_eps_n = Some(stagnation);
            Ok((curve.eps_n[b], stagnation))
        }
        _ => Err(Error::NoCurvaturePeak),
    }
}

/// Curve, smoothing, curvature and selection in one call.
pub fn threshold_curve(trace: &SubSimTrace, grid: &[f64], n_obs: usize, window: usize) -> Result<ThresholdCurve> {
    let mut c = probability_curve(trace, grid, n_obs)?;
    smooth_log_curve(&mut c, window)?;
    curvature(&mut c, window)?;
    select_threshold(&mut c)?;
    Ok(c)
}

/// `√(‖a − b‖² / m)`
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!("rmse of lengths {} and {}", a.len(), b.len())));
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt())
}

/// RMSE of every row of `samples` against `truth`.
pub fn rmse_rows(samples: &DenseMatrix, truth: &[f64]) -> Result<Vec<f64>> {
    samples.row_iter().map(|r| rmse(r, truth)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Debiased Sinkhorn divergence between `solutions` and each reference set.
pub fn wasserstein_diagnostics(
    solutions: &DenseMatrix,
    references: &[(&str, &DenseMatrix)],
    cfg: &SinkhornConfig,
) -> Result<Vec<(String, f64)>> {
    if solutions.rows() == 0 {
        return Err(Error::DimensionMismatch("no solutions".into()));
    }
    references
        .iter()
        .map(|(name, r)| {
            if r.rows() == 0 {
                return Err(Error::DimensionMismatch(format!("empty reference set {name}")));
            }
            Ok((name.to_string(), sinkhorn_divergence(solutions, r, cfg)?))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResimulationReport {
    /// `RMSE(F(x̃), ỹ)` per sample.
    pub rmse_model: Vec<f64>,
    /// `RMSE(F(x̃), y_obs)` per sample.
    pub rmse_obs: Vec<f64>,
}

/// Runs the true operator on proposed fields and compares against the
/// generator's travel times and the observation.
pub fn resimulation_report(
    solutions: &DenseMatrix,
    model_ys: &DenseMatrix,
    a: &RayMatrix,
    y_obs: &[f64],
) -> Result<ResimulationReport> {
    if solutions.rows() != model_ys.rows() || model_ys.cols() != a.n_rays || y_obs.len() != a.n_rays {
        return Err(Error::DimensionMismatch(format!(
            "{} fields, {}x{} travel times, {} observations, {} rays",
            solutions.rows(),
            model_ys.rows(),
            model_ys.cols(),
            y_obs.len(),
            a.n_rays
        )));
    }
    let yr = a.apply_rows(solutions)?;
    let mut rep = ResimulationReport::default();
    for (r, m) in yr.row_iter().zip(model_ys.row_iter()) {
        rep.rmse_model.push(rmse(r, m)?);
        rep.rmse_obs.push(rmse(r, y_obs)?);
    }
    Ok(rep)
}
