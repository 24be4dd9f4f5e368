//! ABC by Subset Simulation over a standard-normal latent space.
//!
//! Each level keeps the `αN` particles closest to the observation and
//! regrows the population with conditional-sampling Markov chains restricted
//! to the current tolerance set.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::jgnn::JGNNModel;
use crate::linalg::DenseMatrix;
use crate::rng::{fill_standard_normal, RngStream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubSimConfig {
    pub n_particles: usize,
    /// Conditional level probability α.
    pub level_fraction: f64,
    /// Target tolerance ε on the squared L2 misfit (ns²).
    pub target_eps: f64,
    pub max_levels: usize,
    /// Initial proposal scale `s`; proposals use `ρ = √(1 − s²)`.
    pub proposal_scale: f64,
    pub target_acceptance: f64,
    /// Relative threshold improvement below which a level counts as stalled.
    pub stagnation_tol: f64,
    /// Consecutive stalled levels that end the run.
    pub stagnation_patience: usize,
    /// Chains advanced between two scale adaptations.
    pub adaptation_block: usize,
}

impl Default for SubSimConfig {
    fn default() -> Self {
        SubSimConfig {
            n_particles: 1000,
            level_fraction: 0.1,
            target_eps: 0.01,
            max_levels: 30,
            proposal_scale: 0.5,
            target_acceptance: 0.44,
            stagnation_tol: 1e-3,
            stagnation_patience: 3,
            adaptation_block: 10,
        }
    }
}

impl SubSimConfig {
    pub fn validate(&self) -> Result<()> {
        let a = self.level_fraction;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidConfig(format!("level fraction must lie in (0, 1), got {a}")));
        }
        if (self.n_particles as f64 * a) < 10.0 {
            return Err(Error::InvalidConfig(format!(
                "N·α must be at least 10 (N = {}, α = {a})",
                self.n_particles
            )));
        }
        if !(self.target_eps > 0.0) {
            return Err(Error::InvalidConfig(format!("target ε must be positive, got {}", self.target_eps)));
        }
        if self.max_levels == 0
            || !(self.proposal_scale > 0.0 && self.proposal_scale <= 1.0)
            || !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0)
            || !(self.stagnation_tol >= 0.0)
            || self.stagnation_patience == 0
            || self.adaptation_block == 0
        {
            return Err(Error::InvalidConfig(format!("invalid subset simulation settings {self:?}")));
        }
        Ok(())
    }

    /// Number of seeds kept per level, `round(αN)`.
    pub fn n_seeds(&self) -> usize {
        (self.level_fraction * self.n_particles as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    /// Threshold `t_ℓ` (ns²).
    pub threshold: f64,
    /// Particles of the previous population with misfit `≤ t_ℓ`.
    pub survivors: usize,
    /// Acceptance rate of the chains that regrew the population, if any ran.
    pub acceptance_rate: Option<f64>,
    /// Proposal scale at the end of the level.
    pub proposal_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubSimTrace {
    pub config: SubSimConfig,
    pub seed: u64,
    pub levels: Vec<LevelRecord>,
    /// Misfits of the population each level was thresholded from; entry 0 is
    /// the prior sample.
    pub level_dissimilarities: Vec<Vec<f64>>,
    /// Final population, one latent vector per row.
    pub final_samples: DenseMatrix,
    pub final_dissimilarities: Vec<f64>,
    pub p_hat: f64,
    pub stagnated: bool,
}

impl SubSimTrace {
    pub fn final_threshold(&self) -> Option<f64> {
        self.levels.last().map(|l| l.threshold)
    }

    /// Smallest misfit value the run reached a level at.
    pub fn reached_eps(&self) -> Option<f64> {
        self.final_threshold()
    }
}

/// `Σ (a_i − b_i)²`
pub fn dissimilarity(y_gen: &[f64], y_obs: &[f64]) -> Result<f64> {
    if y_gen.len() != y_obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} generated vs {} observed travel times",
            y_gen.len(),
            y_obs.len()
        )));
    }
    Ok(y_gen.iter().zip(y_obs).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Product estimator `α^{m−1} · N_{m−1} / N`.
pub fn estimate_p(trace: &SubSimTrace) -> Result<f64> {
    let last = trace.levels.last().ok_or(Error::EmptyTrace)?;
    let m = trace.levels.len();
    let cfg = &trace.config;
    Ok(cfg.level_fraction.powi(m as i32 - 1) * last.survivors as f64 / cfg.n_particles as f64)
}

/// Result of one conditional chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    /// States after the start point, one per step.
    pub states: Vec<Vec<f64>>,
    pub dissimilarities: Vec<f64>,
    pub accepted: usize,
}

fn chain_with<F>(z0: &[f64], d0: f64, steps: usize, t: f64, dist: &F, scale: f64, rng: &mut StreamRng) -> Result<ChainOutput>
where
    F: Fn(&[f64]) -> Result<f64> + ?Sized,
{
    let rho = (1.0 - scale * scale).max(0.0).sqrt();
    let tau = scale.min(1.0);
    let mut z = z0.to_vec();
    let mut d = d0;
    let mut noise = vec![0.0; z.len()];
    let mut out = ChainOutput {
        states: Vec::with_capacity(steps),
        dissimilarities: Vec::with_capacity(steps),
        accepted: 0,
    };
    for _ in 0..steps {
        fill_standard_normal(rng, &mut noise);
        let cand: Vec<f64> = z.iter().zip(&noise).map(|(zi, u)| rho * zi + tau * u).collect();
        let dc = dist(&cand)?;
        if !dc.is_finite() {
            return Err(Error::NonFinite("dissimilarity of a proposal".into()));
        }
        if dc <= t {
            z = cand;
            d = dc;
            out.accepted += 1;
        }
        out.states.push(z.clone());
        out.dissimilarities.push(d);
    }
    Ok(out)
}

/// Markov chain with the standard normal restricted to `{z : dist(z) ≤ t}` as
/// stationary law, using proposals `ρz + √(1 − ρ²)u`.
pub fn conditional_chain<F>(z0: &[f64], steps: usize, t: f64, dist: &F, scale: f64, rng: RngStream) -> Result<ChainOutput>
where
    F: Fn(&[f64]) -> Result<f64> + ?Sized,
{
    let d0 = dist(z0)?;
    if !(d0 <= t) {
        return Err(Error::InvalidConfig(format!("chain start has misfit {d0} above threshold {t}")));
    }
    if !(0.0..=1.0).contains(&scale) {
        return Err(Error::InvalidConfig(format!("proposal scale must lie in [0, 1], got {scale}")));
    }
    chain_with(z0, d0, steps, t, dist, scale, &mut rng.rng())
}

struct Population {
    z: Vec<Vec<f64>>,
    d: Vec<f64>,
}

/// Regrows `n` particles from `seeds` with chains confined to `{d ≤ t}`;
/// returns the population and the mean acceptance rate.
#[allow(clippy::too_many_arguments)]
fn regrow<F>(
    seeds: &[(Vec<f64>, f64)],
    n: usize,
    t: f64,
    dist: &F,
    cfg: &SubSimConfig,
    lambda: &mut f64,
    block_counter: &mut usize,
    rng: &RngStream,
) -> Result<(Population, Option<f64>)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + ?Sized,
{
    let nc = seeds.len();
    let base = n / nc;
    let extra = n % nc;
    let lengths: Vec<usize> = (0..nc).map(|k| base + (k < extra) as usize).collect();
    let mut pop = Population {
        z: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
    };
    let (mut acc, mut moves) = (0usize, 0usize);
    for start in (0..nc).step_by(cfg.adaptation_block) {
        let end = (start + cfg.adaptation_block).min(nc);
        let scale = (*lambda * cfg.proposal_scale).min(1.0);
        let outs: Vec<Result<ChainOutput>> = (start..end)
            .into_par_iter()
            .map(|k| {
                let (z0, d0) = &seeds[k];
                let mut r = rng.substream(k as u64).rng();
                chain_with(z0, *d0, lengths[k].saturating_sub(1), t, dist, scale, &mut r)
            })
            .collect();
        let (mut block_acc, mut block_moves) = (0usize, 0usize);
        for (k, out) in (start..end).zip(outs) {
            let out = out?;
            pop.z.push(seeds[k].0.clone());
            pop.d.push(seeds[k].1);
            block_acc += out.accepted;
            block_moves += out.states.len();
            pop.z.extend(out.states);
            pop.d.extend(out.dissimilarities);
        }
        if block_moves > 0 {
            *block_counter += 1;
            let rate = block_acc as f64 / block_moves as f64;
            *lambda *= ((rate - cfg.target_acceptance) / (*block_counter as f64).sqrt()).exp();
            // keep the scale within (0, 1]
            *lambda = lambda.min(1.0 / cfg.proposal_scale);
        }
        acc += block_acc;
        moves += block_moves;
    }
    let rate = (moves > 0).then(|| acc as f64 / moves as f64);
    Ok((pop, rate))
}

/// Subset Simulation on a generic latent misfit `dist`.
pub fn subsim_run_with<F>(latent_dim: usize, dist: &F, cfg: &SubSimConfig, rng: RngStream) -> Result<SubSimTrace>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + ?Sized,
{
    cfg.validate()?;
    if latent_dim == 0 {
        return Err(Error::InvalidConfig("latent dimension must be positive".into()));
    }
    let n = cfg.n_particles;
    let nc = cfg.n_seeds();
    let mut prior = DenseMatrix::zeros(n, latent_dim);
    fill_standard_normal(&mut rng.substream(0).rng(), prior.data_mut());
    let z: Vec<Vec<f64>> = prior.row_iter().map(|r| r.to_vec()).collect();
    let d = z.par_iter().map(|zi| dist(zi)).collect::<Result<Vec<f64>>>()?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dissimilarity of a prior draw".into()));
    }
    let mut pop = Population { z, d };

    let mut levels: Vec<LevelRecord> = Vec::new();
    let mut level_d: Vec<Vec<f64>> = Vec::new();
    let mut lambda = 1.0;
    let mut blocks = 0usize;
    let mut stalled = 0usize;
    let mut stagnated = false;

    loop {
        let level = levels.len() + 1;
        let mut order: Vec<usize> = (0..n).collect();
        // stable: ties keep sample order
        order.sort_by(|&a, &b| pop.d[a].total_cmp(&pop.d[b]));
        let proposed = pop.d[order[nc - 1]];
        let level_rng = rng.substream(level as u64);

        if proposed <= cfg.target_eps {
            let t = cfg.target_eps;
            let seeds: Vec<(Vec<f64>, f64)> = order
                .iter()
                .take_while(|&&i| pop.d[i] <= t)
                .map(|&i| (pop.z[i].clone(), pop.d[i]))
                .collect();
            let survivors = seeds.len();
            level_d.push(std::mem::take(&mut pop.d));
            let rate = if survivors < n {
                let (next, rate) = regrow(&seeds, n, t, dist, cfg, &mut lambda, &mut blocks, &level_rng)?;
                pop = next;
                rate
            } else {
                pop = Population {
                    z: seeds.iter().map(|s| s.0.clone()).collect(),
                    d: seeds.iter().map(|s| s.1).collect(),
                };
                None
            };
            levels.push(LevelRecord {
                threshold: t,
                survivors,
                acceptance_rate: rate,
                proposal_scale: (lambda * cfg.proposal_scale).min(1.0),
            });
            break;
        }

        if let Some(prev) = levels.last().map(|l| l.threshold) {
            if proposed >= prev {
                log::info!("level {level}: threshold {proposed:.4e} did not decrease; stopping");
                stagnated = true;
                break;
            }
            if (prev - proposed) / prev < cfg.stagnation_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            if stalled >= cfg.stagnation_patience {
                log::info!("level {level}: threshold stalled at {proposed:.4e}");
                stagnated = true;
                break;
            }
        }
        if levels.len() >= cfg.max_levels {
            log::info!("level budget of {} exhausted at threshold {proposed:.4e}", cfg.max_levels);
            stagnated = true;
            break;
        }

        let seeds: Vec<(Vec<f64>, f64)> = order[..nc].iter().map(|&i| (pop.z[i].clone(), pop.d[i])).collect();
        level_d.push(std::mem::take(&mut pop.d));
        let (next, rate) = regrow(&seeds, n, proposed, dist, cfg, &mut lambda, &mut blocks, &level_rng)?;
        pop = next;
        levels.push(LevelRecord {
            threshold: proposed,
            survivors: nc,
            acceptance_rate: rate,
            proposal_scale: (lambda * cfg.proposal_scale).min(1.0),
        });
        log::debug!("level {level}: t = {proposed:.4e}, acceptance {rate:?}");
    }

    if levels.is_empty() {
        // stopped before the first level: report the whole prior sample
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pop.d[a].total_cmp(&pop.d[b]));
        levels.push(LevelRecord {
            threshold: pop.d[order[n - 1]],
            survivors: n,
            acceptance_rate: None,
            proposal_scale: cfg.proposal_scale,
        });
        level_d.push(pop.d.clone());
    }

    let final_samples = DenseMatrix::new(n, latent_dim, pop.z.concat())?;
    let mut trace = SubSimTrace {
        config: *cfg,
        seed: rng.seed,
        levels,
        level_dissimilarities: level_d,
        final_samples,
        final_dissimilarities: pop.d,
        p_hat: 0.0,
        stagnated,
    };
    trace.p_hat = estimate_p(&trace)?;
    Ok(trace)
}

/// Subset Simulation for `g2(z)` against an observation, with squared L2 misfit.
pub fn subsim_run(model: &JGNNModel, y_obs: &[f64], cfg: &SubSimConfig, rng: RngStream) -> Result<SubSimTrace> {
    if y_obs.len() != model.y_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for a model with {} outputs",
            y_obs.len(),
            model.y_dim()
        )));
    }
    let dist = |z: &[f64]| -> Result<f64> { dissimilarity(&model.generate_y_one(z)?, y_obs) };
    subsim_run_with(model.latent_dim(), &dist, cfg, rng)
}

/// `g1` applied to every final latent sample, in order.
pub fn posterior_solutions(trace: &SubSimTrace, model: &JGNNModel) -> Result<DenseMatrix> {
    if trace.final_samples.rows() == 0 {
        return Err(Error::EmptyTrace);
    }
    model.generate_x(&trace.final_samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceFile {
    config: SubSimConfig,
    seed: u64,
    levels: Vec<LevelRecord>,
    p_hat: f64,
    stagnated: bool,
    latent_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl SubSimTrace {
    /// Writes `<dir>/<name>.json` plus arrays `<name>_samples`,
    /// `<name>_dissimilarities` and `<name>_level_dissimilarities`.
    pub fn save(&self, dir: &Path, name: &str, provenance: Option<&Provenance>) -> Result<()> {
        io::ensure_dir(dir)?;
        let head = TraceFile {
            config: self.config,
            seed: self.seed,
            levels: self.levels.clone(),
            p_hat: self.p_hat,
            stagnated: self.stagnated,
            latent_dim: self.final_samples.cols(),
            provenance: provenance.cloned(),
        };
        io::write_json(&dir.join(format!("{name}.json")), &head)?;
        io::write_array(&dir.join(format!("{name}_samples")), &self.final_samples, provenance)?;
        io::write_vector(&dir.join(format!("{name}_dissimilarities")), &self.final_dissimilarities, provenance)?;
        let n = self.config.n_particles;
        let levels = DenseMatrix::new(self.level_dissimilarities.len(), n, self.level_dissimilarities.concat())?;
        io::write_array(&dir.join(format!("{name}_level_dissimilarities")), &levels, provenance)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.json"));
        let head: TraceFile = io::read_json(&path)?;
        let final_samples = io::read_array(&dir.join(format!("{name}_samples")))?;
        let final_dissimilarities = io::read_vector(&dir.join(format!("{name}_dissimilarities")))?;
        let levels = io::read_array(&dir.join(format!("{name}_level_dissimilarities")))?;
        if final_samples.cols() != head.latent_dim || final_dissimilarities.len() != final_samples.rows() {
            return Err(Error::format(&path, "trace arrays do not match the header"));
        }
        Ok(SubSimTrace {
            config: head.config,
            seed: head.seed,
            levels: head.levels,
            level_dissimilarities: levels.row_iter().map(|r| r.to_vec()).collect(),
            final_samples,
            final_dissimilarities,
            p_hat: head.p_hat,
            stagnated: head.stagnated,
        })
    }
}
