//! Reproducible commands over a directory of artifacts: data generation,
//! training, inversion and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    self, median, p_hat_at, resimulation_report, rmse_rows, wasserstein_diagnostics, EpsGrid, ResimulationReport,
    ThresholdCurve,
};
use crate::error::{Error, Result};
use crate::gp::{self, GPConfig, Grid};
use crate::io::{self, Provenance};
use crate::jgnn::{self, ArchConfig, JGNNModel, TrainConfig, TrainHistory};
use crate::linalg::DenseMatrix;
use crate::posterior::{posterior_sample, tomography_posterior, GaussianDist};
use crate::rng::RngStream;
use crate::sinkhorn::SinkhornConfig;
use crate::subsim::{posterior_solutions, subsim_run, SubSimConfig, SubSimTrace};
use crate::tomography::{add_noise, assemble_matrix, build_geometry, GeometryConfig, NoiseModel, RayMatrix, TravelTimes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub invert: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            train: 2,
            invert: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Divergence settings for comparing sets of fields.
    pub ot: SinkhornConfig,
    /// Each point cloud is thinned to at most this many rows before the
    /// divergence is computed.
    pub max_points: usize,
    pub oracle_samples: usize,
    pub prior_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            ot: SinkhornConfig {
                reg: 1.0,
                max_iter: 200,
                debiased: true,
                ..SinkhornConfig::default()
            },
            max_points: 256,
            oracle_samples: 1000,
            prior_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: Grid,
    pub gp: GPConfig,
    pub geometry: GeometryConfig,
    pub noise: NoiseModel,
    pub train_size: usize,
    pub test_size: usize,
    pub latent_dim: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub subsim: SubSimConfig,
    /// Threshold grid in ns²; by default 60 log-spaced values over
    /// `[0.01, 3000]`.
    pub eps_grid: EpsGrid,
    pub smoothing_window: usize,
    pub diagnostics: DiagnosticsConfig,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: Grid::default(),
            gp: GPConfig::default(),
            geometry: GeometryConfig::default(),
            noise: NoiseModel::default(),
            train_size: 1000,
            test_size: 40,
            latent_dim: 10,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            subsim: SubSimConfig::default(),
            eps_grid: EpsGrid::default(),
            smoothing_window: 9,
            diagnostics: DiagnosticsConfig::default(),
            seeds: Seeds::default(),
            out_dir: PathBuf::from("artifacts"),
        }
    }
}

impl PipelineConfig {
    /// Reduced problem: 20 × 16 cells of 0.25 m, 5 × 5 rays, 1500 epochs of
    /// a 128-wide network.
    pub fn desk() -> Self {
        PipelineConfig {
            grid: Grid {
                n_rows: 20,
                n_cols: 16,
                cell_size: 0.25,
            },
            geometry: GeometryConfig {
                n_sources: 5,
                n_receivers: 5,
                depth_min: 0.5,
                depth_max: 4.5,
                separation: 3.75,
            },
            arch: ArchConfig {
                hidden_width: 128,
                ..ArchConfig::default()
            },
            train: TrainConfig {
                epochs: 1500,
                ..TrainConfig::default()
            },
            test_size: 6,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.gp.validate()?;
        self.train.validate()?;
        self.diagnostics.ot.validate()?;
        self.eps_grid.validate()?;
        if self.latent_dim == 0 || self.train_size == 0 {
            return Err(Error::InvalidConfig("latent dimension and training size must be positive".into()));
        }
        if !(self.noise.std >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise std {} < 0", self.noise.std)));
        }
        if self.smoothing_window < 3 || self.smoothing_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "smoothing window must be odd and at least 3, got {}",
                self.smoothing_window
            )));
        }
        if self.diagnostics.max_points == 0 || self.diagnostics.oracle_samples == 0 || self.diagnostics.prior_samples == 0
        {
            return Err(Error::InvalidConfig("diagnostic sample counts must be positive".into()));
        }
        build_geometry(&self.grid, &self.geometry)?;
        Ok(())
    }

    pub fn n_rays(&self) -> usize {
        self.geometry.n_sources * self.geometry.n_receivers
    }

    /// SHA-256 of the JSON encoding with the artifact directory blanked, so
    /// the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let cfg = PipelineConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        io::sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = io::read_json(path)?;
        Ok(cfg)
    }

    fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_dir().join("model.json")
    }

    pub fn inversion_dir(&self, index: usize) -> PathBuf {
        self.out_dir.join("inversions").join(format!("{index:03}"))
    }
}

/// Training and test couples with their operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub a: RayMatrix,
    pub train_x: DenseMatrix,
    pub train_y: DenseMatrix,
    pub test_x: DenseMatrix,
    pub test_y: DenseMatrix,
    /// Noisy observations of the test couples.
    pub test_y_obs: DenseMatrix,
}

pub fn generate_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    let geom = build_geometry(&cfg.grid, &cfg.geometry)?;
    let a = assemble_matrix(&cfg.grid, &geom)?;
    let chol = gp::prior_cholesky(&cfg.grid, &cfg.gp)?;
    let root = RngStream::new(cfg.seeds.data);
    let train_x = gp::sample_with_factor(&cfg.grid, &cfg.gp, &chol, cfg.train_size, root.substream(1))?;
    let test_x = gp::sample_with_factor(&cfg.grid, &cfg.gp, &chol, cfg.test_size, root.substream(2))?;
    let train_y = a.apply_rows(&train_x)?;
    let test_y = a.apply_rows(&test_x)?;
    let mut noisy = Vec::with_capacity(test_y.data().len());
    for (k, row) in test_y.row_iter().enumerate() {
        let y = TravelTimes { values: row.to_vec() };
        noisy.extend(add_noise(&y, &cfg.noise, root.substream2(3, k as u64))?.values);
    }
    let test_y_obs = DenseMatrix::new(test_y.rows(), test_y.cols(), noisy)?;
    Ok(Dataset {
        grid: cfg.grid,
        a,
        train_x,
        train_y,
        test_x,
        test_y,
        test_y_obs,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

/// Lists the artifacts a command wrote, with checksums.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
    files: Vec<FileEntry>,
}

fn write_manifest(dir: &Path, prov: &Provenance, details: serde_json::Value, files: &[PathBuf]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = io::read_bytes(f)?;
        entries.push(FileEntry {
            path: f
                .strip_prefix(dir)
                .unwrap_or(f)
                .to_string_lossy()
                .replace('\\', "/"),
            sha256: io::sha256_hex(&bytes),
        });
    }
    let path = dir.join("manifest.json");
    io::write_json(
        &path,
        &Manifest {
            provenance: prov.clone(),
            details,
            files: entries,
        },
    )?;
    Ok(path)
}

fn array_files(stem: &Path) -> [PathBuf; 2] {
    [io::bin_path(stem), io::sidecar_path(stem)]
}

const DATA_ARRAYS: [&str; 5] = ["train_x", "train_y", "test_x", "test_y", "test_y_obs"];

impl Dataset {
    pub fn save(&self, dir: &Path, prov: &Provenance, noise: &NoiseModel) -> Result<PathBuf> {
        io::ensure_dir(dir)?;
        let mut files = Vec::new();
        let arrays = [&self.train_x, &self.train_y, &self.test_x, &self.test_y, &self.test_y_obs];
        for (name, m) in DATA_ARRAYS.iter().zip(arrays) {
            let stem = dir.join(name);
            io::write_array(&stem, m, Some(prov))?;
            files.extend(array_files(&stem));
        }
        let stem = dir.join("ray_matrix");
        self.a.save(&stem, Some(prov))?;
        files.extend(array_files(&stem));
        let details = serde_json::json!({
            "grid": self.grid,
            "train_size": self.train_x.rows(),
            "test_size": self.test_x.rows(),
            "n_cells": self.a.n_cells,
            "n_rays": self.a.n_rays,
            "noise": noise,
        });
        write_manifest(dir, prov, details, &files)
    }

    pub fn load(dir: &Path, grid: Grid) -> Result<Self> {
        let mut missing: Vec<PathBuf> = Vec::new();
        for name in DATA_ARRAYS.iter().chain(["ray_matrix"].iter()) {
            for f in array_files(&dir.join(name)) {
                if !f.exists() {
                    missing.push(f);
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        let a = RayMatrix::load(&dir.join("ray_matrix"))?;
        if a.n_cells != grid.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "stored operator has {} cells, the configured grid {}",
                a.n_cells,
                grid.n_cells()
            )));
        }
        Ok(Dataset {
            grid,
            a,
            train_x: io::read_array(&dir.join("train_x"))?,
            train_y: io::read_array(&dir.join("train_y"))?,
            test_x: io::read_array(&dir.join("test_x"))?,
            test_y: io::read_array(&dir.join("test_y"))?,
            test_y_obs: io::read_array(&dir.join("test_y_obs"))?,
        })
    }
}

pub fn cmd_gendata(cfg: &PipelineConfig) -> Result<PathBuf> {
    let ds = generate_dataset(cfg)?;
    let prov = Provenance::new("gendata", &cfg.hash(), cfg.seeds.data);
    ds.save(&cfg.data_dir(), &prov, &cfg.noise)
}

/// Builds and trains a model on the training couples.
pub fn train_model(cfg: &PipelineConfig, train_x: &DenseMatrix, train_y: &DenseMatrix) -> Result<(JGNNModel, TrainHistory)> {
    let init_rng = RngStream::new(cfg.seeds.train).substream(u64::MAX);
    let init = JGNNModel::new(train_x.cols(), train_y.cols(), cfg.latent_dim, &cfg.arch, init_rng)?;
    let tcfg = TrainConfig {
        seed: cfg.seeds.train,
        ..cfg.train
    };
    jgnn::train(train_x, train_y, init, &tcfg)
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data_dir(), cfg.grid)?;
    let prov = Provenance::new("train", &cfg.hash(), cfg.seeds.train);
    let dir = cfg.model_dir();
    io::ensure_dir(&dir)?;
    let history_path = dir.join("history.csv");
    let (model, history) = match train_model(cfg, &ds.train_x, &ds.train_y) {
        Ok(out) => out,
        Err(Error::Diverged { epoch, history }) => {
            io::write_bytes(&history_path, history.to_csv().as_bytes())?;
            return Err(Error::Diverged { epoch, history });
        }
        Err(e) => return Err(e),
    };
    io::write_bytes(&history_path, history.to_csv().as_bytes())?;
    let model_path = cfg.model_path();
    model.save(&model_path, Some(&cfg.train), Some(&prov))?;
    let details = serde_json::json!({
        "best_epoch": history.best_epoch,
        "epochs": history.len(),
    });
    write_manifest(
        &dir,
        &prov,
        details,
        &[model_path.clone(), model_path.with_extension("weights.bin"), history_path],
    )
}

/// Divergences of one set of solutions to the reference sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub label: String,
    pub eps: f64,
    pub eps_n: f64,
    pub to_posterior: Option<f64>,
    pub to_prior: f64,
    pub to_truth: Option<f64>,
}

/// Per-sample RMSE to the true field for each comparison set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseSets {
    pub train: Vec<f64>,
    pub post: Vec<f64>,
    pub ours: Vec<f64>,
    pub prior: Vec<f64>,
}

impl RmseSets {
    pub fn medians(&self) -> [f64; 4] {
        [median(&self.train), median(&self.post), median(&self.ours), median(&self.prior)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub n_obs: usize,
    pub deep_levels: usize,
    pub deep_stagnated: bool,
    pub reached_eps: f64,
    pub stagnation_eps_n: Option<f64>,
    pub selected_eps_n: Option<f64>,
    pub selected_eps: Option<f64>,
    pub p_hat_at_selected: Option<f64>,
    pub final_p_hat: Option<f64>,
    /// Medians of `[train, post, ours, prior]` RMSEs to the truth.
    pub median_rmse: Option<[f64; 4]>,
    pub median_resim_model: Option<f64>,
    pub median_resim_obs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Everything an inversion produced. Fields after the curve are `None` when
/// no curvature peak was found.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub deep: SubSimTrace,
    pub curve: ThresholdCurve,
    pub selected_eps: Option<f64>,
    pub final_trace: Option<SubSimTrace>,
    pub solutions: Option<DenseMatrix>,
    pub resimulation: Option<ResimulationReport>,
    pub rmse: Option<RmseSets>,
    pub divergences: Vec<DivergenceRow>,
    pub summary: InversionSummary,
}

/// Inputs for the optional comparisons of an inversion.
pub struct Reference<'a> {
    pub truth: &'a [f64],
    pub train_x: &'a DenseMatrix,
    pub prior: &'a GaussianDist,
    /// Run the closed-form posterior and compare against it.
    pub oracle: bool,
}

fn thin(m: &DenseMatrix, k: usize) -> DenseMatrix {
    if m.rows() <= k {
        return m.clone();
    }
    let idx: Vec<usize> = (0..k).map(|i| i * m.rows() / k).collect();
    m.select_rows(&idx)
}

/// Deep run, threshold curve and selection, a second run at the selected
/// threshold, and the metrics against the references.
pub fn invert(
    cfg: &PipelineConfig,
    model: &JGNNModel,
    a: &RayMatrix,
    y_obs: &[f64],
    reference: Option<&Reference>,
    rng: RngStream,
) -> Result<Inversion> {
    let n_obs = y_obs.len();
    let grid = cfg.eps_grid.values();
    let eps_min = grid[0];
    let eps_max = *grid.last().expect("grid has at least two points");
    let deep_cfg = SubSimConfig {
        target_eps: eps_min,
        ..cfg.subsim
    };
    let deep = subsim_run(model, y_obs, &deep_cfg, rng.substream(1))?;
    let reached = deep.final_threshold().ok_or(Error::EmptyTrace)?;
    let mut curve = diagnostics::probability_curve(&deep, &grid, n_obs)?;
    let mut summary = InversionSummary {
        n_obs,
        deep_levels: deep.levels.len(),
        deep_stagnated: deep.stagnated,
        reached_eps: reached,
        stagnation_eps_n: curve.stagnation_eps_n,
        selected_eps_n: None,
        selected_eps: None,
        p_hat_at_selected: None,
        final_p_hat: None,
        median_rmse: None,
        median_resim_model: None,
        median_resim_obs: None,
        provenance: None,
    };
    let selection = (|| -> Result<(f64, f64)> {
        if curve.len() < cfg.smoothing_window {
            return Err(Error::NoCurvaturePeak);
        }
        diagnostics::smooth_log_curve(&mut curve, cfg.smoothing_window)?;
        diagnostics::curvature(&mut curve, cfg.smoothing_window)?;
        diagnostics::select_threshold(&mut curve)
    })();
    let (sel_n, _) = match selection {
        Ok(s) => s,
        Err(Error::NoCurvaturePeak) => {
            return Ok(Inversion {
                deep,
                curve,
                selected_eps: None,
                final_trace: None,
                solutions: None,
                resimulation: None,
                rmse: None,
                divergences: Vec::new(),
                summary,
            })
        }
        Err(e) => return Err(e),
    };
    let eps_star = sel_n * sel_n * n_obs as f64;
    summary.selected_eps_n = Some(sel_n);
    summary.selected_eps = Some(eps_star);
    summary.p_hat_at_selected = p_hat_at(&deep, eps_star)?;

    let run_at = |eps: f64, id: u64| -> Result<SubSimTrace> {
        let c = SubSimConfig {
            target_eps: eps,
            ..cfg.subsim
        };
        subsim_run(model, y_obs, &c, rng.substream(id))
    };
    let final_trace = run_at(eps_star, 2)?;
    summary.final_p_hat = Some(final_trace.p_hat);
    let solutions = posterior_solutions(&final_trace, model)?;
    let model_ys = model.generate_y(&final_trace.final_samples)?;
    let resim = resimulation_report(&solutions, &model_ys, a, y_obs)?;
    summary.median_resim_model = Some(median(&resim.rmse_model));
    summary.median_resim_obs = Some(median(&resim.rmse_obs));

    let mut inv = Inversion {
        deep,
        curve,
        selected_eps: Some(eps_star),
        final_trace: None,
        solutions: None,
        resimulation: Some(resim),
        rmse: None,
        divergences: Vec::new(),
        summary,
    };

    if let Some(r) = reference {
        let prior_samples = posterior_sample(r.prior, cfg.diagnostics.prior_samples, rng.substream(3))?;
        let posterior = if r.oracle {
            let post = tomography_posterior(r.prior, a, cfg.noise.std, y_obs)?;
            Some(posterior_sample(&post, cfg.diagnostics.oracle_samples, rng.substream(4))?)
        } else {
            None
        };
        let rmse = RmseSets {
            train: rmse_rows(r.train_x, r.truth)?,
            post: match &posterior {
                Some(p) => rmse_rows(p, r.truth)?,
                None => Vec::new(),
            },
            ours: rmse_rows(&solutions, r.truth)?,
            prior: rmse_rows(&prior_samples, r.truth)?,
        };
        inv.summary.median_rmse = Some(rmse.medians());
        inv.rmse = Some(rmse);

        let k = cfg.diagnostics.max_points;
        let truth = DenseMatrix::new(1, r.truth.len(), r.truth.to_vec())?;
        let prior_thin = thin(&prior_samples, k);
        let post_thin = posterior.as_ref().map(|p| thin(p, k));
        let top = run_at(eps_max, 5)?;
        let sets = [
            ("largest", eps_max, posterior_solutions(&top, model)?),
            ("selected", eps_star, solutions.clone()),
            ("reached", reached, posterior_solutions(&inv.deep, model)?),
        ];
        for (label, eps, sols) in sets {
            let s = thin(&sols, k);
            let mut refs: Vec<(&str, &DenseMatrix)> = vec![("prior", &prior_thin), ("truth", &truth)];
            if let Some(p) = &post_thin {
                refs.push(("posterior", p));
            }
            let d = wasserstein_diagnostics(&s, &refs, &cfg.diagnostics.ot)?;
            inv.divergences.push(DivergenceRow {
                label: label.into(),
                eps,
                eps_n: diagnostics::normalize_eps(eps, n_obs),
                to_prior: d[0].1,
                to_truth: Some(d[1].1),
                to_posterior: d.get(2).map(|x| x.1),
            });
        }
    }
    inv.final_trace = Some(final_trace);
    inv.solutions = Some(solutions);
    Ok(inv)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Columns of possibly different lengths side by side; short columns leave
/// empty cells.
pub fn wide_csv(headers: &[&str], columns: &[&[f64]]) -> String {
    let mut s = headers.join(",");
    s.push('\n');
    let rows = columns.iter().map(|c| c.len()).max().unwrap_or(0);
    for i in 0..rows {
        let cells: Vec<String> = columns.iter().map(|c| fmt_opt(c.get(i).copied())).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

impl Inversion {
    pub fn save(&self, dir: &Path, prov: &Provenance) -> Result<Vec<PathBuf>> {
        io::ensure_dir(dir)?;
        let mut files = Vec::new();
        self.deep.save(dir, "deep", Some(prov))?;
        for suffix in ["", "_samples", "_dissimilarities", "_level_dissimilarities"] {
            let stem = dir.join(format!("deep{suffix}"));
            if suffix.is_empty() {
                files.push(dir.join("deep.json"));
            } else {
                files.extend(array_files(&stem));
            }
        }
        let curve_path = dir.join("curve.csv");
        io::write_bytes(&curve_path, self.curve.to_csv().as_bytes())?;
        files.push(curve_path);
        if let Some(t) = &self.final_trace {
            t.save(dir, "trace", Some(prov))?;
            files.push(dir.join("trace.json"));
            for suffix in ["_samples", "_dissimilarities", "_level_dissimilarities"] {
                files.extend(array_files(&dir.join(format!("trace{suffix}"))));
            }
        }
        if let Some(s) = &self.solutions {
            let stem = dir.join("solutions");
            io::write_array(&stem, s, Some(prov))?;
            files.extend(array_files(&stem));
        }
        if let Some(r) = &self.resimulation {
            let p = dir.join("resimulation.csv");
            io::write_bytes(&p, wide_csv(&["rmse_model", "rmse_obs"], &[&r.rmse_model, &r.rmse_obs]).as_bytes())?;
            files.push(p);
        }
        if let Some(r) = &self.rmse {
            let p = dir.join("rmse.csv");
            io::write_bytes(
                &p,
                wide_csv(&["train", "post", "ours", "prior"], &[&r.train, &r.post, &r.ours, &r.prior]).as_bytes(),
            )?;
            files.push(p);
        }
        if !self.divergences.is_empty() {
            let mut s = String::from("label,eps,eps_n,to_posterior,to_prior,to_truth\n");
            for d in &self.divergences {
                let _ = writeln!(
                    s,
                    "{},{:e},{:e},{},{:e},{}",
                    d.label,
                    d.eps,
                    d.eps_n,
                    fmt_opt(d.to_posterior),
                    d.to_prior,
                    fmt_opt(d.to_truth)
                );
            }
            let p = dir.join("divergence.csv");
            io::write_bytes(&p, s.as_bytes())?;
            files.push(p);
        }
        let summary = InversionSummary {
            provenance: Some(prov.clone()),
            ..self.summary.clone()
        };
        let p = dir.join("summary.json");
        io::write_json(&p, &summary)?;
        files.push(p);
        Ok(files)
    }
}

/// Inverts test couple `index` and writes its directory. Returns
/// [`Error::NoCurvaturePeak`] after writing the diagnostics when no
/// threshold could be selected.
pub fn cmd_invert(cfg: &PipelineConfig, index: usize, oracle: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data_dir(), cfg.grid)?;
    if index >= ds.test_x.rows() {
        return Err(Error::InvalidConfig(format!(
            "test index {index} out of range ({} test couples)",
            ds.test_x.rows()
        )));
    }
    let model = JGNNModel::load(&cfg.model_path())?;
    let prior = GaussianDist::gp_prior(&cfg.grid, &cfg.gp)?;
    let reference = Reference {
        truth: ds.test_x.row(index),
        train_x: &ds.train_x,
        prior: &prior,
        oracle,
    };
    let rng = RngStream::new(cfg.seeds.invert).substream(index as u64);
    let inv = invert(cfg, &model, &ds.a, ds.test_y_obs.row(index), Some(&reference), rng)?;
    let prov = Provenance::new("invert", &cfg.hash(), cfg.seeds.invert);
    let dir = cfg.inversion_dir(index);
    let files = inv.save(&dir, &prov)?;
    let details = serde_json::json!({ "index": index, "oracle": oracle });
    let manifest = write_manifest(&dir, &prov, details, &files)?;
    if inv.selected_eps.is_none() {
        return Err(Error::NoCurvaturePeak);
    }
    Ok(manifest)
}

/// Inverts an observation vector stored at `y_obs` (array stem) and writes
/// the results under `<out>/external/<file name>`. No truth is known, so only
/// the curve, the solutions and the resimulation report are produced.
pub fn cmd_invert_observation(cfg: &PipelineConfig, y_obs: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let a = RayMatrix::load(&cfg.data_dir().join("ray_matrix"))?;
    let y = io::read_vector(y_obs)?;
    if y.len() != a.n_rays {
        return Err(Error::DimensionMismatch(format!(
            "observation has {} entries, the operator {} rays",
            y.len(),
            a.n_rays
        )));
    }
    let model = JGNNModel::load(&cfg.model_path())?;
    let name = y_obs
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "observation".into());
    let inv = invert(cfg, &model, &a, &y, None, RngStream::new(cfg.seeds.invert).substream(u64::MAX))?;
    let prov = Provenance::new("invert", &cfg.hash(), cfg.seeds.invert);
    let dir = cfg.out_dir.join("external").join(name);
    let files = inv.save(&dir, &prov)?;
    let manifest = write_manifest(&dir, &prov, serde_json::json!({ "observation": y_obs }), &files)?;
    if inv.selected_eps.is_none() {
        return Err(Error::NoCurvaturePeak);
    }
    Ok(manifest)
}

/// Analytic posterior of test couple `index`: mean, covariance, marginal
/// standard deviations and samples.
pub fn cmd_oracle_posterior(cfg: &PipelineConfig, index: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data_dir(), cfg.grid)?;
    if index >= ds.test_x.rows() {
        return Err(Error::InvalidConfig(format!("test index {index} out of range")));
    }
    let prior = GaussianDist::gp_prior(&cfg.grid, &cfg.gp)?;
    let post = tomography_posterior(&prior, &ds.a, cfg.noise.std, ds.test_y_obs.row(index))?;
    let prov = Provenance::new("oracle-posterior", &cfg.hash(), cfg.seeds.invert);
    let dir = cfg.out_dir.join("oracle").join(format!("{index:03}"));
    io::ensure_dir(&dir)?;
    let samples = posterior_sample(
        &post,
        cfg.diagnostics.oracle_samples,
        RngStream::new(cfg.seeds.invert).substream2(index as u64, 4),
    )?;
    let sd: Vec<f64> = post.cov.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut files = Vec::new();
    for (name, m) in [
        ("mean", DenseMatrix::new(1, post.dim(), post.mean.clone())?),
        ("std", DenseMatrix::new(1, post.dim(), sd)?),
        ("cov", post.cov.clone()),
        ("samples", samples),
    ] {
        let stem = dir.join(name);
        io::write_array(&stem, &m, Some(&prov))?;
        files.extend(array_files(&stem));
    }
    write_manifest(&dir, &prov, serde_json::json!({ "index": index }), &files)
}

fn parse_wide_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let mut cols: Vec<(String, Vec<f64>)> = header.split(',').map(|h| (h.to_string(), Vec::new())).collect();
    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::format(path, format!("row {} has {} cells", k + 2, cells.len())));
        }
        for (c, cell) in cols.iter_mut().zip(cells) {
            if !cell.is_empty() {
                c.1.push(cell.parse().map_err(|_| Error::format(path, format!("bad number {cell:?}")))?);
            }
        }
    }
    Ok(cols)
}

/// Per-inversion medians and pooled RMSE distributions over every inversion
/// directory under `dir/inversions`.
pub fn cmd_evaluate(dir: &Path, prov: &Provenance) -> Result<PathBuf> {
    let inv_root = dir.join("inversions");
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&inv_root)
        .map_err(|e| Error::io(&inv_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::MissingArtifacts(vec![inv_root]));
    }
    let mut missing: Vec<PathBuf> = Vec::new();
    let mut summaries = Vec::with_capacity(subdirs.len());
    for d in &subdirs {
        let path = d.join("summary.json");
        if !path.exists() {
            missing.push(path);
            continue;
        }
        let summary: InversionSummary = io::read_json(&path)?;
        // Inversions stopped without a selected threshold have no RMSE table.
        if summary.selected_eps_n.is_some() && !d.join("rmse.csv").exists() {
            missing.push(d.join("rmse.csv"));
        }
        summaries.push(summary);
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let labels = ["train", "post", "ours", "prior"];
    let mut pooled: [Vec<f64>; 4] = Default::default();
    let mut agg = String::from("inversion,train,post,ours,prior,selected_eps_n,stagnation_eps_n\n");
    for (d, summary) in subdirs.iter().zip(summaries) {
        let cols = if summary.selected_eps_n.is_some() {
            parse_wide_csv(&d.join("rmse.csv"))?
        } else {
            Vec::new()
        };
        let name = d.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let mut meds = Vec::new();
        for (k, label) in labels.iter().enumerate() {
            let v = cols.iter().find(|c| c.0 == *label).map(|c| c.1.clone()).unwrap_or_default();
            meds.push(if v.is_empty() { String::new() } else { format!("{:e}", median(&v)) });
            pooled[k].extend(v);
        }
        let _ = writeln!(
            agg,
            "{name},{},{},{}",
            meds.join(","),
            fmt_opt(summary.selected_eps_n),
            fmt_opt(summary.stagnation_eps_n)
        );
    }
    let agg_path = dir.join("aggregate.csv");
    io::write_bytes(&agg_path, agg.as_bytes())?;
    let pooled_path = dir.join("pooled.csv");
    let cols: Vec<&[f64]> = pooled.iter().map(|v| v.as_slice()).collect();
    io::write_bytes(&pooled_path, wide_csv(&labels, &cols).as_bytes())?;
    let details = serde_json::json!({ "inversions": subdirs.len() });
    let eval_dir = dir.join("evaluation");
    io::ensure_dir(&eval_dir)?;
    let mut entries = Vec::new();
    for f in [&agg_path, &pooled_path] {
        entries.push(FileEntry {
            path: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: io::sha256_hex(&io::read_bytes(f)?),
        });
    }
    let path = eval_dir.join("manifest.json");
    io::write_json(
        &path,
        &Manifest {
            provenance: prov.clone(),
            details,
            files: entries,
        },
    )?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk();
        cfg.grid = Grid {
            n_rows: 6,
            n_cols: 5,
            cell_size: 0.5,
        };
        cfg.geometry = GeometryConfig {
            n_sources: 3,
            n_receivers: 3,
            depth_min: 0.5,
            depth_max: 2.5,
            separation: 2.0,
        };
        cfg.train_size = 40;
        cfg.test_size = 2;
        cfg.latent_dim = 3;
        cfg.arch.hidden_width = 8;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 16;
        cfg.subsim.n_particles = 200;
        cfg
    }

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
        assert_eq!(PipelineConfig::desk().grid.n_cells(), 320);
        assert_eq!(PipelineConfig::desk().n_rays(), 25);
    }

    #[test]
    fn config_json_roundtrip_and_hash() {
        let cfg = PipelineConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let moved = PipelineConfig {
            out_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        let partial: PipelineConfig = serde_json::from_str(r#"{"latent_dim": 30}"#).unwrap();
        assert_eq!(partial.latent_dim, 30);
        assert_ne!(partial.hash(), PipelineConfig::default().hash());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"latent_dims": 30}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny();
        cfg.smoothing_window = 4;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = tiny();
        cfg.geometry.separation = 10.0;
        assert!(matches!(cfg.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let cfg = tiny();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_x.shape(), (40, 30));
        assert_eq!(a.test_y_obs.shape(), (2, 9));
        let y = a.a.apply_rows(&a.train_x).unwrap();
        assert!(y.max_abs_diff(&a.train_y) < 1e-12);
    }

    #[test]
    fn wide_csv_pads_short_columns() {
        let s = wide_csv(&["a", "b"], &[&[1.0, 2.0], &[3.0]]);
        assert_eq!(s, "a,b\n1e0,3e0\n2e0,\n");
    }

    #[test]
    fn end_to_end_in_a_temp_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.out_dir = dir.path().to_path_buf();
        cmd_gendata(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        let history = std::fs::read_to_string(dir.path().join("model/history.csv")).unwrap();
        assert_eq!(history.lines().count(), 4);
        match cmd_invert(&cfg, 0, true) {
            Ok(_) | Err(Error::NoCurvaturePeak) => {}
            Err(e) => panic!("{e}"),
        }
        assert!(cfg.inversion_dir(0).join("summary.json").exists());
        assert!(cfg.inversion_dir(0).join("curve.csv").exists());
        assert!(matches!(cmd_invert(&cfg, 7, false), Err(Error::InvalidConfig(_))));
        cmd_oracle_posterior(&cfg, 1).unwrap();
    }

    #[test]
    fn evaluate_lists_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::new("evaluate", "x", 0);
        assert!(matches!(cmd_evaluate(dir.path(), &prov), Err(Error::Io { .. })));
        std::fs::create_dir_all(dir.path().join("inversions/000")).unwrap();
        match cmd_evaluate(dir.path(), &prov) {
            Err(Error::MissingArtifacts(v)) => assert_eq!(v.len(), 1),
            other => panic!("{other:?}"),
        }
    }
}
