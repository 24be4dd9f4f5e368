//! Joint generative network: an encoder `Q: (x, y) → z` and a decoder
//! `z → (g1(z), g2(z))` sharing a trunk, trained as a Sinkhorn autoencoder.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::linalg::DenseMatrix;
use crate::neural::{Activation, AdamConfig, AdamState, ForwardCache, LayerSpec, Mlp, MlpGrads};
use crate::rng::{fill_standard_normal, RngStream};
use crate::sinkhorn::{ot_value_and_grad, SinkhornConfig};

const STD_FLOOR: f64 = 1e-12;

/// Per-dimension affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and (population) standard deviations; constant columns
    /// get unit scale.
    pub fn fit(data: &DenseMatrix) -> Self {
        let (n, d) = data.shape();
        let mut mean = vec![0.0; d];
        for r in data.row_iter() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in data.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > STD_FLOOR {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &DenseMatrix) -> DenseMatrix {
        let mut out = data.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, data: &DenseMatrix) -> DenseMatrix {
        let mut out = data.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden_width: usize,
    pub encoder_hidden_layers: usize,
    pub decoder_hidden_layers: usize,
    pub activation: Activation,
    /// Spectral normalization of the hidden layers of both networks.
    pub spectral_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_width: 512,
            encoder_hidden_layers: 2,
            decoder_hidden_layers: 2,
            activation: Activation::LeakyRelu,
            spectral_norm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda0: f64,
    pub lambda_halving_period: usize,
    pub sinkhorn: SinkhornConfig,
    pub adam: AdamConfig,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch_size: 128,
            lambda0: 150.0,
            lambda_halving_period: 500,
            sinkhorn: SinkhornConfig {
                reg: 10.0,
                max_iter: 40,
                debiased: true,
                ..SinkhornConfig::default()
            },
            adam: AdamConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        let a = self.adam;
        if self.epochs == 0
            || self.batch_size == 0
            || !(self.lambda0 >= 0.0)
            || self.lambda_halving_period == 0
            || !(a.lr > 0.0 && a.eps > 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(0.0..1.0).contains(&self.validation_fraction)
        {
            return Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// `λ0 · 0.5^⌊epoch / period⌋`
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lambda_halving_period.max(1)).min(i32::MAX as usize) as i32;
    cfg.lambda0 * 0.5f64.powi(halvings)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse_x: f64,
    pub mse_y: f64,
    pub ot_term: f64,
    pub lambda: f64,
    pub val_mse_x: f64,
    pub val_mse_y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mse_x,mse_y,ot_term,lambda,val_mse_x,val_mse_y\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.mse_x, r.mse_y, r.ot_term, r.lambda, r.val_mse_x, r.val_mse_y
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("history.csv", msg);
        let mut records = Vec::new();
        for (k, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("line {} has {} fields", k + 1, f.len())));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("line {}: {e}", k + 1)));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|e| bad(format!("line {}: {e}", k + 1)))?,
                mse_x: num(1)?,
                mse_y: num(2)?,
                ot_term: num(3)?,
                lambda: num(4)?,
                val_mse_x: num(5)?,
                val_mse_y: num(6)?,
            });
        }
        let best_epoch = records
            .iter()
            .min_by(|a, b| (a.val_mse_x + a.val_mse_y).total_cmp(&(b.val_mse_x + b.val_mse_y)))
            .map_or(0, |r| r.epoch);
        Ok(TrainHistory { records, best_epoch })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JGNNModel {
    /// `[x | y]` (standardized) → `z`
    pub encoder: Mlp,
    /// `z` → shared hidden representation
    pub trunk: Mlp,
    /// hidden → standardized `x`
    pub head_x: Mlp,
    /// hidden → standardized `y`
    pub head_y: Mlp,
    pub x_scaler: Standardizer,
    pub y_scaler: Standardizer,
    /// Epoch the weights come from.
    pub epoch: usize,
}

/// Loss components and gradients of one batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub mse_x: f64,
    pub mse_y: f64,
    pub ot_term: f64,
    pub grads: ModelGrads,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub trunk: MlpGrads,
    pub head_x: MlpGrads,
    pub head_y: MlpGrads,
}

impl ModelGrads {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.trunk.blocks());
        b.extend(self.head_x.blocks());
        b.extend(self.head_y.blocks());
        b
    }
}

impl JGNNModel {
    pub fn new(x_dim: usize, y_dim: usize, latent_dim: usize, arch: &ArchConfig, rng: RngStream) -> Result<Self> {
        if x_dim == 0 || y_dim == 0 || latent_dim == 0 || arch.hidden_width == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if arch.decoder_hidden_layers == 0 {
            return Err(Error::InvalidConfig("the decoder needs at least one hidden layer".into()));
        }
        let h = arch.hidden_width;
        let act = arch.activation;
        let sn = arch.spectral_norm;
        let mut enc_sizes = vec![x_dim + y_dim];
        enc_sizes.extend(std::iter::repeat_n(h, arch.encoder_hidden_layers));
        enc_sizes.push(latent_dim);
        let encoder = Mlp::new(&enc_sizes, act, Activation::Linear, sn, false, rng.substream(1))?;
        let mut trunk_sizes = vec![latent_dim];
        trunk_sizes.extend(std::iter::repeat_n(h, arch.decoder_hidden_layers));
        let trunk = Mlp::new(&trunk_sizes, act, act, sn, sn, rng.substream(2))?;
        let head_x = Mlp::new(&[h, x_dim], act, Activation::Linear, false, false, rng.substream(3))?;
        let head_y = Mlp::new(&[h, y_dim], act, Activation::Linear, false, false, rng.substream(4))?;
        Ok(JGNNModel {
            encoder,
            trunk,
            head_x,
            head_y,
            x_scaler: Standardizer::identity(x_dim),
            y_scaler: Standardizer::identity(y_dim),
            epoch: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn x_dim(&self) -> usize {
        self.head_x.output_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.head_y.output_dim()
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.encoder, &self.trunk, &self.head_x, &self.head_y]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.encoder, &mut self.trunk, &mut self.head_x, &mut self.head_y]
    }

    pub fn param_names(&self) -> Vec<String> {
        let names = ["encoder", "trunk", "head_x", "head_y"];
        self.nets()
            .iter()
            .zip(names)
            .flat_map(|(n, p)| n.param_names(p))
            .collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.nets().iter().flat_map(|n| n.param_sizes()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets_mut().into_iter().flat_map(|n| n.params_mut()).collect()
    }

    pub fn power_iteration(&mut self) {
        for n in self.nets_mut() {
            n.power_iteration();
        }
    }

    /// Decoder in standardized units.
    fn decode_std(&self, z: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let h = self.trunk.predict(z, true)?;
        Ok((self.head_x.predict(&h, true)?, self.head_y.predict(&h, true)?))
    }

    fn check_latent(&self, z: &DenseMatrix) -> Result<()> {
        if z.cols() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "latent batch of width {} for a model with latent dimension {}",
                z.cols(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// `(g1(z), g2(z))` in physical units, one row per latent row.
    pub fn generate(&self, z: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.check_latent(z)?;
        let (x, y) = self.decode_std(z)?;
        Ok((self.x_scaler.invert(&x), self.y_scaler.invert(&y)))
    }

    /// `g2(z)` only, for a single latent vector.
    pub fn generate_y_one(&self, z: &[f64]) -> Result<Vec<f64>> {
        let h = self.trunk.predict_one(z, true)?;
        let y = self.head_y.predict_one(&h, true)?;
        Ok(y.iter()
            .zip(&self.y_scaler.mean)
            .zip(&self.y_scaler.std)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    pub fn generate_x(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_latent(z)?;
        let h = self.trunk.predict(z, true)?;
        Ok(self.x_scaler.invert(&self.head_x.predict(&h, true)?))
    }

    pub fn generate_y(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_latent(z)?;
        let h = self.trunk.predict(z, true)?;
        Ok(self.y_scaler.invert(&self.head_y.predict(&h, true)?))
    }

    pub fn encode(&self, x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.x_dim() || y.cols() != self.y_dim() || x.rows() != y.rows() {
            return Err(Error::DimensionMismatch(format!(
                "encode got x {}x{} and y {}x{} for dims ({}, {})",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols(),
                self.x_dim(),
                self.y_dim()
            )));
        }
        let input = self.x_scaler.apply(x).hcat(&self.y_scaler.apply(y))?;
        self.encoder.predict(&input, true)
    }

    /// Loss and gradients on a standardized batch with given prior draws.
    pub fn loss_and_grad(
        &self,
        xs: &DenseMatrix,
        ys: &DenseMatrix,
        prior: &DenseMatrix,
        lambda: f64,
        sinkhorn: &SinkhornConfig,
    ) -> Result<LossOutput> {
        let b = xs.rows();
        if b == 0 || ys.rows() != b || prior.rows() != b {
            return Err(Error::DimensionMismatch("batch, targets and prior draws must align and be nonempty".into()));
        }
        if xs.cols() != self.x_dim() || ys.cols() != self.y_dim() || prior.cols() != self.latent_dim() {
            return Err(Error::DimensionMismatch("batch widths do not match the model".into()));
        }
        let input = xs.hcat(ys)?;
        let (z, c_enc) = self.encoder.forward(&input, true)?;
        let (h, c_trunk) = self.trunk.forward(&z, true)?;
        let (xr, c_hx) = self.head_x.forward(&h, true)?;
        let (yr, c_hy) = self.head_y.forward(&h, true)?;

        let mse = |r: &DenseMatrix, t: &DenseMatrix, c: &ForwardCache, net: &Mlp| -> Result<(f64, MlpGrads, DenseMatrix)> {
            let n = (r.rows() * r.cols()) as f64;
            let diff = r.sub(t)?;
            let value = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
            let (g, gh) = net.backward(c, &diff.scale(2.0 / n))?;
            Ok((value, g, gh))
        };
        let (mse_x, g_hx, gh_x) = mse(&xr, xs, &c_hx, &self.head_x)?;
        let (mse_y, g_hy, gh_y) = mse(&yr, ys, &c_hy, &self.head_y)?;
        let (g_trunk, mut gz) = self.trunk.backward(&c_trunk, &gh_x.add(&gh_y)?)?;

        let ot_term = if lambda != 0.0 {
            let (v, g) = ot_value_and_grad(&z, prior, sinkhorn)?;
            for (a, b) in gz.data_mut().iter_mut().zip(g.data()) {
                *a += lambda * b;
            }
            v
        } else {
            0.0
        };
        let (g_enc, _) = self.encoder.backward(&c_enc, &gz)?;
        let loss = mse_x + mse_y + lambda * ot_term;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(LossOutput {
            loss,
            mse_x,
            mse_y,
            ot_term,
            grads: ModelGrads {
                encoder: g_enc,
                trunk: g_trunk,
                head_x: g_hx,
                head_y: g_hy,
            },
        })
    }

    /// Reconstruction MSEs `(x, y)` in standardized units.
    fn reconstruction_mse(&self, xs: &DenseMatrix, ys: &DenseMatrix) -> Result<(f64, f64)> {
        let z = self.encoder.predict(&xs.hcat(ys)?, true)?;
        let (xr, yr) = self.decode_std(&z)?;
        let m = |a: &DenseMatrix, b: &DenseMatrix| -> Result<f64> {
            let d = a.sub(b)?;
            Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
        };
        Ok((m(&xr, xs)?, m(&yr, ys)?))
    }
}

/// `n × latent_dim` standard-normal draws.
pub fn prior_draws(n: usize, latent_dim: usize, rng: RngStream) -> DenseMatrix {
    let mut z = DenseMatrix::zeros(n, latent_dim);
    fill_standard_normal(&mut rng.rng(), z.data_mut());
    z
}

/// Loss on a batch in physical units: standardizes with the model's
/// statistics, draws a fresh prior sample of equal count from `rng`.
pub fn jgnn_loss(
    x: &DenseMatrix,
    y: &DenseMatrix,
    model: &JGNNModel,
    lambda: f64,
    sinkhorn: &SinkhornConfig,
    rng: RngStream,
) -> Result<LossOutput> {
    let prior = prior_draws(x.rows(), model.latent_dim(), rng);
    model.loss_and_grad(&model.x_scaler.apply(x), &model.y_scaler.apply(y), &prior, lambda, sinkhorn)
}

/// Shuffled mini-batch Adam with spectral normalization; keeps the weights of
/// the epoch with the lowest validation reconstruction error.
pub fn train(x: &DenseMatrix, y: &DenseMatrix, init: JGNNModel, cfg: &TrainConfig) -> Result<(JGNNModel, TrainHistory)> {
    cfg.validate()?;
    let n = x.rows();
    if y.rows() != n || x.cols() != init.x_dim() || y.cols() != init.y_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset x {}x{}, y {}x{} for model dims ({}, {})",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols(),
            init.x_dim(),
            init.y_dim()
        )));
    }
    let root = RngStream::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut root.substream(0).rng());
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    if train_idx.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} training couples for a batch size of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    // an empty validation split falls back to the training set
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let mut model = init;
    model.x_scaler = Standardizer::fit(&x.select_rows(&train_idx));
    model.y_scaler = Standardizer::fit(&y.select_rows(&train_idx));
    let xs = model.x_scaler.apply(x);
    let ys = model.y_scaler.apply(y);
    let (xv, yv) = (xs.select_rows(&val_idx), ys.select_rows(&val_idx));

    let names = model.param_names();
    let mut adam = AdamState::new(cfg.adam, &model.param_sizes());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, JGNNModel)> = None;
    let n_batches = train_idx.len() / cfg.batch_size;

    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, cfg);
        let erng = root.substream2(1, epoch as u64);
        train_idx.shuffle(&mut erng.substream(0).rng());
        let (mut sx, mut sy, mut so) = (0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let idx = &train_idx[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let prior = prior_draws(cfg.batch_size, model.latent_dim(), erng.substream(1 + b as u64));
            model.power_iteration();
            let out = match model.loss_and_grad(&xs.select_rows(idx), &ys.select_rows(idx), &prior, lambda, &cfg.sinkhorn) {
                Ok(o) => o,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        history: Box::new(history),
                    })
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = adam.step(model.params_mut(), &out.grads.blocks(), &names) {
                return Err(match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        history: Box::new(history),
                    },
                    other => other,
                });
            }
            sx += out.mse_x;
            sy += out.mse_y;
            so += out.ot_term;
        }
        let (vx, vy) = model.reconstruction_mse(&xv, &yv)?;
        if !(vx.is_finite() && vy.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        let k = n_batches as f64;
        history.records.push(EpochRecord {
            epoch,
            mse_x: sx / k,
            mse_y: sy / k,
            ot_term: so / k,
            lambda,
            val_mse_x: vx,
            val_mse_y: vy,
        });
        if best.as_ref().is_none_or(|(v, _)| vx + vy < *v) {
            model.epoch = epoch;
            history.best_epoch = epoch;
            best = Some((vx + vy, model.clone()));
        }
        log::debug!("epoch {epoch}: val mse x {vx:.4e} y {vy:.4e}");
    }
    let (_, best) = best.expect("at least one epoch");
    Ok((best, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub latent_dim: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub trunk: Vec<LayerSpec>,
    pub head_x: Vec<LayerSpec>,
    pub head_y: Vec<LayerSpec>,
    pub x_scaler: Standardizer,
    pub y_scaler: Standardizer,
    pub epoch: usize,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    pub weights_file: String,
    pub weights_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

const CHECKPOINT_FORMAT: &str = "jgnn-checkpoint-v1";

fn weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("weights.bin")
}

impl JGNNModel {
    /// Writes `path` (JSON manifest) and a sibling `*.weights.bin` holding
    /// every network's `W`, `b`, `u` as little-endian `f32`.
    pub fn save(&self, path: &Path, train_config: Option<&TrainConfig>, provenance: Option<&Provenance>) -> Result<()> {
        let mut blob = Vec::new();
        for n in self.nets() {
            n.write_f32(&mut blob);
        }
        let wpath = weights_path(path);
        io::write_bytes(&wpath, &blob)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            latent_dim: self.latent_dim(),
            x_dim: self.x_dim(),
            y_dim: self.y_dim(),
            encoder: self.encoder.specs(),
            trunk: self.trunk.specs(),
            head_x: self.head_x.specs(),
            head_y: self.head_y.specs(),
            x_scaler: self.x_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
            epoch: self.epoch,
            train_config: train_config.copied(),
            weights_file: wpath
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            weights_sha256: io::sha256_hex(&blob),
            provenance: provenance.cloned(),
        };
        io::write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: CheckpointManifest = io::read_json(path)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown checkpoint format {:?}", m.format)));
        }
        let wpath = path.with_file_name(&m.weights_file);
        let blob = io::read_bytes(&wpath)?;
        if io::sha256_hex(&blob) != m.weights_sha256 {
            return Err(Error::format(&wpath, "weight blob checksum mismatch"));
        }
        let mut buf = blob.as_slice();
        let encoder = Mlp::read_f32(&m.encoder, &mut buf)?;
        let trunk = Mlp::read_f32(&m.trunk, &mut buf)?;
        let head_x = Mlp::read_f32(&m.head_x, &mut buf)?;
        let head_y = Mlp::read_f32(&m.head_y, &mut buf)?;
        if !buf.is_empty() {
            return Err(Error::format(&wpath, "trailing bytes in weight blob"));
        }
        let model = JGNNModel {
            encoder,
            trunk,
            head_x,
            head_y,
            x_scaler: m.x_scaler,
            y_scaler: m.y_scaler,
            epoch: m.epoch,
        };
        if model.latent_dim() != m.latent_dim
            || model.x_dim() != m.x_dim
            || model.y_dim() != m.y_dim
            || model.trunk.input_dim() != m.latent_dim
            || model.head_x.input_dim() != model.trunk.output_dim()
            || model.head_y.input_dim() != model.trunk.output_dim()
            || model.x_scaler.dim() != m.x_dim
            || model.y_scaler.dim() != m.y_dim
        {
            return Err(Error::format(path, "inconsistent layer dimensions"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(width: usize) -> ArchConfig {
        ArchConfig {
            hidden_width: width,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn lambda_halves_every_period() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda_schedule(0, &cfg), 150.0);
        assert_eq!(lambda_schedule(499, &cfg), 150.0);
        assert_eq!(lambda_schedule(500, &cfg), 75.0);
        assert_eq!(lambda_schedule(1499, &cfg), 37.5);
        assert_eq!(lambda_schedule(1500, &cfg), 18.75);
    }

    #[test]
    fn standardizer_roundtrip_and_constant_columns() {
        let d = DenseMatrix::from_rows(&[&[1.0, 5.0], &[3.0, 5.0], &[5.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&d);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std[1], 1.0);
        assert!(s.invert(&s.apply(&d)).max_abs_diff(&d) < 1e-12);
    }

    fn fd_model(x_dim: usize, y_dim: usize, z_dim: usize) {
        let model = JGNNModel::new(x_dim, y_dim, z_dim, &tiny_arch(5), RngStream::new(21)).unwrap();
        let mut xs = DenseMatrix::zeros(6, x_dim);
        let mut ys = DenseMatrix::zeros(6, y_dim);
        fill_standard_normal(&mut RngStream::new(1).rng(), xs.data_mut());
        fill_standard_normal(&mut RngStream::new(2).rng(), ys.data_mut());
        let prior = prior_draws(6, z_dim, RngStream::new(3));
        let ot = SinkhornConfig {
            reg: 1.0,
            max_iter: 5000,
            tol: 1e-14,
            debiased: true,
            ..SinkhornConfig::default()
        };
        let lambda = 0.7;
        let out = model.loss_and_grad(&xs, &ys, &prior, lambda, &ot).unwrap();
        let analytic: Vec<Vec<f64>> = out.grads.blocks().iter().map(|b| b.to_vec()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (bi, block) in analytic.iter().enumerate() {
            for k in 0..block.len() {
                let mut p = model.clone();
                p.params_mut()[bi][k] += h;
                let mut m = model.clone();
                m.params_mut()[bi][k] -= h;
                let lp = p.loss_and_grad(&xs, &ys, &prior, lambda, &ot).unwrap().loss;
                let lm = m.loss_and_grad(&xs, &ys, &prior, lambda, &ot).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let err = (block[k] - fd).abs();
                if err > 1e-6 {
                    worst = worst.max(err / block[k].abs().max(fd.abs()));
                }
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        fd_model(2, 2, 2);
    }

    #[test]
    fn zero_lambda_perfect_reconstruction_has_zero_loss() {
        // identity autoencoder on one dimension built by hand
        let mut model = JGNNModel::new(1, 1, 1, &tiny_arch(1), RngStream::new(0)).unwrap();
        model.encoder = Mlp::new(&[2, 1], Activation::Linear, Activation::Linear, false, false, RngStream::new(0)).unwrap();
        model.encoder.layers[0].weights = DenseMatrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        model.trunk = Mlp::new(&[1, 1], Activation::Linear, Activation::Linear, false, false, RngStream::new(0)).unwrap();
        model.trunk.layers[0].weights = DenseMatrix::identity(1);
        model.head_x.layers[0].weights = DenseMatrix::identity(1);
        model.head_y.layers[0].weights = DenseMatrix::identity(1);
        let x = DenseMatrix::from_rows(&[&[0.3], &[-1.2]]).unwrap();
        let out = jgnn_loss(&x, &x, &model, 0.0, &SinkhornConfig::default(), RngStream::new(1)).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn latent_term_vanishes_when_encodings_match_prior() {
        let model = JGNNModel::new(2, 2, 2, &tiny_arch(4), RngStream::new(5)).unwrap();
        let mut x = DenseMatrix::zeros(5, 2);
        fill_standard_normal(&mut RngStream::new(6).rng(), x.data_mut());
        let input = x.hcat(&x).unwrap();
        let z = model.encoder.predict(&input, true).unwrap();
        let ot = SinkhornConfig {
            debiased: true,
            reg: 0.5,
            max_iter: 200,
            ..SinkhornConfig::default()
        };
        let out = model.loss_and_grad(&x, &x, &z, 1.0, &ot).unwrap();
        assert!(out.ot_term.abs() < 1e-10, "{}", out.ot_term);
    }

    #[test]
    fn generate_is_deterministic_and_ordered() {
        let model = JGNNModel::new(3, 2, 4, &tiny_arch(6), RngStream::new(9)).unwrap();
        let z = prior_draws(5, 4, RngStream::new(10));
        let (x1, y1) = model.generate(&z).unwrap();
        let (x2, y2) = model.generate(&z).unwrap();
        assert_eq!((x1.clone(), y1.clone()), (x2, y2));
        assert_eq!(x1.rows(), 5);
        let (xs, _) = model.generate(&z.select_rows(&[3])).unwrap();
        assert!(xs.row(0).iter().zip(x1.row(3)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(model.generate_y_one(z.row(2)).unwrap().len(), 2);
        for (a, b) in model.generate_y_one(z.row(2)).unwrap().iter().zip(y1.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(model.generate(&prior_draws(2, 3, RngStream::new(1))).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = JGNNModel::new(3, 2, 2, &tiny_arch(4), RngStream::new(2)).unwrap();
        model.x_scaler = Standardizer {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![0.5, 1.0, 2.0],
        };
        let path = dir.path().join("model.json");
        model.save(&path, Some(&TrainConfig::default()), None).unwrap();
        let back = JGNNModel::load(&path).unwrap();
        let z = prior_draws(4, 2, RngStream::new(3));
        let (a, _) = model.generate(&z).unwrap();
        let (b, _) = back.generate(&z).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
        // corrupt the blob
        let w = dir.path().join("model.weights.bin");
        let mut bytes = std::fs::read(&w).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&w, bytes).unwrap();
        assert!(matches!(JGNNModel::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn history_csv_roundtrip() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    mse_x: 1.0,
                    mse_y: 0.5,
                    ot_term: 2.0,
                    lambda: 150.0,
                    val_mse_x: 0.9,
                    val_mse_y: 0.4,
                },
                EpochRecord {
                    epoch: 1,
                    val_mse_x: 0.1,
                    val_mse_y: 0.1,
                    ..EpochRecord::default()
                },
            ],
            best_epoch: 1,
        };
        assert_eq!(TrainHistory::from_csv(&h.to_csv()).unwrap(), h);
    }

    #[test]
    fn repeated_couple_is_memorized_and_training_is_deterministic() {
        let x = DenseMatrix::from_rows(&vec![&[0.4, -0.2, 1.0][..]; 40]).unwrap();
        let y = DenseMatrix::from_rows(&vec![&[2.0, 3.0][..]; 40]).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 16,
            lambda0: 1.0,
            sinkhorn: SinkhornConfig {
                reg: 1.0,
                max_iter: 20,
                ..SinkhornConfig::default()
            },
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            seed: 4,
            ..TrainConfig::default()
        };
        let init = JGNNModel::new(3, 2, 2, &tiny_arch(16), RngStream::new(8)).unwrap();
        let (m, h) = train(&x, &y, init.clone(), &cfg).unwrap();
        assert_eq!(h.len(), 150);
        let z = m.encode(&x, &y).unwrap();
        let (gx, gy) = m.generate(&z).unwrap();
        for r in gx.row_iter() {
            for (a, b) in r.iter().zip(x.row(0)) {
                assert!((a - b).abs() < 0.05, "{a} vs {b}");
            }
        }
        for r in gy.row_iter() {
            for (a, b) in r.iter().zip(y.row(0)) {
                assert!((a - b).abs() < 0.05, "{a} vs {b}");
            }
        }
        let (_, h2) = train(&x, &y, init, &cfg).unwrap();
        assert_eq!(h, h2);
    }

    #[test]
    fn small_dataset_is_rejected() {
        let x = DenseMatrix::zeros(10, 2);
        let init = JGNNModel::new(2, 2, 2, &tiny_arch(4), RngStream::new(0)).unwrap();
        assert!(matches!(
            train(&x, &x, init, &TrainConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
