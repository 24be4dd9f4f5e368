//! Dense feed-forward networks with hand-written reverse-mode gradients,
//! spectral normalization and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, DenseMatrix};
use crate::rng::{fill_standard_normal, RngStream};

pub const LEAKY_SLOPE: f64 = 0.2;
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Linear,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => (pre > 0.0) as u8 as f64,
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

/// Affine layer `act(W·x + b)` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Whether this layer divides its weight by the estimated top singular
    /// value when spectral normalization is enabled.
    pub spectral_norm: bool,
    /// Persistent power-iteration vector, unit norm, length `out`.
    pub u: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `σ = ‖Wᵀu‖` and `v = Wᵀu / σ` for the current `u`.
    fn sigma(&self) -> (f64, Vec<f64>) {
        let mut v = self.weights.t_matvec(&self.u).expect("u matches rows");
        let s = norm2(&v).max(SIGMA_FLOOR);
        v.iter_mut().for_each(|x| *x /= s);
        (s, v)
    }
}

/// One power-iteration step. Returns `(W / σ, u', σ)`.
pub fn spectral_normalize(w: &DenseMatrix, u: &[f64]) -> Result<(DenseMatrix, Vec<f64>, f64)> {
    if u.len() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "power vector of length {} for {} rows",
            u.len(),
            w.rows()
        )));
    }
    let mut v = w.t_matvec(u)?;
    let nv = norm2(&v).max(SIGMA_FLOOR);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut u_new = w.matvec(&v)?;
    let nu = norm2(&u_new);
    if nu < SIGMA_FLOOR {
        // zero matrix: keep the old direction
        u_new = u.to_vec();
    } else {
        u_new.iter_mut().for_each(|x| *x /= nu);
    }
    let sigma = norm2(&w.t_matvec(&u_new)?).max(SIGMA_FLOOR);
    Ok((w.scale(1.0 / sigma), u_new, sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
    effective: Vec<DenseMatrix>,
    /// `(σ, v)` for layers that were normalized.
    spectral: Vec<Option<(f64, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            weights: mlp
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            bias: mlp.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Flat views in the same order as [`Mlp::params_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }
}

impl Mlp {
    /// Layers `sizes[0] → sizes[1] → …`; hidden layers use `hidden`, the last
    /// one `output`. Weights are uniform in `±1/√fan_in`, biases zero.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        spectral_hidden: bool,
        spectral_output: bool,
        rng: RngStream,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let mut r = rng.rng();
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| r.random_range(-bound..bound))
                    .collect();
                let mut u = vec![0.0; fan_out];
                fill_standard_normal(&mut r, &mut u);
                let nu = norm2(&u).max(SIGMA_FLOOR);
                u.iter_mut().for_each(|x| *x /= nu);
                let last = k + 1 == n_layers;
                Layer {
                    weights: DenseMatrix::from_raw(fan_out, fan_in, w),
                    bias: vec![0.0; fan_out],
                    activation: if last { output } else { hidden },
                    spectral_norm: if last { spectral_output } else { spectral_hidden },
                    u,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_specs(specs: &[LayerSpec], rng: RngStream) -> Result<Self> {
        let mut sizes = vec![specs.first().map_or(0, |s| s.in_dim)];
        sizes.extend(specs.iter().map(|s| s.out_dim));
        let mut mlp = Mlp::new(&sizes, Activation::Linear, Activation::Linear, false, false, rng)?;
        for (l, s) in mlp.layers.iter_mut().zip(specs) {
            if l.in_dim() != s.in_dim {
                return Err(Error::InvalidConfig("layer dimensions do not chain".into()));
            }
            l.activation = s.activation;
            l.spectral_norm = s.spectral_norm;
        }
        Ok(mlp)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                spectral_norm: l.spectral_norm,
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, input: &DenseMatrix, spectral_norm: bool) -> Result<(DenseMatrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of width {} for a network expecting {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            effective: Vec::with_capacity(n),
            spectral: Vec::with_capacity(n),
        };
        let mut h = input.clone();
        for layer in &self.layers {
            let (eff, spec) = if spectral_norm && layer.spectral_norm {
                let (s, v) = layer.sigma();
                (layer.weights.scale(1.0 / s), Some((s, v)))
            } else {
                (layer.weights.clone(), None)
            };
            let mut pre = h.matmul_t(&eff)?;
            for r in 0..pre.rows() {
                for (p, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *p += b;
                }
            }
            let out = DenseMatrix::from_raw(
                pre.rows(),
                pre.cols(),
                pre.data().iter().map(|&x| layer.activation.apply(x)).collect(),
            );
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre.push(pre);
            cache.effective.push(eff);
            cache.spectral.push(spec);
        }
        Ok((h, cache))
    }

    pub fn predict(&self, input: &DenseMatrix, spectral_norm: bool) -> Result<DenseMatrix> {
        Ok(self.forward(input, spectral_norm)?.0)
    }

    /// Single-sample evaluation without allocating a cache.
    pub fn predict_one(&self, x: &[f64], spectral_norm: bool) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        for layer in &self.layers {
            let scale = if spectral_norm && layer.spectral_norm {
                1.0 / layer.sigma().0
            } else {
                1.0
            };
            h = layer
                .weights
                .row_iter()
                .zip(&layer.bias)
                .map(|(w, b)| layer.activation.apply(scale * dot(w, &h) + b))
                .collect();
        }
        Ok(h)
    }

    /// Gradients of a scalar loss given `∂L/∂output`. Returns parameter
    /// gradients and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DenseMatrix) -> Result<(MlpGrads, DenseMatrix)> {
        let n = self.layers.len();
        if cache.pre.len() != n
            || cache.pre.last().map(|p| p.shape()) != Some(grad_out.shape())
            || cache.effective.iter().zip(&self.layers).any(|(e, l)| e.shape() != l.weights.shape())
        {
            return Err(Error::DimensionMismatch("stale forward cache".into()));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = grad_out.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let pre = &cache.pre[k];
            for (d, p) in delta.data_mut().iter_mut().zip(pre.data()) {
                *d *= layer.activation.derivative(*p);
            }
            let g_eff = delta.t_matmul(&cache.inputs[k])?;
            let mut gb = vec![0.0; layer.out_dim()];
            for r in delta.row_iter() {
                for (g, d) in gb.iter_mut().zip(r) {
                    *g += d;
                }
            }
            let next = delta.matmul(&cache.effective[k])?;
            grads.weights[k] = match &cache.spectral[k] {
                None => g_eff,
                Some((sigma, v)) => {
                    // d(W/σ) with σ = ‖Wᵀu‖, u fixed: (G − ⟨G, W/σ⟩ u vᵀ) / σ
                    let inner = dot(g_eff.data(), cache.effective[k].data());
                    let mut g = g_eff;
                    for (i, ui) in layer.u.iter().enumerate() {
                        for (gij, vj) in g.row_mut(i).iter_mut().zip(v) {
                            *gij = (*gij - inner * ui * vj) / sigma;
                        }
                    }
                    g
                }
            };
            grads.bias[k] = gb;
            delta = next;
        }
        Ok((grads, delta))
    }

    /// Advances the power-iteration vector of every normalized layer by one step.
    pub fn power_iteration(&mut self) {
        for layer in self.layers.iter_mut().filter(|l| l.spectral_norm) {
            let (_, u, _) = spectral_normalize(&layer.weights, &layer.u).expect("u matches rows");
            layer.u = u;
        }
    }

    /// Flat mutable views `[W0, b0, W1, b1, …]`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| [format!("{prefix}.{k}.weight"), format!("{prefix}.{k}.bias")])
            .collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data().len(), l.bias.len()])
            .collect()
    }

    /// Appends `W`, `b`, `u` of each layer as little-endian `f32`.
    pub fn write_f32(&self, out: &mut Vec<u8>) {
        for l in &self.layers {
            for v in l.weights.data().iter().chain(&l.bias).chain(&l.u) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }

    /// Inverse of [`Mlp::write_f32`]; consumes bytes from the front of `buf`.
    pub fn read_f32(specs: &[LayerSpec], buf: &mut &[u8]) -> Result<Self> {
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if buf.len() < 4 * n {
                return Err(Error::DimensionMismatch("weight blob is too short".into()));
            }
            let (head, tail) = buf.split_at(4 * n);
            *buf = tail;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect())
        };
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let w = take(s.in_dim * s.out_dim)?;
            let bias = take(s.out_dim)?;
            let u = take(s.out_dim)?;
            layers.push(Layer {
                weights: DenseMatrix::new(s.out_dim, s.in_dim, w)?,
                bias,
                activation: s.activation,
                spectral_norm: s.spectral_norm,
                u,
            });
        }
        Ok(Mlp { layers })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Bias-corrected Adam update of every block. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameter blocks, {} gradient blocks, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::DimensionMismatch(format!("block {k} has mismatched sizes")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                let name = names.get(k).cloned().unwrap_or_else(|| format!("block {k}"));
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
