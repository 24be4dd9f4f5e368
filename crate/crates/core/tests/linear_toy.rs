//! Training and inversion on a linear problem whose posterior is known:
//! X = M·z, Y = A·X with z ~ N(0, I₈), X in R²⁰, Y in R¹⁰.

use std::sync::OnceLock;

use latent_abcss::diagnostics::median;
use latent_abcss::jgnn::{train, ArchConfig, JGNNModel, TrainConfig, TrainHistory};
use latent_abcss::linalg::{norm2, DenseMatrix};
use latent_abcss::posterior::{linear_gaussian_posterior, posterior_sample, GaussianDist};
use latent_abcss::rng::{fill_standard_normal, RngStream};
use latent_abcss::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use latent_abcss::subsim::{posterior_solutions, subsim_run, SubSimConfig};

const DZ: usize = 8;
const DX: usize = 20;
const DY: usize = 10;
const NOISE: f64 = 1.0;

struct Toy {
    m: DenseMatrix,
    a: DenseMatrix,
    model: JGNNModel,
    history: TrainHistory,
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    fill_standard_normal(&mut RngStream::new(seed).rng(), m.data_mut());
    m
}

fn couples(toy_m: &DenseMatrix, toy_a: &DenseMatrix, n: usize, seed: u64) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let z = gaussian(n, DZ, seed);
    let x = z.matmul_t(toy_m).unwrap();
    let y = x.matmul_t(toy_a).unwrap();
    (z, x, y)
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let m = gaussian(DX, DZ, 100);
        let a = gaussian(DY, DX, 101);
        let (_, x, y) = couples(&m, &a, 2000, 102);
        let cfg = TrainConfig {
            epochs: 400,
            seed: 1,
            ..TrainConfig::default()
        };
        let arch = ArchConfig {
            hidden_width: 64,
            ..ArchConfig::default()
        };
        let init = JGNNModel::new(DX, DY, DZ, &arch, RngStream::new(3)).unwrap();
        let (model, history) = train(&x, &y, init, &cfg).unwrap();
        Toy { m, a, model, history }
    })
}

fn column_variance(x: &DenseMatrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mu = x.row_iter().map(|r| r[j]).sum::<f64>() / n;
            x.row_iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / n
        })
        .collect()
}

#[test]
fn reconstructs_held_out_fields() {
    let t = toy();
    let (_, x, y) = couples(&t.m, &t.a, 500, 200);
    let z = t.model.encode(&x, &y).unwrap();
    let xr = t.model.generate_x(&z).unwrap();
    let mse = x.sub(&xr).unwrap().data().iter().map(|v| v * v).sum::<f64>() / x.data().len() as f64;
    let var = column_variance(&x).iter().sum::<f64>() / DX as f64;
    assert!(mse < 0.05 * var, "held-out MSE_X {mse} vs 5% of Var(X) {}", 0.05 * var);
}

#[test]
fn encodings_match_the_latent_prior() {
    let t = toy();
    let (_, x, y) = couples(&t.m, &t.a, 1000, 201);
    let z = t.model.encode(&x, &y).unwrap();
    let n = z.rows() as f64;
    for j in 0..DZ {
        let mean = z.row_iter().map(|r| r[j]).sum::<f64>() / n;
        assert!(mean.abs() < 0.2, "coordinate {j}: mean {mean}");
    }
    for (j, v) in column_variance(&z).iter().enumerate() {
        assert!((0.5..=1.5).contains(v), "coordinate {j}: variance {v}");
    }
}

#[test]
fn generated_couples_respect_the_operator() {
    let t = toy();
    let z = gaussian(2000, DZ, 202);
    let (gx, gy) = t.model.generate(&z).unwrap();
    let agx = gx.matmul_t(&t.a).unwrap();
    let rel: Vec<f64> = (0..z.rows())
        .map(|i| {
            let d: Vec<f64> = agx.row(i).iter().zip(gy.row(i)).map(|(p, q)| p - q).collect();
            norm2(&d) / norm2(gy.row(i))
        })
        .collect();
    let med = median(&rel);
    assert!(med < 0.15, "median relative error {med}");
}

#[test]
fn loss_trends_down() {
    let h = &toy().history;
    let total: Vec<f64> = h.records.iter().map(|r| r.mse_x + r.mse_y + r.lambda * r.ot_term).collect();
    let k = total.len() / 10;
    let (first, last) = (median(&total[..k]), median(&total[total.len() - k..]));
    assert!(last < first, "median loss first 10% {first}, last 10% {last}");
}

/// Exact posterior of X given y = A·X + N(0, NOISE² I), computed in latent
/// coordinates (the prior on X is rank deficient) and pushed through M.
fn exact_posterior(t: &Toy, y_obs: &[f64]) -> (GaussianDist, DenseMatrix) {
    let am = t.a.matmul(&t.m).unwrap();
    let prior = GaussianDist::new(vec![0.0; DZ], DenseMatrix::identity(DZ)).unwrap();
    let noise = DenseMatrix::from_diag(&[NOISE * NOISE; DY]);
    let post = linear_gaussian_posterior(&prior, &am, &noise, y_obs).unwrap();
    let xs = posterior_sample(&post, 500, RngStream::new(77)).unwrap().matmul_t(&t.m).unwrap();
    (post, xs)
}

fn observation(t: &Toy, seed: u64, noisy: bool) -> (Vec<f64>, Vec<f64>) {
    let (_, x, y) = couples(&t.m, &t.a, 1, seed);
    let mut y = y.row(0).to_vec();
    if noisy {
        let mut e = vec![0.0; DY];
        fill_standard_normal(&mut RngStream::new(seed + 1).rng(), &mut e);
        y.iter_mut().zip(&e).for_each(|(v, n)| *v += NOISE * n);
    }
    (x.row(0).to_vec(), y)
}

fn column_mean(x: &DenseMatrix) -> Vec<f64> {
    (0..x.cols())
        .map(|j| x.row_iter().map(|r| r[j]).sum::<f64>() / x.rows() as f64)
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[test]
fn solutions_concentrate_near_the_posterior() {
    let t = toy();
    let (truth, y) = observation(t, 300, true);
    let (post, _) = exact_posterior(t, &y);
    let post_mean_x = t.m.matvec(&post.mean).unwrap();
    let cfg = SubSimConfig {
        target_eps: DY as f64 * NOISE * NOISE,
        ..SubSimConfig::default()
    };
    let trace = subsim_run(&t.model, &y, &cfg, RngStream::new(8)).unwrap();
    let sols = posterior_solutions(&trace, &t.model).unwrap();
    let mean = column_mean(&sols);
    let prior_mean = vec![0.0; DX];
    assert!(
        dist(&mean, &post_mean_x) < dist(&prior_mean, &post_mean_x),
        "solutions mean {} from the posterior mean, prior mean {}",
        dist(&mean, &post_mean_x),
        dist(&prior_mean, &post_mean_x)
    );
    assert!(dist(&mean, &truth) < dist(&prior_mean, &truth));
}

#[test]
fn noise_free_observation_beats_the_prior_mean() {
    let t = toy();
    let (truth, y) = observation(t, 310, false);
    let cfg = SubSimConfig {
        target_eps: 1.0,
        ..SubSimConfig::default()
    };
    let trace = subsim_run(&t.model, &y, &cfg, RngStream::new(9)).unwrap();
    let sols = posterior_solutions(&trace, &t.model).unwrap();
    let rmse = |v: &[f64]| dist(v, &truth) / (DX as f64).sqrt();
    assert!(rmse(&column_mean(&sols)) < rmse(&[0.0; DX]));
}

#[test]
fn divergence_to_posterior_is_smallest_at_an_interior_threshold() {
    let t = toy();
    let (_, y) = observation(t, 320, true);
    let (_, post_x) = exact_posterior(t, &y);
    let ot = SinkhornConfig {
        reg: 1.0,
        max_iter: 200,
        debiased: true,
        ..SinkhornConfig::default()
    };
    let sweep = [1e5, 300.0, 100.0, 30.0, 10.0, 3.0, 1.0, 0.3, 0.1, 0.03];
    let divergences: Vec<f64> = sweep
        .iter()
        .map(|&eps| {
            let cfg = SubSimConfig {
                target_eps: eps,
                n_particles: 500,
                ..SubSimConfig::default()
            };
            let trace = subsim_run(&t.model, &y, &cfg, RngStream::new(10)).unwrap();
            let sols = posterior_solutions(&trace, &t.model).unwrap();
            sinkhorn_divergence(&sols, &post_x, &ot).unwrap()
        })
        .collect();
    let best = (0..sweep.len())
        .min_by(|&i, &j| divergences[i].total_cmp(&divergences[j]))
        .unwrap();
    assert!(best > 0 && best < sweep.len() - 1, "minimum at {} in {divergences:?}", sweep[best]);
}
