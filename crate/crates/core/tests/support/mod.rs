//! Independent oracles shared by the integration tests and the acceptance
//! runner: finite-difference gradients evaluated through the mixture
//! algebra, and Monte-Carlo vs quadrature KL on a fixed suite of pairs.

#![allow(dead_code)]

use biglearn_core::divergence::{kl_grid, kl_mc, GridSpec, PathwiseDraws, PathwiseObjective, ThetaModel};
use biglearn_core::gmm::{Gmm, IndexSet};
use biglearn_core::numeric::rotation;
use biglearn_core::pipeline::{Pipeline, Stage};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Sample loss `mean_j log p̃_θ(y_j) − log q̃(y_j)` at parameters `params`,
/// computed only through `Gmm` algebra and `Gmm::log_density`.
fn oracle_loss(
    model: &ThetaModel,
    params: &[f64],
    target: &Gmm,
    pipeline: &Pipeline,
    objective: &PathwiseObjective,
    draws: &PathwiseDraws,
) -> f64 {
    let theta = ThetaModel::new(model.k(), model.dim(), params.to_vec()).unwrap();
    let p = theta.materialize();
    let p_t = pipeline.apply(&p).unwrap();
    let q_t = pipeline.apply(target).unwrap();
    let d = model.dim();
    let dp = objective.out_dim();
    let mut total = 0.0;
    for j in 0..draws.len() {
        let c = draws.components[j];
        let eps = DVector::from_column_slice(&draws.eps[j * d..(j + 1) * d]);
        let x = &p.means()[c] + &p.scales()[c] * eps;
        let mut y = objective.linear() * x;
        if let Some(b) = objective.noise_factor() {
            y += b * DVector::from_column_slice(&draws.eta[j * dp..(j + 1) * dp]);
        }
        let y: Vec<f64> = y.iter().copied().collect();
        total += p_t.log_density(&y).unwrap() - q_t.log_density(&y).unwrap();
    }
    total / draws.len() as f64
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, equal: bool) -> Gmm {
    let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    if equal {
        weights = vec![1.0; k];
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    let means = (0..k)
        .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5)))
        .collect();
    let scales = (0..k)
        .map(|_| {
            let mut l = DMatrix::zeros(2, 2);
            l[(0, 0)] = rng.random_range(0.3..0.9);
            l[(1, 1)] = rng.random_range(0.3..0.9);
            l[(1, 0)] = rng.random_range(-0.3..0.3);
            l
        })
        .collect();
    Gmm::new(weights, means, scales).unwrap()
}

fn pipeline_for(case: usize, rng: &mut ChaCha8Rng) -> (&'static str, Pipeline) {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let coord = IndexSet::singleton(rng.random_range(0..2));
    match case % 4 {
        0 => ("joint", Pipeline::identity()),
        1 => (
            "rotated-marginal",
            Pipeline::new(vec![Stage::Linear(rotation(angle)), Stage::Marginalize(coord)]),
        ),
        2 => (
            "noised-joint",
            Pipeline::new(vec![Stage::Convolve(rng.random_range(0.05..0.5))]),
        ),
        _ => (
            "noised-rotated-marginal",
            Pipeline::new(vec![
                Stage::Linear(rotation(angle)),
                Stage::Convolve(rng.random_range(0.05..0.5)),
                Stage::Marginalize(coord),
            ]),
        ),
    }
}

/// Worst per-coordinate relative error of one randomized configuration.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub kind: &'static str,
    pub worst_rel: f64,
    pub worst_coord: usize,
    pub loss_mismatch: f64,
}

/// `|g − fd| / max(|g|, |fd|, 1e-3)`: relative, with an absolute floor for
/// coordinates whose gradient is near zero.
pub fn relative_error(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3)
}

/// `cases` randomized (model, target, pipeline) configurations cycling
/// through joint, rotated-marginal, noised-joint and noised-rotated-marginal.
pub fn gradient_suite(seed: u64, cases: usize) -> Vec<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let k = 1 + case % 3;
        let model = ThetaModel::from_gmm(&random_gmm(&mut rng, k, true)).unwrap();
        let target = random_gmm(&mut rng, 2, false);
        let (kind, pipeline) = pipeline_for(case, &mut rng);
        let objective = PathwiseObjective::new(&target, &pipeline).unwrap();
        let draws = objective.draw(&model, 40, &mut rng).unwrap();
        let est = objective.evaluate(&model, &draws).unwrap();

        let base = model.params().to_vec();
        let f0 = oracle_loss(&model, &base, &target, &pipeline, &objective, &draws);
        let mut result = GradientCase {
            kind,
            worst_rel: 0.0,
            worst_coord: 0,
            loss_mismatch: (f0 - est.loss).abs() / (1.0 + f0.abs()),
        };
        for i in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += STEP;
            minus[i] -= STEP;
            let fd = (oracle_loss(&model, &plus, &target, &pipeline, &objective, &draws)
                - oracle_loss(&model, &minus, &target, &pipeline, &objective, &draws))
                / (2.0 * STEP);
            let rel = relative_error(est.grad[i], fd);
            if rel > result.worst_rel {
                result.worst_rel = rel;
                result.worst_coord = i;
            }
        }
        out.push(result);
    }
    out
}

/// One estimator comparison.
#[derive(Debug, Clone)]
pub struct EstimatorCase {
    pub name: &'static str,
    pub grid: f64,
    pub mc: f64,
    pub std_error: f64,
    pub exact: Option<f64>,
}

impl EstimatorCase {
    pub fn z_score(&self) -> f64 {
        (self.grid - self.mc).abs() / self.std_error
    }
}

fn normal1(mean: f64, var: f64) -> Gmm {
    Gmm::isotropic(vec![DVector::from_vec(vec![mean])], var).unwrap()
}

fn gmm(weights: &[f64], means: &[&[f64]], var: f64) -> Gmm {
    let d = means[0].len();
    let means = means.iter().map(|m| DVector::from_column_slice(m)).collect();
    let scales = vec![DMatrix::identity(d, d) * var.sqrt(); weights.len()];
    Gmm::new(weights.to_vec(), means, scales).unwrap()
}

fn gaussian2(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Gmm {
    let c = DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]);
    Gmm::from_covariances(vec![1.0], vec![DVector::from_row_slice(&mean)], vec![c]).unwrap()
}

/// Closed-form KL between two Gaussians.
fn gaussian_kl(p: &Gmm, q: &Gmm) -> f64 {
    let d = p.dim() as f64;
    let sp = p.covariance(0);
    let sq = q.covariance(0);
    let sq_inv = sq.clone().try_inverse().unwrap();
    let dm = &q.means()[0] - &p.means()[0];
    0.5 * ((&sq_inv * &sp).trace() + (dm.transpose() * &sq_inv * &dm)[(0, 0)] - d
        + (sq.determinant() / sp.determinant()).ln())
}

/// Fixed ten-pair suite; the first four pairs are Gaussian with closed-form
/// values.
pub fn estimator_suite(seed: u64, mc_samples: usize) -> Vec<EstimatorCase> {
    let pairs: Vec<(&'static str, Gmm, Gmm)> = vec![
        ("N(0,1) vs N(1,1)", normal1(0.0, 1.0), normal1(1.0, 1.0)),
        ("N(0.2,0.5) vs N(-0.3,1.5)", normal1(0.2, 0.5), normal1(-0.3, 1.5)),
        (
            "correlated 2-D gaussians",
            gaussian2([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]]),
            gaussian2([0.5, -0.5], [[1.5, -0.2], [-0.2, 0.8]]),
        ),
        (
            "2-D gaussian vs shifted",
            gaussian2([1.0, 0.0], [[0.3, 0.0], [0.0, 0.6]]),
            gaussian2([0.0, 0.0], [[0.5, 0.1], [0.1, 0.5]]),
        ),
        ("1-D mixture vs gaussian", gmm(&[0.3, 0.7], &[&[-1.0], &[1.5]], 0.4), normal1(0.5, 2.0)),
        (
            "1-D mixtures",
            gmm(&[0.5, 0.5], &[&[-1.0], &[1.0]], 0.1),
            gmm(&[0.2, 0.5, 0.3], &[&[-1.2], &[0.1], &[0.9]], 0.2),
        ),
        (
            "tailored (1,1) vs target",
            gmm(&[0.5, 0.5], &[&[1.0, 0.0], &[1.0, 0.0]], 0.1),
            gmm(&[0.5, 0.5], &[&[-1.0, 0.0], &[1.0, 0.0]], 0.1),
        ),
        (
            "tailored (0.5,-0.5) vs target",
            gmm(&[0.5, 0.5], &[&[0.5, 0.0], &[-0.5, 0.0]], 0.1),
            gmm(&[0.5, 0.5], &[&[-1.0, 0.0], &[1.0, 0.0]], 0.1),
        ),
        (
            "2-D mixture vs wide gaussian",
            gmm(&[0.25; 4], &[&[-1.0, -1.0], &[-1.0, 1.0], &[1.0, -1.0], &[1.0, 1.0]], 0.2),
            gaussian2([0.0, 0.0], [[2.0, 0.0], [0.0, 2.0]]),
        ),
        (
            "2-D mixtures",
            gmm(&[0.6, 0.4], &[&[0.0, 1.0], &[1.0, -0.5]], 0.3),
            gmm(&[0.3, 0.3, 0.4], &[&[0.0, 0.5], &[1.5, 0.0], &[-0.5, -0.5]], 0.4),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (name, p, q))| {
            let points = if p.dim() == 1 { 2001 } else { 401 };
            let grid = kl_grid(&p, &q, &GridSpec::covering(&[&p, &q], points).unwrap()).unwrap();
            let mc = kl_mc(&p, &q, mc_samples, &mut rng).unwrap();
            EstimatorCase {
                name,
                grid,
                mc: mc.estimate,
                std_error: mc.std_error,
                exact: (i < 4).then(|| gaussian_kl(&p, &q)),
            }
        })
        .collect()
}
