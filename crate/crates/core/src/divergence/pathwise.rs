//! Reparameterized ("pathwise") gradients of the reverse-KL matching loss.
//!
//! A sample is drawn as `x = μ_c + L_c·ε`, pushed through the task pipeline
//! `y = P·x + B·η`, and scored by `log p̃_θ(y) − log q̃(y)` where `p̃_θ`, `q̃`
//! are the pipelined model and target. Mixture weights do not depend on θ, so
//! holding `(c, ε, η)` fixed and differentiating the score gives an unbiased
//! gradient. The total derivative has two parts: the path through `y` and the
//! explicit dependence of `log p̃_θ` on θ at fixed `y`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::density::PreparedGmm;
use crate::error::{Error, Result};
use crate::gmm::{cholesky_factor, Gmm};
use crate::numeric::{sigmoid, softplus, softplus_inv};
use crate::pipeline::Pipeline;

/// Lower bound of every diagonal scale entry.
pub const DIAG_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Equal-weight mixture parameterized by an unconstrained vector.
///
/// Layout: all `K·D` mean coordinates (component-major), then for every
/// component the `D(D+1)/2` entries of its lower-triangular scale in row-major
/// order. Diagonal entries are stored as `u` with `L_rr = 1e-4 + softplus(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaModel {
    k: usize,
    dim: usize,
    params: Vec<f64>,
}

impl ThetaModel {
    pub fn n_params(k: usize, dim: usize) -> usize {
        k * dim + k * dim * (dim + 1) / 2
    }

    pub fn new(k: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidArgument("K and D must be positive".into()));
        }
        let expected = Self::n_params(k, dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { k, dim, params })
    }

    /// Inverse of [`ThetaModel::materialize`] for equal-weight mixtures whose
    /// scale diagonals exceed the floor.
    pub fn from_gmm(g: &Gmm) -> Result<Self> {
        let k = g.n_components();
        let dim = g.dim();
        if g.weights().iter().any(|w| (w - 1.0 / k as f64).abs() > 1e-12) {
            return Err(Error::InvalidWeights("trainable models use equal weights".into()));
        }
        let mut params = Vec::with_capacity(Self::n_params(k, dim));
        for m in g.means() {
            params.extend(m.iter());
        }
        for l in g.scales() {
            for r in 0..dim {
                for c in 0..r {
                    params.push(l[(r, c)]);
                }
                let excess = l[(r, r)] - DIAG_FLOOR;
                if !(excess > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "scale diagonal {} is below the floor {DIAG_FLOOR}",
                        l[(r, r)]
                    )));
                }
                params.push(softplus_inv(excess));
            }
        }
        Self::new(k, dim, params)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn tri(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn mean_index(&self, k: usize, i: usize) -> usize {
        k * self.dim + i
    }

    pub fn scale_index(&self, k: usize, r: usize, c: usize) -> usize {
        debug_assert!(c <= r);
        self.k * self.dim + k * self.tri() + r * (r + 1) / 2 + c
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.params[k * self.dim..(k + 1) * self.dim]
    }

    pub fn scale(&self, k: usize) -> DMatrix<f64> {
        let d = self.dim;
        let mut l = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..r {
                l[(r, c)] = self.params[self.scale_index(k, r, c)];
            }
            l[(r, r)] = DIAG_FLOOR + softplus(self.params[self.scale_index(k, r, r)]);
        }
        l
    }

    pub fn materialize(&self) -> Gmm {
        let means = (0..self.k)
            .map(|k| DVector::from_column_slice(self.mean(k)))
            .collect();
        let scales = (0..self.k).map(|k| self.scale(k)).collect();
        Gmm::new(vec![1.0 / self.k as f64; self.k], means, scales)
            .expect("positivity map keeps every scale valid")
    }
}

/// Fixed randomness of one gradient estimate: component indices, data-space
/// noises `ε` (`n × D`) and pipeline noises `η` (`n × D'`, empty when the
/// pipeline adds no noise).
#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseDraws {
    pub components: Vec<usize>,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
}

impl PathwiseDraws {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwiseEstimate {
    pub loss: f64,
    pub loss_std_error: f64,
    pub grad: Vec<f64>,
    pub grad_std_error: Vec<f64>,
}

/// Reverse-KL objective for one (target, pipeline) pair, ready to be
/// evaluated at many parameter values.
#[derive(Debug, Clone)]
pub struct PathwiseObjective {
    in_dim: usize,
    out_dim: usize,
    /// `P`, `D' × D`.
    linear: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    noise_factor: Option<DMatrix<f64>>,
    target: PreparedGmm,
}

/// Model component pushed through the pipeline.
struct PipelinedComponent {
    mean: Vec<f64>,
    /// `C⁻¹`, row-major `D' × D'`.
    cov_inv: Vec<f64>,
    log_coef: f64,
    /// `Pᵀ C⁻¹ P L`, row-major `D × D`.
    h: Vec<f64>,
}

impl PathwiseObjective {
    pub fn new(target: &Gmm, pipeline: &Pipeline) -> Result<Self> {
        let map = pipeline.compile(target.dim())?;
        let transformed = pipeline.apply(target)?;
        let noise_factor = if map.noise_cov.iter().all(|v| *v == 0.0) {
            None
        } else {
            Some(cholesky_factor(map.noise_cov.clone())?)
        };
        Ok(Self {
            in_dim: target.dim(),
            out_dim: map.linear.nrows(),
            linear: map.linear,
            noise_cov: map.noise_cov,
            noise_factor,
            target: PreparedGmm::new(&transformed),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn noise_factor(&self) -> Option<&DMatrix<f64>> {
        self.noise_factor.as_ref()
    }

    /// Draws per estimate: one component index plus `D` (and `D'` when the
    /// pipeline adds noise) standard normals per sample.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        model: &ThetaModel,
        n: usize,
        rng: &mut R,
    ) -> Result<PathwiseDraws> {
        self.check_model(model)?;
        let s = model.materialize().sample(n, rng)?;
        let eta = if self.noise_factor.is_some() {
            (0..n * self.out_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            Vec::new()
        };
        Ok(PathwiseDraws {
            components: s.components,
            eps: s.noises,
            eta,
        })
    }

    /// The pipelined sample `y_j` for draw `j` at the current parameters.
    pub fn transformed_point(&self, model: &ThetaModel, draws: &PathwiseDraws, j: usize) -> Vec<f64> {
        let c = draws.components[j];
        let mut y = vec![0.0; self.out_dim];
        self.pipelined_point(model.mean(c), &model.scale(c), draws, j, &mut y);
        y
    }

    fn pipelined_point(
        &self,
        mean: &[f64],
        scale: &DMatrix<f64>,
        draws: &PathwiseDraws,
        j: usize,
        y: &mut [f64],
    ) {
        let d = self.in_dim;
        let dp = self.out_dim;
        let eps = &draws.eps[j * d..(j + 1) * d];
        let mut x = [0.0; 16];
        let mut xv;
        let x: &mut [f64] = if d <= 16 {
            &mut x[..d]
        } else {
            xv = vec![0.0; d];
            &mut xv
        };
        for r in 0..d {
            x[r] = mean[r] + (0..=r).map(|c| scale[(r, c)] * eps[c]).sum::<f64>();
        }
        for r in 0..dp {
            y[r] = (0..d).map(|c| self.linear[(r, c)] * x[c]).sum();
        }
        if let Some(b) = &self.noise_factor {
            let eta = &draws.eta[j * dp..(j + 1) * dp];
            for r in 0..dp {
                y[r] += (0..=r).map(|c| b[(r, c)] * eta[c]).sum::<f64>();
            }
        }
    }

    pub fn estimate<R: Rng + ?Sized>(
        &self,
        model: &ThetaModel,
        n: usize,
        rng: &mut R,
    ) -> Result<PathwiseEstimate> {
        let draws = self.draw(model, n, rng)?;
        self.evaluate(model, &draws)
    }

    /// Loss and gradient (with per-coordinate standard errors) for fixed draws.
    pub fn evaluate(&self, model: &ThetaModel, draws: &PathwiseDraws) -> Result<PathwiseEstimate> {
        self.check_model(model)?;
        let n = draws.len();
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two draws".into()));
        }
        let d = self.in_dim;
        let dp = self.out_dim;
        let k_count = model.k();
        let scales: Vec<DMatrix<f64>> = (0..k_count).map(|k| model.scale(k)).collect();
        let comps = self.pipelined_components(model, &scales)?;
        let n_params = model.params().len();

        let mut sum = vec![0.0; n_params];
        let mut sum_sq = vec![0.0; n_params];
        let mut losses = Vec::with_capacity(n);
        let mut gs = vec![0.0; n_params];
        let mut terms = vec![0.0; k_count];
        let mut a_all = vec![0.0; k_count * dp];
        let mut delta = vec![0.0; dp];
        let mut y = vec![0.0; dp];
        let mut grad_q = vec![0.0; dp];
        let mut g_y = vec![0.0; dp];
        let mut b = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut u = vec![0.0; d];

        for j in 0..n {
            let c_j = draws.components[j];
            self.pipelined_point(model.mean(c_j), &scales[c_j], draws, j, &mut y);
            // Model log density and the per-component C⁻¹(y − m).
            for (k, comp) in comps.iter().enumerate() {
                for r in 0..dp {
                    delta[r] = y[r] - comp.mean[r];
                }
                let a = &mut a_all[k * dp..(k + 1) * dp];
                let mut quad = 0.0;
                for r in 0..dp {
                    let mut acc = 0.0;
                    for c in 0..dp {
                        acc += comp.cov_inv[r * dp + c] * delta[c];
                    }
                    a[r] = acc;
                    quad += delta[r] * acc;
                }
                terms[k] = comp.log_coef - 0.5 * quad;
            }
            let log_p = crate::numeric::log_sum_exp(&terms);
            let log_q = self.target.log_density_grad(&y, &mut grad_q);
            let loss = log_p - log_q;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite sample loss at draw {j}")));
            }
            losses.push(loss);

            gs.iter_mut().for_each(|g| *g = 0.0);
            g_y.iter_mut().zip(&grad_q).for_each(|(g, q)| *g = -q);
            for k in 0..k_count {
                let r = (terms[k] - log_p).exp();
                if r == 0.0 {
                    continue;
                }
                let a = &a_all[k * dp..(k + 1) * dp];
                for r_ in 0..dp {
                    g_y[r_] -= r * a[r_];
                }
                // Explicit θ-dependence of log p̃ at fixed y.
                mul_transpose(&self.linear, a, &mut b);
                for i in 0..d {
                    gs[model.mean_index(k, i)] += r * b[i];
                }
                let l = &scales[k];
                for c in 0..d {
                    u[c] = (c..d).map(|row| l[(row, c)] * b[row]).sum();
                }
                let h = &comps[k].h;
                for row in 0..d {
                    for c in 0..=row {
                        gs[model.scale_index(k, row, c)] += r * (b[row] * u[c] - h[row * d + c]);
                    }
                }
            }
            // Path through y for the sampled component.
            let eps = &draws.eps[j * d..(j + 1) * d];
            mul_transpose(&self.linear, &g_y, &mut v);
            for i in 0..d {
                gs[model.mean_index(c_j, i)] += v[i];
            }
            for row in 0..d {
                for c in 0..=row {
                    gs[model.scale_index(c_j, row, c)] += v[row] * eps[c];
                }
            }
            // Chain through the positivity map on diagonal entries.
            for k in 0..k_count {
                for r_ in 0..d {
                    let idx = model.scale_index(k, r_, r_);
                    gs[idx] *= sigmoid(model.params()[idx]);
                }
            }
            for (i, g) in gs.iter().enumerate() {
                sum[i] += g;
                sum_sq[i] += g * g;
            }
        }

        let nf = n as f64;
        let loss_est = super::mean_and_std_error(&losses);
        let grad: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let grad_std_error = sum_sq
            .iter()
            .zip(&grad)
            .map(|(sq, m)| {
                let var = ((sq - nf * m * m) / (nf - 1.0)).max(0.0);
                (var / nf).sqrt()
            })
            .collect();
        Ok(PathwiseEstimate {
            loss: loss_est.estimate,
            loss_std_error: loss_est.std_error,
            grad,
            grad_std_error,
        })
    }

    fn check_model(&self, model: &ThetaModel) -> Result<()> {
        if model.dim() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: model.dim(),
            });
        }
        Ok(())
    }

    fn pipelined_components(
        &self,
        model: &ThetaModel,
        scales: &[DMatrix<f64>],
    ) -> Result<Vec<PipelinedComponent>> {
        let p = &self.linear;
        let dp = self.out_dim;
        let log_w = -(model.k() as f64).ln();
        (0..model.k())
            .map(|k| {
                let pl = p * &scales[k];
                let cov = &pl * pl.transpose() + &self.noise_cov;
                let chol = cholesky_factor(cov)?;
                let log_det: f64 = (0..dp).map(|r| chol[(r, r)].ln()).sum();
                let inv_l = chol
                    .solve_lower_triangular(&DMatrix::identity(dp, dp))
                    .ok_or_else(|| Error::Numerical("singular pipelined covariance".into()))?;
                let cov_inv = inv_l.transpose() * &inv_l;
                let h = p.transpose() * &cov_inv * &pl;
                let mean = p * DVector::from_column_slice(model.mean(k));
                Ok(PipelinedComponent {
                    mean: mean.iter().copied().collect(),
                    cov_inv: row_major(&cov_inv),
                    log_coef: log_w - log_det - 0.5 * dp as f64 * LN_2PI,
                    h: row_major(&h),
                })
            })
            .collect()
    }
}

/// `out = mᵀ·x`.
fn mul_transpose(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..m.nrows()).map(|r| m[(r, c)] * x[r]).sum();
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// One reverse-KL loss/gradient estimate with `n` fresh draws.
pub fn reverse_kl_pathwise_grad<R: Rng + ?Sized>(
    model: &ThetaModel,
    target: &Gmm,
    pipeline: &Pipeline,
    n: usize,
    rng: &mut R,
) -> Result<PathwiseEstimate> {
    PathwiseObjective::new(target, pipeline)?.estimate(model, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::IndexSet;
    use crate::numeric::rotation;
    use crate::pipeline::Stage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_layout() {
        let m = ThetaModel::new(3, 2, vec![0.0; 15]).unwrap();
        assert_eq!(ThetaModel::n_params(25, 2), 125);
        assert_eq!(m.mean_index(2, 1), 5);
        assert_eq!(m.scale_index(0, 0, 0), 6);
        assert_eq!(m.scale_index(1, 1, 0), 10);
        assert!(ThetaModel::new(3, 2, vec![0.0; 14]).is_err());
    }

    #[test]
    fn gmm_round_trip() {
        let g = Gmm::isotropic(
            vec![DVector::from_vec(vec![0.3, -1.0]), DVector::from_vec(vec![2.0, 0.5])],
            0.05,
        )
        .unwrap();
        let theta = ThetaModel::from_gmm(&g).unwrap();
        let back = theta.materialize();
        for k in 0..2 {
            let err = (back.covariance(k) - g.covariance(k)).abs().max();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn diagonal_never_drops_below_floor() {
        let mut params = vec![0.0; ThetaModel::n_params(1, 2)];
        params[2] = -800.0;
        params[4] = -800.0;
        let m = ThetaModel::new(1, 2, params).unwrap();
        let l = m.scale(0);
        assert!(l[(0, 0)] >= DIAG_FLOOR && l[(1, 1)] >= DIAG_FLOOR);
    }

    #[test]
    fn single_gaussian_gradient_is_mean_offset() {
        // KL[N(μ,1) ‖ N(0,1)] = μ²/2, so the expected gradient is μ.
        let target = Gmm::isotropic(vec![DVector::from_vec(vec![0.0])], 1.0).unwrap();
        let model = ThetaModel::from_gmm(
            &Gmm::isotropic(vec![DVector::from_vec(vec![2.0])], 1.0).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let est =
            reverse_kl_pathwise_grad(&model, &target, &Pipeline::identity(), 1_000_000, &mut rng)
                .unwrap();
        assert!((est.grad[0] - 2.0).abs() < 4.0 * est.grad_std_error[0]);
        assert!((est.loss - 2.0).abs() < 4.0 * est.loss_std_error);
    }

    #[test]
    fn stationary_when_model_equals_target() {
        let g = Gmm::isotropic(
            vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])],
            0.1,
        )
        .unwrap();
        let model = ThetaModel::from_gmm(&g).unwrap();
        let target = model.materialize();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est =
            reverse_kl_pathwise_grad(&model, &target, &Pipeline::identity(), 20_000, &mut rng)
                .unwrap();
        assert!(est.loss.abs() <= 4.0 * est.loss_std_error + 1e-12);
        for (g, se) in est.grad.iter().zip(&est.grad_std_error) {
            assert!(g.abs() <= 4.0 * se + 1e-12, "{g} vs {se}");
        }
    }

    #[test]
    fn conditioning_pipeline_rejected() {
        let g = Gmm::isotropic(vec![DVector::zeros(2)], 1.0).unwrap();
        let p = Pipeline::new(vec![Stage::Condition {
            s: IndexSet::singleton(0),
            x_s: vec![0.0],
            t: IndexSet::singleton(1),
        }]);
        assert!(PathwiseObjective::new(&g, &p).is_err());
    }

    #[test]
    fn draw_accounting() {
        let g = Gmm::isotropic(vec![DVector::zeros(2)], 1.0).unwrap();
        let model = ThetaModel::from_gmm(&g).unwrap();
        let plain = PathwiseObjective::new(&g, &Pipeline::identity()).unwrap();
        let noisy = PathwiseObjective::new(
            &g,
            &Pipeline::new(vec![
                Stage::Linear(rotation(0.4)),
                Stage::Convolve(0.2),
                Stage::Marginalize(IndexSet::singleton(0)),
            ]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = plain.draw(&model, 10, &mut rng).unwrap();
        assert_eq!((a.components.len(), a.eps.len(), a.eta.len()), (10, 20, 0));
        let b = noisy.draw(&model, 10, &mut rng).unwrap();
        assert_eq!((b.components.len(), b.eps.len(), b.eta.len()), (10, 20, 10));
    }
}
