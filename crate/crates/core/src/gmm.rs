//! Closed-form algebra on Gaussian mixtures.
//!
//! A [`Gmm`] stores every component covariance through its lower-triangular
//! Cholesky factor (`Σᵢ = Lᵢ·Lᵢᵀ`). Every operation that changes a covariance
//! (marginalization, conditioning, linear maps, Gaussian convolution) forms the
//! new covariance explicitly and factors it again, so positive definiteness is
//! an invariant of the type rather than something callers must maintain.
//!
//! Matrices are `nalgebra` dense matrices (column-major). Densities are always
//! evaluated in the log domain.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{fmt_f64, log_sum_exp};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Ordered, duplicate-free set of dimension indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Builds a set from indices that must be strictly ascending and `< dim`.
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidIndexSet(format!(
                "{indices:?} is not strictly ascending"
            )));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidIndexSet(format!(
                "index {i} out of range for dimension {dim}"
            )));
        }
        Ok(Self(indices))
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut indices: Vec<usize>, dim: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, dim)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn full(dim: usize) -> Self {
        Self((0..dim).collect())
    }

    pub fn singleton(i: usize) -> Self {
        Self(vec![i])
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        self.0.iter().all(|i| !other.contains(*i))
    }

    pub fn complement(&self, dim: usize) -> Self {
        Self((0..dim).filter(|i| !self.contains(*i)).collect())
    }

    /// Picks the coordinates of `x` listed in this set.
    pub fn select(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().map(|&i| x[i]).collect()
    }
}

/// Weighted mixture of full-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    scales: Vec<DMatrix<f64>>,
}

impl Gmm {
    /// Builds a mixture from weights, means and lower-triangular scale factors.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        scales: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidWeights("no components".into()));
        }
        if means.len() != k || scales.len() != k {
            return Err(Error::InvalidWeights(format!(
                "{k} weights but {} means and {} scales",
                means.len(),
                scales.len()
            )));
        }
        validate_weights(&weights)?;
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        for (i, (m, l)) in means.iter().zip(&scales).enumerate() {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
            if l.nrows() != dim || l.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: l.nrows(),
                });
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "component {i} has a non-finite mean"
                )));
            }
            let lower_ok = (0..dim).all(|r| {
                ((r + 1)..dim).all(|c| l[(r, c)] == 0.0)
                    && l[(r, r)] > 0.0
                    && (0..=r).all(|c| l[(r, c)].is_finite())
            });
            if !lower_ok {
                return Err(Error::InvalidScale { component: i });
            }
        }
        Ok(Self {
            dim,
            weights,
            means,
            scales,
        })
    }

    /// Builds a mixture from covariance matrices, factoring each one.
    pub fn from_covariances(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let scales = covariances
            .into_iter()
            .map(cholesky_factor)
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, means, scales)
    }

    /// Equal-weight mixture with isotropic covariance `variance·I`.
    pub fn isotropic(means: Vec<DVector<f64>>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variance must be positive, got {variance}"
            )));
        }
        let k = means.len();
        let dim = means.first().map_or(0, |m| m.len());
        let scale = DMatrix::identity(dim, dim) * variance.sqrt();
        Self::new(vec![1.0 / k as f64; k], means, vec![scale; k])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn scales(&self) -> &[DMatrix<f64>] {
        &self.scales
    }

    pub fn covariance(&self, i: usize) -> DMatrix<f64> {
        &self.scales[i] * self.scales[i].transpose()
    }

    /// `log Σᵢ wᵢ·N(x | μᵢ, LᵢLᵢᵀ)` via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let terms: Vec<f64> = (0..self.n_components())
            .map(|i| self.weights[i].ln() + self.component_log_density(i, x))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Log density of component `i` alone (without its weight).
    pub fn component_log_density(&self, i: usize, x: &[f64]) -> f64 {
        let l = &self.scales[i];
        let mean = &self.means[i];
        let mut z = vec![0.0; self.dim];
        let mut log_det = 0.0;
        for r in 0..self.dim {
            let mut acc = x[r] - mean[r];
            for c in 0..r {
                acc -= l[(r, c)] * z[c];
            }
            z[r] = acc / l[(r, r)];
            log_det += l[(r, r)].ln();
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * quad - log_det - 0.5 * self.dim as f64 * LN_2PI
    }

    /// Peak-density bound `Σᵢ wᵢ·(2π)^(−D/2)·det(Lᵢ)^(−1)`.
    pub fn density_upper_bound(&self) -> f64 {
        (0..self.n_components())
            .map(|i| {
                let det: f64 = (0..self.dim).map(|r| self.scales[i][(r, r)]).product();
                self.weights[i] * (2.0 * PI).powf(-0.5 * self.dim as f64) / det
            })
            .sum()
    }

    /// Draws `n` points together with the component indices and the standard
    /// normal noises that produced them, so callers can re-run the affine map
    /// `point = mean[c] + scale[c]·noise` under perturbed parameters.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Samples> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        let index = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidWeights(e.to_string()))?;
        let d = self.dim;
        let mut points = vec![0.0; n * d];
        let mut noises = vec![0.0; n * d];
        let mut components = Vec::with_capacity(n);
        for j in 0..n {
            let c = index.sample(rng);
            components.push(c);
            let eps = &mut noises[j * d..(j + 1) * d];
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let l = &self.scales[c];
            for r in 0..d {
                let mut v = self.means[c][r];
                for col in 0..=r {
                    v += l[(r, col)] * eps[col];
                }
                points[j * d + r] = v;
            }
        }
        Ok(Samples {
            dim: d,
            points,
            components,
            noises,
        })
    }

    /// Marginal over the coordinates in `s`.
    pub fn marginalize(&self, s: &IndexSet) -> Result<Gmm> {
        if s.is_empty() {
            return Err(Error::InvalidIndexSet("cannot marginalize onto an empty set".into()));
        }
        self.check_indices(s)?;
        let idx = s.indices();
        let means = self
            .means
            .iter()
            .map(|m| DVector::from_iterator(idx.len(), idx.iter().map(|&i| m[i])))
            .collect();
        let covs = (0..self.n_components())
            .map(|k| self.covariance(k).select_rows(idx).select_columns(idx))
            .collect();
        Gmm::from_covariances(self.weights.clone(), means, covs)
    }

    /// Conditional distribution of the `t` coordinates given `x_s` on `s`.
    ///
    /// Component weights are updated in the log domain so conditioning values
    /// deep in the tails of every component stay finite.
    pub fn condition(&self, s: &IndexSet, x_s: &[f64], t: &IndexSet) -> Result<Gmm> {
        if s.is_empty() || t.is_empty() {
            return Err(Error::InvalidIndexSet("conditioning sets must be nonempty".into()));
        }
        if !s.is_disjoint(t) {
            return Err(Error::InvalidIndexSet(format!(
                "source {:?} and target {:?} overlap",
                s.indices(),
                t.indices()
            )));
        }
        self.check_indices(s)?;
        self.check_indices(t)?;
        if x_s.len() != s.len() {
            return Err(Error::DimensionMismatch {
                expected: s.len(),
                got: x_s.len(),
            });
        }
        let si = s.indices();
        let ti = t.indices();
        let xs = DVector::from_column_slice(x_s);
        let k = self.n_components();
        let mut log_w = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for i in 0..k {
            let cov = self.covariance(i);
            let s_ss = cov.select_rows(si).select_columns(si);
            let s_ts = cov.select_rows(ti).select_columns(si);
            let s_tt = cov.select_rows(ti).select_columns(ti);
            let chol = symmetrized(s_ss).cholesky().ok_or_else(|| {
                Error::Numerical(format!("component {i}: source covariance is singular"))
            })?;
            let mu_s = DVector::from_iterator(si.len(), si.iter().map(|&j| self.means[i][j]));
            let mu_t = DVector::from_iterator(ti.len(), ti.iter().map(|&j| self.means[i][j]));
            let delta = &xs - &mu_s;
            // log N(x_s | μ_s, Σ_ss) through the factor of Σ_ss.
            let z = chol
                .l()
                .solve_lower_triangular(&delta)
                .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
            let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
            let log_marg = -0.5 * z.norm_squared() - log_det - 0.5 * si.len() as f64 * LN_2PI;
            log_w.push(self.weights[i].ln() + log_marg);

            let gain_t = chol.solve(&s_ts.transpose()); // Σ_ss⁻¹ Σ_st
            means.push(mu_t + gain_t.transpose() * &delta);
            covs.push(s_tt - &s_ts * gain_t);
        }
        let norm = log_sum_exp(&log_w);
        if !norm.is_finite() {
            return Err(Error::Numerical(
                "conditioning weights are not finite".into(),
            ));
        }
        let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - norm).exp()).collect();
        renormalize(&mut weights);
        Gmm::from_covariances(weights, means, covs)
    }

    /// Image of the mixture under `x ↦ a·x` for a full-row-rank `a`.
    pub fn linear_transform(&self, a: &DMatrix<f64>) -> Result<Gmm> {
        if a.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: a.ncols(),
            });
        }
        if a.nrows() == 0 || symmetrized(a * a.transpose()).cholesky().is_none() {
            return Err(Error::RankDeficient);
        }
        let means = self.means.iter().map(|m| a * m).collect();
        let covs = (0..self.n_components())
            .map(|i| {
                let la = a * &self.scales[i];
                &la * la.transpose()
            })
            .collect();
        Gmm::from_covariances(self.weights.clone(), means, covs)
            .map_err(|_| Error::RankDeficient)
    }

    /// Convolution with `N(0, noise_var·I)`.
    pub fn convolve_gaussian(&self, noise_var: f64) -> Result<Gmm> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be nonnegative, got {noise_var}"
            )));
        }
        if noise_var == 0.0 {
            return Ok(self.clone());
        }
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let covs = (0..self.n_components())
            .map(|i| self.covariance(i) + &eye * noise_var)
            .collect();
        Gmm::from_covariances(self.weights.clone(), self.means.clone(), covs)
    }

    /// Structured-text record with `dim`, `weights`, `means` and `scales`
    /// (row-major lower triangles); floats carry 17 significant digits.
    pub fn to_record(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = f64>| {
            let items: Vec<String> = v.map(fmt_f64).collect();
            format!("[{}]", items.join(", "))
        };
        let weights = list(&mut self.weights.iter().copied());
        let means: Vec<String> = self.means.iter().map(|m| list(&mut m.iter().copied())).collect();
        let scales: Vec<String> = self
            .scales
            .iter()
            .map(|l| list(&mut lower_triangle_row_major(l).into_iter()))
            .collect();
        format!(
            "dim = {}\nweights = {}\nmeans = [{}]\nscales = [{}]\n",
            self.dim,
            weights,
            means.join(", "),
            scales.join(", ")
        )
    }

    /// Parses the output of [`Gmm::to_record`].
    pub fn from_record(text: &str) -> Result<Gmm> {
        let rec: GmmRecord = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        rec.into_gmm()
    }

    pub fn to_serializable(&self) -> GmmRecord {
        GmmRecord {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            scales: self.scales.iter().map(lower_triangle_row_major).collect(),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    fn check_indices(&self, s: &IndexSet) -> Result<()> {
        match s.indices().last() {
            Some(&i) if i >= self.dim => Err(Error::InvalidIndexSet(format!(
                "index {i} out of range for dimension {}",
                self.dim
            ))),
            _ => Ok(()),
        }
    }
}

/// Serializable form of a [`Gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmRecord {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major lower triangle of each component's scale factor.
    pub scales: Vec<Vec<f64>>,
}

impl GmmRecord {
    pub fn into_gmm(self) -> Result<Gmm> {
        let d = self.dim;
        let tri = d * (d + 1) / 2;
        let means = self
            .means
            .into_iter()
            .map(|m| {
                if m.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: m.len(),
                    });
                }
                Ok(DVector::from_vec(m))
            })
            .collect::<Result<Vec<_>>>()?;
        let scales = self
            .scales
            .into_iter()
            .map(|s| {
                if s.len() != tri {
                    return Err(Error::DimensionMismatch {
                        expected: tri,
                        got: s.len(),
                    });
                }
                let mut l = DMatrix::zeros(d, d);
                let mut it = s.into_iter();
                for r in 0..d {
                    for c in 0..=r {
                        l[(r, c)] = it.next().unwrap_or(0.0);
                    }
                }
                Ok(l)
            })
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(self.weights, means, scales)
    }
}

/// Draws from [`Gmm::sample`], stored row-major (`n × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub points: Vec<f64>,
    pub components: Vec<usize>,
    pub noises: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn noise(&self, j: usize) -> &[f64] {
        &self.noises[j * self.dim..(j + 1) * self.dim]
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if let Some((i, w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
    {
        return Err(Error::InvalidWeights(format!("weight {i} is {w}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
    }
    Ok(())
}

fn renormalize(weights: &mut [f64]) {
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_factor(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::InvalidArgument("covariance must be square".into()));
    }
    symmetrized(cov)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
}

fn lower_triangle_row_major(l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for r in 0..d {
        for c in 0..=r {
            out.push(l[(r, c)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (x - mean).powi(2) / var - 0.5 * (2.0 * PI * var).ln()
    }

    fn two_gmm(sigma2: f64) -> Gmm {
        Gmm::isotropic(
            vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])],
            sigma2,
        )
        .unwrap()
    }

    fn correlated(rho: f64) -> Gmm {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        Gmm::from_covariances(vec![1.0], vec![DVector::from_vec(vec![0.3, -0.2])], vec![cov])
            .unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let g = Gmm::isotropic(vec![DVector::zeros(2)], 1.0).unwrap();
        let v = g.log_density(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn two_gmm_density_matches_scalar_oracle() {
        let g = two_gmm(0.1);
        let x = [-1.0, 0.0];
        let a = normal_logpdf(-1.0, -1.0, 0.1) + normal_logpdf(0.0, 0.0, 0.1);
        let b = normal_logpdf(-1.0, 1.0, 0.1) + normal_logpdf(0.0, 0.0, 0.1);
        let expected = (0.5 * a.exp() + 0.5 * b.exp()).ln();
        assert!((g.log_density(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let g = two_gmm(0.1);
        assert!(matches!(
            g.log_density(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn rejects_invalid_construction() {
        let m = vec![DVector::zeros(1)];
        assert!(Gmm::new(vec![0.9], m.clone(), vec![DMatrix::identity(1, 1)]).is_err());
        assert!(Gmm::new(vec![1.0], m.clone(), vec![DMatrix::from_element(1, 1, -1.0)]).is_err());
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            Gmm::new(vec![1.0], vec![DVector::zeros(2)], vec![upper]),
            Err(Error::InvalidScale { component: 0 })
        ));
    }

    #[test]
    fn single_component_sample_is_affine() {
        let g = correlated(0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = g.sample(5, &mut rng).unwrap();
        let l = &g.scales()[0];
        for j in 0..5 {
            let e = s.noise(j);
            let x0 = 0.3 + l[(0, 0)] * e[0];
            let x1 = -0.2 + l[(1, 0)] * e[0] + l[(1, 1)] * e[1];
            assert_eq!(s.point(j), &[x0, x1]);
        }
    }

    #[test]
    fn component_frequencies_concentrate() {
        let g = two_gmm(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let s = g.sample(n, &mut rng).unwrap();
        let freq = s.components.iter().filter(|&&c| c == 0).count() as f64 / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let g = two_gmm(0.3);
        let a = g.sample(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = g.sample(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(g.sample(0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn marginal_of_tailored_target() {
        let q = two_gmm(0.1);
        let m1 = q.marginalize(&IndexSet::singleton(1)).unwrap();
        for &x in &[-0.7, 0.0, 0.4] {
            let v = m1.log_density(&[x]).unwrap();
            assert!((v - normal_logpdf(x, 0.0, 0.1)).abs() < 1e-12);
        }
        let m0 = q.marginalize(&IndexSet::singleton(0)).unwrap();
        for &x in &[-1.3, 0.0, 0.9] {
            let expected =
                (0.5 * normal_logpdf(x, -1.0, 0.1).exp() + 0.5 * normal_logpdf(x, 1.0, 0.1).exp()).ln();
            assert!((m0.log_density(&[x]).unwrap() - expected).abs() < 1e-12);
        }
        assert!(q.marginalize(&IndexSet::empty()).is_err());
    }

    #[test]
    fn full_marginal_is_identity() {
        let g = correlated(-0.4);
        let m = g.marginalize(&IndexSet::full(2)).unwrap();
        for x in [[0.1, 0.2], [-1.0, 2.0]] {
            assert!((m.log_density(&x).unwrap() - g.log_density(&x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioning_tailored_target_on_x2() {
        let q = two_gmm(0.1);
        let c = q
            .condition(&IndexSet::singleton(1), &[0.0], &IndexSet::singleton(0))
            .unwrap();
        assert!((c.weights()[0] - 0.5).abs() < 1e-15);
        assert!((c.means()[0][0] + 1.0).abs() < 1e-15);
        assert!((c.means()[1][0] - 1.0).abs() < 1e-15);
        assert!((c.covariance(0)[(0, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn conditional_moments_match_grid_normalization() {
        // Oracle: normalize g(x0, x1 = fixed) numerically on a 1-D grid.
        let rho = 0.7;
        let g = correlated(rho);
        let x1 = 0.9;
        let c = g
            .condition(&IndexSet::singleton(1), &[x1], &IndexSet::singleton(0))
            .unwrap();
        let n = 20_001;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x0 = lo + (i as f64 + 0.5) * h;
            let p = g.log_density(&[x0, x1]).unwrap().exp();
            z += p;
            m1 += p * x0;
            m2 += p * x0 * x0;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((c.means()[0][0] - mean).abs() < 1e-9);
        assert!((c.covariance(0)[(0, 0)] - var).abs() < 1e-9);
    }

    #[test]
    fn far_conditioning_selects_component() {
        // Components 10σ apart along the conditioning axis.
        let sd = 0.1_f64;
        let g = Gmm::isotropic(
            vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
            sd * sd,
        )
        .unwrap();
        let c = g
            .condition(&IndexSet::singleton(1), &[1.0], &IndexSet::singleton(0))
            .unwrap();
        // Responsibility oracle: ratio of scalar normal densities.
        let log_ratio = normal_logpdf(1.0, 0.0, sd * sd) - normal_logpdf(1.0, 1.0, sd * sd);
        let expected = 1.0 / (1.0 + log_ratio.exp());
        assert!((c.weights()[1] - expected).abs() < 1e-12);
        assert!(c.weights()[1] > 1.0 - 1e-6);
    }

    #[test]
    fn deep_tail_conditioning_stays_finite() {
        let g = two_gmm(0.01);
        let c = g
            .condition(&IndexSet::singleton(0), &[400.0], &IndexSet::singleton(1))
            .unwrap();
        assert!(c.weights().iter().all(|w| w.is_finite()));
        assert!((c.weights()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditioning_rejects_overlap() {
        let g = two_gmm(0.1);
        assert!(g
            .condition(&IndexSet::singleton(0), &[0.0], &IndexSet::singleton(0))
            .is_err());
    }

    #[test]
    fn rotation_moves_means() {
        let g = two_gmm(0.1);
        let a = crate::numeric::rotation(std::f64::consts::FRAC_PI_2);
        let r = g.linear_transform(&a).unwrap();
        assert!((r.means()[0][0] - 0.0).abs() < 1e-15);
        assert!((r.means()[0][1] + 1.0).abs() < 1e-15);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(g.linear_transform(&eye).unwrap().means(), g.means());
    }

    #[test]
    fn rotated_marginal_is_projected_mixture() {
        let g = two_gmm(0.1);
        let a = crate::numeric::rotation(15f64.to_radians());
        let m = g.linear_transform(&a).unwrap().marginalize(&IndexSet::singleton(0)).unwrap();
        let c = 15f64.to_radians().cos();
        assert!((m.means()[0][0] + c).abs() < 1e-15);
        assert!((m.means()[1][0] - c).abs() < 1e-15);
        assert!((m.covariance(0)[(0, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_transform_rejected() {
        let g = two_gmm(0.1);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(g.linear_transform(&a), Err(Error::RankDeficient));
    }

    #[test]
    fn convolution_adds_variance() {
        let g = Gmm::isotropic(vec![DVector::zeros(1)], 0.1).unwrap();
        let c = g.convolve_gaussian(0.3).unwrap();
        assert!((c.covariance(0)[(0, 0)] - 0.4).abs() < 1e-15);
        assert_eq!(g.convolve_gaussian(0.0).unwrap(), g);
        assert!(g.convolve_gaussian(-0.1).is_err());
    }

    #[test]
    fn convolution_matches_mc_smoothing() {
        let g = two_gmm(0.05);
        let v = 0.2;
        let c = g.convolve_gaussian(v).unwrap();
        let x = [0.4, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let e0: f64 = rng.sample::<f64, _>(StandardNormal) * v.sqrt();
            let e1: f64 = rng.sample::<f64, _>(StandardNormal) * v.sqrt();
            let d = g.log_density(&[x[0] - e0, x[1] - e1]).unwrap().exp();
            s1 += d;
            s2 += d * d;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = c.log_density(&x).unwrap().exp();
        assert!((exact - mean).abs() < 3.0 * se, "{exact} vs {mean} ± {se}");
    }

    #[test]
    fn density_below_peak_bound() {
        let g = correlated(0.9);
        let bound = g.density_upper_bound();
        for x in [[0.3, -0.2], [0.0, 0.0], [1.0, 1.0]] {
            assert!(g.log_density(&x).unwrap().exp() <= bound);
        }
    }

    #[test]
    fn record_round_trip_is_bit_faithful() {
        let g = correlated(0.37).linear_transform(&crate::numeric::rotation(0.3)).unwrap();
        let back = Gmm::from_record(&g.to_record()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn index_set_validation() {
        assert!(IndexSet::new(vec![1, 0], 2).is_err());
        assert!(IndexSet::new(vec![0, 2], 2).is_err());
        let s = IndexSet::from_unsorted(vec![1, 0, 1], 3).unwrap();
        assert_eq!(s.indices(), &[0, 1]);
        assert_eq!(s.complement(3).indices(), &[2]);
    }
}
