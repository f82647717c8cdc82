//! KL and JS divergences between mixtures: midpoint-rule quadrature for one-
//! and two-dimensional distributions, Monte Carlo for anything else, and the
//! reparameterized reverse-KL gradient used for training.

mod pathwise;

pub use pathwise::{
    reverse_kl_pathwise_grad, PathwiseDraws, PathwiseEstimate, PathwiseObjective, ThetaModel,
    DIAG_FLOOR,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::PreparedGmm;
use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::numeric::pairwise_sum;

/// Cells with `p(x)` below this contribute nothing to `∫ p log(p/q)`.
const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// Default cap on the number of quadrature cells.
pub const DEFAULT_CELL_CAP: usize = 10_000_000;

/// Number of standard deviations the default grid extends past every mean.
pub const GRID_SD_MARGIN: f64 = 8.0;

/// Which divergence a matching task minimizes. `ReverseKl` is `KL[p_θ ‖ q]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    ReverseKl,
    ForwardKl,
    Js,
}

impl Divergence {
    pub fn name(self) -> &'static str {
        match self {
            Divergence::ReverseKl => "reverse_kl",
            Divergence::ForwardKl => "forward_kl",
            Divergence::Js => "js",
        }
    }
}

/// Axis-aligned midpoint-rule grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        Self::with_cap(lower, upper, points, DEFAULT_CELL_CAP)
    }

    pub fn with_cap(
        lower: Vec<f64>,
        upper: Vec<f64>,
        points: Vec<usize>,
        cap: usize,
    ) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != points.len() || lower.is_empty() {
            return Err(Error::InvalidArgument(
                "grid bounds and counts must have one entry per dimension".into(),
            ));
        }
        for a in 0..lower.len() {
            if !(lower[a] < upper[a]) || !lower[a].is_finite() || !upper[a].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "axis {a}: lower {} must be below upper {}",
                    lower[a], upper[a]
                )));
            }
            if points[a] < 3 {
                return Err(Error::InvalidArgument(format!(
                    "axis {a}: at least 3 points required, got {}",
                    points[a]
                )));
            }
        }
        let cells = points
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .unwrap_or(usize::MAX);
        if cells > cap {
            return Err(Error::InvalidArgument(format!(
                "grid has {cells} cells, above the cap of {cap}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            points,
        })
    }

    /// Grid spanning every component mean of every mixture ± 8 standard
    /// deviations per axis, with `points` cells per axis.
    pub fn covering(gmms: &[&Gmm], points: usize) -> Result<Self> {
        let dim = gmms
            .first()
            .ok_or_else(|| Error::InvalidArgument("no mixtures to cover".into()))?
            .dim();
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for g in gmms {
            if g.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: g.dim(),
                });
            }
            for i in 0..g.n_components() {
                let l = &g.scales()[i];
                for a in 0..dim {
                    let sd = (0..=a).map(|c| l[(a, c)] * l[(a, c)]).sum::<f64>().sqrt();
                    let m = g.means()[i][a];
                    lower[a] = lower[a].min(m - GRID_SD_MARGIN * sd);
                    upper[a] = upper[a].max(m + GRID_SD_MARGIN * sd);
                }
            }
        }
        Self::new(lower, upper, vec![points; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.points[axis] as f64
    }

    /// Cell midpoints along `axis`.
    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let h = self.step(axis);
        (0..self.points[axis])
            .map(|i| self.lower[axis] + (i as f64 + 0.5) * h)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.step(a)).product()
    }
}

/// Densities below this in the fast 2-D path are recomputed exactly in the
/// log domain.
const FAST_PATH_MIN: f64 = 1e-280;

/// A fast-path density below this bounds the exact density under
/// [`LOG_DENSITY_FLOOR`] even with every component underflowed to zero.
const FAST_PATH_SKIP: f64 = 1e-301;

#[derive(Debug, Clone, Copy)]
enum Integrand {
    Kl,
    Js,
}

impl Integrand {
    #[inline]
    fn eval(self, lp: f64, lq: f64) -> f64 {
        match self {
            Integrand::Kl => kl_term(lp, lq),
            Integrand::Js => js_term(lp, lq),
        }
    }
}

/// Integrates the integrand over a 1-D or 2-D grid and returns the
/// volume-weighted sum (row sums first, then a pairwise sum over rows).
fn integrate_pair(p: &Gmm, q: &Gmm, grid: &GridSpec, integrand: Integrand) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if grid.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: grid.dim(),
        });
    }
    let pp = PreparedGmm::new(p);
    let pq = PreparedGmm::new(q);
    let total = match p.dim() {
        1 => {
            let xs = grid.centers(0);
            let mut lp = vec![0.0; xs.len()];
            let mut lq = vec![0.0; xs.len()];
            pp.fill_1d(&xs, &mut lp);
            pq.fill_1d(&xs, &mut lq);
            let terms: Vec<f64> = lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| integrand.eval(*a, *b))
                .collect();
            pairwise_sum(&terms)
        }
        2 => {
            let x0s = grid.centers(0);
            let x1s = grid.centers(1);
            let (first, step) = (x1s[0], grid.step(1));
            let mut dp = vec![0.0; x1s.len()];
            let mut dq = vec![0.0; x1s.len()];
            let rows: Vec<f64> = x0s
                .iter()
                .map(|&x0| {
                    pp.fill_row_2d_density(x0, first, step, &mut dp);
                    pq.fill_row_2d_density(x0, first, step, &mut dq);
                    let mut acc = 0.0;
                    for (j, (&pv, &qv)) in dp.iter().zip(&dq).enumerate() {
                        acc += match integrand {
                            Integrand::Kl if pv < FAST_PATH_SKIP => 0.0,
                            _ if pv < FAST_PATH_MIN || qv < FAST_PATH_MIN => {
                                let x = [x0, x1s[j]];
                                let lp = pp.log_density(&x);
                                if matches!(integrand, Integrand::Kl) && lp < LOG_DENSITY_FLOOR {
                                    0.0
                                } else {
                                    integrand.eval(lp, pq.log_density(&x))
                                }
                            }
                            Integrand::Kl => pv * (pv / qv).ln(),
                            Integrand::Js => js_term(pv.ln(), qv.ln()),
                        };
                    }
                    acc
                })
                .collect();
            pairwise_sum(&rows)
        }
        d => {
            return Err(Error::Unsupported(format!(
                "grid quadrature in {d} dimensions; use the Monte-Carlo estimator"
            )))
        }
    };
    Ok(total * grid.cell_volume())
}

#[inline]
fn kl_term(lp: f64, lq: f64) -> f64 {
    if lp < LOG_DENSITY_FLOOR {
        0.0
    } else {
        lp.exp() * (lp - lq)
    }
}

#[inline]
fn js_term(lp: f64, lq: f64) -> f64 {
    const LN_HALF: f64 = -std::f64::consts::LN_2;
    let hi = lp.max(lq);
    let lm = LN_HALF + hi + ((lp - hi).exp() + (lq - hi).exp()).ln();
    0.5 * (kl_term(lp, lm) + kl_term(lq, lm))
}

/// `KL[p ‖ q]` by midpoint quadrature on `grid` (1-D or 2-D only).
pub fn kl_grid(p: &Gmm, q: &Gmm, grid: &GridSpec) -> Result<f64> {
    integrate_pair(p, q, grid, Integrand::Kl)
}

/// Jensen–Shannon divergence `½KL[p‖m] + ½KL[q‖m]`, `m = ½(p+q)`.
pub fn js_grid(p: &Gmm, q: &Gmm, grid: &GridSpec) -> Result<f64> {
    integrate_pair(p, q, grid, Integrand::Js)
}

/// Divergence between two mixtures on a caller-supplied grid.
pub fn divergence_grid(div: Divergence, model: &Gmm, target: &Gmm, grid: &GridSpec) -> Result<f64> {
    match div {
        Divergence::ReverseKl => kl_grid(model, target, grid),
        Divergence::ForwardKl => kl_grid(target, model, grid),
        Divergence::Js => js_grid(model, target, grid),
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// `KL[p ‖ q] ≈ mean over x ~ p of log p(x) − log q(x)`.
pub fn kl_mc<R: Rng + ?Sized>(p: &Gmm, q: &Gmm, n: usize, rng: &mut R) -> Result<McEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let samples = p.sample(n, rng)?;
    let pp = PreparedGmm::new(p);
    let pq = PreparedGmm::new(q);
    let terms: Vec<f64> = (0..n)
        .map(|j| {
            let x = samples.point(j);
            pp.log_density(x) - pq.log_density(x)
        })
        .collect();
    Ok(mean_and_std_error(&terms))
}

/// Monte-Carlo divergence of either KL direction (JS via the mixture trick).
pub fn divergence_mc<R: Rng + ?Sized>(
    div: Divergence,
    model: &Gmm,
    target: &Gmm,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    match div {
        Divergence::ReverseKl => kl_mc(model, target, n, rng),
        Divergence::ForwardKl => kl_mc(target, model, n, rng),
        Divergence::Js => {
            let pm = PreparedGmm::new(model);
            let pt = PreparedGmm::new(target);
            let half = |a: &Gmm, pa: &PreparedGmm, pb: &PreparedGmm, rng: &mut R| {
                let s = a.sample(n, rng)?;
                let terms: Vec<f64> = (0..n)
                    .map(|j| {
                        let x = s.point(j);
                        let la = pa.log_density(x);
                        let lb = pb.log_density(x);
                        let hi = la.max(lb);
                        let lm = -std::f64::consts::LN_2
                            + hi
                            + ((la - hi).exp() + (lb - hi).exp()).ln();
                        la - lm
                    })
                    .collect();
                Ok::<_, Error>(mean_and_std_error(&terms))
            };
            let a = half(model, &pm, &pt, rng)?;
            let b = half(target, &pt, &pm, rng)?;
            Ok(McEstimate {
                estimate: 0.5 * (a.estimate + b.estimate),
                std_error: 0.5 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
            })
        }
    }
}

pub(crate) fn mean_and_std_error(terms: &[f64]) -> McEstimate {
    let n = terms.len() as f64;
    let mean = pairwise_sum(terms) / n;
    let dev: Vec<f64> = terms.iter().map(|t| (t - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    }
}
