//! Precomputed log-density evaluation for hot loops (quadrature grids,
//! Monte-Carlo batches, gradient estimation).

use nalgebra::DMatrix;

use crate::gmm::Gmm;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A [`Gmm`] with inverted scale factors and log-normalizers cached.
#[derive(Debug, Clone)]
pub struct PreparedGmm {
    dim: usize,
    k: usize,
    /// `k × dim`, row-major.
    means: Vec<f64>,
    /// Inverse of each scale factor, `k × dim × dim`, row-major, lower-triangular.
    inv_scales: Vec<f64>,
    /// `log wₖ − log det Lₖ − dim/2·log 2π`.
    log_coef: Vec<f64>,
}

impl PreparedGmm {
    pub fn new(g: &Gmm) -> Self {
        let dim = g.dim();
        let k = g.n_components();
        let mut means = Vec::with_capacity(k * dim);
        let mut inv_scales = Vec::with_capacity(k * dim * dim);
        let mut log_coef = Vec::with_capacity(k);
        for i in 0..k {
            means.extend(g.means()[i].iter());
            let l = &g.scales()[i];
            let inv = l
                .solve_lower_triangular(&DMatrix::identity(dim, dim))
                .expect("scale factors have a positive diagonal");
            for r in 0..dim {
                for c in 0..dim {
                    inv_scales.push(if c <= r { inv[(r, c)] } else { 0.0 });
                }
            }
            let log_det: f64 = (0..dim).map(|r| l[(r, r)].ln()).sum();
            log_coef.push(g.weights()[i].ln() - log_det - 0.5 * dim as f64 * LN_2PI);
        }
        Self {
            dim,
            k,
            means,
            inv_scales,
            log_coef,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    /// Weighted component log-density `log wₖ + log N(x | μₖ, Σₖ)`; writes the
    /// whitened residual `Lₖ⁻¹(x − μₖ)` into `z`.
    #[inline]
    fn component_term(&self, k: usize, x: &[f64], z: &mut [f64]) -> f64 {
        let d = self.dim;
        let mean = &self.means[k * d..(k + 1) * d];
        let inv = &self.inv_scales[k * d * d..(k + 1) * d * d];
        let mut quad = 0.0;
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += inv[r * d + c] * (x[c] - mean[c]);
            }
            z[r] = acc;
            quad += acc * acc;
        }
        self.log_coef[k] - 0.5 * quad
    }

    /// Log density at `x`; `x.len()` must equal the dimension.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut z = [0.0; 8];
        let mut zv;
        let z: &mut [f64] = if self.dim <= 8 {
            &mut z[..self.dim]
        } else {
            zv = vec![0.0; self.dim];
            &mut zv
        };
        let mut acc = OnlineLse::new();
        for k in 0..self.k {
            acc.push(self.component_term(k, x, z));
        }
        acc.value()
    }

    /// Log density at `x` and its gradient with respect to `x`.
    pub fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut terms = vec![0.0; self.k];
        let mut zs = vec![0.0; self.k * d];
        for k in 0..self.k {
            terms[k] = self.component_term(k, x, &mut zs[k * d..(k + 1) * d]);
        }
        let lse = crate::numeric::log_sum_exp(&terms);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..self.k {
            let r = (terms[k] - lse).exp();
            if r == 0.0 {
                continue;
            }
            // ∇ log N = −L⁻ᵀ z
            let inv = &self.inv_scales[k * d * d..(k + 1) * d * d];
            let z = &zs[k * d..(k + 1) * d];
            for c in 0..d {
                let mut acc = 0.0;
                for row in c..d {
                    acc += inv[row * d + c] * z[row];
                }
                grad[c] -= r * acc;
            }
        }
        lse
    }

    /// Log densities along a 1-D grid.
    pub fn fill_1d(&self, xs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.dim, 1);
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            let mut acc = OnlineLse::new();
            for k in 0..self.k {
                let z = self.inv_scales[k] * (x - self.means[k]);
                acc.push(self.log_coef[k] - 0.5 * z * z);
            }
            *o = acc.value();
        }
    }

    /// Log densities along the grid row `{(x0, x1) : x1 ∈ x1s}` of a 2-D grid.
    pub fn fill_row_2d(&self, x0: f64, x1s: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.dim, 2);
        // Per component: z0 is constant on the row, z1 = offset + slope·x1.
        let mut base = [0.0; 64];
        let mut offset = [0.0; 64];
        let mut slope = [0.0; 64];
        let (mut bv, mut ov, mut sv);
        let (base, offset, slope): (&mut [f64], &mut [f64], &mut [f64]) = if self.k <= 64 {
            (&mut base[..self.k], &mut offset[..self.k], &mut slope[..self.k])
        } else {
            bv = vec![0.0; self.k];
            ov = vec![0.0; self.k];
            sv = vec![0.0; self.k];
            (&mut bv, &mut ov, &mut sv)
        };
        for k in 0..self.k {
            let m0 = self.means[2 * k];
            let m1 = self.means[2 * k + 1];
            let inv = &self.inv_scales[4 * k..4 * k + 4];
            let z0 = inv[0] * (x0 - m0);
            base[k] = self.log_coef[k] - 0.5 * z0 * z0;
            offset[k] = inv[2] * (x0 - m0) - inv[3] * m1;
            slope[k] = inv[3];
        }
        for (x1, o) in x1s.iter().zip(out.iter_mut()) {
            let mut acc = OnlineLse::new();
            for k in 0..self.k {
                let z1 = offset[k] + slope[k] * x1;
                acc.push(base[k] - 0.5 * z1 * z1);
            }
            *o = acc.value();
        }
    }
}

impl PreparedGmm {
    /// Densities (not logs) along the row `x1 = first + j·step`,
    /// `j < out.len()`, of a 2-D grid.
    ///
    /// Along the row each component's exponent is quadratic in `j`, so
    /// consecutive values differ by a ratio that itself changes by the
    /// constant factor `exp(−B²)`. Each component is walked outward from its
    /// peak with two multiplications per cell; terms far enough out to
    /// underflow come back as 0 and are left to the caller's exact fallback.
    pub fn fill_row_2d_density(&self, x0: f64, first: f64, step: f64, out: &mut [f64]) {
        debug_assert_eq!(self.dim, 2);
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = out.len();
        if n == 0 {
            return;
        }
        for k in 0..self.k {
            let m0 = self.means[2 * k];
            let m1 = self.means[2 * k + 1];
            let inv = &self.inv_scales[4 * k..4 * k + 4];
            let z0 = inv[0] * (x0 - m0);
            let base = self.log_coef[k] - 0.5 * z0 * z0;
            // z1(j) = a + b·j
            let a = inv[2] * (x0 - m0) + inv[3] * (first - m1);
            let b = inv[3] * step;
            let peak = (-a / b).round().clamp(0.0, (n - 1) as f64) as usize;
            let u = a + b * peak as f64;
            let top = (base - 0.5 * u * u).exp();
            if top == 0.0 {
                continue;
            }
            let decay = (-b * b).exp();
            out[peak] += top;
            let mut v = top;
            let mut ratio = (-u * b - 0.5 * b * b).exp();
            for o in out[peak + 1..].iter_mut() {
                v *= ratio;
                if v == 0.0 {
                    break;
                }
                *o += v;
                ratio *= decay;
            }
            let mut v = top;
            let mut ratio = (u * b - 0.5 * b * b).exp();
            for o in out[..peak].iter_mut().rev() {
                v *= ratio;
                if v == 0.0 {
                    break;
                }
                *o += v;
                ratio *= decay;
            }
        }
    }
}

/// Streaming log-sum-exp: one `exp` per pushed term after the first.
#[derive(Debug, Clone, Copy)]
struct OnlineLse {
    max: f64,
    sum: f64,
}

impl OnlineLse {
    #[inline]
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else if self.max == f64::NEG_INFINITY {
            self.max = v;
            self.sum = 1.0;
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    #[inline]
    fn value(self) -> f64 {
        self.max + self.sum.ln()
    }
}
