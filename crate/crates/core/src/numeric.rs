//! Small numeric helpers shared across modules.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Formats a float with 17 significant digits (round-trips any finite f64).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `log Σ exp(v)`, stable for any finite input; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Counter-clockwise planar rotation by `angle` radians.
pub fn rotation(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Haar-distributed orthogonal matrix: QR of a standard-normal matrix with the
/// signs of `R`'s diagonal folded into `Q`. In two dimensions this is a
/// rotation by a uniform angle.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    if dim == 2 {
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        return rotation(angle);
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Sum in a fixed pairwise tree shape, independent of any thread schedule.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `n` equally spaced points from `lower` to `upper` inclusive.
pub fn linspace(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lower];
    }
    let step = (upper - lower) / (n - 1) as f64;
    (0..n).map(|i| lower + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_matrices_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in 2..5 {
            let q = random_orthogonal(dim, &mut rng);
            let err = (q.transpose() * &q - DMatrix::identity(dim, dim)).abs().max();
            assert!(err < 1e-12);
            assert!((q.determinant().abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn linspace_hits_endpoints() {
        let v = linspace(-3.0, 3.0, 151);
        assert_eq!(v[0], -3.0);
        assert!((v[150] - 3.0).abs() < 1e-15);
        assert!((v[50] + 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softplus_round_trip(y in 1e-6f64..50.0) {
            let back = softplus(softplus_inv(y));
            prop_assert!((back - y).abs() <= 1e-12 * y.max(1.0));
        }

        #[test]
        fn fmt_round_trips(x in proptest::num::f64::NORMAL) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
