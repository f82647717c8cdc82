//! Task pipelines: the sequence of distribution-level stages that maps the
//! data-space mixture to the distribution a matching task compares.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gmm::{Gmm, IndexSet};

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// `x ↦ a·x`.
    Linear(DMatrix<f64>),
    /// Additive `N(0, v·I)` noise.
    Convolve(f64),
    /// Keep only the listed coordinates.
    Marginalize(IndexSet),
    /// Condition on `x_s`, keeping the `t` coordinates.
    Condition {
        s: IndexSet,
        x_s: Vec<f64>,
        t: IndexSet,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pipeline {
    stages: Vec<Stage>,
}

/// A pipeline without conditioning, collapsed to `y = linear·x + noise` with
/// `noise ~ N(0, noise_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianMap {
    pub linear: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl Pipeline {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn then(mut self, stage: Stage) -> Self {
        self.stages.push(stage);
        self
    }

    pub fn has_conditioning(&self) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(s, Stage::Condition { .. }))
    }

    /// Pushes a mixture through every stage analytically.
    pub fn apply(&self, g: &Gmm) -> Result<Gmm> {
        let mut cur = g.clone();
        for stage in &self.stages {
            cur = match stage {
                Stage::Linear(a) => cur.linear_transform(a)?,
                Stage::Convolve(v) => cur.convolve_gaussian(*v)?,
                Stage::Marginalize(s) => cur.marginalize(s)?,
                Stage::Condition { s, x_s, t } => cur.condition(s, x_s, t)?,
            };
        }
        Ok(cur)
    }

    /// Collapses the stages into one affine-Gaussian map on `dim`-dimensional
    /// inputs. Conditioning stages have mixture weights that depend on the
    /// input distribution and are rejected.
    pub fn compile(&self, dim: usize) -> Result<AffineGaussianMap> {
        let mut linear = DMatrix::<f64>::identity(dim, dim);
        let mut noise = DMatrix::<f64>::zeros(dim, dim);
        for stage in &self.stages {
            let out = linear.nrows();
            match stage {
                Stage::Linear(a) => {
                    if a.ncols() != out {
                        return Err(Error::DimensionMismatch {
                            expected: out,
                            got: a.ncols(),
                        });
                    }
                    linear = a * linear;
                    noise = a * noise * a.transpose();
                }
                Stage::Convolve(v) => {
                    if !(*v >= 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "noise variance must be nonnegative, got {v}"
                        )));
                    }
                    noise += DMatrix::<f64>::identity(out, out) * *v;
                }
                Stage::Marginalize(s) => {
                    if s.is_empty() || s.indices().iter().any(|&i| i >= out) {
                        return Err(Error::InvalidIndexSet(format!(
                            "{:?} invalid for dimension {out}",
                            s.indices()
                        )));
                    }
                    linear = linear.select_rows(s.indices());
                    noise = noise.select_rows(s.indices()).select_columns(s.indices());
                }
                Stage::Condition { .. } => {
                    return Err(Error::Unsupported(
                        "pathwise gradients through conditioning stages".into(),
                    ))
                }
            }
        }
        Ok(AffineGaussianMap {
            linear,
            noise_cov: noise,
        })
    }
}
