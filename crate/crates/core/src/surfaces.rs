//! Loss surfaces over the two means of the tailored two-component model
//! `½N((μ₁,0), σ²I) + ½N((μ₂,0), σ²I)`, local-minimum scans, and CSV I/O.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::numeric::{fmt_f64, linspace};
use crate::tasks::{task_loss, EstimatorSettings, MatchingTask, Transform};

/// Loss within this distance of the grid minimum counts as global.
pub const GLOBAL_TOL: f64 = 1e-6;

pub fn tailored_model(mu1: f64, mu2: f64, sigma2: f64) -> Result<Gmm> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument("sigma2 must be positive".into()));
    }
    Gmm::isotropic(
        vec![DVector::from_vec(vec![mu1, 0.0]), DVector::from_vec(vec![mu2, 0.0])],
        sigma2,
    )
}

/// Inclusive square θ grid: `points` values from `lower` to `upper` on both
/// axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Default for ThetaGrid {
    fn default() -> Self {
        Self {
            lower: -3.0,
            upper: 3.0,
            points: 151,
        }
    }
}

impl ThetaGrid {
    pub fn axis(&self) -> Vec<f64> {
        linspace(self.lower, self.upper, self.points)
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }
}

/// What a surface point evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceTask {
    Single(MatchingTask),
    /// Mean of the base task over rotations applied before its own
    /// transform; conditioning values come from the base task's policy.
    RotationFamily {
        base: MatchingTask,
        angles: Vec<f64>,
    },
}

impl SurfaceTask {
    /// `n` equally spaced angles `kπ/n`.
    pub fn uniform_angles(n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| k as f64 * std::f64::consts::PI / n as f64)
            .collect()
    }

    fn tasks(&self) -> Vec<MatchingTask> {
        match self {
            SurfaceTask::Single(t) => vec![t.clone()],
            SurfaceTask::RotationFamily { base, angles } => angles
                .iter()
                .map(|&a| {
                    let transform = match &base.transform {
                        Transform::Identity => Transform::Rotation(a),
                        other => Transform::Composite(vec![Transform::Rotation(a), other.clone()]),
                    };
                    base.clone().with_transform(transform)
                })
                .collect(),
        }
    }

    fn with_noise(&self, v: f64) -> SurfaceTask {
        let add = |t: &MatchingTask| {
            let transform = match &t.transform {
                Transform::Identity => Transform::Noising(v),
                other => Transform::Composite(vec![other.clone(), Transform::Noising(v)]),
            };
            t.clone().with_transform(transform)
        };
        match self {
            SurfaceTask::Single(t) => SurfaceTask::Single(add(t)),
            SurfaceTask::RotationFamily { base, angles } => SurfaceTask::RotationFamily {
                base: add(base),
                angles: angles.clone(),
            },
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SurfaceTask::Single(t) => t.describe(),
            SurfaceTask::RotationFamily { base, angles } => {
                format!("mean over {} rotations of [{}]", angles.len(), base.describe())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSpec {
    pub theta: ThetaGrid,
    pub sigma2: f64,
    pub target: Gmm,
    pub task: SurfaceTask,
    pub settings: EstimatorSettings,
}

impl SurfaceSpec {
    /// Target `½N((−1,0), σ²I) + ½N((1,0), σ²I)` with default grids.
    pub fn tailored(sigma2: f64, task: SurfaceTask) -> Result<Self> {
        Ok(Self {
            theta: ThetaGrid::default(),
            sigma2,
            target: tailored_model(-1.0, 1.0, sigma2)?,
            task,
            settings: EstimatorSettings::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.points < 3 || !(self.theta.lower < self.theta.upper) {
            return Err(Error::InvalidArgument("theta grid needs ≥ 3 points and lower < upper".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidArgument("sigma2 must be positive".into()));
        }
        if self.target.dim() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: self.target.dim(),
            });
        }
        if let SurfaceTask::RotationFamily { angles, .. } = &self.task {
            if angles.is_empty() {
                return Err(Error::InvalidArgument("rotation family is empty".into()));
            }
        }
        Ok(())
    }

    fn loss_at(&self, tasks: &[MatchingTask], mu1: f64, mu2: f64) -> Result<f64> {
        let model = tailored_model(mu1, mu2, self.sigma2)?;
        let mut total = 0.0;
        for t in tasks {
            total += task_loss(t, &model, &self.target, &self.settings)?;
        }
        Ok(total / tasks.len() as f64)
    }
}

/// A point whose loss could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCell {
    pub row: usize,
    pub col: usize,
    pub mu1: f64,
    pub mu2: f64,
    pub message: String,
}

/// Loss matrix with `values[i][j]` at `(μ₁, μ₂) = (axis[i], axis[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub metadata: Vec<(String, String)>,
    pub errors: Vec<ErrorCell>,
}

/// Evaluates the spec at every θ grid point. The tailored model is the same
/// distribution under `μ₁ ↔ μ₂`, so only points with `j ≥ i` are computed
/// and the matrix is mirrored. Points are independent and filled in index
/// order, so the result does not depend on the thread count. Failed or
/// non-finite points are stored as NaN and listed in `errors`.
pub fn sweep(spec: &SurfaceSpec) -> Result<SurfaceGrid> {
    spec.validate()?;
    let axis = spec.theta.axis();
    let n = axis.len();
    let tasks = spec.task.tasks();
    let rows: Vec<Vec<std::result::Result<f64, String>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| match spec.loss_at(&tasks, axis[i], axis[j]) {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(v) => Err(format!("non-finite loss {v}")),
                    Err(e) => Err(e.to_string()),
                })
                .collect()
        })
        .collect();
    let mut values = vec![vec![0.0; n]; n];
    let mut errors = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let cell = if j >= i { &rows[i][j - i] } else { &rows[j][i - j] };
            match cell {
                Ok(v) => values[i][j] = *v,
                Err(message) => {
                    values[i][j] = f64::NAN;
                    errors.push(ErrorCell {
                        row: i,
                        col: j,
                        mu1: axis[i],
                        mu2: axis[j],
                        message: message.clone(),
                    });
                }
            }
        }
    }
    let metadata = vec![
        ("task".to_string(), spec.task.describe()),
        ("sigma2".to_string(), fmt_f64(spec.sigma2)),
        ("x_points_1d".to_string(), spec.settings.x_points_1d.to_string()),
        ("x_points_2d".to_string(), spec.settings.x_points_2d.to_string()),
        ("mc_samples".to_string(), spec.settings.mc_samples.to_string()),
        ("seed".to_string(), spec.settings.seed.to_string()),
    ];
    Ok(SurfaceGrid {
        axis,
        values,
        metadata,
        errors,
    })
}

/// One sweep per variance, with model and target both convolved by it.
/// Variance 0 reproduces the base sweep exactly.
pub fn noising_ladder_sweep(base: &SurfaceSpec, variances: &[f64]) -> Result<Vec<SurfaceGrid>> {
    if variances.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("noise variances must be nonnegative".into()));
    }
    if variances.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("noise variances must be ascending".into()));
    }
    variances
        .iter()
        .map(|&v| {
            let mut spec = base.clone();
            if v > 0.0 {
                spec.task = base.task.with_noise(v);
            }
            let mut grid = sweep(&spec)?;
            grid.metadata.push(("noise_var".to_string(), fmt_f64(v)));
            Ok(grid)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMinimum {
    pub row: usize,
    pub col: usize,
    pub mu1: f64,
    pub mu2: f64,
    pub loss: f64,
    pub is_global: bool,
}

impl SurfaceGrid {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the axis value nearest `v`.
    pub fn nearest(&self, v: f64) -> usize {
        let mut best = 0;
        for (i, a) in self.axis.iter().enumerate() {
            if (a - v).abs() < (self.axis[best] - v).abs() {
                best = i;
            }
        }
        best
    }

    pub fn value_at(&self, mu1: f64, mu2: f64) -> f64 {
        self.values[self.nearest(mu1)][self.nearest(mu2)]
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Interior points strictly below all eight neighbours; global when
    /// within `global_tol` of the grid minimum.
    pub fn find_local_minima(&self, global_tol: f64) -> Result<Vec<LocalMinimum>> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument("surface has error cells".into()));
        }
        let n = self.axis.len();
        let min = self.min();
        let mut out = Vec::new();
        for i in 1..n.saturating_sub(1) {
            for j in 1..n - 1 {
                let v = self.values[i][j];
                let lower = (i - 1..=i + 1)
                    .flat_map(|a| (j - 1..=j + 1).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (i, j))
                    .all(|(a, b)| v < self.values[a][b]);
                if lower {
                    out.push(LocalMinimum {
                        row: i,
                        col: j,
                        mu1: self.axis[i],
                        mu2: self.axis[j],
                        loss: v,
                        is_global: v <= min + global_tol,
                    });
                }
            }
        }
        Ok(out)
    }

    /// `#`-prefixed metadata lines, a header row of μ₂ values, then one row
    /// per μ₁ value. NaN marks error cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}").expect("writing to a string");
        }
        out.push_str("mu1\\mu2");
        for a in &self.axis {
            out.push(',');
            out.push_str(&fmt_f64(*a));
        }
        out.push('\n');
        for (a, row) in self.axis.iter().zip(&self.values) {
            out.push_str(&fmt_f64(*a));
            for v in row {
                out.push(',');
                if v.is_nan() {
                    out.push_str("nan");
                } else {
                    out.push_str(&fmt_f64(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut metadata = Vec::new();
        let mut axis: Option<Vec<f64>> = None;
        let mut values = Vec::new();
        let mut errors = Vec::new();
        let num = |s: &str, line: usize| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {line}: bad number '{s}'")))
        };
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("line {line_no}: bad metadata")))?;
                metadata.push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let first = fields.next().unwrap_or_default();
            match &axis {
                None => {
                    if first != "mu1\\mu2" {
                        return Err(Error::Parse(format!("line {line_no}: missing header")));
                    }
                    axis = Some(fields.map(|f| num(f, line_no)).collect::<Result<_>>()?);
                }
                Some(ax) => {
                    let i = values.len();
                    let mu1 = num(first, line_no)?;
                    let row: Vec<f64> = fields.map(|f| num(f, line_no)).collect::<Result<_>>()?;
                    if row.len() != ax.len() || i >= ax.len() {
                        return Err(Error::Parse(format!("line {line_no}: row shape mismatch")));
                    }
                    for (j, v) in row.iter().enumerate().filter(|(_, v)| v.is_nan()) {
                        let _ = v;
                        errors.push(ErrorCell {
                            row: i,
                            col: j,
                            mu1,
                            mu2: ax[j],
                            message: "error cell".into(),
                        });
                    }
                    values.push(row);
                }
            }
        }
        let axis = axis.ok_or_else(|| Error::Parse("no header row".into()))?;
        if values.len() != axis.len() {
            return Err(Error::Parse(format!(
                "{} rows for {} axis values",
                values.len(),
                axis.len()
            )));
        }
        Ok(Self {
            axis,
            values,
            metadata,
            errors,
        })
    }
}
