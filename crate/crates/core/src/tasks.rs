//! Matching tasks: a (transform, source set S, target set T, divergence)
//! instance asks the model's conditional `p(X_T | X_S)` to match the target's
//! in the transformed domain `X = g(x)`. Empty S means a marginal (or, with
//! T the full index set, joint) matching.
//!
//! [`TaskDistribution`]s hold task templates whose random pieces (orthogonal
//! matrices, marginal coordinates, masks, orderings) are materialized by
//! [`sample_task`].

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_grid, divergence_mc, Divergence, GridSpec};
use crate::error::{Error, Result};
use crate::gmm::{Gmm, IndexSet};
use crate::numeric::{linspace, random_orthogonal, rotation};
use crate::pipeline::{Pipeline, Stage};

/// Data-level transform `X = g(x)`, applied identically to model and target.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// Planar rotation (two dimensions only), radians.
    Rotation(f64),
    /// Haar-random orthogonal matrix generated from the seed.
    Orthogonal(u64),
    /// Convolution with `N(0, v·I)`.
    Noising(f64),
    /// Applied left to right.
    Composite(Vec<Transform>),
}

impl Transform {
    pub fn stages(&self, dim: usize) -> Result<Vec<Stage>> {
        Ok(match self {
            Transform::Identity => Vec::new(),
            Transform::Rotation(angle) => {
                if dim != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "rotations need two dimensions, got {dim}"
                    )));
                }
                vec![Stage::Linear(rotation(*angle))]
            }
            Transform::Orthogonal(seed) => vec![Stage::Linear(orthogonal_from_seed(dim, *seed))],
            Transform::Noising(v) => {
                if !(*v >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "noise variance must be nonnegative, got {v}"
                    )));
                }
                vec![Stage::Convolve(*v)]
            }
            Transform::Composite(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.stages(dim)?);
                }
                out
            }
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Transform::Identity => "identity".into(),
            Transform::Rotation(a) => format!("rotation({:.6}deg)", a.to_degrees()),
            Transform::Orthogonal(seed) => format!("orthogonal({seed})"),
            Transform::Noising(v) => format!("noising({v})"),
            Transform::Composite(parts) => {
                let inner: Vec<String> = parts.iter().map(|p| p.describe()).collect();
                format!("composite[{}]", inner.join(","))
            }
        }
    }
}

/// Orthogonal matrix determined by `seed`.
pub fn orthogonal_from_seed(dim: usize, seed: u64) -> DMatrix<f64> {
    random_orthogonal(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Where conditioning values `x_S` come from when S is nonempty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningPolicy {
    /// `n_cond` draws from the (transformed) target marginal of S.
    FromTargetMarginal { n_cond: usize },
    /// `n_cond` equally spaced values per S-coordinate, endpoints included.
    UniformGrid {
        lower: f64,
        upper: f64,
        n_cond: usize,
    },
    /// One explicit conditioning value.
    Fixed { value: Vec<f64> },
}

impl Default for ConditioningPolicy {
    fn default() -> Self {
        ConditioningPolicy::FromTargetMarginal { n_cond: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingTask {
    pub transform: Transform,
    pub s: IndexSet,
    pub t: IndexSet,
    pub divergence: Divergence,
    pub conditioning: ConditioningPolicy,
}

impl MatchingTask {
    pub fn new(
        transform: Transform,
        s: IndexSet,
        t: IndexSet,
        divergence: Divergence,
    ) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::InvalidIndexSet("target set must be nonempty".into()));
        }
        if !s.is_disjoint(&t) {
            return Err(Error::InvalidIndexSet(format!(
                "source {:?} and target {:?} overlap",
                s.indices(),
                t.indices()
            )));
        }
        Ok(Self {
            transform,
            s,
            t,
            divergence,
            conditioning: ConditioningPolicy::default(),
        })
    }

    pub fn joint(dim: usize) -> Self {
        Self::new(
            Transform::Identity,
            IndexSet::empty(),
            IndexSet::full(dim),
            Divergence::ReverseKl,
        )
        .expect("joint task is valid")
    }

    pub fn with_conditioning(mut self, policy: ConditioningPolicy) -> Self {
        self.conditioning = policy;
        self
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn is_conditional(&self) -> bool {
        !self.s.is_empty()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let max = self.s.indices().iter().chain(self.t.indices()).max().copied();
        match max {
            Some(i) if i >= dim => Err(Error::DimensionMismatch {
                expected: dim,
                got: i + 1,
            }),
            _ => Ok(()),
        }
    }

    /// Pipeline whose output the task compares. Conditional tasks get a
    /// conditioning stage at `x_s`.
    pub fn pipeline(&self, dim: usize, x_s: Option<&[f64]>) -> Result<Pipeline> {
        self.check_dim(dim)?;
        let mut stages = self.transform.stages(dim)?;
        if self.s.is_empty() {
            if self.t.len() != dim {
                stages.push(Stage::Marginalize(self.t.clone()));
            }
        } else {
            let x_s = x_s.ok_or_else(|| {
                Error::InvalidArgument("conditional task needs a conditioning value".into())
            })?;
            stages.push(Stage::Condition {
                s: self.s.clone(),
                x_s: x_s.to_vec(),
                t: self.t.clone(),
            });
        }
        Ok(Pipeline::new(stages))
    }

    /// Conditioning values for this task given the transformed target.
    pub fn conditioning_values(&self, transformed_target: &Gmm, seed: u64) -> Result<Vec<Vec<f64>>> {
        let m = self.s.len();
        match &self.conditioning {
            ConditioningPolicy::FromTargetMarginal { n_cond } => {
                if *n_cond == 0 {
                    return Err(Error::InvalidArgument("n_cond must be positive".into()));
                }
                let marg = transformed_target.marginalize(&self.s)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let draws = marg.sample(*n_cond, &mut rng)?;
                Ok((0..*n_cond).map(|j| draws.point(j).to_vec()).collect())
            }
            ConditioningPolicy::UniformGrid {
                lower,
                upper,
                n_cond,
            } => {
                if *n_cond == 0 || !(lower <= upper) {
                    return Err(Error::InvalidArgument("invalid uniform conditioning grid".into()));
                }
                let axis = linspace(*lower, *upper, *n_cond);
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for _ in 0..m {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |v| {
                                let mut p = prefix.clone();
                                p.push(*v);
                                p
                            })
                        })
                        .collect();
                }
                Ok(out)
            }
            ConditioningPolicy::Fixed { value } => {
                if value.len() != m {
                    return Err(Error::DimensionMismatch {
                        expected: m,
                        got: value.len(),
                    });
                }
                Ok(vec![value.clone()])
            }
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{} S={:?} T={:?} {}",
            self.transform.describe(),
            self.s.indices(),
            self.t.indices(),
            self.divergence.name()
        )
    }
}

/// Quadrature / Monte-Carlo settings for [`task_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    /// Quadrature cells for one-dimensional comparisons.
    pub x_points_1d: usize,
    /// Quadrature cells per axis for two-dimensional comparisons.
    pub x_points_2d: usize,
    /// Samples for comparisons above two dimensions.
    pub mc_samples: usize,
    /// Seed for conditioning draws and Monte-Carlo estimates.
    pub seed: u64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            x_points_1d: 2001,
            x_points_2d: 401,
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

impl EstimatorSettings {
    /// Divergence between two distributions of equal dimension, by grid
    /// quadrature up to two dimensions and Monte Carlo above.
    pub fn divergence(&self, div: Divergence, model: &Gmm, target: &Gmm) -> Result<f64> {
        match model.dim() {
            1 | 2 => {
                let pts = if model.dim() == 1 {
                    self.x_points_1d
                } else {
                    self.x_points_2d
                };
                let grid = GridSpec::covering(&[model, target], pts)?;
                divergence_grid(div, model, target, &grid)
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(divergence_mc(div, model, target, self.mc_samples, &mut rng)?.estimate)
            }
        }
    }
}

/// Loss of `task` for `model` against `target`.
///
/// The transform is applied to both distributions. Empty-S tasks compare the
/// T-marginals; conditional tasks average the divergence between the two
/// conditionals over the policy's conditioning values, estimating
/// `E_{x_S} D[p(X_T | x_S), q(X_T | x_S)]`.
pub fn task_loss(
    task: &MatchingTask,
    model: &Gmm,
    target: &Gmm,
    settings: &EstimatorSettings,
) -> Result<f64> {
    if model.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: model.dim(),
        });
    }
    let dim = model.dim();
    task.check_dim(dim)?;
    let transform = Pipeline::new(task.transform.stages(dim)?);
    let pm = transform.apply(model)?;
    let pt = transform.apply(target)?;
    if task.s.is_empty() {
        let (pm, pt) = if task.t.len() == dim {
            (pm, pt)
        } else {
            (pm.marginalize(&task.t)?, pt.marginalize(&task.t)?)
        };
        return settings.divergence(task.divergence, &pm, &pt);
    }
    let values = task.conditioning_values(&pt, settings.seed)?;
    let mut total = 0.0;
    for x_s in &values {
        let cm = pm.condition(&task.s, x_s, &task.t)?;
        let ct = pt.condition(&task.s, x_s, &task.t)?;
        total += settings.divergence(task.divergence, &cm, &ct)?;
    }
    Ok(total / values.len() as f64)
}

/// How a template picks its transform.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformTemplate {
    Fixed(Transform),
    /// A fresh Haar-random orthogonal matrix per sampled task, optionally
    /// followed by fixed further transforms.
    RandomOrthogonal(Vec<Transform>),
}

/// Law of a mask ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioLaw {
    Fixed { value: f64 },
    Beta { a: f64, b: f64 },
}

impl RatioLaw {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            RatioLaw::Fixed { value } => Ok(value),
            RatioLaw::Beta { a, b } => Ok(Beta::new(a, b)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?
                .sample(rng)),
        }
    }
}

/// How a template picks its (S, T) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum SetTemplate {
    Fixed { s: IndexSet, t: IndexSet },
    /// S empty, T one uniformly chosen coordinate.
    RandomCoordinateMarginal,
    /// `|S| = ⌊r_s·D⌋` (at most D−1) random coordinates; T takes
    /// `⌈r_t·|S∁|⌉` (at least one) of the rest.
    MaskAndPredict { source: RatioLaw, target: RatioLaw },
    /// Random ordering `z` and uniform cut `c`: S = z<c, T = {z_c}.
    Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTemplate {
    /// Family label used for bookkeeping (task counters, running losses).
    pub family: String,
    pub transform: TransformTemplate,
    pub sets: SetTemplate,
    pub divergence: Divergence,
    pub conditioning: ConditioningPolicy,
}

impl TaskTemplate {
    pub fn fixed(family: &str, task: MatchingTask) -> Self {
        Self {
            family: family.to_string(),
            transform: TransformTemplate::Fixed(task.transform),
            sets: SetTemplate::Fixed {
                s: task.s,
                t: task.t,
            },
            divergence: task.divergence,
            conditioning: task.conditioning,
        }
    }

    pub fn joint(dim: usize) -> Self {
        Self::fixed("joint", MatchingTask::joint(dim))
    }

    /// Random-orthogonal transform followed by a random single-coordinate
    /// marginal.
    pub fn orthogonal_marginal() -> Self {
        Self {
            family: "marginal".into(),
            transform: TransformTemplate::RandomOrthogonal(Vec::new()),
            sets: SetTemplate::RandomCoordinateMarginal,
            divergence: Divergence::ReverseKl,
            conditioning: ConditioningPolicy::default(),
        }
    }

    /// Whether every task this template can produce has an empty S.
    pub fn is_unconditional(&self) -> bool {
        match &self.sets {
            SetTemplate::Fixed { s, .. } => s.is_empty(),
            SetTemplate::RandomCoordinateMarginal => true,
            SetTemplate::MaskAndPredict { .. } | SetTemplate::Permutation => false,
        }
    }

    pub fn materialize<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<MatchingTask> {
        let transform = match &self.transform {
            TransformTemplate::Fixed(t) => t.clone(),
            TransformTemplate::RandomOrthogonal(rest) => {
                let o = Transform::Orthogonal(rng.random::<u64>());
                if rest.is_empty() {
                    o
                } else {
                    let mut parts = vec![o];
                    parts.extend(rest.iter().cloned());
                    Transform::Composite(parts)
                }
            }
        };
        let (s, t) = match &self.sets {
            SetTemplate::Fixed { s, t } => (s.clone(), t.clone()),
            SetTemplate::RandomCoordinateMarginal => {
                (IndexSet::empty(), IndexSet::singleton(rng.random_range(0..dim)))
            }
            SetTemplate::MaskAndPredict { source, target } => {
                let mut order: Vec<usize> = (0..dim).collect();
                order.shuffle(rng);
                let r_s = source.sample(rng)?.clamp(0.0, 1.0);
                let n_s = ((r_s * dim as f64).floor() as usize).min(dim - 1);
                let rest = dim - n_s;
                let r_t = target.sample(rng)?.clamp(0.0, 1.0);
                let n_t = ((r_t * rest as f64).ceil() as usize).clamp(1, rest);
                (
                    IndexSet::from_unsorted(order[..n_s].to_vec(), dim)?,
                    IndexSet::from_unsorted(order[n_s..n_s + n_t].to_vec(), dim)?,
                )
            }
            SetTemplate::Permutation => {
                let mut order: Vec<usize> = (0..dim).collect();
                order.shuffle(rng);
                let cut = rng.random_range(0..dim);
                (
                    IndexSet::from_unsorted(order[..cut].to_vec(), dim)?,
                    IndexSet::singleton(order[cut]),
                )
            }
        };
        Ok(MatchingTask::new(transform, s, t, self.divergence)?
            .with_conditioning(self.conditioning.clone()))
    }
}

/// Sampling law over task templates (the `q(S, T)` of a training phase).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    pub entries: Vec<(TaskTemplate, f64)>,
    pub phase: String,
}

impl TaskDistribution {
    pub fn new(entries: Vec<(TaskTemplate, f64)>, phase: &str) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("task distribution is empty".into()));
        }
        if entries.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("task probabilities must be nonnegative".into()));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "task probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            entries,
            phase: phase.to_string(),
        })
    }

    pub fn single(template: TaskTemplate, phase: &str) -> Self {
        Self::new(vec![(template, 1.0)], phase).expect("single entry is valid")
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &TaskTemplate {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (t, p) in &self.entries {
            acc += p;
            if u < acc {
                return t;
            }
        }
        &self
            .entries
            .iter()
            .rev()
            .find(|(_, p)| *p > 0.0)
            .expect("some entry has positive probability")
            .0
    }
}

/// Draws a template by probability and materializes its random pieces.
pub fn sample_task<R: Rng + ?Sized>(
    dist: &TaskDistribution,
    dim: usize,
    rng: &mut R,
) -> Result<(String, MatchingTask)> {
    let template = dist.pick(rng);
    let task = template.materialize(dim, rng)?;
    Ok((template.family.clone(), task))
}

/// Named task-distribution presets modelled on common foundation-model
/// objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    MaskAndPredict,
    NextToken,
    Permutation,
    Joint,
    MarginalSweep,
    NoisingLadder,
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mask_and_predict" => PresetName::MaskAndPredict,
            "next_token" => PresetName::NextToken,
            "permutation" => PresetName::Permutation,
            "joint" => PresetName::Joint,
            "marginal_sweep" => PresetName::MarginalSweep,
            "noising_ladder" => PresetName::NoisingLadder,
            other => return Err(Error::InvalidArgument(format!("unknown preset '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetParams {
    pub dim: usize,
    pub noise_vars: Vec<f64>,
    pub source_ratio: RatioLaw,
    pub target_ratio: RatioLaw,
}

impl PresetParams {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            noise_vars: Vec::new(),
            source_ratio: RatioLaw::Beta { a: 0.5, b: 3.0 },
            target_ratio: RatioLaw::Beta { a: 3.0, b: 0.5 },
        }
    }
}

pub fn preset(name: PresetName, params: &PresetParams) -> Result<TaskDistribution> {
    let dim = params.dim;
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let phase = format!("{name:?}");
    match name {
        PresetName::Joint => Ok(TaskDistribution::single(TaskTemplate::joint(dim), &phase)),
        PresetName::MarginalSweep => Ok(TaskDistribution::single(
            TaskTemplate::orthogonal_marginal(),
            &phase,
        )),
        PresetName::NextToken => {
            let p = 1.0 / dim as f64;
            let entries = (0..dim)
                .map(|t| {
                    let task = MatchingTask::new(
                        Transform::Identity,
                        IndexSet::new((0..t).collect(), dim)?,
                        IndexSet::singleton(t),
                        Divergence::ReverseKl,
                    )?;
                    Ok((TaskTemplate::fixed("next_token", task), p))
                })
                .collect::<Result<Vec<_>>>()?;
            TaskDistribution::new(entries, &phase)
        }
        PresetName::Permutation => Ok(TaskDistribution::single(
            TaskTemplate {
                family: "permutation".into(),
                transform: TransformTemplate::Fixed(Transform::Identity),
                sets: SetTemplate::Permutation,
                divergence: Divergence::ReverseKl,
                conditioning: ConditioningPolicy::default(),
            },
            &phase,
        )),
        PresetName::MaskAndPredict => Ok(TaskDistribution::single(
            TaskTemplate {
                family: "mask_and_predict".into(),
                transform: TransformTemplate::Fixed(Transform::Identity),
                sets: SetTemplate::MaskAndPredict {
                    source: params.source_ratio,
                    target: params.target_ratio,
                },
                divergence: Divergence::ReverseKl,
                conditioning: ConditioningPolicy::default(),
            },
            &phase,
        )),
        PresetName::NoisingLadder => {
            if params.noise_vars.is_empty() {
                return Err(Error::InvalidArgument("noising ladder needs variances".into()));
            }
            let p = 1.0 / params.noise_vars.len() as f64;
            let entries = params
                .noise_vars
                .iter()
                .map(|&v| {
                    let task = MatchingTask::joint(dim).with_transform(Transform::Noising(v));
                    Ok((TaskTemplate::fixed("noised_joint", task), p))
                })
                .collect::<Result<Vec<_>>>()?;
            TaskDistribution::new(entries, &phase)
        }
    }
}
