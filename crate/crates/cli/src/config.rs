//! Run configuration files: TOML with exactly one command section.
//!
//! ```toml
//! seed = 0
//!
//! [surface]
//! sigma2 = 0.1
//!
//! [surface.tasks.joint]
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use biglearn_core::divergence::Divergence;
use biglearn_core::gmm::{Gmm, GmmRecord, IndexSet};
use biglearn_core::surfaces::{SurfaceSpec, SurfaceTask, ThetaGrid};
use biglearn_core::tasks::{
    preset, ConditioningPolicy, EstimatorSettings, MatchingTask, PresetName, PresetParams,
    TaskDistribution, TaskTemplate, Transform, TransformTemplate,
};
use biglearn_core::trainer::{lattice_target, InitSpec, Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Surface,
    Train,
    Eval,
}

impl Command {
    pub fn section(self) -> &'static str {
        match self {
            Command::Surface => "surface",
            Command::Train => "train",
            Command::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Default for ThetaSection {
    fn default() -> Self {
        let g = ThetaGrid::default();
        Self {
            lower: g.lower,
            upper: g.upper,
            points: g.points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub x_points_1d: usize,
    pub x_points_2d: usize,
    pub mc_samples: usize,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let e = EstimatorSettings::default();
        Self {
            x_points_1d: e.x_points_1d,
            x_points_2d: e.x_points_2d,
            mc_samples: e.mc_samples,
        }
    }
}

impl EstimatorSection {
    fn settings(&self, seed: u64) -> EstimatorSettings {
        EstimatorSettings {
            x_points_1d: self.x_points_1d,
            x_points_2d: self.x_points_2d,
            mc_samples: self.mc_samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSection {
    pub sigma2: f64,
    #[serde(default)]
    pub theta: ThetaSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    /// One surface per variance for every task; empty means a single
    /// un-noised surface.
    #[serde(default)]
    pub noise_vars: Vec<f64>,
    pub tasks: BTreeMap<String, SurfaceTaskSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceTaskSection {
    #[serde(default)]
    pub s: Vec<usize>,
    /// Defaults to every coordinate outside `s`.
    #[serde(default)]
    pub t: Vec<usize>,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default = "reverse_kl")]
    pub divergence: Divergence,
    #[serde(default)]
    pub conditioning: ConditioningPolicy,
    /// Average over `n` equally spaced rotations `kπ/n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_uniform_rotations: Option<usize>,
    /// Average over these rotations (degrees).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_rotations_deg: Option<Vec<f64>>,
}

fn reverse_kl() -> Divergence {
    Divergence::ReverseKl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `n × n` equal-weight isotropic lattice centred at the origin.
    Lattice {
        n: usize,
        spacing: f64,
        variance: f64,
    },
    Gmm {
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        scales: Vec<Vec<f64>>,
    },
}

impl TargetSpec {
    pub fn build(&self) -> Result<Gmm, String> {
        match self {
            TargetSpec::Lattice {
                n,
                spacing,
                variance,
            } => lattice_target(*n, *spacing, *variance).map_err(|e| e.to_string()),
            TargetSpec::Gmm {
                dim,
                weights,
                means,
                scales,
            } => GmmRecord {
                dim: *dim,
                weights: weights.clone(),
                means: means.clone(),
                scales: scales.clone(),
            }
            .into_gmm()
            .map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub k: usize,
    pub mean_center: f64,
    pub mean_var: f64,
    pub scale_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTaskKind {
    Joint,
    Marginal,
    OrthogonalMarginal,
    Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTask {
    pub kind: PhaseTaskKind,
    pub prob: f64,
    /// Marginal coordinates for `marginal`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<usize>,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub noise_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetName>,
    /// Variances for the `noising_ladder` preset.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_vars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub name: String,
    pub start: usize,
    pub tasks: Vec<PhaseTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub n_samples: usize,
    pub total_iters: usize,
    #[serde(default = "one")]
    pub inner_steps: usize,
    #[serde(default = "hundred")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub snapshot_at: Vec<usize>,
    /// Omit to disable clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default = "half")]
    pub coverage_radius: f64,
    /// Quadrature cells per axis for the final joint KL.
    #[serde(default = "x_points_2d")]
    pub eval_x_points_2d: usize,
    pub target: TargetSpec,
    pub init: InitSection,
    pub phases: Vec<PhaseSection>,
}

fn one() -> usize {
    1
}

fn hundred() -> usize {
    100
}

fn half() -> f64 {
    0.5
}

fn x_points_2d() -> usize {
    EstimatorSettings::default().x_points_2d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Trajectory file; relative paths resolve against the config's
    /// directory and are echoed absolute.
    pub trajectory: PathBuf,
    #[serde(default = "x_points_2d")]
    pub x_points_2d: usize,
    #[serde(default = "half")]
    pub coverage_radius: f64,
    pub target: TargetSpec,
}

/// 1-based line of the first occurrence of `needle`, for error messages.
fn line_of(text: &str, needle: &str) -> usize {
    text.lines()
        .position(|l| l.contains(needle))
        .map_or(1, |i| i + 1)
}

impl RunConfig {
    /// Parses and checks that exactly the `expected` command section exists.
    pub fn parse(text: &str, expected: Command) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            match line {
                Some(l) => CliError::Config(format!("line {l}: {}", e.message())),
                None => CliError::Config(e.message().to_string()),
            }
        })?;
        let present: Vec<&str> = [
            ("surface", cfg.surface.is_some()),
            ("train", cfg.train.is_some()),
            ("eval", cfg.eval.is_some()),
        ]
        .iter()
        .filter(|(_, p)| *p)
        .map(|(n, _)| *n)
        .collect();
        if present != [expected.section()] {
            return Err(CliError::Config(format!(
                "line 1: expected exactly one [{}] section, found {:?}",
                expected.section(),
                present
            )));
        }
        cfg.validate(text)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str) -> Result<(), CliError> {
        let err = |needle: &str, msg: String| {
            CliError::Config(format!("line {}: {msg}", line_of(text, needle)))
        };
        if let Some(s) = &self.surface {
            if s.tasks.is_empty() {
                return Err(err("[surface", "no surface tasks".into()));
            }
            for (name, t) in &s.tasks {
                t.to_surface_task(2)
                    .map_err(|m| err(&format!("tasks.{name}]"), format!("task '{name}': {m}")))?;
            }
            if s.noise_vars.iter().any(|v| !(*v >= 0.0)) || s.noise_vars.windows(2).any(|w| w[0] > w[1]) {
                return Err(err("noise_vars", "noise_vars must be nonnegative and ascending".into()));
            }
            self.surface_specs()
                .map_err(|m| err("[surface", m))?
                .iter()
                .try_for_each(|(_, spec)| spec.validate())
                .map_err(|e| err("[surface", e.to_string()))?;
        }
        if let Some(t) = &self.train {
            let target = t.target.build().map_err(|m| err("target", m))?;
            if t.init.k == 0 {
                return Err(err("[train.init", "k must be positive".into()));
            }
            let cfg = self
                .train_config()
                .map_err(|m| err("phases", m))?;
            cfg.validate().map_err(|e| err("phases", e.to_string()))?;
            if target.dim() == 0 {
                return Err(err("target", "empty target".into()));
            }
        }
        if let Some(e) = &self.eval {
            e.target.build().map_err(|m| err("target", m))?;
            if !(e.coverage_radius > 0.0) {
                return Err(err("coverage_radius", "coverage_radius must be positive".into()));
            }
        }
        Ok(())
    }

    /// Fills defaults that depend on other fields so the echo is explicit.
    pub fn resolve(&mut self, config_dir: &std::path::Path) {
        if let Some(s) = &mut self.surface {
            for t in s.tasks.values_mut() {
                if t.t.is_empty() {
                    t.t = (0..2).filter(|i| !t.s.contains(i)).collect();
                }
            }
        }
        if let Some(e) = &mut self.eval {
            if e.trajectory.is_relative() {
                let joined = config_dir.join(&e.trajectory);
                e.trajectory = joined.canonicalize().unwrap_or(joined);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(output stem, spec)` per surface, ladder rungs expanded.
    pub fn surface_specs(&self) -> Result<Vec<(String, SurfaceSpec)>, String> {
        let s = self.surface.as_ref().ok_or("no [surface] section")?;
        let mut out = Vec::new();
        for (name, t) in &s.tasks {
            let mut spec = SurfaceSpec::tailored(s.sigma2, t.to_surface_task(2)?)
                .map_err(|e| e.to_string())?;
            spec.theta = ThetaGrid {
                lower: s.theta.lower,
                upper: s.theta.upper,
                points: s.theta.points,
            };
            spec.settings = s.estimator.settings(self.seed);
            out.push((name.clone(), spec));
        }
        Ok(out)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = self.train.as_ref().ok_or("no [train] section")?;
        let dim = t.target.build()?.dim();
        let phases = t
            .phases
            .iter()
            .map(|p| {
                Ok(Phase {
                    start: p.start,
                    distribution: p.distribution(dim)?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(TrainConfig {
            lr: t.lr,
            n_samples: t.n_samples,
            total_iters: t.total_iters,
            phases,
            inner_steps: t.inner_steps,
            seed: self.seed,
            snapshot_every: t.snapshot_every,
            snapshot_at: t.snapshot_at.clone(),
            grad_clip: t.grad_clip,
            coverage_radius: t.coverage_radius,
        })
    }

    pub fn init_spec(&self) -> Result<InitSpec, String> {
        let t = self.train.as_ref().ok_or("no [train] section")?;
        Ok(InitSpec {
            k: t.init.k,
            dim: t.target.build()?.dim(),
            mean_center: t.init.mean_center,
            mean_var: t.init.mean_var,
            scale_var: t.init.scale_var,
        })
    }
}

fn rotation_and_noise(rotation_deg: f64, noise_var: f64) -> Result<Transform, String> {
    if !(noise_var >= 0.0) {
        return Err("noise_var must be nonnegative".into());
    }
    let mut parts = Vec::new();
    if rotation_deg != 0.0 {
        parts.push(Transform::Rotation(rotation_deg.to_radians()));
    }
    if noise_var > 0.0 {
        parts.push(Transform::Noising(noise_var));
    }
    Ok(match parts.len() {
        0 => Transform::Identity,
        1 => parts.pop().expect("one part"),
        _ => Transform::Composite(parts),
    })
}

impl SurfaceTaskSection {
    pub fn to_surface_task(&self, dim: usize) -> Result<SurfaceTask, String> {
        let s = IndexSet::from_unsorted(self.s.clone(), dim).map_err(|e| e.to_string())?;
        let t = if self.t.is_empty() {
            s.complement(dim)
        } else {
            IndexSet::from_unsorted(self.t.clone(), dim).map_err(|e| e.to_string())?
        };
        let base = MatchingTask::new(
            rotation_and_noise(self.rotation_deg, self.noise_var)?,
            s,
            t,
            self.divergence,
        )
        .map_err(|e| e.to_string())?
        .with_conditioning(self.conditioning.clone());
        match (&self.family_uniform_rotations, &self.family_rotations_deg) {
            (None, None) => Ok(SurfaceTask::Single(base)),
            (Some(n), None) if *n > 0 => Ok(SurfaceTask::RotationFamily {
                base,
                angles: SurfaceTask::uniform_angles(*n),
            }),
            (None, Some(list)) if !list.is_empty() => Ok(SurfaceTask::RotationFamily {
                base,
                angles: list.iter().map(|d| d.to_radians()).collect(),
            }),
            _ => Err("give one nonempty rotation family".into()),
        }
    }
}

impl PhaseSection {
    fn distribution(&self, dim: usize) -> Result<TaskDistribution, String> {
        let mut entries = Vec::new();
        for task in &self.tasks {
            let transform = rotation_and_noise(task.rotation_deg, task.noise_var)?;
            match task.kind {
                PhaseTaskKind::Joint => entries.push((
                    TaskTemplate::fixed("joint", MatchingTask::joint(dim).with_transform(transform)),
                    task.prob,
                )),
                PhaseTaskKind::Marginal => {
                    let t = IndexSet::from_unsorted(task.t.clone(), dim).map_err(|e| e.to_string())?;
                    let m = MatchingTask::new(transform, IndexSet::empty(), t, Divergence::ReverseKl)
                        .map_err(|e| e.to_string())?;
                    entries.push((TaskTemplate::fixed("marginal", m), task.prob));
                }
                PhaseTaskKind::OrthogonalMarginal => {
                    let mut template = TaskTemplate::orthogonal_marginal();
                    if task.noise_var > 0.0 {
                        template.transform =
                            TransformTemplate::RandomOrthogonal(vec![Transform::Noising(task.noise_var)]);
                    }
                    if task.rotation_deg != 0.0 {
                        return Err("orthogonal_marginal takes no rotation".into());
                    }
                    entries.push((template, task.prob));
                }
                PhaseTaskKind::Preset => {
                    let name = task.preset.ok_or("preset tasks need 'preset'")?;
                    let mut params = PresetParams::new(dim);
                    params.noise_vars = task.noise_vars.clone();
                    let d = preset(name, &params).map_err(|e| e.to_string())?;
                    entries.extend(d.entries.into_iter().map(|(t, p)| (t, p * task.prob)));
                }
            }
        }
        TaskDistribution::new(entries, &self.name).map_err(|e| e.to_string())
    }
}
