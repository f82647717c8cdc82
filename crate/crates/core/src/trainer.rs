//! Phase-scheduled stochastic training of an equal-weight mixture against a
//! target through sampled matching tasks, plus mode-coverage evaluation.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::divergence::{PathwiseObjective, ThetaModel, DIAG_FLOOR};
use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::numeric::{fmt_f64, softplus_inv};
use crate::tasks::{sample_task, TaskDistribution, TaskTemplate};

/// A task distribution active from `start` (inclusive) until the next phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub start: usize,
    pub distribution: TaskDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub n_samples: usize,
    pub total_iters: usize,
    pub phases: Vec<Phase>,
    /// Gradient steps per sampled task.
    pub inner_steps: usize,
    pub seed: u64,
    /// Snapshot period; 0 keeps only `snapshot_at` plus the endpoints.
    pub snapshot_every: usize,
    pub snapshot_at: Vec<usize>,
    /// Rescale gradients whose ℓ2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub coverage_radius: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.n_samples == 0 || self.total_iters == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidArgument(
                "n_samples, total_iters and inner_steps must be positive".into(),
            ));
        }
        if self.phases.first().map(|p| p.start) != Some(0) {
            return Err(Error::InvalidArgument("first phase must start at 0".into()));
        }
        if self.phases.windows(2).any(|w| w[0].start >= w[1].start) {
            return Err(Error::InvalidArgument("phases must have increasing starts".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        if !(self.coverage_radius > 0.0) {
            return Err(Error::InvalidArgument("coverage radius must be positive".into()));
        }
        for phase in &self.phases {
            for (template, _) in &phase.distribution.entries {
                if !template.is_unconditional() {
                    return Err(Error::Unsupported(format!(
                        "conditional task family '{}' in training phase '{}'",
                        template.family, phase.distribution.phase
                    )));
                }
            }
        }
        Ok(())
    }

    fn phase_at(&self, iter: usize) -> &Phase {
        self.phases
            .iter()
            .rev()
            .find(|p| p.start <= iter)
            .expect("first phase starts at 0")
    }

    fn is_snapshot(&self, iter: usize) -> bool {
        iter == 0
            || iter == self.total_iters
            || (self.snapshot_every > 0 && iter.is_multiple_of(self.snapshot_every))
            || self.snapshot_at.contains(&iter)
    }
}

/// Initialization law: means i.i.d. `N(center, mean_var)` per coordinate,
/// scales `sqrt(scale_var)·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub k: usize,
    pub dim: usize,
    pub mean_center: f64,
    pub mean_var: f64,
    pub scale_var: f64,
}

pub fn init_model(spec: &InitSpec, rng: &mut ChaCha8Rng) -> Result<ThetaModel> {
    if spec.k == 0 || spec.dim == 0 {
        return Err(Error::InvalidArgument("K and D must be positive".into()));
    }
    if !(spec.mean_var >= 0.0) || !(spec.scale_var.sqrt() > DIAG_FLOOR) {
        return Err(Error::InvalidArgument("invalid initialization variances".into()));
    }
    let normal = Normal::new(spec.mean_center, spec.mean_var.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut params = vec![0.0; ThetaModel::n_params(spec.k, spec.dim)];
    for p in params.iter_mut().take(spec.k * spec.dim) {
        *p = normal.sample(rng);
    }
    let mut model = ThetaModel::new(spec.k, spec.dim, params)?;
    let diag = softplus_inv(spec.scale_var.sqrt() - DIAG_FLOOR);
    for c in 0..spec.k {
        for r in 0..spec.dim {
            let idx = model.scale_index(c, r, r);
            model.params_mut()[idx] = diag;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub phase: String,
    /// Sampled tasks per family so far.
    pub task_counts: BTreeMap<String, u64>,
    /// Mean sampled-task loss per family since the previous snapshot.
    pub running_losses: BTreeMap<String, f64>,
    pub coverage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub k: usize,
    pub dim: usize,
    pub snapshots: Vec<Snapshot>,
    pub final_model: ThetaModel,
    pub gradient_steps: u64,
    pub draws: u64,
}

impl Snapshot {
    /// One NDJSON record. Field order: iteration, k, dim, phase, coverage,
    /// task_counts, running_losses, theta.
    pub fn to_json_line(&self, k: usize, dim: usize) -> String {
        let counts: Vec<String> = self
            .task_counts
            .iter()
            .map(|(f, c)| format!("{}:{c}", json_string(f)))
            .collect();
        let losses: Vec<String> = self
            .running_losses
            .iter()
            .map(|(f, l)| format!("{}:{}", json_string(f), fmt_f64(*l)))
            .collect();
        let theta: Vec<String> = self.theta.iter().map(|v| fmt_f64(*v)).collect();
        format!(
            "{{\"iteration\":{},\"k\":{k},\"dim\":{dim},\"phase\":{},\"coverage\":{},\"task_counts\":{{{}}},\"running_losses\":{{{}}},\"theta\":[{}]}}",
            self.iteration,
            json_string(&self.phase),
            self.coverage,
            counts.join(","),
            losses.join(","),
            theta.join(",")
        )
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

impl Trajectory {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for s in &self.snapshots {
            out.push_str(&s.to_json_line(self.k, self.dim));
            out.push('\n');
        }
        out
    }

    /// Parses snapshots written by [`Trajectory::to_ndjson`].
    pub fn parse_snapshots(text: &str) -> Result<Vec<(usize, ThetaModel)>> {
        let mut out: Vec<(usize, ThetaModel)> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |msg: &str| Error::Parse(format!("line {}: {msg}", n + 1));
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
            let field = |name: &str| v.get(name).ok_or_else(|| bad(&format!("missing '{name}'")));
            let as_usize = |x: &serde_json::Value, name: &str| {
                x.as_u64()
                    .map(|u| u as usize)
                    .ok_or_else(|| bad(&format!("'{name}' is not a count")))
            };
            let iteration = as_usize(field("iteration")?, "iteration")?;
            let k = as_usize(field("k")?, "k")?;
            let dim = as_usize(field("dim")?, "dim")?;
            let theta = field("theta")?
                .as_array()
                .ok_or_else(|| bad("'theta' is not an array"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric theta entry")))
                .collect::<Result<Vec<f64>>>()?;
            let model = ThetaModel::new(k, dim, theta).map_err(|e| bad(&e.to_string()))?;
            if out.last().is_some_and(|(i, _)| *i >= iteration) {
                return Err(bad("iterations must increase"));
            }
            out.push((iteration, model));
        }
        if out.is_empty() {
            return Err(Error::Parse("trajectory has no snapshots".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoverageReport {
    pub covered: Vec<bool>,
    pub count: usize,
    pub radius: f64,
}

/// True component `j` counts as covered when some fitted mean lies strictly
/// within `radius` of it.
pub fn mode_coverage(model: &Gmm, true_means: &[DVector<f64>], radius: f64) -> Result<ModeCoverageReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let mut covered = Vec::with_capacity(true_means.len());
    for t in true_means {
        if t.len() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                got: t.len(),
            });
        }
        covered.push(model.means().iter().any(|m| (m - t).norm() < radius));
    }
    let count = covered.iter().filter(|c| **c).count();
    Ok(ModeCoverageReport {
        covered,
        count,
        radius,
    })
}

#[derive(Default)]
struct FamilyWindow {
    sum: f64,
    n: u64,
}

/// Runs plain SGD from `model`. Each outer iteration samples one task from
/// the active phase and takes `inner_steps` gradient steps on it, each with
/// `n_samples` fresh draws. Deterministic given `cfg.seed`.
pub fn train(model: ThetaModel, target: &Gmm, cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if model.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: model.dim(),
        });
    }
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut windows: BTreeMap<String, FamilyWindow> = BTreeMap::new();
    let mut snapshots = Vec::new();
    let mut steps = 0u64;
    let mut draws = 0u64;
    let true_means = target.means().to_vec();

    let mut snapshot = |iter: usize,
                        model: &ThetaModel,
                        counts: &BTreeMap<String, u64>,
                        windows: &mut BTreeMap<String, FamilyWindow>|
     -> Result<()> {
        let g = model.materialize();
        let coverage = mode_coverage(&g, &true_means, cfg.coverage_radius)?.count;
        let running_losses = windows
            .iter()
            .filter(|(_, w)| w.n > 0)
            .map(|(f, w)| (f.clone(), w.sum / w.n as f64))
            .collect();
        windows.clear();
        snapshots.push(Snapshot {
            iteration: iter,
            theta: model.params().to_vec(),
            phase: cfg.phase_at(iter.min(cfg.total_iters - 1)).distribution.phase.clone(),
            task_counts: counts.clone(),
            running_losses,
            coverage,
        });
        Ok(())
    };

    snapshot(0, &model, &counts, &mut windows)?;
    for iter in 0..cfg.total_iters {
        let dist = &cfg.phase_at(iter).distribution;
        let (family, task) = sample_task(dist, dim, &mut rng)?;
        let objective = PathwiseObjective::new(target, &task.pipeline(dim, None)?)?;
        *counts.entry(family.clone()).or_default() += 1;
        for _ in 0..cfg.inner_steps {
            let abort = |reason: &str, model: &ThetaModel| Error::TrainingAborted {
                iteration: iter,
                task: task.describe(),
                reason: reason.to_string(),
                theta: model.params().to_vec(),
            };
            let est = objective
                .estimate(&model, cfg.n_samples, &mut rng)
                .map_err(|e| abort(&e.to_string(), &model))?;
            steps += 1;
            draws += cfg.n_samples as u64;
            if !est.loss.is_finite() {
                return Err(abort("non-finite loss", &model));
            }
            if est.grad.iter().any(|g| !g.is_finite()) {
                return Err(abort("non-finite gradient", &model));
            }
            let w = windows.entry(family.clone()).or_default();
            w.sum += est.loss;
            w.n += 1;
            let norm = est.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let scale = match cfg.grad_clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            for (p, g) in model.params_mut().iter_mut().zip(&est.grad) {
                *p -= cfg.lr * scale * g;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(abort("non-finite parameters", &model));
            }
        }
        if cfg.is_snapshot(iter + 1) {
            snapshot(iter + 1, &model, &counts, &mut windows)?;
        }
    }
    Ok(Trajectory {
        seed: cfg.seed,
        k: model.k(),
        dim,
        snapshots,
        final_model: model,
        gradient_steps: steps,
        draws,
    })
}

/// The 25-component lattice benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub target: Gmm,
    pub init: InitSpec,
    pub config: TrainConfig,
}

/// Equal-weight isotropic mixture with means on an `n × n` lattice centred
/// at the origin.
pub fn lattice_target(n: usize, spacing: f64, variance: f64) -> Result<Gmm> {
    let offset = spacing * (n as f64 - 1.0) / 2.0;
    let means = (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                DVector::from_vec(vec![i as f64 * spacing - offset, j as f64 * spacing - offset])
            })
        })
        .collect();
    Gmm::isotropic(means, variance)
}

pub const BENCHMARK_BURN_IN: usize = 200;

pub fn make_25gmm_benchmark() -> Benchmark {
    let target = lattice_target(5, 2.0, 0.05).expect("lattice is valid");
    let burn_in = TaskDistribution::single(TaskTemplate::orthogonal_marginal(), "burn_in");
    let mixed = TaskDistribution::new(
        vec![(TaskTemplate::joint(2), 0.1), (TaskTemplate::orthogonal_marginal(), 0.9)],
        "big_learning",
    )
    .expect("probabilities sum to one");
    Benchmark {
        target,
        init: InitSpec {
            k: 25,
            dim: 2,
            mean_center: -5.0,
            mean_var: 0.01,
            scale_var: 0.05,
        },
        config: TrainConfig {
            lr: 0.1,
            n_samples: 100,
            total_iters: 6000,
            phases: vec![
                Phase {
                    start: 0,
                    distribution: burn_in,
                },
                Phase {
                    start: BENCHMARK_BURN_IN,
                    distribution: mixed,
                },
            ],
            inner_steps: 1,
            seed: 0,
            snapshot_every: 100,
            snapshot_at: vec![200, 800, 1400, 6000],
            grad_clip: Some(100.0),
            coverage_radius: 0.5,
        },
    }
}

/// The benchmark with joint matching only.
pub fn make_25gmm_joint_baseline() -> Benchmark {
    let mut b = make_25gmm_benchmark();
    b.config.phases = vec![Phase {
        start: 0,
        distribution: TaskDistribution::single(TaskTemplate::joint(2), "joint"),
    }];
    b
}

/// Per-stream RNG for initialization, independent of the training stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{kl_grid, GridSpec};
    use crate::tasks::{ConditioningPolicy, MatchingTask, SetTemplate};

    fn small_config(dist: TaskDistribution, iters: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            n_samples: 100,
            total_iters: iters,
            phases: vec![Phase {
                start: 0,
                distribution: dist,
            }],
            inner_steps: 1,
            seed: 11,
            snapshot_every: 10,
            snapshot_at: vec![],
            grad_clip: Some(100.0),
            coverage_radius: 0.5,
        }
    }

    #[test]
    fn init_matches_spec() {
        let b = make_25gmm_benchmark();
        let m = init_model(&b.init, &mut init_rng(3)).unwrap();
        assert!(m.params()[..50].iter().all(|v| (-5.5..=-4.5).contains(v)));
        let g = m.materialize();
        for i in 0..25 {
            let c = g.covariance(i);
            assert!((c - nalgebra::DMatrix::identity(2, 2) * 0.05).abs().max() < 1e-12);
            assert!((g.weights()[i] - 0.04).abs() < 1e-15);
        }
        assert_eq!(m, init_model(&b.init, &mut init_rng(3)).unwrap());
        assert_ne!(m, init_model(&b.init, &mut init_rng(4)).unwrap());
    }

    #[test]
    fn benchmark_layout() {
        let b = make_25gmm_benchmark();
        assert_eq!(b.target.n_components(), 25);
        assert!(b.target.weights().iter().all(|w| (*w - 0.04).abs() < 1e-15));
        let mut xs: Vec<f64> = b.target.means().iter().map(|m| m[0]).collect();
        xs.dedup();
        assert_eq!(xs, vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        for i in 0..25 {
            assert!((b.target.covariance(i)[(0, 0)] - 0.05).abs() < 1e-15);
        }
        let mixed = &b.config.phases[1].distribution;
        assert_eq!(mixed.entries[0].0.family, "joint");
        assert_eq!(mixed.entries[0].1, 0.1);
        assert_eq!(mixed.entries[1].0.family, "marginal");
        assert_eq!(mixed.entries[1].1, 0.9);
        b.config.validate().unwrap();
    }

    #[test]
    fn coverage_examples() {
        let target = lattice_target(5, 2.0, 0.05).unwrap();
        assert_eq!(mode_coverage(&target, target.means(), 0.5).unwrap().count, 25);
        let corner = Gmm::isotropic(vec![DVector::from_vec(vec![-5.0, -5.0]); 3], 0.05).unwrap();
        assert_eq!(mode_coverage(&corner, target.means(), 0.5).unwrap().count, 0);
        let between = Gmm::isotropic(vec![DVector::from_vec(vec![-3.0, -4.0])], 0.05).unwrap();
        let r = mode_coverage(&between, target.means(), 0.5).unwrap();
        assert_eq!(r.count, 0);
        assert_eq!(r.covered.iter().filter(|c| **c).count(), r.count);
        assert!(mode_coverage(&target, target.means(), 0.0).is_err());
    }

    #[test]
    fn stationary_at_optimum() {
        let spec = InitSpec {
            k: 2,
            dim: 2,
            mean_center: 0.0,
            mean_var: 1.0,
            scale_var: 0.3,
        };
        let model = init_model(&spec, &mut init_rng(1)).unwrap();
        let target = model.materialize();
        let cfg = small_config(TaskDistribution::single(TaskTemplate::joint(2), "joint"), 100);
        let kl = |params: &[f64]| {
            let g = ThetaModel::new(2, 2, params.to_vec()).unwrap().materialize();
            let grid = GridSpec::covering(&[&g, &target], 201).unwrap();
            kl_grid(&g, &target, &grid).unwrap()
        };

        // Noise floor: KL after one snapshot interval of pure gradient noise
        // (every estimate taken at the optimum, so nothing pulls θ back), and
        // the per-step displacement scale from the gradient standard errors.
        let objective =
            PathwiseObjective::new(&target, &crate::pipeline::Pipeline::identity()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut floor, mut step_noise) = (0.0, 0.0);
        let trials = 20;
        for _ in 0..trials {
            let mut walked = model.params().to_vec();
            for _ in 0..cfg.snapshot_every {
                let est = objective.estimate(&model, cfg.n_samples, &mut rng).unwrap();
                walked.iter_mut().zip(&est.grad).for_each(|(p, g)| *p -= cfg.lr * g);
                step_noise += cfg.lr * est.grad_std_error.iter().map(|s| s * s).sum::<f64>().sqrt();
            }
            floor += kl(&walked) / trials as f64;
        }
        step_noise /= (trials * cfg.snapshot_every) as f64;

        let traj = train(model.clone(), &target, &cfg).unwrap();
        for s in &traj.snapshots {
            let v = kl(&s.theta);
            assert!(v <= 10.0 * floor, "iteration {}: {v} vs floor {floor}", s.iteration);
        }
        let drift: f64 = traj
            .final_model
            .params()
            .iter()
            .zip(model.params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = 3.0 * step_noise * (cfg.total_iters as f64).sqrt();
        assert!(drift < bound, "{drift} vs {bound}");
    }

    #[test]
    fn deterministic_and_accounted() {
        let target = lattice_target(2, 2.0, 0.1).unwrap();
        let spec = InitSpec {
            k: 4,
            dim: 2,
            mean_center: 0.0,
            mean_var: 0.5,
            scale_var: 0.1,
        };
        let dist = TaskDistribution::new(
            vec![(TaskTemplate::joint(2), 0.3), (TaskTemplate::orthogonal_marginal(), 0.7)],
            "mixed",
        )
        .unwrap();
        let mut cfg = small_config(dist, 50);
        cfg.inner_steps = 3;
        cfg.snapshot_at = vec![7];
        let run = || train(init_model(&spec, &mut init_rng(2)).unwrap(), &target, &cfg).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.to_ndjson(), run().to_ndjson());
        assert_eq!(a.gradient_steps, 150);
        assert_eq!(a.draws, 150 * 100);
        let last = a.snapshots.last().unwrap();
        assert_eq!(last.task_counts.values().sum::<u64>(), 50);
        let iters: Vec<usize> = a.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![0, 7, 10, 20, 30, 40, 50]);
        let parsed = Trajectory::parse_snapshots(&a.to_ndjson()).unwrap();
        assert_eq!(parsed.len(), 7);
        assert_eq!(parsed[6].1, a.final_model);
    }

    #[test]
    fn conditional_training_tasks_rejected() {
        let template = TaskTemplate {
            family: "cond".into(),
            transform: crate::tasks::TransformTemplate::Fixed(crate::tasks::Transform::Identity),
            sets: SetTemplate::Permutation,
            divergence: crate::divergence::Divergence::ReverseKl,
            conditioning: ConditioningPolicy::default(),
        };
        let cfg = small_config(TaskDistribution::single(template, "p"), 5);
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
        let fixed = TaskTemplate::fixed("joint", MatchingTask::joint(2));
        let mut cfg = small_config(TaskDistribution::single(fixed, "p"), 5);
        cfg.phases[0].start = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergent_step_aborts_with_diagnostic() {
        let target = lattice_target(2, 2.0, 0.1).unwrap();
        let spec = InitSpec {
            k: 1,
            dim: 2,
            mean_center: 30.0,
            mean_var: 0.0,
            scale_var: 0.1,
        };
        let mut cfg = small_config(TaskDistribution::single(TaskTemplate::joint(2), "j"), 20);
        cfg.lr = 1e300;
        cfg.grad_clip = None;
        let err = train(init_model(&spec, &mut init_rng(0)).unwrap(), &target, &cfg).unwrap_err();
        match err {
            Error::TrainingAborted { theta, task, .. } => {
                assert_eq!(theta.len(), 5);
                assert!(task.contains("identity"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_trajectories_rejected() {
        assert!(Trajectory::parse_snapshots("").is_err());
        assert!(Trajectory::parse_snapshots("{\"iteration\":0}").is_err());
        assert!(Trajectory::parse_snapshots("not json").is_err());
    }
}
