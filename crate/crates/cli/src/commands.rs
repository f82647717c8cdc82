use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use biglearn_core::divergence::Divergence;
use biglearn_core::numeric::fmt_f64;
use biglearn_core::surfaces::{noising_ladder_sweep, sweep, SurfaceGrid, GLOBAL_TOL};
use biglearn_core::tasks::EstimatorSettings;
use biglearn_core::trainer::{init_model, init_rng, mode_coverage, train, Trajectory};
use biglearn_core::Error;
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a str,
    outputs: Vec<String>,
}

/// Loads a config, applies the seed override and fills derived defaults.
pub fn load(path: &Path, command: Command, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = RunConfig::parse(&text, command)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: Command, cfg: &RunConfig) -> Result<(), CliError> {
        self.write(RESOLVED_CONFIG, &cfg.to_toml())?;
        let manifest = Manifest {
            command: command.section(),
            seed: cfg.seed,
            config: RESOLVED_CONFIG,
            outputs: self.files.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn minima_csv(grid: &SurfaceGrid) -> Result<String, CliError> {
    let minima = grid
        .find_local_minima(GLOBAL_TOL)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut out = String::from("row,col,mu1,mu2,loss,is_global\n");
    for m in minima {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.row,
            m.col,
            fmt_f64(m.mu1),
            fmt_f64(m.mu2),
            fmt_f64(m.loss),
            m.is_global
        ));
    }
    Ok(out)
}

pub fn run_surface(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let section = cfg.surface.as_ref().expect("validated");
    let specs = cfg.surface_specs().map_err(CliError::Config)?;
    let mut out = Outputs::new(out_dir)?;
    let mut failures = Vec::new();
    for (name, spec) in &specs {
        let started = Instant::now();
        let grids: Vec<(String, SurfaceGrid)> = if section.noise_vars.is_empty() {
            vec![(name.clone(), sweep(spec).map_err(|e| CliError::Config(e.to_string()))?)]
        } else {
            noising_ladder_sweep(spec, &section.noise_vars)
                .map_err(|e| CliError::Config(e.to_string()))?
                .into_iter()
                .enumerate()
                .map(|(i, g)| (format!("{name}_noise{i}"), g))
                .collect()
        };
        for (stem, grid) in grids {
            out.write(&format!("{stem}.csv"), &grid.to_csv())?;
            if grid.is_complete() {
                out.write(&format!("{stem}.minima.csv"), &minima_csv(&grid)?)?;
            } else {
                let c = &grid.errors[0];
                failures.push(format!(
                    "{stem}: {} error cells, first at (mu1, mu2) = ({}, {}): {}",
                    grid.errors.len(),
                    c.mu1,
                    c.mu2,
                    c.message
                ));
            }
        }
        eprintln!("surface {name}: {:.1}s", started.elapsed().as_secs_f64());
    }
    out.finish(Command::Surface, cfg)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

#[derive(Serialize)]
struct CoverageRecord {
    iteration: usize,
    radius: f64,
    count: usize,
    covered: Vec<bool>,
}

#[derive(Serialize)]
struct AbortRecord<'a> {
    iteration: usize,
    task: &'a str,
    reason: &'a str,
    theta: &'a [f64],
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serializes");
    s.push('\n');
    s
}

pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let section = cfg.train.as_ref().expect("validated");
    let target = section.target.build().map_err(CliError::Config)?;
    let train_cfg = cfg.train_config().map_err(CliError::Config)?;
    let init = cfg.init_spec().map_err(CliError::Config)?;
    let model = init_model(&init, &mut init_rng(cfg.seed)).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = Outputs::new(out_dir)?;
    let started = Instant::now();
    let traj = match train(model, &target, &train_cfg) {
        Ok(t) => t,
        Err(Error::TrainingAborted {
            iteration,
            task,
            reason,
            theta,
        }) => {
            out.write(
                "abort.json",
                &json_line(&AbortRecord {
                    iteration,
                    task: &task,
                    reason: &reason,
                    theta: &theta,
                }),
            )?;
            out.finish(Command::Train, cfg)?;
            return Err(CliError::TrainingAborted(format!(
                "training aborted at iteration {iteration} on task {task}: {reason}"
            )));
        }
        Err(e) => return Err(CliError::Numerical(e.to_string())),
    };
    eprintln!("training: {:.1}s", started.elapsed().as_secs_f64());
    out.write("trajectory.ndjson", &traj.to_ndjson())?;

    let fitted = traj.final_model.materialize();
    let report = mode_coverage(&fitted, target.means(), train_cfg.coverage_radius)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    out.write(
        "coverage.json",
        &json_line(&CoverageRecord {
            iteration: train_cfg.total_iters,
            radius: report.radius,
            count: report.count,
            covered: report.covered.clone(),
        }),
    )?;
    let settings = EstimatorSettings {
        x_points_2d: section.eval_x_points_2d,
        seed: cfg.seed,
        ..EstimatorSettings::default()
    };
    let kl = settings
        .divergence(Divergence::ReverseKl, &fitted, &target)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    out.write(
        "summary.json",
        &format!(
            "{{\"seed\":{},\"iterations\":{},\"gradient_steps\":{},\"draws\":{},\"final_joint_kl\":{},\"coverage\":{},\"components\":{}}}\n",
            cfg.seed,
            train_cfg.total_iters,
            traj.gradient_steps,
            traj.draws,
            fmt_f64(kl),
            report.count,
            target.n_components()
        ),
    )?;
    out.finish(Command::Train, cfg)?;
    eprintln!(
        "final coverage {}/{}, joint KL {kl:.6}, wall time {:.1}s",
        report.count,
        target.n_components(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn run_eval(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let section = cfg.eval.as_ref().expect("validated");
    let target = section.target.build().map_err(CliError::Config)?;
    let path = &section.trajectory;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let snapshots = Trajectory::parse_snapshots(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let settings = EstimatorSettings {
        x_points_2d: section.x_points_2d,
        seed: cfg.seed,
        ..EstimatorSettings::default()
    };
    let mut csv = String::from("iteration,kl,coverage\n");
    for (iteration, theta) in &snapshots {
        if theta.dim() != target.dim() {
            return Err(CliError::Config(format!(
                "trajectory dimension {} does not match target dimension {}",
                theta.dim(),
                target.dim()
            )));
        }
        let model = theta.materialize();
        let kl = settings
            .divergence(Divergence::ReverseKl, &model, &target)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let cov = mode_coverage(&model, target.means(), section.coverage_radius)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        csv.push_str(&format!("{iteration},{},{}\n", fmt_f64(kl), cov.count));
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("eval.csv", &csv)?;
    out.finish(Command::Eval, cfg)
}
