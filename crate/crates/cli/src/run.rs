//! End-to-end run: solve, recover, compare against the Lambert baseline and
//! persist everything under one output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lambridge_core::bridge::solve_bridge;
use lambridge_core::grid::write_field_csv;
use lambridge_core::lambert::{shoot_lambert, LambertArc};
use lambridge_core::recovery::{recover, BridgeSolution};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Mode, Prepared, RunConfig};
use crate::error::{exit, CliError};

pub const MANIFEST_NAME: &str = "manifest";

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct UnitsEntry {
    pub length_unit_km: f64,
    pub time_unit_s: f64,
    /// Outputs are written in solver units: positions in `length_unit_km`,
    /// times in `time_unit_s`.
    pub outputs: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct SnapshotEntry {
    pub index: usize,
    pub time: f64,
    pub mass_defect: f64,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceEntry {
    pub converged: bool,
    pub iterations: usize,
    pub final_hilbert_distance: f64,
    pub residual_rho0_l1: f64,
    pub residual_rho1_l1: f64,
    pub contraction_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineEntry {
    pub r0: Vec<f64>,
    pub r1: Vec<f64>,
    pub v0: Vec<f64>,
    pub terminal_miss: f64,
    pub newton_iterations: usize,
    /// Distance between the bridge mean and the arc at each snapshot.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_deviation: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mean_deviation_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_path_check_passed: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub artifact: &'static str,
    pub version: &'static str,
    pub mode: Mode,
    pub dim: usize,
    pub seed: u64,
    pub exit_code: i32,
    pub config: RunConfig,
    pub units: UnitsEntry,
    pub files: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<SnapshotEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineEntry>,
    pub wall_clock_s: f64,
}

/// Outcome of a run whose outputs were written.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
    pub exit_code: i32,
}

struct Writer {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self, CliError> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| CliError::io(root.display().to_string(), e))?;
            if entries.next().is_some() {
                return Err(CliError::Validation(format!(
                    "output directory {} is not empty",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root.display().to_string(), e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display().to_string(), e))?;
        }
        Ok(p)
    }

    fn record(&mut self, name: &str, role: &str, snapshot: Option<usize>) -> Result<(), CliError> {
        let p = self.root.join(name);
        let bytes = fs::read(&p).map_err(|e| CliError::io(p.display().to_string(), e))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            role: role.to_string(),
            snapshot,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }
}

fn write_solution(w: &mut Writer, sol: &BridgeSolution) -> Result<(), CliError> {
    let name = "convergence.csv";
    sol.convergence.write_csv(&w.path(name)?)?;
    w.record(name, "convergence", None)?;
    let grid = sol.problem.grid().clone();
    let axes = ["vx", "vy", "vz"];
    for k in 0..sol.times.len() {
        let mut fields: Vec<(String, &str, &[f64])> = vec![(format!("snapshots/t_{k}_rho.csv"), "density", sol.rho_opt[k].values())];
        for (axis, label) in axes.iter().enumerate().take(grid.dim()) {
            fields.push((format!("snapshots/t_{k}_{label}.csv"), label, sol.v_opt[k].component(axis)));
        }
        fields.push((format!("snapshots/t_{k}_psi.csv"), "psi", sol.psi[k].values()));
        for (name, role, values) in fields {
            write_field_csv(&w.path(&name)?, &grid, values)?;
            w.record(&name, role, Some(k))?;
        }
    }
    Ok(())
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn run_baseline(p: &Prepared) -> Result<LambertArc, CliError> {
    let prob = &p.problem;
    Ok(shoot_lambert(&prob.potential, p.r0, p.r1, prob.t0, prob.t1, None, p.shooting)?)
}

/// Runs `mode` (or the config's mode) and writes all outputs into `out_dir`.
/// Errors before any output is written are returned as `Err`; a run that
/// finishes with a soft failure (no convergence, mean-path check) still
/// writes its outputs and reports the failure through `exit_code`.
pub fn run(config: &RunConfig, out_dir: &Path, mode: Option<Mode>) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let mode = mode.unwrap_or(config.mode);
    let prepared = config.prepare()?;
    let dim = prepared.grid.dim();
    let mut w = Writer::new(out_dir)?;
    let mut exit_code = exit::OK;
    let mut snapshots = Vec::new();
    let mut convergence = None;
    let mut objective = None;
    let mut solution = None;

    if mode.runs_bridge() {
        let (_, outcome) = solve_bridge(&prepared.problem)?;
        if !outcome.report.converged {
            exit_code = exit::NO_CONVERGENCE;
        }
        let sol = recover(&prepared.problem, &outcome, &prepared.snapshot_times)?;
        write_solution(&mut w, &sol)?;
        let (r0, r1) = sol.convergence.final_residuals();
        convergence = Some(ConvergenceEntry {
            converged: sol.convergence.converged,
            iterations: sol.convergence.iterations,
            final_hilbert_distance: sol.convergence.final_distance(),
            residual_rho0_l1: r0,
            residual_rho1_l1: r1,
            contraction_ratio: sol.convergence.contraction_ratio(),
        });
        objective = Some(sol.objective);
        snapshots = sol
            .times
            .iter()
            .enumerate()
            .map(|(k, &t)| SnapshotEntry {
                index: k,
                time: t,
                mass_defect: sol.mass_defects[k],
                mean: sol.rho_opt[k].mean_position()[..dim].to_vec(),
            })
            .collect();
        solution = Some(sol);
    }

    let mut baseline = None;
    if mode.runs_baseline() {
        let arc = run_baseline(&prepared)?;
        let name = "baseline/arc.csv";
        arc.write_csv(&w.path(name)?)?;
        w.record(name, "lambert_arc", None)?;
        let mut entry = BaselineEntry {
            r0: prepared.r0[..dim].to_vec(),
            r1: prepared.r1[..dim].to_vec(),
            v0: arc.v0[..dim].to_vec(),
            terminal_miss: arc.terminal_miss,
            newton_iterations: arc.newton_iterations,
            mean_deviation: None,
            max_mean_deviation_bound: prepared.max_mean_deviation,
            mean_path_check_passed: None,
        };
        if let Some(sol) = &solution {
            let dev: Vec<f64> = sol
                .times
                .iter()
                .zip(&sol.rho_opt)
                .map(|(&t, rho)| distance(&rho.mean_position(), &arc.position_at(t)))
                .collect();
            if let Some(bound) = prepared.max_mean_deviation {
                let passed = dev.iter().all(|d| *d <= bound);
                entry.mean_path_check_passed = Some(passed);
                if !passed && exit_code == exit::OK {
                    exit_code = exit::MEAN_PATH_CHECK;
                }
            }
            entry.mean_deviation = Some(dev);
        }
        baseline = Some(entry);
    }

    let manifest = RunManifest {
        artifact: "lambridge",
        version: env!("CARGO_PKG_VERSION"),
        mode,
        dim,
        seed: config.seed,
        exit_code,
        config: config.clone(),
        units: UnitsEntry {
            length_unit_km: config.unit_scale.length_unit_km,
            time_unit_s: config.unit_scale.time_unit_s,
            outputs: "solver units",
        },
        files: w.files.clone(),
        snapshots,
        convergence,
        objective,
        baseline,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let path = w.path(MANIFEST_NAME)?;
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(RunOutcome {
        manifest,
        out_dir: out_dir.to_path_buf(),
        exit_code,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
        mode = "both"
        epsilon = 0.5
        t1 = 1.0
        snapshots = 3
        potential = { kind = "zero" }
        grid = { lower = [-6.0], upper = [6.0], counts = [61] }
        rho0 = { components = [{ weight = 1.0, mean = [-1.0], covariance = [[0.25]] }] }
        rho1 = { components = [{ weight = 1.0, mean = [1.0], covariance = [[0.25]] }] }
        solver = { nsteps = 4 }
    "#;

    #[test]
    fn writes_listed_outputs() {
        let cfg = RunConfig::from_toml_str(CONFIG, Path::new("t.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let res = run(&cfg, &out, None).unwrap();
        assert_eq!(res.exit_code, exit::OK);
        let names: Vec<&str> = res.manifest.files.iter().map(|f| f.name.as_str()).collect();
        assert!(names.contains(&"convergence.csv"));
        assert!(names.contains(&"snapshots/t_2_vx.csv"));
        assert!(names.contains(&"baseline/arc.csv"));
        assert_eq!(names.len(), 1 + 3 * 3 + 1);
        let b = res.manifest.baseline.unwrap();
        assert!(b.mean_deviation.unwrap().iter().all(|d| *d < 1e-3));
        // a second run into the same directory is refused
        assert!(matches!(run(&cfg, &out, None), Err(CliError::Validation(_))));
    }

    #[test]
    fn tight_mean_path_bound_fails_softly() {
        let text = format!("{CONFIG}\nbaseline = {{ max_mean_deviation = 1e-300 }}\n");
        let cfg = RunConfig::from_toml_str(&text, Path::new("t.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&cfg, dir.path(), None).unwrap();
        assert_eq!(res.exit_code, exit::MEAN_PATH_CHECK);
        assert!(dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn no_convergence_still_writes() {
        let text = CONFIG.replace("solver = { nsteps = 4 }", "solver = { nsteps = 4, max_iters = 1 }");
        let cfg = RunConfig::from_toml_str(&text, Path::new("t.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&cfg, dir.path(), Some(Mode::Bridge)).unwrap();
        assert_eq!(res.exit_code, exit::NO_CONVERGENCE);
        assert!(!res.manifest.convergence.unwrap().converged);
        assert!(dir.path().join("convergence.csv").exists());
    }
}
