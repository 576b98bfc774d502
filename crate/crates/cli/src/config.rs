//! TOML run configuration.
//!
//! All quantities are given in the config's own units (km and s unless
//! `[unit_scale]` says otherwise) and converted to solver units at ingestion:
//! lengths are divided by `length_unit_km`, times by `time_unit_s`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use lambridge_core::bridge::{BridgeProblem, KernelChoice, SolverOptions};
use lambridge_core::grid::{
    discretize_density, integrate, read_field_csv, GaussianComponent, GaussianMixture, GridSpec,
    Positivity, ScalarField, SpatialGrid, DENSITY_FLOOR,
};
use lambridge_core::lambert::ShootingOptions;
use lambridge_core::potential::{Potential, J2_EARTH, MU_EARTH, R_EARTH};
use lambridge_core::propagator::SplitStepScheme;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Bridge,
    Baseline,
    Both,
}

impl Mode {
    pub fn runs_bridge(self) -> bool {
        matches!(self, Mode::Bridge | Mode::Both)
    }

    pub fn runs_baseline(self) -> bool {
        matches!(self, Mode::Baseline | Mode::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitScale {
    pub length_unit_km: f64,
    pub time_unit_s: f64,
}

impl Default for UnitScale {
    fn default() -> Self {
        Self {
            length_unit_km: 1.0,
            time_unit_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    KeplerJ2 {
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_j2")]
        j2: f64,
        #[serde(default = "default_r_earth")]
        r_earth: f64,
        /// Singularity guard radius; defaults to `r_earth`.
        #[serde(default)]
        r_min: Option<f64>,
    },
    Quadratic {
        stiffness: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    Zero,
}

fn default_mu() -> f64 {
    MU_EARTH
}
fn default_j2() -> f64 {
    J2_EARTH
}
fn default_r_earth() -> f64 {
    R_EARTH
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self::KeplerJ2 {
            mu: MU_EARTH,
            j2: J2_EARTH,
            r_earth: R_EARTH,
            r_min: None,
        }
    }
}

/// Endpoint density: a Gaussian mixture or a tabulated field file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<GaussianComponent>>,
    /// CSV in the field snapshot format, on the configured grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    SplitStep,
    FeynmanKac { npaths: usize, dt: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol_hilbert")]
    pub tol_hilbert: f64,
    #[serde(default)]
    pub tol_marginal: Option<f64>,
    #[serde(default = "default_nsteps")]
    pub nsteps: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
}

fn default_max_iters() -> usize {
    500
}
fn default_tol_hilbert() -> f64 {
    1e-9
}
fn default_nsteps() -> usize {
    64
}
fn default_kernel() -> KernelSpec {
    KernelSpec::SplitStep
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol_hilbert: default_tol_hilbert(),
            tol_marginal: None,
            nsteps: default_nsteps(),
            kernel: default_kernel(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    /// RK4 step; defaults to a thousandth of the flight time.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Terminal miss tolerance (length units); defaults to 1e-9 solver units.
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_newton: Option<usize>,
    /// Largest allowed distance between the bridge mean and the arc at any
    /// snapshot (length units). Checked in `both` mode only.
    #[serde(default)]
    pub max_mean_deviation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Number of uniformly spaced output snapshots, including both ends.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub unit_scale: UnitScale,
    #[serde(default)]
    pub potential: PotentialSpec,
    pub grid: GridSpec,
    pub rho0: MarginalSpec,
    pub rho1: MarginalSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub baseline: BaselineSpec,
}

fn default_snapshots() -> usize {
    5
}

/// The problem in solver units, ready to run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub grid: Arc<SpatialGrid>,
    pub problem: BridgeProblem,
    pub shooting: ShootingOptions,
    pub r0: [f64; 3],
    pub r1: [f64; 3],
    pub max_mean_deviation: Option<f64>,
    pub snapshot_times: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be > 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        // relative field-file paths are resolved against the config's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for m in [&mut cfg.rho0, &mut cfg.rho1] {
            if let Some(f) = &m.file {
                if f.is_relative() {
                    m.file = Some(base.join(f));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the preconditions that need no numerical work.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!(
                "epsilon must be > 0, got {}. The noise-free limit is not solved directly; \
                 use a small positive epsilon and choose unit_scale so that V·dt/(4·epsilon) stays moderate",
                self.epsilon
            )));
        }
        if !(self.t1 > self.t0 && self.t0.is_finite() && self.t1.is_finite()) {
            return Err(invalid(format!("need t1 > t0, got [{}, {}]", self.t0, self.t1)));
        }
        positive("unit_scale.length_unit_km", self.unit_scale.length_unit_km)?;
        positive("unit_scale.time_unit_s", self.unit_scale.time_unit_s)?;
        if self.snapshots < 2 {
            return Err(invalid("snapshots must be >= 2"));
        }
        let s = &self.solver;
        if s.nsteps < 2 || s.nsteps % (self.snapshots - 1) != 0 {
            return Err(invalid(format!(
                "solver.nsteps = {} must be >= 2 and divisible by snapshots - 1 = {}",
                s.nsteps,
                self.snapshots - 1
            )));
        }
        if s.max_iters == 0 {
            return Err(invalid("solver.max_iters must be >= 1"));
        }
        positive("solver.tol_hilbert", s.tol_hilbert)?;
        if let Some(t) = s.tol_marginal {
            positive("solver.tol_marginal", t)?;
        }
        if let KernelSpec::FeynmanKac { npaths, dt } = s.kernel {
            if npaths == 0 {
                return Err(invalid("solver.kernel.npaths must be >= 1"));
            }
            positive("solver.kernel.dt", dt)?;
        }
        let dim = self.grid.counts.len();
        SpatialGrid::new(&self.grid).map_err(|e| invalid(format!("grid: {e}")))?;
        for (name, m) in [("rho0", &self.rho0), ("rho1", &self.rho1)] {
            match (&m.components, &m.file) {
                (Some(c), None) => GaussianMixture {
                    components: c.clone(),
                }
                .validate(dim)
                .map_err(|e| invalid(format!("{name}: {e}")))?,
                (None, Some(_)) => {}
                _ => {
                    return Err(invalid(format!(
                        "{name}: give exactly one of `components` or `file`"
                    )))
                }
            }
        }
        self.potential_scaled()
            .validate()
            .map_err(|e| invalid(format!("potential: {e}")))?;
        let b = &self.baseline;
        for (name, v) in [("baseline.dt", b.dt), ("baseline.tol", b.tol), ("baseline.max_mean_deviation", b.max_mean_deviation)] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if b.max_newton == Some(0) {
            return Err(invalid("baseline.max_newton must be >= 1"));
        }
        Ok(())
    }

    fn length(&self) -> f64 {
        self.unit_scale.length_unit_km
    }

    fn time(&self) -> f64 {
        self.unit_scale.time_unit_s
    }

    /// Potential in solver units: `V' = V T²/L²`.
    pub fn potential_scaled(&self) -> Potential {
        let (l, t) = (self.length(), self.time());
        match &self.potential {
            PotentialSpec::KeplerJ2 {
                mu,
                j2,
                r_earth,
                r_min,
            } => Potential::KeplerJ2 {
                mu: mu * t * t / (l * l * l),
                j2: *j2,
                r_earth: r_earth / l,
                r_min: r_min.unwrap_or(*r_earth) / l,
            },
            PotentialSpec::Quadratic { stiffness, center } => {
                let c: Vec<f64> = if center.is_empty() {
                    vec![0.0; self.grid.counts.len()]
                } else {
                    center.iter().map(|x| x / l).collect()
                };
                Potential::quadratic(stiffness * t * t, &c)
            }
            PotentialSpec::Zero => Potential::Zero,
        }
    }

    fn grid_scaled(&self) -> GridSpec {
        let l = self.length();
        GridSpec {
            lower: self.grid.lower.iter().map(|x| x / l).collect(),
            upper: self.grid.upper.iter().map(|x| x / l).collect(),
            counts: self.grid.counts.clone(),
        }
    }

    fn marginal(&self, spec: &MarginalSpec, grid: &Arc<SpatialGrid>) -> Result<ScalarField, CliError> {
        let l = self.length();
        if let Some(components) = &spec.components {
            let scaled = GaussianMixture {
                components: components
                    .iter()
                    .map(|c| GaussianComponent {
                        weight: c.weight,
                        mean: c.mean.iter().map(|x| x / l).collect(),
                        covariance: c
                            .covariance
                            .iter()
                            .map(|row| row.iter().map(|x| x / (l * l)).collect())
                            .collect(),
                    })
                    .collect(),
            };
            return Ok(discretize_density(&scaled, grid)?);
        }
        let path = spec.file.as_ref().expect("validated");
        let unscaled = Arc::new(SpatialGrid::new(&self.grid)?);
        let raw = read_field_csv(path, &unscaled)?;
        let max = raw.max();
        if raw.values().iter().any(|v| !(*v >= 0.0)) || !(max > 0.0) {
            return Err(invalid(format!(
                "{}: tabulated density must be nonnegative and not identically zero",
                path.display()
            )));
        }
        let floored: Vec<f64> = raw.values().iter().map(|v| v.max(DENSITY_FLOOR * max)).collect();
        let field = ScalarField::new(grid.clone(), floored, Positivity::StrictlyPositive)?;
        Ok(field.scaled(1.0 / integrate(&field))?)
    }

    /// Converts to solver units, discretizes the endpoint densities and
    /// checks the kernel preconditions.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        self.validate()?;
        let (l, t) = (self.length(), self.time());
        let grid = Arc::new(SpatialGrid::new(&self.grid_scaled())?);
        let rho0 = self.marginal(&self.rho0, &grid)?;
        let rho1 = self.marginal(&self.rho1, &grid)?;
        let epsilon = self.epsilon * t / (l * l);
        let (t0, t1) = (self.t0 / t, self.t1 / t);
        let s = &self.solver;
        let kernel = match s.kernel {
            KernelSpec::SplitStep => KernelChoice::SplitStep,
            KernelSpec::FeynmanKac { npaths, dt } => KernelChoice::FeynmanKac { npaths, dt: dt / t },
        };
        let options = SolverOptions {
            max_iters: s.max_iters,
            tol_hilbert: s.tol_hilbert,
            tol_marginal: s.tol_marginal,
            nsteps: s.nsteps,
            kernel,
            seed: self.seed,
        };
        let potential = self.potential_scaled();
        // surfaces DomainTooNarrow, Singularity and reaction overflow before any run
        SplitStepScheme::new(&potential, &grid, epsilon, t0, t1, s.nsteps)?;
        let r0 = mean3(&rho0);
        let r1 = mean3(&rho1);
        let problem = BridgeProblem::new(rho0, rho1, epsilon, t0, t1, potential, options)?;
        let b = &self.baseline;
        let shooting = ShootingOptions {
            dt: b.dt.map_or((t1 - t0) / 1000.0, |d| d / t),
            tol: b.tol.map_or(1e-9, |x| x / l),
            max_newton: b.max_newton.unwrap_or(50),
        };
        let snapshot_times = lambridge_core::recovery::uniform_times(t0, t1, self.snapshots);
        Ok(Prepared {
            grid,
            problem,
            shooting,
            r0,
            r1,
            max_mean_deviation: b.max_mean_deviation.map(|d| d / l),
            snapshot_times,
        })
    }
}

fn mean3(rho: &ScalarField) -> [f64; 3] {
    rho.mean_position()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        epsilon = 0.5
        t1 = 1.0
        potential = { kind = "zero" }
        grid = { lower = [-8.0], upper = [8.0], counts = [101] }
        rho0 = { components = [{ weight = 1.0, mean = [-2.0], covariance = [[0.25]] }] }
        rho1 = { components = [{ weight = 1.0, mean = [2.0], covariance = [[0.25]] }] }
    "#;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg = RunConfig::from_toml_str(text, Path::new("test.toml"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.mode, Mode::Bridge);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.snapshots, 5);
        assert_eq!(cfg.t0, 0.0);
        assert_eq!(cfg.unit_scale, UnitScale::default());
        assert_eq!(cfg.solver, SolverSpec::default());
        assert_eq!(cfg.baseline, BaselineSpec::default());
        let p = cfg.prepare().unwrap();
        assert_eq!(p.snapshot_times.len(), 5);
        assert!((p.r0[0] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn default_potential_is_earth() {
        let text = MINIMAL.replace(r#"potential = { kind = "zero" }"#, "");
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.potential, PotentialSpec::default());
        match cfg.potential_scaled() {
            Potential::KeplerJ2 { mu, j2, r_earth, r_min } => {
                assert_eq!((mu, j2, r_earth, r_min), (MU_EARTH, J2_EARTH, R_EARTH, R_EARTH));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let err = parse(&MINIMAL.replace("epsilon = 0.5", "epsilon = 0.0")).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("epsilon must be > 0"));
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let err = parse(&MINIMAL.replace("covariance = [[0.25]] }] }\n        rho1", "covariance = [[-0.25]] }] }\n        rho1")).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)), "{err}");
        assert!(err.to_string().contains("positive-definite"));
    }

    #[test]
    fn parse_errors_name_the_location() {
        let err = parse("epsilon = \nt1 = 1").unwrap_err();
        assert!(matches!(err, CliError::Parse { .. }));
        assert!(err.to_string().contains("line"), "{err}");
        let err = parse(&format!("{MINIMAL}\nbogus = 1")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn snapshot_lattice_must_divide_nsteps() {
        let err = parse(&format!("{MINIMAL}\nsnapshots = 4\n")).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        let cfg = RunConfig {
            snapshots: 7,
            ..parse(MINIMAL).unwrap()
        };
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn unit_scaling() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.unit_scale = UnitScale {
            length_unit_km: 2.0,
            time_unit_s: 4.0,
        };
        cfg.potential = PotentialSpec::Quadratic {
            stiffness: 0.5,
            center: vec![1.0],
        };
        let p = cfg.prepare().unwrap();
        assert_eq!(p.problem.epsilon, 0.5 * 4.0 / 4.0);
        assert_eq!(p.problem.t1, 0.25);
        assert_eq!(p.grid.upper()[0], 4.0);
        assert!((p.r1[0] - 1.0).abs() < 1e-9);
        match p.problem.potential {
            Potential::Quadratic { stiffness, center } => {
                assert_eq!(stiffness, 8.0);
                assert_eq!(center[0], 0.5);
            }
            other => panic!("{other:?}"),
        }
        // V·T²/L² is invariant: V(x) at the same physical point
        let kepler = RunConfig {
            potential: PotentialSpec::KeplerJ2 { mu: 10.0, j2: 0.0, r_earth: 1.0, r_min: Some(0.1) },
            ..cfg
        };
        let pot = kepler.potential_scaled();
        let physical = -10.0 / 3.0;
        assert!((pot.eval(&[1.5]).unwrap() - physical * 16.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_needs_exactly_one_source() {
        let text = MINIMAL.replace(
            "rho1 = { components = [{ weight = 1.0, mean = [2.0], covariance = [[0.25]] }] }",
            "rho1 = {}",
        );
        assert!(matches!(parse(&text), Err(CliError::Validation(_))));
    }

    #[test]
    fn narrow_domain_is_caught_before_running() {
        let cfg = parse(&MINIMAL.replace("t1 = 1.0", "t1 = 40.0").replace("counts = [101]", "counts = [401]")).unwrap();
        let err = cfg.prepare().unwrap_err();
        assert!(matches!(err, CliError::Core(lambridge_core::Error::DomainTooNarrow { .. })), "{err}");
    }
}
