//! Fixed-point recursion for the endpoint Schrödinger factors.
//!
//! Starting from an everywhere positive `φ̂₀`, each sweep propagates it
//! forward, enforces `φ̂₁ φ₁ = ρ₁`, propagates `φ₁` backward and enforces
//! `φ̂₀ φ₀ = ρ₀`. The map contracts in Hilbert's projective metric, so the
//! distance between successive `φ̂₀` iterates decays geometrically.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{integrate, pairwise_sum, Positivity, ScalarField, SpatialGrid};
use crate::potential::Potential;
use crate::propagator::{
    build_kernel_feynman_kac, build_kernel_splitstep, FeynmanKacParams, KernelOperator,
};

/// Denominators below this fraction of their maximum abort the recursion.
pub const DIVISION_FLOOR: f64 = 1e-30;
/// Marginals must integrate to one within this tolerance.
pub const MARGINAL_MASS_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum KernelChoice {
    SplitStep,
    FeynmanKac { npaths: usize, dt: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol_hilbert: f64,
    /// Optional secondary stop: terminal marginal L¹ residual.
    #[serde(default)]
    pub tol_marginal: Option<f64>,
    /// Split-step substeps over `[t0, t1]`; also fixes the snapshot lattice.
    pub nsteps: usize,
    pub kernel: KernelChoice,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol_hilbert: 1e-9,
            tol_marginal: None,
            nsteps: 16,
            kernel: KernelChoice::SplitStep,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BridgeProblem {
    pub rho0: ScalarField,
    pub rho1: ScalarField,
    pub epsilon: f64,
    pub t0: f64,
    pub t1: f64,
    pub potential: Potential,
    pub options: SolverOptions,
}

impl BridgeProblem {
    pub fn new(
        rho0: ScalarField,
        rho1: ScalarField,
        epsilon: f64,
        t0: f64,
        t1: f64,
        potential: Potential,
        options: SolverOptions,
    ) -> Result<Self> {
        rho0.same_grid(&rho1)?;
        rho0.require_strictly_positive()?;
        rho1.require_strictly_positive()?;
        for (name, rho) in [("rho0", &rho0), ("rho1", &rho1)] {
            let mass = integrate(rho);
            if (mass - 1.0).abs() > MARGINAL_MASS_TOL {
                return Err(Error::InvalidSpec(format!(
                    "{name} must have unit mass, got {mass}"
                )));
            }
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        if !(t1 > t0) {
            return Err(Error::InvalidSpec(format!("need t1 > t0, got [{t0}, {t1}]")));
        }
        if options.max_iters == 0 || !(options.tol_hilbert > 0.0) {
            return Err(Error::InvalidSpec(
                "max_iters must be >= 1 and tol_hilbert > 0".into(),
            ));
        }
        potential.validate()?;
        Ok(Self {
            rho0,
            rho1,
            epsilon,
            t0,
            t1,
            potential,
            options,
        })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        self.rho0.grid()
    }

    /// Kernel over `[t0, t1]` selected by the solver options.
    pub fn build_kernel(&self) -> Result<KernelOperator> {
        match self.options.kernel {
            KernelChoice::SplitStep => build_kernel_splitstep(
                &self.potential,
                self.grid(),
                self.epsilon,
                self.t0,
                self.t1,
                self.options.nsteps,
            ),
            KernelChoice::FeynmanKac { npaths, dt } => build_kernel_feynman_kac(
                &self.potential,
                self.grid(),
                self.epsilon,
                self.t0,
                self.t1,
                FeynmanKacParams {
                    npaths,
                    dt,
                    seed: self.options.seed,
                },
            ),
        }
    }
}

/// Endpoint factors `φ̂(·, t₀)` and `φ(·, t₁)`, gauge-fixed by `∫ φ̂₀ = 1`.
#[derive(Clone, Debug)]
pub struct FactorPair {
    pub phi_hat_0: ScalarField,
    pub phi_1: ScalarField,
}

impl FactorPair {
    /// Moves the scale between the factors: `(c φ̂₀, φ₁ / c)`.
    pub fn regauged(&self, c: f64) -> Result<Self> {
        Ok(Self {
            phi_hat_0: self.phi_hat_0.scaled(c)?,
            phi_1: self.phi_1.scaled(1.0 / c)?,
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Hilbert distance between the `φ̂₀` iterates before and after each sweep.
    pub hilbert_distances: Vec<f64>,
    /// `‖φ̂₀ φ₀ − ρ₀‖₁` after each sweep.
    pub residuals_rho0: Vec<f64>,
    /// `‖φ̂₁ φ₁ − ρ₁‖₁` after each sweep.
    pub residuals_rho1: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ConvergenceReport {
    /// Successive distance ratios `d[k+1] / d[k]` (1-based `k`), starting
    /// after iteration `burn_in` and skipping distances at rounding level.
    pub fn ratios(&self, burn_in: usize) -> Vec<f64> {
        let d = &self.hilbert_distances;
        (burn_in..d.len())
            .filter(|&k| k >= 1 && d[k - 1] > 1e-13 && d[k] > 1e-13)
            .map(|k| d[k] / d[k - 1])
            .collect()
    }

    /// Geometric mean of the distance ratios after iteration 3.
    pub fn contraction_ratio(&self) -> Option<f64> {
        let r = self.ratios(3);
        if r.is_empty() {
            None
        } else {
            Some((r.iter().map(|x| x.ln()).sum::<f64>() / r.len() as f64).exp())
        }
    }

    pub fn final_distance(&self) -> f64 {
        self.hilbert_distances.last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn final_residuals(&self) -> (f64, f64) {
        (
            self.residuals_rho0.last().copied().unwrap_or(f64::INFINITY),
            self.residuals_rho1.last().copied().unwrap_or(f64::INFINITY),
        )
    }

    /// Writes `iter,hilbert_dist,res_rho0_L1,res_rho1_L1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "hilbert_dist", "res_rho0_L1", "res_rho1_L1"])?;
        for k in 0..self.hilbert_distances.len() {
            w.write_record([
                (k + 1).to_string(),
                format!("{:.15e}", self.hilbert_distances[k]),
                format!("{:.15e}", self.residuals_rho0[k]),
                format!("{:.15e}", self.residuals_rho1[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BridgeOutcome {
    pub factors: FactorPair,
    pub report: ConvergenceReport,
}

impl BridgeOutcome {
    pub fn require_converged(self) -> Result<Self> {
        if self.report.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence {
                iterations: self.report.iterations,
                last_distance: self.report.final_distance(),
            })
        }
    }
}

/// `log(max(u/v) / min(u/v))`, computed in log space.
pub fn hilbert_distance(u: &ScalarField, v: &ScalarField) -> Result<f64> {
    u.same_grid(v)?;
    u.require_strictly_positive()?;
    v.require_strictly_positive()?;
    Ok(hilbert_raw(u.values(), v.values()))
}

fn hilbert_raw(u: &[f64], v: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (a, b) in u.iter().zip(v) {
        let d = a.ln() - b.ln();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    hi - lo
}

/// Builds the kernel from the problem's options and runs the recursion.
pub fn solve_bridge(problem: &BridgeProblem) -> Result<(KernelOperator, BridgeOutcome)> {
    let kernel = problem.build_kernel()?;
    let outcome = solve_bridge_with_kernel(problem, &kernel, None)?;
    Ok((kernel, outcome))
}

/// Runs the recursion with a caller-supplied kernel and optional initial
/// guess for `φ̂₀` (default: constant).
pub fn solve_bridge_with_kernel(
    problem: &BridgeProblem,
    kernel: &KernelOperator,
    initial_guess: Option<&ScalarField>,
) -> Result<BridgeOutcome> {
    let grid = problem.grid().clone();
    if **kernel.grid() != *grid {
        return Err(Error::GridMismatch);
    }
    let weights: Vec<f64> = (0..grid.len()).map(|i| grid.weight(i)).collect();
    let quad = |v: &[f64]| -> f64 {
        let terms: Vec<f64> = v.iter().zip(&weights).map(|(a, w)| a * w).collect();
        pairwise_sum(&terms)
    };
    let l1_product = |a: &[f64], b: &[f64], target: &[f64]| -> f64 {
        let diff: Vec<f64> = a
            .iter()
            .zip(b)
            .zip(target)
            .map(|((x, y), t)| (x * y - t).abs())
            .collect();
        quad(&diff)
    };
    let rho0 = problem.rho0.values();
    let rho1 = problem.rho1.values();
    let opts = &problem.options;

    let mut phi_hat_0: Vec<f64> = match initial_guess {
        Some(g) => {
            g.same_grid(&problem.rho0)?;
            g.require_strictly_positive()?;
            g.values().to_vec()
        }
        None => vec![1.0; grid.len()],
    };
    let mass = quad(&phi_hat_0);
    phi_hat_0.iter_mut().for_each(|v| *v /= mass);

    let mut report = ConvergenceReport::default();
    let mut phi_1: Option<Vec<f64>> = None;

    for _ in 0..opts.max_iters {
        let phi_hat_1 = kernel.apply_forward_raw(&phi_hat_0);
        if let Some(prev) = &phi_1 {
            let res = l1_product(&phi_hat_1, prev, rho1);
            report.residuals_rho1.push(res);
            if opts.tol_marginal.is_some_and(|tol| res < tol) {
                report.converged = true;
                break;
            }
        }
        check_denominator(&phi_hat_1)?;
        let mut next_phi_1: Vec<f64> = rho1.iter().zip(&phi_hat_1).map(|(r, d)| r / d).collect();
        let phi_0 = kernel.apply_backward_raw(&next_phi_1);
        check_denominator(&phi_0)?;
        let mut next: Vec<f64> = rho0.iter().zip(&phi_0).map(|(r, d)| r / d).collect();
        // gauge: ∫ φ̂₀ = 1, compensated in φ₁ so that φ̂₀ · Kᵀφ₁ = ρ₀ still holds
        let c = quad(&next);
        next.iter_mut().for_each(|v| *v /= c);
        next_phi_1.iter_mut().for_each(|v| *v *= c);
        let res0 = {
            let scaled: Vec<f64> = phi_0.iter().map(|v| v * c).collect();
            l1_product(&next, &scaled, rho0)
        };

        let d = hilbert_raw(&next, &phi_hat_0);
        report.hilbert_distances.push(d);
        report.residuals_rho0.push(res0);
        report.iterations += 1;
        phi_hat_0 = next;
        phi_1 = Some(next_phi_1);
        if !d.is_finite() {
            return Err(Error::NonFiniteKernel(
                "factor iterates became non-finite".into(),
            ));
        }
        if d < opts.tol_hilbert {
            report.converged = true;
            break;
        }
    }

    let phi_1 = phi_1.expect("at least one sweep");
    if report.residuals_rho1.len() < report.iterations {
        let phi_hat_1 = kernel.apply_forward_raw(&phi_hat_0);
        report
            .residuals_rho1
            .push(l1_product(&phi_hat_1, &phi_1, rho1));
    }

    Ok(BridgeOutcome {
        factors: FactorPair {
            phi_hat_0: ScalarField::new(grid.clone(), phi_hat_0, Positivity::StrictlyPositive)?,
            phi_1: ScalarField::new(grid, phi_1, Positivity::StrictlyPositive)?,
        },
        report,
    })
}

fn check_denominator(values: &[f64]) -> Result<()> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DivisionBlowup {
            node: 0,
            value: max,
            max,
        });
    }
    let floor = DIVISION_FLOOR * max;
    match values.iter().enumerate().find(|(_, v)| !(**v >= floor)) {
        Some((node, &value)) => Err(Error::DivisionBlowup { node, value, max }),
        None => Ok(()),
    }
}

/// L¹ residuals of the boundary coupling at `t₀` and `t₁`:
/// `(‖φ̂₀ · Kᵀφ₁ − ρ₀‖₁, ‖Kφ̂₀ · φ₁ − ρ₁‖₁)`.
pub fn check_marginals(
    factors: &FactorPair,
    kernel: &KernelOperator,
    rho0: &ScalarField,
    rho1: &ScalarField,
) -> Result<(f64, f64)> {
    factors.phi_hat_0.same_grid(&factors.phi_1)?;
    factors.phi_hat_0.same_grid(rho0)?;
    rho0.same_grid(rho1)?;
    let phi_0 = kernel.apply_backward(&factors.phi_1)?;
    let phi_hat_1 = kernel.apply_forward(&factors.phi_hat_0)?;
    let r0 = factors
        .phi_hat_0
        .zip_with(&phi_0, |a, b| a * b)?
        .zip_with(rho0, |p, r| (p - r).abs())?;
    let r1 = phi_hat_1
        .zip_with(&factors.phi_1, |a, b| a * b)?
        .zip_with(rho1, |p, r| (p - r).abs())?;
    Ok((integrate(&r0), integrate(&r1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{discretize_density, GaussianMixture};

    fn grid1(lo: f64, hi: f64, n: usize) -> Arc<SpatialGrid> {
        Arc::new(SpatialGrid::uniform_1d(lo, hi, n).unwrap())
    }

    fn gaussian(g: &Arc<SpatialGrid>, mean: f64, var: f64) -> ScalarField {
        discretize_density(&GaussianMixture::isotropic(vec![mean], var.sqrt()), g).unwrap()
    }

    #[test]
    fn hilbert_distance_examples() {
        let g = grid1(0.0, 1.0, 4);
        let u = ScalarField::classified(g.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hilbert_distance(&u, &u).unwrap(), 0.0);
        assert!(hilbert_distance(&u, &u.scaled(3.0).unwrap()).unwrap().abs() < 1e-15);

        let two = Arc::new(
            SpatialGrid::new(&crate::grid::GridSpec {
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
                counts: vec![4, 4],
            })
            .unwrap(),
        );
        let mut a = vec![1.0; 16];
        let mut b = vec![1.0; 16];
        a[0] = 1.0;
        a[1] = 2.0;
        b[0] = 2.0;
        b[1] = 1.0;
        let ua = ScalarField::classified(two.clone(), a).unwrap();
        let ub = ScalarField::classified(two, b).unwrap();
        let d = hilbert_distance(&ua, &ub).unwrap();
        assert!((d - 4f64.ln()).abs() < 1e-15);

        let z = ScalarField::classified(g, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(hilbert_distance(&u, &z), Err(Error::NonPositiveField { .. })));
    }

    #[test]
    fn identity_kernel_is_a_fixed_point() {
        let g = grid1(-4.0, 4.0, 41);
        let rho = gaussian(&g, 0.3, 0.5);
        let prob = BridgeProblem::new(rho.clone(), rho.clone(), 0.5, 0.0, 1.0, Potential::Zero, SolverOptions::default()).unwrap();
        let out = solve_bridge_with_kernel(&prob, &KernelOperator::identity(g), None).unwrap();
        assert!(out.report.converged);
        assert_eq!(out.report.iterations, 1);
        let phi_0 = out.factors.phi_1.values();
        for ((a, b), r) in out.factors.phi_hat_0.values().iter().zip(phi_0).zip(rho.values()) {
            assert!((a * b - r).abs() <= 1e-15 * r);
        }
    }

    #[test]
    fn problem_validation() {
        let g = grid1(-4.0, 4.0, 41);
        let rho = gaussian(&g, 0.0, 0.5);
        let unnormalized = rho.scaled(2.0).unwrap();
        assert!(BridgeProblem::new(unnormalized, rho.clone(), 0.5, 0.0, 1.0, Potential::Zero, SolverOptions::default()).is_err());
        assert!(BridgeProblem::new(rho.clone(), rho.clone(), 0.0, 0.0, 1.0, Potential::Zero, SolverOptions::default()).is_err());
        assert!(BridgeProblem::new(rho.clone(), rho.clone(), 0.5, 1.0, 1.0, Potential::Zero, SolverOptions::default()).is_err());
        let other = gaussian(&grid1(-4.0, 4.0, 43), 0.0, 0.5);
        assert!(matches!(
            BridgeProblem::new(rho, other, 0.5, 0.0, 1.0, Potential::Zero, SolverOptions::default()),
            Err(Error::GridMismatch)
        ));
    }

    fn small_problem() -> (BridgeProblem, KernelOperator) {
        let g = grid1(-6.0, 6.0, 121);
        let prob = BridgeProblem::new(
            gaussian(&g, -1.0, 0.3),
            gaussian(&g, 1.5, 0.5),
            0.5,
            0.0,
            1.0,
            Potential::quadratic(0.2, &[0.0]),
            SolverOptions {
                nsteps: 4,
                tol_hilbert: 1e-11,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        let k = prob.build_kernel().unwrap();
        (prob, k)
    }

    #[test]
    fn converged_factors_satisfy_both_marginals() {
        let (prob, k) = small_problem();
        let out = solve_bridge_with_kernel(&prob, &k, None).unwrap().require_converged().unwrap();
        assert!((integrate(&out.factors.phi_hat_0) - 1.0).abs() < 1e-12);
        let (r0, r1) = check_marginals(&out.factors, &k, &prob.rho0, &prob.rho1).unwrap();
        assert!(r0 < 1e-12, "{r0}");
        assert!(r1 < 1e-8, "{r1}");
        let (f0, f1) = out.report.final_residuals();
        assert!((f0 - r0).abs() < 1e-12 && (f1 - r1).abs() < 1e-12);
        assert!(out.report.residuals_rho0.iter().all(|r| *r < 1e-12));
        assert_eq!(out.report.residuals_rho1.len(), out.report.iterations);

        let shifted = out.factors.regauged(0.5).unwrap().regauged(1.0).unwrap();
        let (s0, s1) = check_marginals(&shifted, &k, &prob.rho0, &prob.rho1).unwrap();
        assert!((s0 - r0).abs() < 1e-14 && (s1 - r1).abs() < 1e-14);
    }

    #[test]
    fn initial_guess_scale_is_irrelevant() {
        let (prob, k) = small_problem();
        let guess = ScalarField::from_fn(prob.grid().clone(), |r| 1.0 + 0.1 * r[0] * r[0]).unwrap();
        let a = solve_bridge_with_kernel(&prob, &k, Some(&guess)).unwrap();
        let b = solve_bridge_with_kernel(&prob, &k, Some(&guess.scaled(1e5).unwrap())).unwrap();
        assert_eq!(a.report.iterations, b.report.iterations);
        for (x, y) in a.report.hilbert_distances.iter().zip(&b.report.hilbert_distances) {
            assert!((x - y).abs() <= 1e-10 * x.max(1e-12));
        }
        for (x, y) in a.factors.phi_hat_0.values().iter().zip(b.factors.phi_hat_0.values()) {
            assert!((x - y).abs() <= 1e-10 * x);
        }
    }

    #[test]
    fn no_convergence_is_reported() {
        let (mut prob, k) = small_problem();
        prob.options.max_iters = 2;
        let out = solve_bridge_with_kernel(&prob, &k, None).unwrap();
        assert!(!out.report.converged);
        assert_eq!(out.report.iterations, 2);
        assert!(matches!(out.require_converged(), Err(Error::NoConvergence { iterations: 2, .. })));
    }

    #[test]
    fn marginal_tolerance_stops_early() {
        let (mut prob, k) = small_problem();
        prob.options.tol_marginal = Some(1e-4);
        let out = solve_bridge_with_kernel(&prob, &k, None).unwrap();
        assert!(out.report.converged);
        let full = solve_bridge_with_kernel(&small_problem().0, &k, None).unwrap();
        assert!(out.report.iterations < full.report.iterations);
        assert!(out.report.final_residuals().1 < 1e-4);
    }

    #[test]
    fn disjoint_support_blows_up() {
        // Kernel that cannot move mass between the two halves of the box.
        let g = grid1(-4.0, 4.0, 20);
        let n = 20;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if (i < n / 2) == (j < n / 2) {
                    m[i * n + j] = 0.1;
                }
            }
        }
        let k = KernelOperator::from_dense(g.clone(), m, 0.5, 0.0, 1.0).unwrap();
        let left = ScalarField::from_fn(g.clone(), |r| if r[0] < 0.0 { 1.0 } else { 1e-40 }).unwrap();
        let left = left.scaled(1.0 / integrate(&left)).unwrap();
        let right = ScalarField::from_fn(g.clone(), |r| if r[0] > 0.0 { 1.0 } else { 1e-40 }).unwrap();
        let right = right.scaled(1.0 / integrate(&right)).unwrap();
        let prob = BridgeProblem::new(left, right, 0.5, 0.0, 1.0, Potential::Zero, SolverOptions::default()).unwrap();
        assert!(matches!(
            solve_bridge_with_kernel(&prob, &k, None),
            Err(Error::DivisionBlowup { .. })
        ));
    }

    #[test]
    fn convergence_csv() {
        let (prob, k) = small_problem();
        let out = solve_bridge_with_kernel(&prob, &k, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("convergence.csv");
        out.report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,hilbert_dist,res_rho0_L1,res_rho1_L1"));
        assert_eq!(lines.count(), out.report.iterations);
    }
}
