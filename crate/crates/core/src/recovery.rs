//! Optimal density flow, steering velocity and value function from the
//! endpoint factors.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bridge::{BridgeOutcome, BridgeProblem, ConvergenceReport, FactorPair};
use crate::error::{Error, Result};
use crate::grid::{
    gradient, gradient_log, integrate, laplacian, pairwise_sum, partial_derivative, Positivity,
    ScalarField, SpatialGrid, VectorField,
};
use crate::potential::Potential;
use crate::propagator::{propagate_with_scheme, Direction, PropagationSchedule, SplitStepScheme};

/// Relative tolerance for deciding that a time schedule is uniform.
const UNIFORM_TOL: f64 = 1e-9;

/// `φ̂(·, t_k)` forward from `φ̂₀` and `φ(·, t_k)` backward from `φ₁`.
pub fn factor_schedules(
    factors: &FactorPair,
    problem: &BridgeProblem,
    times: &[f64],
) -> Result<(PropagationSchedule, PropagationSchedule)> {
    factors.phi_hat_0.same_grid(&problem.rho0)?;
    factors.phi_1.same_grid(&problem.rho0)?;
    let scheme = SplitStepScheme::new(
        &problem.potential,
        problem.grid(),
        problem.epsilon,
        problem.t0,
        problem.t1,
        problem.options.nsteps,
    )?;
    let (forward, backward) = rayon::join(
        || propagate_with_scheme(&scheme, &factors.phi_hat_0, problem.t0, problem.t1, Direction::Forward, times),
        || propagate_with_scheme(&scheme, &factors.phi_1, problem.t0, problem.t1, Direction::Backward, times),
    );
    Ok((forward?, backward?))
}

#[derive(Clone, Debug)]
pub struct DensitySnapshot {
    pub time: f64,
    /// Unit-mass density.
    pub rho: ScalarField,
    /// `∫ φ̂ φ − 1` before renormalization.
    pub mass_defect: f64,
}

fn density_product(time: f64, phi_hat: &ScalarField, phi: &ScalarField) -> Result<DensitySnapshot> {
    let product = phi_hat.zip_with(phi, |a, b| a * b)?;
    let mass = integrate(&product);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::NonFiniteKernel(format!(
            "density at t = {time} has mass {mass}"
        )));
    }
    Ok(DensitySnapshot {
        time,
        rho: product.scaled(1.0 / mass)?,
        mass_defect: mass - 1.0,
    })
}

/// `ρ(·, t_k) = φ̂(·, t_k) φ(·, t_k)`, renormalized to unit mass.
pub fn recover_density(
    factors: &FactorPair,
    problem: &BridgeProblem,
    times: &[f64],
) -> Result<Vec<DensitySnapshot>> {
    let (fwd, bwd) = factor_schedules(factors, problem, times)?;
    times
        .iter()
        .zip(fwd.fields.iter().zip(&bwd.fields))
        .map(|(&t, (a, b))| density_product(t, a, b))
        .collect()
}

/// `v = 2ε ∇ log φ` at each snapshot.
pub fn recover_velocity(phi: &[ScalarField], epsilon: f64) -> Result<Vec<VectorField>> {
    phi.par_iter()
        .map(|f| gradient_log(f)?.scaled(2.0 * epsilon))
        .collect()
}

/// `ψ = 2ε log φ`.
pub fn recover_psi(phi: &ScalarField, epsilon: f64) -> Result<ScalarField> {
    phi.require_strictly_positive()?;
    ScalarField::new(
        phi.grid().clone(),
        phi.values().iter().map(|v| 2.0 * epsilon * v.ln()).collect(),
        Positivity::Arbitrary,
    )
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 3 {
        return Err(Error::ScheduleTooCoarse(times.len()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let uniform = dt > 0.0
        && times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= UNIFORM_TOL * dt.abs().max(1.0));
    if uniform {
        Ok(dt)
    } else {
        Err(Error::InvalidSpec("snapshot times must be uniformly spaced".into()))
    }
}

fn potential_values(potential: &Potential, grid: &SpatialGrid) -> Result<Vec<f64>> {
    (0..grid.len())
        .map(|i| {
            let r = grid.position(i);
            potential.check_position(&r)?;
            Ok(potential.value3(&r))
        })
        .collect()
}

/// `∫∫ (½|v|² − V) ρ dr dt`, trapezoidal in time over a uniform schedule.
pub fn objective_value(
    times: &[f64],
    rho: &[ScalarField],
    velocity: &[VectorField],
    potential: &Potential,
) -> Result<f64> {
    let dt = uniform_step(times)?;
    if rho.len() != times.len() || velocity.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: rho.len().min(velocity.len()),
        });
    }
    let grid = rho[0].grid().clone();
    let v_pot = potential_values(potential, &grid)?;
    let lagrangian: Vec<f64> = rho
        .iter()
        .zip(velocity)
        .map(|(r, v)| {
            if **v.grid() != *grid || **r.grid() != *grid {
                return Err(Error::GridMismatch);
            }
            let integrand: Vec<f64> = r
                .values()
                .iter()
                .zip(v.squared_norm())
                .zip(&v_pot)
                .map(|((p, s), pot)| (0.5 * s - pot) * p)
                .collect();
            Ok(integrate(&ScalarField::new(grid.clone(), integrand, Positivity::Arbitrary)?))
        })
        .collect::<Result<_>>()?;
    let n = lagrangian.len();
    Ok(dt * (pairwise_sum(&lagrangian[1..n - 1]) + 0.5 * (lagrangian[0] + lagrangian[n - 1])))
}

/// Summary of a PDE residual over interior nodes and interior times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub max: f64,
    /// Root-mean-square over the interior space-time nodes.
    pub l2: f64,
    /// `(∫∫ R² ρ / ∫∫ ρ)^½` when densities are supplied.
    pub weighted_l2: Option<f64>,
}

fn interior_stats(
    grid: &SpatialGrid,
    residuals: &[Vec<f64>],
    weights: Option<Vec<&[f64]>>,
) -> ResidualStats {
    let interior: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_interior(i)).collect();
    let mut max = 0.0f64;
    let mut squares = Vec::with_capacity(residuals.len() * interior.len());
    for r in residuals {
        for &i in &interior {
            max = max.max(r[i].abs());
            squares.push(r[i] * r[i]);
        }
    }
    let l2 = (pairwise_sum(&squares) / squares.len().max(1) as f64).sqrt();
    let weighted_l2 = weights.map(|w| {
        let mut num = Vec::new();
        let mut den = Vec::new();
        for (r, rho) in residuals.iter().zip(w) {
            for &i in &interior {
                num.push(r[i] * r[i] * rho[i]);
                den.push(rho[i]);
            }
        }
        (pairwise_sum(&num) / pairwise_sum(&den)).sqrt()
    });
    ResidualStats {
        max,
        l2,
        weighted_l2,
    }
}

/// Residual of `∂ψ/∂t + ½|∇ψ|² + εΔψ + V` at the interior snapshots, using
/// central time differences. `rho`, if given, weights the extra statistic.
pub fn hjb_residual(
    psi: &[ScalarField],
    times: &[f64],
    potential: &Potential,
    epsilon: f64,
    rho: Option<&[ScalarField]>,
) -> Result<ResidualStats> {
    let dt = uniform_step(times)?;
    if psi.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: psi.len(),
        });
    }
    let grid = psi[0].grid().clone();
    let v_pot = potential_values(potential, &grid)?;
    let residuals: Vec<Vec<f64>> = (1..psi.len() - 1)
        .into_par_iter()
        .map(|k| {
            let grad = gradient(&psi[k])?;
            let sq = grad.squared_norm();
            let lap = laplacian(&grid, psi[k].values());
            Ok((0..grid.len())
                .map(|i| {
                    let dtpsi = (psi[k + 1].values()[i] - psi[k - 1].values()[i]) / (2.0 * dt);
                    dtpsi + 0.5 * sq[i] + epsilon * lap[i] + v_pot[i]
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let weights = rho.map(|r| r[1..r.len() - 1].iter().map(|f| f.values()).collect());
    Ok(interior_stats(&grid, &residuals, weights))
}

/// Residual of `∂ρ/∂t + ∇·(ρ v) − εΔρ` at the interior snapshots.
pub fn fpk_residual(
    rho: &[ScalarField],
    velocity: &[VectorField],
    times: &[f64],
    epsilon: f64,
) -> Result<ResidualStats> {
    let dt = uniform_step(times)?;
    if rho.len() != times.len() || velocity.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: rho.len().min(velocity.len()),
        });
    }
    let grid: Arc<SpatialGrid> = rho[0].grid().clone();
    let residuals: Vec<Vec<f64>> = (1..rho.len() - 1)
        .into_par_iter()
        .map(|k| {
            let mut res: Vec<f64> = (0..grid.len())
                .map(|i| (rho[k + 1].values()[i] - rho[k - 1].values()[i]) / (2.0 * dt))
                .collect();
            for axis in 0..grid.dim() {
                let flux: Vec<f64> = rho[k]
                    .values()
                    .iter()
                    .zip(velocity[k].component(axis))
                    .map(|(p, v)| p * v)
                    .collect();
                for (r, d) in res.iter_mut().zip(partial_derivative(&grid, &flux, axis)) {
                    *r += d;
                }
            }
            for (r, l) in res.iter_mut().zip(laplacian(&grid, rho[k].values())) {
                *r -= epsilon * l;
            }
            res
        })
        .collect();
    Ok(interior_stats(&grid, &residuals, None))
}

/// Everything recovered from a solved bridge at the requested snapshots.
#[derive(Clone, Debug)]
pub struct BridgeSolution {
    pub times: Vec<f64>,
    pub rho_opt: Vec<ScalarField>,
    pub mass_defects: Vec<f64>,
    pub phi_hat: Vec<ScalarField>,
    pub phi: Vec<ScalarField>,
    pub v_opt: Vec<VectorField>,
    pub psi: Vec<ScalarField>,
    /// Evaluated on every substep boundary, not just the snapshots.
    pub objective: f64,
    pub convergence: ConvergenceReport,
    pub problem: BridgeProblem,
}

/// Uniform snapshot times `t0 + k (t1 − t0)/(count − 1)`.
pub fn uniform_times(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| {
            if k + 1 == count {
                t1
            } else {
                t0 + (t1 - t0) * k as f64 / (count - 1) as f64
            }
        })
        .collect()
}

pub fn recover(
    problem: &BridgeProblem,
    outcome: &BridgeOutcome,
    snapshot_times: &[f64],
) -> Result<BridgeSolution> {
    let (fwd, bwd) = factor_schedules(&outcome.factors, problem, snapshot_times)?;
    let densities = snapshot_times
        .iter()
        .zip(fwd.fields.iter().zip(&bwd.fields))
        .map(|(&t, (a, b))| density_product(t, a, b))
        .collect::<Result<Vec<_>>>()?;
    let v_opt = recover_velocity(&bwd.fields, problem.epsilon)?;
    let psi = bwd
        .fields
        .iter()
        .map(|f| recover_psi(f, problem.epsilon))
        .collect::<Result<Vec<_>>>()?;

    let all = uniform_times(problem.t0, problem.t1, problem.options.nsteps + 1);
    let (fwd_all, bwd_all) = factor_schedules(&outcome.factors, problem, &all)?;
    let rho_all = all
        .iter()
        .zip(fwd_all.fields.iter().zip(&bwd_all.fields))
        .map(|(&t, (a, b))| Ok(density_product(t, a, b)?.rho))
        .collect::<Result<Vec<_>>>()?;
    let v_all = recover_velocity(&bwd_all.fields, problem.epsilon)?;
    let objective = objective_value(&all, &rho_all, &v_all, &problem.potential)?;

    Ok(BridgeSolution {
        times: snapshot_times.to_vec(),
        mass_defects: densities.iter().map(|d| d.mass_defect).collect(),
        rho_opt: densities.into_iter().map(|d| d.rho).collect(),
        phi_hat: fwd.fields,
        phi: bwd.fields,
        v_opt,
        psi,
        objective,
        convergence: outcome.report.clone(),
        problem: problem.clone(),
    })
}
