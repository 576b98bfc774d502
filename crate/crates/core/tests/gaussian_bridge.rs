mod oracles;

use std::sync::Arc;
use std::time::Instant;

use lambridge_core::bridge::{check_marginals, solve_bridge, BridgeProblem, SolverOptions};
use lambridge_core::grid::{discretize_density, GaussianMixture, SpatialGrid};
use lambridge_core::potential::Potential;
use lambridge_core::recovery::{fpk_residual, hjb_residual, recover, uniform_times};

use oracles::{gaussian_pdf, l1, Sinkhorn1d};

fn instance(n: usize, nsteps: usize) -> BridgeProblem {
    let g = Arc::new(SpatialGrid::uniform_1d(-8.0, 8.0, n).unwrap());
    let rho = |m: f64| discretize_density(&GaussianMixture::isotropic(vec![m], 0.5), &g).unwrap();
    BridgeProblem::new(
        rho(-2.0),
        rho(2.0),
        0.5,
        0.0,
        1.0,
        Potential::Zero,
        SolverOptions {
            nsteps,
            tol_hilbert: 1e-9,
            max_iters: 500,
            ..SolverOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn converges_and_matches_sinkhorn_oracle() {
    let prob = instance(401, 16);
    let start = Instant::now();
    let (kernel, out) = solve_bridge(&prob).unwrap();
    let elapsed = start.elapsed();
    let report = &out.report;
    assert!(elapsed.as_secs() < 60);
    assert!(report.converged);
    assert!(report.iterations < 200);
    let (_, r1) = check_marginals(&out.factors, &kernel, &prob.rho0, &prob.rho1).unwrap();
    assert!(r1 < 1e-6);

    let times = uniform_times(0.0, 1.0, 5);
    let sol = recover(&prob, &out, &times).unwrap();
    let oracle = Sinkhorn1d::solve(
        -8.0,
        8.0,
        801,
        |x| gaussian_pdf(x, -2.0, 0.25),
        |x| gaussian_pdf(x, 2.0, 0.25),
        0.5,
        1.0,
        1e-13,
    );
    for k in 1..4 {
        let fine = oracle.marginal(times[k]);
        let coarse: Vec<f64> = fine.iter().step_by(2).copied().collect();
        let d = l1(sol.rho_opt[k].values(), &coarse, 0.04);
        assert!(d < 1e-2, "t = {}: L1 distance {d:e}", times[k]);
    }
}

#[test]
fn residuals_shrink_under_refinement() {
    let mut hjb = Vec::new();
    let mut fpk = Vec::new();
    for (n, nsteps, snaps) in [(101, 8, 5), (201, 16, 9), (401, 32, 17)] {
        let prob = instance(n, nsteps);
        let (_, out) = solve_bridge(&prob).unwrap();
        let times = uniform_times(0.0, 1.0, snaps);
        let sol = recover(&prob, &out, &times).unwrap();
        hjb.push(hjb_residual(&sol.psi, &times, &Potential::Zero, 0.5, Some(&sol.rho_opt)).unwrap());
        fpk.push(fpk_residual(&sol.rho_opt, &sol.v_opt, &times, 0.5).unwrap());
    }
    for k in 1..hjb.len() {
        assert!(hjb[k].l2 < hjb[k - 1].l2, "{hjb:?}");
        assert!(hjb[k].weighted_l2 < hjb[k - 1].weighted_l2, "{hjb:?}");
        assert!(fpk[k].l2 < fpk[k - 1].l2, "{fpk:?}");
        assert!(fpk[k].max < fpk[k - 1].max, "{fpk:?}");
    }
}

fn objective_vs_entropic_cost(m0: f64, m1: f64) -> (f64, f64) {
    let g = Arc::new(SpatialGrid::uniform_1d(-8.0, 8.0, 401).unwrap());
    let rho = |m: f64| discretize_density(&GaussianMixture::isotropic(vec![m], 0.5), &g).unwrap();
    let options = SolverOptions {
        nsteps: 64,
        ..SolverOptions::default()
    };
    let prob = BridgeProblem::new(rho(m0), rho(m1), 0.5, 0.0, 1.0, Potential::Zero, options).unwrap();
    let (_, out) = solve_bridge(&prob).unwrap();
    let sol = recover(&prob, &out, &uniform_times(0.0, 1.0, 5)).unwrap();
    let oracle = Sinkhorn1d::solve(
        -8.0,
        8.0,
        401,
        |x| gaussian_pdf(x, m0, 0.25),
        |x| gaussian_pdf(x, m1, 0.25),
        0.5,
        1.0,
        1e-13,
    );
    (sol.objective, oracle.entropic_cost())
}

#[test]
fn objective_matches_entropic_cost_for_identical_endpoints() {
    let (objective, cost) = objective_vs_entropic_cost(0.0, 0.0);
    assert!((objective - cost).abs() <= 0.1 * cost, "objective {objective}, entropic cost {cost}");
}

#[test]
fn objective_matches_entropic_cost_for_shifted_endpoints() {
    let (objective, cost) = objective_vs_entropic_cost(-2.0, 2.0);
    assert!((objective - cost).abs() <= 0.1 * cost, "objective {objective}, entropic cost {cost}");
}
