//! Deterministic Lambert baseline: fixed-step RK4 plus Newton shooting on
//! the initial velocity.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::potential::Potential;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateSample {
    pub t: f64,
    pub r: [f64; 3],
    pub v: [f64; 3],
}

fn guard(potential: &Potential, t: f64, r: &[f64; 3]) -> Result<()> {
    potential.check_position(r).map_err(|e| match e {
        Error::Singularity { radius, .. } => Error::SingularityCrossing { time: t, radius },
        other => other,
    })
}

fn accel(potential: &Potential, r: &[f64; 3]) -> [f64; 3] {
    let g = potential.grad3(r);
    [-g[0], -g[1], -g[2]]
}

fn axpy(a: f64, x: &[f64; 3], y: &[f64; 3]) -> [f64; 3] {
    [y[0] + a * x[0], y[1] + a * x[1], y[2] + a * x[2]]
}

/// Classical RK4 on `ṙ = v, v̇ = −∇V` with `ceil((t1 − t0)/dt)` equal steps.
pub fn integrate_ode(
    potential: &Potential,
    r0: [f64; 3],
    v0: [f64; 3],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vec<StateSample>> {
    if !(dt > 0.0) || !(t1 > t0) || !(dt.is_finite() && t1.is_finite() && t0.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "need dt > 0 and t1 > t0, got dt = {dt}, [{t0}, {t1}]"
        )));
    }
    if r0.iter().chain(&v0).any(|x| !x.is_finite()) {
        return Err(Error::InvalidSpec("initial state must be finite".into()));
    }
    let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    let (mut r, mut v) = (r0, v0);
    guard(potential, t0, &r)?;
    path.push(StateSample { t: t0, r, v });
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1r = v;
        let k1v = accel(potential, &r);
        let r2 = axpy(0.5 * h, &k1r, &r);
        guard(potential, t + 0.5 * h, &r2)?;
        let k2r = axpy(0.5 * h, &k1v, &v);
        let k2v = accel(potential, &r2);
        let r3 = axpy(0.5 * h, &k2r, &r);
        guard(potential, t + 0.5 * h, &r3)?;
        let k3r = axpy(0.5 * h, &k2v, &v);
        let k3v = accel(potential, &r3);
        let r4 = axpy(h, &k3r, &r);
        guard(potential, t + h, &r4)?;
        let k4r = axpy(h, &k3v, &v);
        let k4v = accel(potential, &r4);
        for i in 0..3 {
            r[i] += h / 6.0 * (k1r[i] + 2.0 * k2r[i] + 2.0 * k3r[i] + k4r[i]);
            v[i] += h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        }
        let t_next = if k + 1 == steps { t1 } else { t + h };
        guard(potential, t_next, &r)?;
        path.push(StateSample { t: t_next, r, v });
    }
    Ok(path)
}

/// Single-revolution transfer found by shooting.
#[derive(Clone, Debug)]
pub struct LambertArc {
    pub r0: [f64; 3],
    pub r1: [f64; 3],
    pub t0: f64,
    pub t1: f64,
    pub v0: [f64; 3],
    pub path: Vec<StateSample>,
    pub terminal_miss: f64,
    pub newton_iterations: usize,
}

impl LambertArc {
    /// Position at time `t` by linear interpolation between path samples.
    pub fn position_at(&self, t: f64) -> [f64; 3] {
        let p = &self.path;
        let k = p.partition_point(|s| s.t <= t).clamp(1, p.len() - 1);
        let (a, b) = (&p[k - 1], &p[k]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        [0, 1, 2].map(|i| a.r[i] + w * (b.r[i] - a.r[i]))
    }

    /// Writes `t,x,y,z,vx,vy,vz`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x", "y", "z", "vx", "vy", "vz"])?;
        for s in &self.path {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.r)
                .chain(s.v)
                .map(|x| format!("{x:.15e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShootingOptions {
    pub dt: f64,
    pub tol: f64,
    pub max_newton: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            tol: 1e-9,
            max_newton: 50,
        }
    }
}

fn terminal(potential: &Potential, r0: [f64; 3], v0: [f64; 3], t0: f64, t1: f64, dt: f64) -> Result<Vector3<f64>> {
    let path = integrate_ode(potential, r0, v0, t0, t1, dt)?;
    let end = path.last().expect("non-empty path").r;
    Ok(Vector3::from(end))
}

/// Newton iteration on `v0 ↦ r(t1; v0) − r1` with a forward-difference
/// Jacobian. `v0_guess` defaults to the chord velocity `(r1 − r0)/(t1 − t0)`.
pub fn shoot_lambert(
    potential: &Potential,
    r0: [f64; 3],
    r1: [f64; 3],
    t0: f64,
    t1: f64,
    v0_guess: Option<[f64; 3]>,
    options: ShootingOptions,
) -> Result<LambertArc> {
    if r1.iter().any(|x| !x.is_finite()) || !(options.tol > 0.0) || options.max_newton == 0 {
        return Err(Error::InvalidSpec(
            "shooting needs finite endpoints, tol > 0 and max_newton >= 1".into(),
        ));
    }
    let target = Vector3::from(r1);
    let chord = (target - Vector3::from(r0)) / (t1 - t0);
    let mut v = v0_guess.map(Vector3::from).unwrap_or(chord);
    let dt = options.dt;
    let mut miss = terminal(potential, r0, v.into(), t0, t1, dt)? - target;

    for iteration in 0..=options.max_newton {
        if miss.norm() <= options.tol {
            let path = integrate_ode(potential, r0, v.into(), t0, t1, dt)?;
            return Ok(LambertArc {
                r0,
                r1,
                t0,
                t1,
                v0: v.into(),
                path,
                terminal_miss: miss.norm(),
                newton_iterations: iteration,
            });
        }
        if iteration == options.max_newton {
            break;
        }
        let probe = 1e-5 * v.norm().max(1.0);
        let mut jac = Matrix3::zeros();
        for c in 0..3 {
            let mut vp = v;
            vp[c] += probe;
            let col = (terminal(potential, r0, vp.into(), t0, t1, dt)? - target - miss) / probe;
            jac.set_column(c, &col);
        }
        let step = jac.lu().solve(&(-miss)).ok_or_else(|| {
            Error::NewtonDivergence(format!("singular shooting Jacobian at iteration {iteration}"))
        })?;
        if !step.iter().all(|x| x.is_finite()) {
            return Err(Error::NewtonDivergence("non-finite Newton step".into()));
        }
        // backtracking: halve the step until the miss decreases
        let mut lambda = 1.0;
        loop {
            let trial = v + step * lambda;
            match terminal(potential, r0, trial.into(), t0, t1, dt) {
                Ok(end) if (end - target).norm() < miss.norm() => {
                    v = trial;
                    miss = end - target;
                    break;
                }
                Ok(_) | Err(Error::SingularityCrossing { .. }) if lambda > 1e-6 => lambda *= 0.5,
                Ok(_) => {
                    return Err(Error::NewtonDivergence(format!(
                        "line search stalled at iteration {iteration} with miss {:.3e}",
                        miss.norm()
                    )))
                }
                Err(e) => return Err(e),
            }
        }
    }
    Err(Error::NewtonDivergence(format!(
        "miss {:.3e} after {} iterations exceeds tolerance {:.3e}",
        miss.norm(),
        options.max_newton,
        options.tol
    )))
}
