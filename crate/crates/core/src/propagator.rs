//! Solution operators of the factor equations
//!
//! ```text
//!   ∂φ̂/∂t =  (εΔ + V/(2ε)) φ̂      (forward)
//!   ∂φ/∂t  = −(εΔ + V/(2ε)) φ       (backward)
//! ```
//!
//! built two independent ways:
//!
//! * split-step: Strang splitting of the reaction term `exp(V δ/(4ε))`
//!   around an exact lattice heat-kernel convolution of variance `2εδ`;
//! * Feynman–Kac: weighted Euler–Maruyama paths of `dr = √(2ε) dw`.
//!
//! A kernel matrix entry `K[i, j]` is the (killed) probability of moving from
//! node `j` into the cell of node `i`, i.e. the transition density times the
//! source node's volume `h_vol`. Paths or heat-kernel mass leaving the box
//! are lost (absorbing truncation).
//!
//! Split-step kernels on grids larger than [`DENSE_NODE_LIMIT`] are kept in
//! factored form and applied matrix-free; [`KernelOperator::to_dense`]
//! materializes them on demand.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{integrate, ScalarField, SpatialGrid};
use crate::potential::Potential;

/// Split-step kernels on at most this many nodes are stored as dense matrices.
pub const DENSE_NODE_LIMIT: usize = 2048;
/// Largest tolerated `|V| δ/(4ε)` in one reaction half-step.
pub const MAX_REACTION_EXPONENT: f64 = 700.0;
/// Heat-kernel taps below this fraction of the central tap are dropped.
pub const TAP_CUTOFF: f64 = 1e-24;
/// Minimum substep diffusion length, in grid spacings, for the lattice
/// heat kernel to reproduce the continuum variance.
pub const MIN_SUBSTEP_RESOLUTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMethod {
    SplitStep,
    FeynmanKac,
    /// Matrix supplied by the caller.
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One Strang substep `R G R`, repeated `nsteps` times.
#[derive(Clone, Debug)]
pub struct SplitStepScheme {
    grid: Arc<SpatialGrid>,
    /// Per-axis symmetric lattice heat-kernel taps `g[0..=w]`.
    taps: Vec<Vec<f64>>,
    /// `exp(V δ/(4ε))` at each node.
    reaction_half: Vec<f64>,
    nsteps: usize,
    substep: f64,
}

impl SplitStepScheme {
    pub fn new(
        potential: &Potential,
        grid: &Arc<SpatialGrid>,
        epsilon: f64,
        t0: f64,
        t1: f64,
        nsteps: usize,
    ) -> Result<Self> {
        check_time_window(grid, epsilon, t0, t1)?;
        if nsteps == 0 {
            return Err(Error::InvalidSpec("nsteps must be >= 1".into()));
        }
        let substep = (t1 - t0) / nsteps as f64;
        let variance = 2.0 * epsilon * substep;
        let taps = (0..grid.dim())
            .map(|k| {
                let h = grid.spacing()[k];
                if variance.sqrt() < MIN_SUBSTEP_RESOLUTION * h {
                    return Err(Error::InvalidSpec(format!(
                        "substep diffusion length {:.3e} is below {MIN_SUBSTEP_RESOLUTION} grid spacings ({h:.3e}) on axis {k}; use fewer substeps or a finer grid",
                        variance.sqrt()
                    )));
                }
                Ok(lattice_heat_taps(h, variance))
            })
            .collect::<Result<Vec<_>>>()?;

        let values = node_potential(potential, grid)?;
        let reaction_half = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let exponent = v * substep / (4.0 * epsilon);
                if !exponent.is_finite() || exponent.abs() > MAX_REACTION_EXPONENT {
                    Err(Error::NonFiniteKernel(format!(
                        "reaction exponent V·δ/(4ε) = {exponent:.3e} at node {i}; rescale length/time units or increase epsilon"
                    )))
                } else {
                    Ok(exponent.exp())
                }
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            grid: grid.clone(),
            taps,
            reaction_half,
            nsteps,
            substep,
        })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn nsteps(&self) -> usize {
        self.nsteps
    }

    pub fn substep(&self) -> f64 {
        self.substep
    }

    /// One forward substep in place; `scratch` must have the field length.
    fn step(&self, values: &mut [f64], scratch: &mut [f64]) {
        for (v, r) in values.iter_mut().zip(&self.reaction_half) {
            *v *= r;
        }
        for axis in 0..self.grid.dim() {
            convolve_axis(&self.grid, &self.taps[axis], values, scratch, axis);
            values.copy_from_slice(scratch);
        }
        for (v, r) in values.iter_mut().zip(&self.reaction_half) {
            *v *= r;
        }
    }

    /// Transpose of [`Self::step`]: the factors in reverse order, each
    /// transposed.
    fn step_adjoint(&self, values: &mut [f64], scratch: &mut [f64]) {
        for (v, r) in values.iter_mut().zip(&self.reaction_half) {
            *v *= r;
        }
        for axis in (0..self.grid.dim()).rev() {
            // lattice taps are symmetric, so the transpose convolves with the same taps
            convolve_axis(&self.grid, &self.taps[axis], values, scratch, axis);
            values.copy_from_slice(scratch);
        }
        for (v, r) in values.iter_mut().zip(&self.reaction_half) {
            *v *= r;
        }
    }

    fn run(&self, values: &mut [f64], steps: usize, direction: Direction) {
        let mut scratch = vec![0.0; values.len()];
        for _ in 0..steps {
            match direction {
                Direction::Forward => self.step(values, &mut scratch),
                Direction::Backward => self.step_adjoint(values, &mut scratch),
            }
        }
    }
}

fn check_time_window(grid: &SpatialGrid, epsilon: f64, t0: f64, t1: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidSpec(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidSpec(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    let diffusion_length = (2.0 * epsilon * (t1 - t0)).sqrt();
    for axis in 0..grid.dim() {
        let width = grid.width(axis);
        if diffusion_length > 0.25 * width {
            return Err(Error::DomainTooNarrow {
                axis,
                diffusion_length,
                width,
            });
        }
    }
    Ok(())
}

fn node_potential(potential: &Potential, grid: &SpatialGrid) -> Result<Vec<f64>> {
    (0..grid.len())
        .map(|i| {
            let r = grid.position(i);
            potential.check_position(&r)?;
            Ok(potential.value3(&r))
        })
        .collect()
}

/// Taps of the lattice Gaussian with the given variance, normalized by the
/// full lattice sum so that interior nodes conserve mass exactly.
fn lattice_heat_taps(h: f64, variance: f64) -> Vec<f64> {
    let gauss = |k: usize| (-((k as f64) * h).powi(2) / (2.0 * variance)).exp();
    let mut taps = vec![1.0];
    let mut k = 1;
    loop {
        let g = gauss(k);
        if g < TAP_CUTOFF {
            break;
        }
        taps.push(g);
        k += 1;
    }
    let mut lattice_sum = 1.0;
    let mut k = 1;
    loop {
        let g = gauss(k);
        lattice_sum += 2.0 * g;
        if g < 1e-300 || g < 1e-18 * lattice_sum && k >= taps.len() {
            break;
        }
        k += 1;
    }
    taps.iter().map(|t| t / lattice_sum).collect()
}

/// `out = G_axis · input` for the banded symmetric Toeplitz `G_axis`.
fn convolve_axis(grid: &SpatialGrid, taps: &[f64], input: &[f64], out: &mut [f64], axis: usize) {
    let n = grid.counts()[axis];
    let inner = grid.strides()[axis];
    let w = taps.len() - 1;
    out.par_chunks_mut(inner)
        .with_min_len((256 / inner).max(1))
        .enumerate()
        .for_each(|(chunk, dst)| {
            let outer = chunk / n;
            let i = chunk % n;
            let base = outer * n * inner;
            dst.fill(0.0);
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(n - 1);
            for j in lo..=hi {
                let t = taps[i.abs_diff(j)];
                let src = &input[base + j * inner..base + (j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        });
}

#[derive(Clone, Debug)]
enum Storage {
    /// Row-major `N × N`.
    Dense(Vec<f64>),
    Factored(SplitStepScheme),
}

#[derive(Clone, Debug)]
pub struct KernelOperator {
    grid: Arc<SpatialGrid>,
    epsilon: f64,
    t0: f64,
    t1: f64,
    nsteps: usize,
    method: KernelMethod,
    storage: Storage,
}

impl KernelOperator {
    /// Wraps a caller-supplied row-major matrix.
    pub fn from_dense(
        grid: Arc<SpatialGrid>,
        matrix: Vec<f64>,
        epsilon: f64,
        t0: f64,
        t1: f64,
    ) -> Result<Self> {
        let n = grid.len();
        if matrix.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: matrix.len(),
            });
        }
        if matrix.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFiniteKernel(
                "kernel entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            grid,
            epsilon,
            t0,
            t1,
            nsteps: 1,
            method: KernelMethod::Explicit,
            storage: Storage::Dense(matrix),
        })
    }

    pub fn identity(grid: Arc<SpatialGrid>) -> Self {
        let n = grid.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        Self::from_dense(grid, m, 1.0, 0.0, 1.0).expect("identity is a valid kernel")
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn window(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn nsteps(&self) -> usize {
        self.nsteps
    }

    pub fn method(&self) -> KernelMethod {
        self.method
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Dense row-major matrix, if stored densely.
    pub fn matrix(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Dense(m) => Some(m),
            Storage::Factored(_) => None,
        }
    }

    /// Column `j` of the operator, i.e. `K e_j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.grid.len();
        match &self.storage {
            Storage::Dense(m) => (0..n).map(|i| m[i * n + j]).collect(),
            Storage::Factored(s) => {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                s.run(&mut e, s.nsteps, Direction::Forward);
                e
            }
        }
    }

    /// Materializes the operator as a row-major matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Factored(_) => {
                let n = self.grid.len();
                let columns: Vec<Vec<f64>> = (0..n).into_par_iter().map(|j| self.column(j)).collect();
                let mut m = vec![0.0; n * n];
                for (j, col) in columns.iter().enumerate() {
                    for (i, v) in col.iter().enumerate() {
                        m[i * n + j] = *v;
                    }
                }
                m
            }
        }
    }

    pub fn densified(&self) -> Self {
        Self {
            storage: Storage::Dense(self.to_dense()),
            ..self.clone()
        }
    }

    /// `(K + Kᵀ)/2`, dense.
    pub fn symmetrized(&self) -> Self {
        let n = self.grid.len();
        let m = self.to_dense();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
            }
        }
        Self {
            storage: Storage::Dense(s),
            ..self.clone()
        }
    }

    /// `max |K − Kᵀ| / max K` over the given node subset (all nodes if `None`).
    pub fn asymmetry(&self, nodes: Option<&[usize]>) -> f64 {
        let all: Vec<usize>;
        let nodes = match nodes {
            Some(s) => s,
            None => {
                all = (0..self.grid.len()).collect();
                &all
            }
        };
        let cols: Vec<Vec<f64>> = nodes.par_iter().map(|&j| self.column(j)).collect();
        let mut max_entry = 0.0f64;
        let mut max_diff = 0.0f64;
        for (a, &ja) in nodes.iter().enumerate() {
            max_entry = max_entry.max(cols[a].iter().copied().fold(0.0, f64::max));
            for (b, &jb) in nodes.iter().enumerate() {
                // K[jb, ja] vs K[ja, jb]
                max_diff = max_diff.max((cols[a][jb] - cols[b][ja]).abs());
            }
        }
        max_diff / max_entry
    }

    /// `Σ_i K[i, j]` for every source node `j`.
    pub fn column_masses(&self) -> Vec<f64> {
        let ones = vec![1.0; self.grid.len()];
        self.apply_backward_raw(&ones)
    }

    pub fn apply_forward(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check_grid(f)?;
        ScalarField::classified(self.grid.clone(), self.apply_forward_raw(f.values()))
    }

    /// Applies `Kᵀ`, the backward-in-time solution map.
    pub fn apply_backward(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check_grid(f)?;
        ScalarField::classified(self.grid.clone(), self.apply_backward_raw(f.values()))
    }

    pub(crate) fn apply_forward_raw(&self, f: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        match &self.storage {
            Storage::Dense(m) => m
                .par_chunks(n)
                .map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum())
                .collect(),
            Storage::Factored(s) => {
                let mut v = f.to_vec();
                s.run(&mut v, s.nsteps, Direction::Forward);
                v
            }
        }
    }

    pub(crate) fn apply_backward_raw(&self, f: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        match &self.storage {
            Storage::Dense(m) => (0..n)
                .into_par_iter()
                .map(|j| (0..n).map(|i| m[i * n + j] * f[i]).sum())
                .collect(),
            Storage::Factored(s) => {
                let mut v = f.to_vec();
                s.run(&mut v, s.nsteps, Direction::Backward);
                v
            }
        }
    }

    fn check_grid(&self, f: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.grid, f.grid()) || *self.grid == **f.grid() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Split-step kernel over `[t0, t1]` with `nsteps` Strang substeps.
pub fn build_kernel_splitstep(
    potential: &Potential,
    grid: &Arc<SpatialGrid>,
    epsilon: f64,
    t0: f64,
    t1: f64,
    nsteps: usize,
) -> Result<KernelOperator> {
    let scheme = SplitStepScheme::new(potential, grid, epsilon, t0, t1, nsteps)?;
    let op = KernelOperator {
        grid: grid.clone(),
        epsilon,
        t0,
        t1,
        nsteps,
        method: KernelMethod::SplitStep,
        storage: Storage::Factored(scheme),
    };
    if grid.len() <= DENSE_NODE_LIMIT {
        let dense = op.densified();
        if dense.matrix().unwrap().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteKernel("split-step kernel has non-finite entries".into()));
        }
        Ok(dense)
    } else {
        Ok(op)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeynmanKacParams {
    pub npaths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Endpoints of every simulated path, kept for bootstrap error estimates.
#[derive(Clone, Debug)]
pub struct FeynmanKacSamples {
    grid: Arc<SpatialGrid>,
    epsilon: f64,
    t0: f64,
    t1: f64,
    npaths: usize,
    /// Per source node: landing cell per path (`u32::MAX` if killed at the box).
    cells: Vec<Vec<u32>>,
    /// Per source node: Feynman–Kac weight per path.
    weights: Vec<Vec<f64>>,
}

const ESCAPED: u32 = u32::MAX;

impl FeynmanKacSamples {
    pub fn npaths(&self) -> usize {
        self.npaths
    }

    /// Number of paths that left the box, per source node.
    pub fn escaped(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|c| c.iter().filter(|&&x| x == ESCAPED).count())
            .collect()
    }

    pub fn total_escaped(&self) -> usize {
        self.escaped().iter().sum()
    }

    fn column(&self, j: usize, picks: Option<&[u32]>) -> Vec<f64> {
        let mut col = vec![0.0; self.grid.len()];
        let cells = &self.cells[j];
        let weights = &self.weights[j];
        let mut deposit = |p: usize| {
            let c = cells[p];
            if c != ESCAPED {
                col[c as usize] += weights[p];
            }
        };
        match picks {
            Some(idx) => idx.iter().for_each(|&p| deposit(p as usize)),
            None => (0..self.npaths).for_each(&mut deposit),
        }
        let inv = 1.0 / self.npaths as f64;
        col.iter_mut().for_each(|v| *v *= inv);
        col
    }

    pub fn kernel(&self) -> KernelOperator {
        let n = self.grid.len();
        let columns: Vec<Vec<f64>> = (0..n).into_par_iter().map(|j| self.column(j, None)).collect();
        let mut m = vec![0.0; n * n];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                m[i * n + j] = *v;
            }
        }
        KernelOperator {
            grid: self.grid.clone(),
            epsilon: self.epsilon,
            t0: self.t0,
            t1: self.t1,
            nsteps: 1,
            method: KernelMethod::FeynmanKac,
            storage: Storage::Dense(m),
        }
    }

    /// Bootstrap estimate of the Monte Carlo error of `K f` in L¹: paths are
    /// resampled with replacement per source node and the root-mean-square
    /// of `‖K* f − K f‖₁` over the replicates is returned.
    pub fn bootstrap_apply_error(&self, f: &ScalarField, replicates: usize, seed: u64) -> Result<f64> {
        if *f.grid().as_ref() != *self.grid {
            return Err(Error::GridMismatch);
        }
        let n = self.grid.len();
        let apply = |cols: &dyn Fn(usize) -> Vec<f64>| {
            let mut out = vec![0.0; n];
            for (j, fj) in f.values().iter().enumerate() {
                if *fj == 0.0 {
                    continue;
                }
                for (o, c) in out.iter_mut().zip(cols(j)) {
                    *o += fj * c;
                }
            }
            out
        };
        let base = apply(&|j| self.column(j, None));
        let sq: Vec<f64> = (0..replicates)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let picks: Vec<Vec<u32>> = (0..n)
                    .map(|_| {
                        (0..self.npaths)
                            .map(|_| rng.random_range(0..self.npaths as u32))
                            .collect()
                    })
                    .collect();
                let star = apply(&|j| self.column(j, Some(&picks[j])));
                let diff: Vec<f64> = star.iter().zip(&base).map(|(a, b)| (a - b).abs()).collect();
                let l1 = integrate(&ScalarField::classified(self.grid.clone(), diff).unwrap());
                l1 * l1
            })
            .collect();
        Ok((sq.iter().sum::<f64>() / replicates as f64).sqrt())
    }
}

/// Simulates `npaths` drift-free paths from every node. Each path carries
/// the weight `exp(∫ V dt / (2ε))` (trapezoidal in time) and is deposited at
/// the nearest node; paths leaving the box are killed. Streams are derived
/// from `(seed, source node)`, so results do not depend on thread count.
pub fn sample_feynman_kac(
    potential: &Potential,
    grid: &Arc<SpatialGrid>,
    epsilon: f64,
    t0: f64,
    t1: f64,
    params: FeynmanKacParams,
) -> Result<FeynmanKacSamples> {
    check_time_window(grid, epsilon, t0, t1)?;
    let FeynmanKacParams { npaths, dt, seed } = params;
    if npaths == 0 || npaths > u32::MAX as usize {
        return Err(Error::InvalidSpec(format!("npaths out of range: {npaths}")));
    }
    let span = t1 - t0;
    let steps = (span / dt).round();
    if !(dt > 0.0) || steps < 1.0 || (steps * dt - span).abs() > 1e-9 * span {
        return Err(Error::InvalidSpec(format!(
            "dt = {dt} must divide the window length {span}"
        )));
    }
    let steps = steps as usize;
    let dt = span / steps as f64;
    let node_v = node_potential(potential, grid)?;
    if node_v.iter().any(|v| v * span / (2.0 * epsilon) > MAX_REACTION_EXPONENT) {
        return Err(Error::NonFiniteKernel(
            "path weights overflow; rescale units or increase epsilon".into(),
        ));
    }
    let dim = grid.dim();
    let noise = (2.0 * epsilon * dt).sqrt();
    let rate = dt / (2.0 * epsilon);

    let per_node: Vec<(Vec<u32>, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let start = grid.position(j);
            let mut cells = Vec::with_capacity(npaths);
            let mut weights = Vec::with_capacity(npaths);
            for _ in 0..npaths {
                let mut r = start;
                let mut log_w = 0.5 * node_v[j];
                let mut alive = true;
                for s in 0..steps {
                    for x in r.iter_mut().take(dim) {
                        let xi: f64 = rng.sample(StandardNormal);
                        *x += noise * xi;
                    }
                    if !grid.contains(&r[..dim]) || potential.check_position(&r).is_err() {
                        alive = false;
                        break;
                    }
                    let v = potential.value3(&r);
                    log_w += if s + 1 == steps { 0.5 * v } else { v };
                }
                if alive {
                    cells.push(grid.nearest_node(&r[..dim]).expect("inside box") as u32);
                    weights.push((rate * log_w).exp());
                } else {
                    cells.push(ESCAPED);
                    weights.push(0.0);
                }
            }
            (cells, weights)
        })
        .collect();
    let (cells, weights) = per_node.into_iter().unzip();
    Ok(FeynmanKacSamples {
        grid: grid.clone(),
        epsilon,
        t0,
        t1,
        npaths,
        cells,
        weights,
    })
}

pub fn build_kernel_feynman_kac(
    potential: &Potential,
    grid: &Arc<SpatialGrid>,
    epsilon: f64,
    t0: f64,
    t1: f64,
    params: FeynmanKacParams,
) -> Result<KernelOperator> {
    Ok(sample_feynman_kac(potential, grid, epsilon, t0, t1, params)?.kernel())
}

#[derive(Clone, Debug)]
pub struct PropagationSchedule {
    pub times: Vec<f64>,
    pub fields: Vec<ScalarField>,
}

/// Runs the split-step scheme over `[t_start, t_end]` storing the field at
/// each snapshot time. `f0` is the value at `t_start` for forward runs and
/// at `t_end` for backward runs.
#[allow(clippy::too_many_arguments)]
pub fn propagate_schedule(
    potential: &Potential,
    grid: &Arc<SpatialGrid>,
    epsilon: f64,
    f0: &ScalarField,
    t_start: f64,
    t_end: f64,
    nsteps: usize,
    direction: Direction,
    snapshot_times: &[f64],
) -> Result<PropagationSchedule> {
    let scheme = SplitStepScheme::new(potential, grid, epsilon, t_start, t_end, nsteps)?;
    propagate_with_scheme(&scheme, f0, t_start, t_end, direction, snapshot_times)
}

pub(crate) fn snapshot_steps(
    t_start: f64,
    t_end: f64,
    nsteps: usize,
    snapshot_times: &[f64],
) -> Result<Vec<usize>> {
    let delta = (t_end - t_start) / nsteps as f64;
    let mut prev: Option<usize> = None;
    snapshot_times
        .iter()
        .map(|&time| {
            let unaligned = Error::UnalignedSnapshot {
                time,
                t_start,
                t_end,
            };
            let k = (time - t_start) / delta;
            let kr = k.round();
            if !(kr >= 0.0 && kr <= nsteps as f64) || (k - kr).abs() > 1e-9 * (nsteps as f64).max(1.0) {
                return Err(unaligned);
            }
            let k = kr as usize;
            if prev.is_some_and(|p| k <= p) {
                return Err(Error::InvalidSpec(
                    "snapshot times must be strictly increasing".into(),
                ));
            }
            prev = Some(k);
            Ok(k)
        })
        .collect()
}

pub(crate) fn propagate_with_scheme(
    scheme: &SplitStepScheme,
    f0: &ScalarField,
    t_start: f64,
    t_end: f64,
    direction: Direction,
    snapshot_times: &[f64],
) -> Result<PropagationSchedule> {
    if *f0.grid().as_ref() != **scheme.grid() {
        return Err(Error::GridMismatch);
    }
    let steps = snapshot_steps(t_start, t_end, scheme.nsteps(), snapshot_times)?;
    let grid = scheme.grid().clone();
    let mut state = f0.values().to_vec();
    let mut fields = vec![None; steps.len()];
    let mut scratch = vec![0.0; state.len()];
    match direction {
        Direction::Forward => {
            let mut at = 0;
            for (slot, &k) in steps.iter().enumerate() {
                while at < k {
                    scheme.step(&mut state, &mut scratch);
                    at += 1;
                }
                fields[slot] = Some(ScalarField::classified(grid.clone(), state.clone())?);
            }
        }
        Direction::Backward => {
            let mut at = scheme.nsteps();
            for (slot, &k) in steps.iter().enumerate().rev() {
                while at > k {
                    scheme.step_adjoint(&mut state, &mut scratch);
                    at -= 1;
                }
                fields[slot] = Some(ScalarField::classified(grid.clone(), state.clone())?);
            }
        }
    }
    Ok(PropagationSchedule {
        times: snapshot_times.to_vec(),
        fields: fields.into_iter().map(|f| f.expect("filled")).collect(),
    })
}

const DUMP_MAGIC: &[u8; 4] = b"LBKN";
/// Size of the kernel dump header in bytes.
pub const DUMP_HEADER_LEN: usize = 48;

/// Writes the dense kernel as little-endian f64, row-major, after a header:
///
/// | offset | type    | field                              |
/// |--------|---------|------------------------------------|
/// | 0      | [u8; 4] | magic `LBKN`                       |
/// | 4      | u32     | dimension                          |
/// | 8      | 3 × u32 | node counts (1 for unused axes)    |
/// | 20     | u32     | substep count                      |
/// | 24     | f64     | epsilon                            |
/// | 32     | f64     | t0                                 |
/// | 40     | f64     | t1                                 |
pub fn write_kernel_dump(path: &Path, kernel: &KernelOperator) -> Result<()> {
    let g = kernel.grid();
    let mut header = Vec::with_capacity(DUMP_HEADER_LEN);
    header.extend_from_slice(DUMP_MAGIC);
    header.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    for k in 0..3 {
        let n = g.counts().get(k).copied().unwrap_or(1) as u32;
        header.extend_from_slice(&n.to_le_bytes());
    }
    header.extend_from_slice(&(kernel.nsteps() as u32).to_le_bytes());
    header.extend_from_slice(&kernel.epsilon.to_le_bytes());
    header.extend_from_slice(&kernel.t0.to_le_bytes());
    header.extend_from_slice(&kernel.t1.to_le_bytes());
    debug_assert_eq!(header.len(), DUMP_HEADER_LEN);

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&header)?;
    for v in kernel.to_dense() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelDump {
    pub dim: usize,
    pub counts: Vec<usize>,
    pub nsteps: usize,
    pub epsilon: f64,
    pub t0: f64,
    pub t1: f64,
    pub matrix: Vec<f64>,
}

pub fn read_kernel_dump(path: &Path) -> Result<KernelDump> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < DUMP_HEADER_LEN || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::FieldFormat("not a kernel dump (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dim = u32_at(4);
    if !(1..=3).contains(&dim) {
        return Err(Error::FieldFormat(format!("bad dimension {dim}")));
    }
    let counts: Vec<usize> = (0..dim).map(|k| u32_at(8 + 4 * k)).collect();
    let n: usize = counts.iter().product();
    let body = &bytes[DUMP_HEADER_LEN..];
    if body.len() != n * n * 8 {
        return Err(Error::FieldFormat(format!(
            "expected {} matrix bytes, found {}",
            n * n * 8,
            body.len()
        )));
    }
    let matrix = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(KernelDump {
        dim,
        counts,
        nsteps: u32_at(20),
        epsilon: f64_at(24),
        t0: f64_at(32),
        t1: f64_at(40),
        matrix,
    })
}
