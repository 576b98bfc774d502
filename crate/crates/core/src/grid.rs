//! Rectangular node grids, fields living on them, trapezoidal quadrature and
//! the finite-difference operators shared by the solver modules.
//!
//! Nodes are stored row-major: the last axis varies fastest.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const MIN_NODES_PER_AXIS: usize = 4;
/// Relative floor applied to discretized densities.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Largest tolerated fraction of mixture mass outside the grid box.
pub const MAX_MASS_LEAK: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        let dim = spec.counts.len();
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidSpec(format!(
                "grid dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if spec.lower.len() != dim || spec.upper.len() != dim {
            return Err(Error::InvalidSpec(
                "lower, upper and counts must have the same length".into(),
            ));
        }
        for k in 0..dim {
            let (lo, hi, n) = (spec.lower[k], spec.upper[k], spec.counts[k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidSpec(format!(
                    "axis {k}: bounds must be finite with lower < upper, got [{lo}, {hi}]"
                )));
            }
            if n < MIN_NODES_PER_AXIS {
                return Err(Error::InvalidSpec(format!(
                    "axis {k}: need at least {MIN_NODES_PER_AXIS} nodes, got {n}"
                )));
            }
        }
        let spacing = (0..dim)
            .map(|k| (spec.upper[k] - spec.lower[k]) / (spec.counts[k] - 1) as f64)
            .collect();
        let mut strides = vec![1; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * spec.counts[k + 1];
        }
        Ok(Self {
            lower: spec.lower.clone(),
            upper: spec.upper.clone(),
            counts: spec.counts.clone(),
            spacing,
            strides,
        })
    }

    pub fn uniform_1d(lower: f64, upper: f64, n: usize) -> Result<Self> {
        Self::new(&GridSpec {
            lower: vec![lower],
            upper: vec![upper],
            counts: vec![n],
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            counts: self.counts.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn multi_index(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for k in 0..self.dim() {
            idx[k] = flat / self.strides[k];
            flat %= self.strides[k];
        }
        idx
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.counts[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing[axis]
        }
    }

    /// Node position, zero-padded to three components.
    pub fn position(&self, flat: usize) -> [f64; 3] {
        let idx = self.multi_index(flat);
        let mut r = [0.0; 3];
        for k in 0..self.dim() {
            r[k] = self.coordinate(k, idx[k]);
        }
        r
    }

    /// Trapezoidal quadrature weight of a node.
    pub fn weight(&self, flat: usize) -> f64 {
        let idx = self.multi_index(flat);
        (0..self.dim())
            .map(|k| {
                let h = self.spacing[k];
                if idx[k] == 0 || idx[k] + 1 == self.counts[k] {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }

    /// True if the node has a neighbour on both sides along every axis.
    pub fn is_interior(&self, flat: usize) -> bool {
        let idx = self.multi_index(flat);
        (0..self.dim()).all(|k| idx[k] > 0 && idx[k] + 1 < self.counts[k])
    }

    /// Index of the node closest to `r`, or `None` outside the box.
    pub fn nearest_node(&self, r: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for k in 0..self.dim() {
            if !(r[k] >= self.lower[k] && r[k] <= self.upper[k]) {
                return None;
            }
            let i = ((r[k] - self.lower[k]) / self.spacing[k]).round() as usize;
            flat += i.min(self.counts[k] - 1) * self.strides[k];
        }
        Some(flat)
    }

    pub fn contains(&self, r: &[f64]) -> bool {
        (0..self.dim()).all(|k| r[k] >= self.lower[k] && r[k] <= self.upper[k])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positivity {
    Arbitrary,
    Nonnegative,
    StrictlyPositive,
}

impl Positivity {
    fn admits(self, v: f64) -> bool {
        match self {
            Self::Arbitrary => v.is_finite(),
            Self::Nonnegative => v.is_finite() && v >= 0.0,
            Self::StrictlyPositive => v.is_finite() && v > 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<SpatialGrid>,
    values: Vec<f64>,
    positivity: Positivity,
}

impl ScalarField {
    pub fn new(grid: Arc<SpatialGrid>, values: Vec<f64>, positivity: Positivity) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((node, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !positivity.admits(**v))
        {
            return Err(match positivity {
                Positivity::Arbitrary => Error::InvalidSpec(format!("non-finite value at node {node}")),
                _ => Error::NonPositiveField { node, value },
            });
        }
        Ok(Self {
            grid,
            values,
            positivity,
        })
    }

    /// Tightest positivity class the values satisfy.
    pub fn classified(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Result<Self> {
        let positivity = if values.iter().all(|v| *v > 0.0) {
            Positivity::StrictlyPositive
        } else if values.iter().all(|v| *v >= 0.0) {
            Positivity::Nonnegative
        } else {
            Positivity::Arbitrary
        };
        Self::new(grid, values, positivity)
    }

    pub fn constant(grid: Arc<SpatialGrid>, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::classified(grid, vec![c; n])
    }

    pub fn from_fn(grid: Arc<SpatialGrid>, f: impl Fn(&[f64; 3]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.position(i))).collect();
        Self::classified(grid, values)
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn positivity(&self) -> Positivity {
        self.positivity
    }

    pub fn require_strictly_positive(&self) -> Result<()> {
        match self.values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            Some((node, &value)) => Err(Error::NonPositiveField { node, value }),
            None => Ok(()),
        }
    }

    pub fn require_nonnegative(&self) -> Result<()> {
        match self.values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            Some((node, &value)) => Err(Error::NonPositiveField { node, value }),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &ScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::classified(self.grid.clone(), self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Self::classified(self.grid.clone(), values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First moment `∫ r f dr / ∫ f dr`, zero-padded to three components.
    pub fn mean_position(&self) -> [f64; 3] {
        let mass = integrate(self);
        let mut m = [0.0; 3];
        for (k, mk) in m.iter_mut().enumerate().take(self.grid.dim()) {
            let terms: Vec<f64> = (0..self.grid.len())
                .map(|i| self.grid.weight(i) * self.grid.position(i)[k] * self.values[i])
                .collect();
            *mk = pairwise_sum(&terms) / mass;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct VectorField {
    grid: Arc<SpatialGrid>,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: Arc<SpatialGrid>, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: components.len(),
            });
        }
        for c in &components {
            if c.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("vector field has non-finite entries".into()));
            }
        }
        Ok(Self { grid, components })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn at(&self, node: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[node]).collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.components
                .iter()
                .map(|comp| comp.iter().map(|v| v * c).collect())
                .collect(),
        )
    }

    pub fn squared_norm(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| self.components.iter().map(|c| c[i] * c[i]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn single(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Self {
        Self {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean,
                covariance,
            }],
        }
    }

    /// Isotropic Gaussian with standard deviation `sigma` on every axis.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { sigma * sigma } else { 0.0 }).collect())
            .collect();
        Self::single(mean, cov)
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.components.first().map_or(0, |c| c.mean.len());
        let mut m = vec![0.0; d];
        for c in &self.components {
            for (mk, ck) in m.iter_mut().zip(&c.mean) {
                *mk += c.weight * ck;
            }
        }
        m
    }

    /// Checks weights, shapes and positive-definiteness for dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.prepare(dim).map(|_| ())
    }

    fn prepare(&self, dim: usize) -> Result<Vec<PreparedComponent>> {
        if self.components.is_empty() {
            return Err(Error::InvalidSpec("mixture has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "mixture weights must be positive and sum to 1 (sum = {total})"
            )));
        }
        self.components
            .iter()
            .enumerate()
            .map(|(ci, c)| PreparedComponent::new(ci, c, dim))
            .collect()
    }
}

struct PreparedComponent {
    weight: f64,
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl PreparedComponent {
    fn new(index: usize, c: &GaussianComponent, dim: usize) -> Result<Self> {
        if c.mean.len() != dim || c.covariance.len() != dim || c.covariance.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidSpec(format!(
                "component {index}: mean/covariance must be {dim}-dimensional"
            )));
        }
        let cov = DMatrix::from_fn(dim, dim, |i, j| c.covariance[i][j]);
        let asym = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| (cov[(i, j)] - cov[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 * cov.amax() {
            return Err(Error::InvalidSpec(format!(
                "component {index}: covariance is not symmetric"
            )));
        }
        let chol = cov.clone().cholesky().ok_or_else(|| {
            Error::InvalidSpec(format!(
                "component {index}: covariance is not positive-definite"
            ))
        })?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let log_norm =
            -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            weight: c.weight,
            mean: c.mean.clone(),
            covariance: cov,
            precision,
            log_norm,
        })
    }

    fn density(&self, r: &[f64; 3]) -> f64 {
        let d = self.mean.len();
        let diff = DVector::from_fn(d, |i, _| r[i] - self.mean[i]);
        let q = diff.dot(&(&self.precision * &diff));
        (self.log_norm - 0.5 * q).exp()
    }

    fn is_diagonal(&self) -> bool {
        let d = self.mean.len();
        (0..d).all(|i| (0..d).all(|j| i == j || self.covariance[(i, j)] == 0.0))
    }
}

/// Samples a Gaussian mixture at the grid nodes, floors it at
/// `DENSITY_FLOOR · max` and renormalizes to unit trapezoidal mass.
///
/// The in-box mass check is exact (error functions) for diagonal
/// covariances; correlated components are checked by quadrature on the grid.
pub fn discretize_density(mixture: &GaussianMixture, grid: &Arc<SpatialGrid>) -> Result<ScalarField> {
    let comps = mixture.prepare(grid.dim())?;
    let mut inside = 0.0;
    for c in &comps {
        let p = if c.is_diagonal() {
            (0..grid.dim())
                .map(|k| {
                    let s = c.covariance[(k, k)].sqrt() * std::f64::consts::SQRT_2;
                    let below = 0.5 * erfc((c.mean[k] - grid.lower()[k]) / s);
                    let above = 0.5 * erfc((grid.upper()[k] - c.mean[k]) / s);
                    1.0 - below - above
                })
                .product()
        } else {
            let terms: Vec<f64> = (0..grid.len())
                .map(|i| grid.weight(i) * c.density(&grid.position(i)))
                .collect();
            pairwise_sum(&terms).min(1.0)
        };
        inside += c.weight * p;
    }
    let leaked = 1.0 - inside;
    if leaked > MAX_MASS_LEAK {
        return Err(Error::MassLeakage { leaked });
    }

    let mut values: Vec<f64> = (0..grid.len())
        .map(|i| {
            let r = grid.position(i);
            comps.iter().map(|c| c.weight * c.density(&r)).sum()
        })
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::InvalidSpec(
            "mixture density vanishes on every grid node (grid too coarse?)".into(),
        ));
    }
    let floor = DENSITY_FLOOR * max;
    for v in &mut values {
        *v = v.max(floor);
    }
    let field = ScalarField::new(grid.clone(), values, Positivity::StrictlyPositive)?;
    let mass = integrate(&field);
    field.scaled(1.0 / mass)
}

/// Trapezoidal integral over the grid box.
pub fn integrate(f: &ScalarField) -> f64 {
    let g = f.grid();
    let terms: Vec<f64> = f
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| g.weight(i) * v)
        .collect();
    pairwise_sum(&terms)
}

/// `∫ |f − g|`.
pub fn l1_distance(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    let diff = f.zip_with(g, |a, b| (a - b).abs())?;
    Ok(integrate(&diff))
}

/// Order-independent-of-threading summation with O(log n) error growth.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Second-order finite-difference derivative along `axis`: central in the
/// interior, one-sided three-point at the two boundary nodes.
pub fn partial_derivative(grid: &SpatialGrid, values: &[f64], axis: usize) -> Vec<f64> {
    let n = grid.counts()[axis];
    let stride = grid.strides()[axis];
    let h = grid.spacing()[axis];
    (0..values.len())
        .map(|flat| {
            let i = grid.multi_index(flat)[axis];
            let at = |j: usize| values[flat - i * stride + j * stride];
            if i == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if i + 1 == n {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * h)
            }
        })
        .collect()
}

/// Second difference along `axis`; zero on the two boundary layers.
pub fn second_derivative(grid: &SpatialGrid, values: &[f64], axis: usize) -> Vec<f64> {
    let n = grid.counts()[axis];
    let stride = grid.strides()[axis];
    let h2 = grid.spacing()[axis].powi(2);
    (0..values.len())
        .map(|flat| {
            let i = grid.multi_index(flat)[axis];
            if i == 0 || i + 1 == n {
                0.0
            } else {
                (values[flat + stride] - 2.0 * values[flat] + values[flat - stride]) / h2
            }
        })
        .collect()
}

pub fn gradient(f: &ScalarField) -> Result<VectorField> {
    let g = f.grid();
    let comps = (0..g.dim())
        .map(|k| partial_derivative(g, f.values(), k))
        .collect();
    VectorField::new(g.clone(), comps)
}

/// Discrete Laplacian; valid on interior nodes only.
pub fn laplacian(grid: &SpatialGrid, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for k in 0..grid.dim() {
        for (o, d) in out.iter_mut().zip(second_derivative(grid, values, k)) {
            *o += d;
        }
    }
    out
}

/// `∇ log f` of a strictly positive field.
pub fn gradient_log(f: &ScalarField) -> Result<VectorField> {
    f.require_strictly_positive()?;
    let logs = ScalarField::new(
        f.grid().clone(),
        f.values().iter().map(|v| v.ln()).collect(),
        Positivity::Arbitrary,
    )?;
    gradient(&logs)
}

fn axis_names(dim: usize) -> &'static [&'static str] {
    &["x", "y", "z"][..dim]
}

/// Writes `x[,y[,z]],value` rows in node order.
pub fn write_field_csv(path: &Path, grid: &SpatialGrid, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = axis_names(grid.dim()).to_vec();
    header.push("value");
    w.write_record(&header)?;
    for (i, v) in values.iter().enumerate() {
        let r = grid.position(i);
        let mut row: Vec<String> = (0..grid.dim()).map(|k| format!("{:.15e}", r[k])).collect();
        row.push(format!("{v:.15e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`], checking that the node
/// coordinates match `grid`.
pub fn read_field_csv(path: &Path, grid: &Arc<SpatialGrid>) -> Result<ScalarField> {
    let mut r = csv::Reader::from_path(path)?;
    let expected: Vec<&str> = axis_names(grid.dim()).iter().copied().chain(["value"]).collect();
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != expected {
        return Err(Error::FieldFormat(format!(
            "expected header {expected:?}, got {header:?}"
        )));
    }
    let mut values = Vec::with_capacity(grid.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i >= grid.len() {
            return Err(Error::FieldFormat("more rows than grid nodes".into()));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::FieldFormat(format!("row {}: {e}", i + 2)))
        };
        let pos = grid.position(i);
        for k in 0..grid.dim() {
            let x = parse(&rec[k])?;
            let tol = 1e-9 * grid.width(k).max(grid.lower()[k].abs()).max(grid.upper()[k].abs());
            if (x - pos[k]).abs() > tol {
                return Err(Error::FieldFormat(format!(
                    "row {}: coordinate {x} does not match grid node {}",
                    i + 2,
                    pos[k]
                )));
            }
        }
        values.push(parse(&rec[grid.dim()])?);
    }
    if values.len() != grid.len() {
        return Err(Error::FieldFormat(format!(
            "expected {} rows, got {}",
            grid.len(),
            values.len()
        )));
    }
    ScalarField::classified(grid.clone(), values)
}
