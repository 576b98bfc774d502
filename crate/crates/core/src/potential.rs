//! Gravitational potential (Kepler + J2 zonal term) and the simpler fields
//! used by the test problems.
//!
//! Positions are slices of length 1, 2 or 3. Missing trailing coordinates
//! are taken as zero, so planar problems evaluate the J2 bracket with z = 0.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Earth gravitational parameter, km³/s².
pub const MU_EARTH: f64 = 398_600.4415;
/// Second zonal harmonic, dimensionless.
pub const J2_EARTH: f64 = 1.08263e-3;
/// Earth equatorial radius, km.
pub const R_EARTH: f64 = 6378.1363;

type ValueFn = dyn Fn(&[f64; 3]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64; 3]) -> [f64; 3] + Send + Sync;

/// User-supplied potential. The gradient must be the analytic gradient of
/// `value`; nothing checks this at construction.
#[derive(Clone)]
pub struct CustomPotential {
    pub name: String,
    value: Arc<ValueFn>,
    gradient: Arc<GradFn>,
}

impl CustomPotential {
    pub fn new<V, G>(name: impl Into<String>, value: V, gradient: G) -> Self
    where
        V: Fn(&[f64; 3]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64; 3]) -> [f64; 3] + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    /// Spatially constant potential `V ≡ c`.
    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant({c})"), move |_| c, |_| [0.0; 3])
    }

    /// `base + c`, sharing the gradient of `base`.
    pub fn shifted(base: Potential, c: f64) -> Self {
        let grad_base = base.clone();
        Self::new(
            format!("shifted({c})"),
            move |r| base.value3(r) + c,
            move |r| grad_base.grad3(r),
        )
    }
}

impl fmt::Debug for CustomPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPotential")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum Potential {
    /// `V = −μ/|r| − μ J2 R²/(2|r|³) (1 − 3z²/|r|²)`.
    KeplerJ2 {
        mu: f64,
        j2: f64,
        r_earth: f64,
        r_min: f64,
    },
    /// `V = −½ k |r − c|²` (negative definite, acts as a killing rate).
    Quadratic { stiffness: f64, center: [f64; 3] },
    Zero,
    Custom(CustomPotential),
}

impl Default for Potential {
    fn default() -> Self {
        Self::earth()
    }
}

impl Potential {
    /// Kepler + J2 with the Earth constants, guard radius at the surface.
    pub fn earth() -> Self {
        Self::KeplerJ2 {
            mu: MU_EARTH,
            j2: J2_EARTH,
            r_earth: R_EARTH,
            r_min: R_EARTH,
        }
    }

    pub fn kepler(mu: f64) -> Self {
        Self::KeplerJ2 {
            mu,
            j2: 0.0,
            r_earth: 1.0,
            r_min: 1e-3,
        }
    }

    pub fn quadratic(stiffness: f64, center: &[f64]) -> Self {
        Self::Quadratic {
            stiffness,
            center: pad3(center),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::KeplerJ2 {
                mu,
                j2,
                r_earth,
                r_min,
            } => {
                if !(mu > 0.0 && mu.is_finite()) {
                    return Err(Error::InvalidSpec(format!("mu must be > 0, got {mu}")));
                }
                if !(r_earth > 0.0 && r_earth.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "r_earth must be > 0, got {r_earth}"
                    )));
                }
                if !j2.is_finite() {
                    return Err(Error::InvalidSpec("j2 must be finite".into()));
                }
                if !(r_min > 0.0 && r_min >= r_earth * 1e-3) {
                    return Err(Error::InvalidSpec(format!(
                        "r_min must be >= 1e-3 * r_earth and > 0, got {r_min}"
                    )));
                }
                Ok(())
            }
            Self::Quadratic { stiffness, center } => {
                if !(stiffness >= 0.0 && stiffness.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "quadratic stiffness must be >= 0, got {stiffness}"
                    )));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidSpec("quadratic center must be finite".into()));
                }
                Ok(())
            }
            Self::Zero | Self::Custom(_) => Ok(()),
        }
    }

    /// Potential energy per unit mass at `r`.
    pub fn eval(&self, r: &[f64]) -> Result<f64> {
        let r3 = checked_pad(r)?;
        self.check_position(&r3)?;
        Ok(self.value3(&r3))
    }

    /// Gradient of [`Potential::eval`]; the acceleration is its negative.
    /// The returned vector has the same length as `r`.
    pub fn grad(&self, r: &[f64]) -> Result<Vec<f64>> {
        let r3 = checked_pad(r)?;
        self.check_position(&r3)?;
        Ok(self.grad3(&r3)[..r.len()].to_vec())
    }

    /// Errors if `r` is inside the guard radius of a Kepler potential.
    pub fn check_position(&self, r: &[f64; 3]) -> Result<()> {
        if let Self::KeplerJ2 { r_min, .. } = *self {
            let radius = norm3(r);
            if !(radius >= r_min) {
                return Err(Error::Singularity { radius, r_min });
            }
        }
        Ok(())
    }

    /// Unchecked evaluation; callers guarantee `|r| >= r_min`.
    pub fn value3(&self, r: &[f64; 3]) -> f64 {
        match self {
            Self::KeplerJ2 {
                mu, j2, r_earth, ..
            } => {
                let rn = norm3(r);
                let zr = r[2] / rn;
                -mu / rn - mu * j2 * r_earth * r_earth / (2.0 * rn.powi(3)) * (1.0 - 3.0 * zr * zr)
            }
            Self::Quadratic { stiffness, center } => {
                let d2: f64 = (0..3).map(|k| (r[k] - center[k]).powi(2)).sum();
                -0.5 * stiffness * d2
            }
            Self::Zero => 0.0,
            Self::Custom(c) => (c.value)(r),
        }
    }

    pub fn grad3(&self, r: &[f64; 3]) -> [f64; 3] {
        match self {
            Self::KeplerJ2 {
                mu, j2, r_earth, ..
            } => {
                let rn = norm3(r);
                let r2 = rn * rn;
                let r3 = r2 * rn;
                let r5 = r3 * r2;
                let r7 = r5 * r2;
                let a = mu * j2 * r_earth * r_earth / 2.0;
                let z2 = r[2] * r[2];
                let radial = mu / r3 + 3.0 * a / r5 - 15.0 * a * z2 / r7;
                let mut g = [radial * r[0], radial * r[1], radial * r[2]];
                g[2] += 6.0 * a * r[2] / r5;
                g
            }
            Self::Quadratic { stiffness, center } => [
                -stiffness * (r[0] - center[0]),
                -stiffness * (r[1] - center[1]),
                -stiffness * (r[2] - center[2]),
            ],
            Self::Zero => [0.0; 3],
            Self::Custom(c) => (c.gradient)(r),
        }
    }
}

pub(crate) fn pad3(r: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, v) in out.iter_mut().zip(r) {
        *o = *v;
    }
    out
}

fn checked_pad(r: &[f64]) -> Result<[f64; 3]> {
    if r.is_empty() || r.len() > 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: r.len(),
        });
    }
    Ok(pad3(r))
}

fn norm3(r: &[f64; 3]) -> f64 {
    (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn central_difference(p: &Potential, r: [f64; 3], h: f64) -> [f64; 3] {
        let mut g = [0.0; 3];
        for k in 0..3 {
            let mut plus = r;
            let mut minus = r;
            plus[k] += h;
            minus[k] -= h;
            g[k] = (p.eval(&plus).unwrap() - p.eval(&minus).unwrap()) / (2.0 * h);
        }
        g
    }

    #[test]
    fn unit_kepler_value_and_gradient() {
        let p = Potential::KeplerJ2 {
            mu: 1.0,
            j2: 0.0,
            r_earth: 1.0,
            r_min: 0.1,
        };
        assert_eq!(p.eval(&[1.0, 0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(p.grad(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn earth_value_at_equator() {
        let p = Potential::earth();
        let v = p.eval(&[R_EARTH, 0.0, 0.0]).unwrap();
        let expected = -(MU_EARTH / R_EARTH) * (1.0 + J2_EARTH / 2.0);
        assert_relative_eq!(v, expected, max_relative = 1e-15);
    }

    #[test]
    fn zero_potential() {
        let p = Potential::Zero;
        assert_eq!(p.eval(&[3.0, -2.0]).unwrap(), 0.0);
        assert_eq!(p.grad(&[3.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn earth_gradient_matches_finite_differences() {
        let p = Potential::earth();
        let r = [7000.0, 0.0, 0.0];
        let fd = central_difference(&p, r, 1e-2);
        let g = p.grad(&r).unwrap();
        let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..3 {
            assert!((g[k] - fd[k]).abs() <= 1e-6 * scale, "{k}: {} vs {}", g[k], fd[k]);
        }
    }

    #[test]
    fn singularity_is_an_error() {
        let p = Potential::earth();
        assert!(matches!(
            p.eval(&[100.0, 0.0, 0.0]),
            Err(Error::Singularity { .. })
        ));
        assert!(matches!(
            p.grad(&[0.0, 0.0, 0.0]),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn bad_dimension() {
        assert!(matches!(
            Potential::Zero.eval(&[0.0; 4]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            Potential::Zero.eval(&[]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let bad = Potential::KeplerJ2 {
            mu: 1.0,
            j2: 0.0,
            r_earth: 1.0,
            r_min: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(Potential::earth().validate().is_ok());
        assert!(Potential::quadratic(-1.0, &[0.0]).validate().is_err());
    }

    #[test]
    fn quadratic_is_negative_definite() {
        let p = Potential::quadratic(2.0, &[1.0, 1.0]);
        assert_eq!(p.eval(&[1.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(p.eval(&[2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(p.grad(&[2.0, 1.0]).unwrap(), vec![-2.0, -0.0]);
    }

    #[test]
    fn shifted_custom_potential() {
        let p = Potential::Custom(CustomPotential::shifted(Potential::quadratic(1.0, &[0.0]), -0.5));
        assert_relative_eq!(p.eval(&[1.0]).unwrap(), -1.0);
        assert_eq!(p.grad(&[1.0]).unwrap(), vec![-1.0]);
    }

    proptest! {
        #[test]
        fn earth_potential_is_negative(
            radius in R_EARTH..(20.0 * R_EARTH),
            theta in 0.0..std::f64::consts::PI,
            phi in 0.0..(2.0 * std::f64::consts::PI),
        ) {
            let r = [
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ];
            prop_assert!(Potential::earth().eval(&r).unwrap() < 0.0);
        }

        #[test]
        fn earth_gradient_is_second_order_consistent(
            radius in 6500.0..40000.0f64,
            theta in 0.1..3.0f64,
            phi in 0.0..6.28f64,
        ) {
            let p = Potential::earth();
            let r = [
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ];
            let g = p.grad(&r).unwrap();
            let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            // truncation error ~ h² |∇³V| ~ h² |∇V| / r², plus rounding
            let h = 1.0;
            let fd = central_difference(&p, r, h);
            for k in 0..3 {
                prop_assert!((g[k] - fd[k]).abs() <= 10.0 * scale * h * h / (radius * radius) + 1e-9 * scale);
            }
        }

        #[test]
        fn earth_potential_is_axially_symmetric(
            x in 6500.0..20000.0f64,
            z in -8000.0..8000.0f64,
            angle in 0.0..6.28f64,
        ) {
            let p = Potential::earth();
            let a = p.eval(&[x, 0.0, z]).unwrap();
            let b = p.eval(&[x * angle.cos(), x * angle.sin(), z]).unwrap();
            prop_assert!((a - b).abs() <= 1e-13 * a.abs());
        }
    }
}
