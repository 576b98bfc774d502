//! Reference solutions coded independently of the crate's propagators.
#![allow(dead_code)]

use std::f64::consts::PI;

pub fn gaussian_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}

/// Heat kernel of `∂u/∂t = ε Δu` in 1D (variance `2εt`).
pub fn heat_kernel(x: f64, y: f64, epsilon: f64, t: f64) -> f64 {
    let var = 2.0 * epsilon * t;
    (-(x - y).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Discrete Sinkhorn on a uniform 1D grid with the explicit heat kernel,
/// for the zero-potential bridge.
pub struct Sinkhorn1d {
    pub x: Vec<f64>,
    pub h: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub rho0: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub iterations: usize,
}

fn apply(x: &[f64], h: f64, epsilon: f64, t: f64, f: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            x.iter()
                .zip(f)
                .map(|(&xj, fj)| heat_kernel(xi, xj, epsilon, t) * fj * h)
                .sum()
        })
        .collect()
}

impl Sinkhorn1d {
    /// `rho0`, `rho1` are sampled at the nodes of `[lo, hi]` with `n` points
    /// and normalized to unit Riemann mass.
    pub fn solve(
        lo: f64,
        hi: f64,
        n: usize,
        rho0: impl Fn(f64) -> f64,
        rho1: impl Fn(f64) -> f64,
        epsilon: f64,
        horizon: f64,
        tol: f64,
    ) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        let x: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        let normalize = |v: Vec<f64>| {
            let m: f64 = v.iter().sum::<f64>() * h;
            v.into_iter().map(|p| p / m).collect::<Vec<f64>>()
        };
        let r0 = normalize(x.iter().map(|&v| rho0(v)).collect());
        let r1 = normalize(x.iter().map(|&v| rho1(v)).collect());
        // dense kernel, symmetric
        let k: Vec<f64> = (0..n * n)
            .map(|ij| heat_kernel(x[ij / n], x[ij % n], epsilon, horizon) * h)
            .collect();
        let mv = |f: &[f64]| -> Vec<f64> {
            (0..n).map(|i| (0..n).map(|j| k[i * n + j] * f[j]).sum()).collect()
        };
        let mut a = vec![1.0; n];
        let mut b = vec![1.0; n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let ka = mv(&a);
            b = r1.iter().zip(&ka).map(|(r, d)| r / d).collect();
            let kb = mv(&b);
            a = r0.iter().zip(&kb).map(|(r, d)| r / d).collect();
            let ka = mv(&a);
            let err: f64 = b
                .iter()
                .zip(&ka)
                .zip(&r1)
                .map(|((bi, ki), r)| (bi * ki - r).abs() * h)
                .sum();
            if err < tol || iterations > 20_000 {
                break;
            }
        }
        Self {
            x,
            h,
            epsilon,
            horizon,
            rho0: r0,
            a,
            b,
            iterations,
        }
    }

    /// Time-`t` marginal `(Q_t a)(Q_{T−t} b)` at the nodes.
    pub fn marginal(&self, t: f64) -> Vec<f64> {
        let fwd = if t == 0.0 {
            self.a.clone()
        } else {
            apply(&self.x, self.h, self.epsilon, t, &self.a)
        };
        let bwd = if t == self.horizon {
            self.b.clone()
        } else {
            apply(&self.x, self.h, self.epsilon, self.horizon - t, &self.b)
        };
        fwd.iter().zip(&bwd).map(|(p, q)| p * q).collect()
    }

    /// `2ε KL(π ‖ ρ₀ ⊗ Q_T)`: the control cost of the bridge.
    pub fn entropic_cost(&self) -> f64 {
        let n = self.x.len();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                let q = heat_kernel(self.x[i], self.x[j], self.epsilon, self.horizon) * self.h;
                let pi = self.a[i] * q * self.b[j] * self.h;
                let reference = self.rho0[i] * self.h * q;
                if pi > 0.0 && reference > 0.0 {
                    kl += pi * (pi / reference).ln();
                }
            }
        }
        2.0 * self.epsilon * kl
    }
}

/// Trapezoidal `∫ |f − g|` on a uniform grid.
pub fn l1(f: &[f64], g: &[f64], h: f64) -> f64 {
    let n = f.len();
    f.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (a, b))| {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            w * (a - b).abs() * h
        })
        .sum()
}
