//! Forward diffusion `dX = b(t,X)dt + σ(t,X)dW`, its first variation `∇X`
//! and the inverse flow, simulated by Euler–Maruyama on a shared grid.
//!
//! Every path draws from its own ChaCha stream keyed by `(seed, path index)`,
//! so a bundle does not depend on how paths are scheduled across threads.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay_measure::TimeGrid;
use crate::error::{Error, Result};

/// Coefficient presets for the forward equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SdeCoefficients {
    /// `b = 0`, `σ = I`.
    Brownian { dim: usize },
    /// Componentwise geometric Brownian motion `dX^i = μ_i X^i dt + ν_i X^i dW^i`.
    Gbm { mu: Vec<f64>, nu: Vec<f64> },
    /// `dX = κ(θ - X)dt + s dW`.
    OrnsteinUhlenbeck { kappa: f64, theta: Vec<f64>, sigma: f64 },
}

impl SdeCoefficients {
    pub fn dim(&self) -> usize {
        match self {
            Self::Brownian { dim } => *dim,
            Self::Gbm { mu, .. } => mu.len(),
            Self::OrnsteinUhlenbeck { theta, .. } => theta.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Brownian { .. } => "brownian",
            Self::Gbm { .. } => "gbm",
            Self::OrnsteinUhlenbeck { .. } => "ou",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Brownian { dim } if *dim == 0 => Err(Error::Config("brownian dimension must be positive".into())),
            Self::Gbm { mu, nu } if mu.is_empty() || mu.len() != nu.len() => {
                Err(Error::Config("gbm needs non-empty mu and nu of equal length".into()))
            }
            Self::OrnsteinUhlenbeck { theta, .. } if theta.is_empty() => {
                Err(Error::Config("ou needs a non-empty theta".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Brownian { .. } => out.fill(0.0),
            Self::Gbm { mu, .. } => {
                for ((o, m), xi) in out.iter_mut().zip(mu).zip(x) {
                    *o = m * xi;
                }
            }
            Self::OrnsteinUhlenbeck { kappa, theta, .. } => {
                for ((o, th), xi) in out.iter_mut().zip(theta).zip(x) {
                    *o = kappa * (th - xi);
                }
            }
        }
    }

    /// Row-major `d×d` diffusion matrix.
    pub fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = match self {
                Self::Brownian { .. } => 1.0,
                Self::Gbm { nu, .. } => nu[i] * x[i],
                Self::OrnsteinUhlenbeck { sigma, .. } => *sigma,
            };
        }
    }

    /// Row-major Jacobian `∂b_i/∂x_k`.
    pub fn grad_drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = match self {
                Self::Brownian { .. } => 0.0,
                Self::Gbm { mu, .. } => mu[i],
                Self::OrnsteinUhlenbeck { kappa, .. } => -kappa,
            };
        }
    }

    /// Derivative of the diffusion, laid out so that block `j` is the row-major
    /// `d×d` Jacobian of column `j` of σ: `out[j·d² + i·d + k] = ∂σ_{ij}/∂x_k`.
    pub fn grad_diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.fill(0.0);
        if let Self::Gbm { nu, .. } = self {
            for j in 0..d {
                out[j * d * d + j * d + j] = nu[j];
            }
        }
    }

    pub fn is_elliptic(&self) -> bool {
        match self {
            Self::Brownian { .. } => true,
            Self::Gbm { nu, .. } => nu.iter().all(|v| *v != 0.0),
            Self::OrnsteinUhlenbeck { sigma, .. } => *sigma != 0.0,
        }
    }
}

/// Simulated forward paths in node-major layout: all paths of node 0, then node 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBundle {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    seed: u64,
    x: Vec<f64>,
    dw: Vec<f64>,
    grad_x: Vec<f64>,
    grad_x_inv: Vec<f64>,
}

impl ForwardBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x(&self, node: usize, path: usize) -> &[f64] {
        let d = self.dim;
        let at = (node * self.paths + path) * d;
        &self.x[at..at + d]
    }

    /// Brownian increment over `[t_i, t_{i+1})`, `i < N`.
    pub fn dw(&self, step: usize, path: usize) -> &[f64] {
        let d = self.dim;
        let at = (step * self.paths + path) * d;
        &self.dw[at..at + d]
    }

    pub fn grad_x(&self, node: usize, path: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        let at = (node * self.paths + path) * dd;
        &self.grad_x[at..at + dd]
    }

    pub fn grad_x_inv(&self, node: usize, path: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        let at = (node * self.paths + path) * dd;
        &self.grad_x_inv[at..at + dd]
    }

    /// Brownian motion `W_{t_i}` recovered from the increments.
    pub fn brownian(&self, node: usize, path: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for i in 0..node {
            for (acc, inc) in w.iter_mut().zip(self.dw(i, path)) {
                *acc += inc;
            }
        }
        w
    }
}

/// Euler–Maruyama for `X` and for `∇X` driven by the same increments; the
/// inverse flow is obtained by inverting `∇X` node by node.
pub fn simulate_forward(
    coeffs: &SdeCoefficients,
    x0: &[f64],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<ForwardBundle> {
    coeffs.validate()?;
    let d = coeffs.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    if paths == 0 {
        return Err(Error::InvalidParameter("at least one path is required".into()));
    }
    let n = grid.steps();
    let dd = d * d;

    struct Trajectory {
        x: Vec<f64>,
        dw: Vec<f64>,
        grad: Vec<f64>,
        inv: Vec<f64>,
    }

    let simulate_path = |path: usize| -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        let mut x = Vec::with_capacity((n + 1) * d);
        let mut dw = Vec::with_capacity(n * d);
        let mut grad = Vec::with_capacity((n + 1) * dd);
        x.extend_from_slice(x0);
        grad.extend((0..dd).map(|e| if e % (d + 1) == 0 { 1.0 } else { 0.0 }));

        let mut drift = vec![0.0; d];
        let mut sigma = vec![0.0; dd];
        let mut jac_b = vec![0.0; dd];
        let mut jac_sigma = vec![0.0; dd * d];
        let mut next_x = vec![0.0; d];
        let mut next_grad = vec![0.0; dd];
        for i in 0..n {
            let t = grid.time(i);
            let dt = grid.step(i);
            let sq = dt.sqrt();
            let inc: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sq * z
                })
                .collect();
            let xi = &x[i * d..(i + 1) * d];
            let gi = &grad[i * dd..(i + 1) * dd];
            coeffs.drift(t, xi, &mut drift);
            coeffs.diffusion(t, xi, &mut sigma);
            coeffs.grad_drift(t, xi, &mut jac_b);
            coeffs.grad_diffusion(t, xi, &mut jac_sigma);
            for r in 0..d {
                let noise: f64 = (0..d).map(|j| sigma[r * d + j] * inc[j]).sum();
                next_x[r] = xi[r] + drift[r] * dt + noise;
            }
            // ∇X_{i+1} = ∇X_i + ∇b ∇X_i Δ + Σ_j (∂σ_{·j}) ∇X_i ΔW^j
            for r in 0..d {
                for c in 0..d {
                    let mut acc = gi[r * d + c];
                    for k in 0..d {
                        let mut coef = jac_b[r * d + k] * dt;
                        for j in 0..d {
                            coef += jac_sigma[j * dd + r * d + k] * inc[j];
                        }
                        acc += coef * gi[k * d + c];
                    }
                    next_grad[r * d + c] = acc;
                }
            }
            x.extend_from_slice(&next_x);
            grad.extend_from_slice(&next_grad);
            dw.extend_from_slice(&inc);
        }
        let mut inv = Vec::with_capacity((n + 1) * dd);
        for node in 0..=n {
            let m = DMatrix::from_row_slice(d, d, &grad[node * dd..(node + 1) * dd]);
            let mi = m
                .try_inverse()
                .filter(|mi| mi.iter().all(|v| v.is_finite()))
                .ok_or(Error::SingularFlow { path, node })?;
            inv.extend(mi.transpose().iter().copied());
        }
        Ok(Trajectory { x, dw, grad, inv })
    };

    let trajectories: Vec<Trajectory> = (0..paths).into_par_iter().map(simulate_path).collect::<Result<_>>()?;

    let mut bundle = ForwardBundle {
        grid: grid.clone(),
        dim: d,
        paths,
        seed,
        x: vec![0.0; (n + 1) * paths * d],
        dw: vec![0.0; n * paths * d],
        grad_x: vec![0.0; (n + 1) * paths * dd],
        grad_x_inv: vec![0.0; (n + 1) * paths * dd],
    };
    for (path, tr) in trajectories.iter().enumerate() {
        for node in 0..=n {
            let at = (node * paths + path) * d;
            bundle.x[at..at + d].copy_from_slice(&tr.x[node * d..(node + 1) * d]);
            let at = (node * paths + path) * dd;
            bundle.grad_x[at..at + dd].copy_from_slice(&tr.grad[node * dd..(node + 1) * dd]);
            bundle.grad_x_inv[at..at + dd].copy_from_slice(&tr.inv[node * dd..(node + 1) * dd]);
        }
        for i in 0..n {
            let at = (i * paths + path) * d;
            bundle.dw[at..at + d].copy_from_slice(&tr.dw[i * d..(i + 1) * d]);
        }
    }
    Ok(bundle)
}

/// Row-major product of an `r×k` and a `k×c` matrix.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += ail * b[l * c + j];
            }
        }
    }
    out
}

/// Malliavin derivative `D_u X_t = ∇X_t (∇X_u)^{-1} σ(u, X_u)` for `u <= t`,
/// zero otherwise; one row-major `d×d` matrix per path.
pub fn malliavin_forward(bundle: &ForwardBundle, coeffs: &SdeCoefficients, u: usize, t: usize) -> Vec<Vec<f64>> {
    let d = bundle.dim();
    let grid = bundle.grid();
    (0..bundle.paths())
        .map(|path| {
            if u > t {
                return vec![0.0; d * d];
            }
            let mut sigma = vec![0.0; d * d];
            coeffs.diffusion(grid.time(u), bundle.x(u, path), &mut sigma);
            let flow = mat_mul(bundle.grad_x(t, path), bundle.grad_x_inv(u, path), d, d, d);
            mat_mul(&flow, &sigma, d, d, d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn brownian_paths_are_cumulative_increments() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let b = simulate_forward(&SdeCoefficients::Brownian { dim: 2 }, &[0.5, -1.0], &grid, 16, 3).unwrap();
        for path in 0..16 {
            for node in 0..=8 {
                let w = b.brownian(node, path);
                assert_relative_eq!(b.x(node, path)[0], 0.5 + w[0], epsilon = 1e-12);
                assert_relative_eq!(b.x(node, path)[1], -1.0 + w[1], epsilon = 1e-12);
                assert_eq!(b.grad_x(node, path), &[1.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let coeffs = SdeCoefficients::Gbm { mu: vec![0.05], nu: vec![0.2] };
        let a = simulate_forward(&coeffs, &[1.0], &grid, 64, 11).unwrap();
        let b = simulate_forward(&coeffs, &[1.0], &grid, 64, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_forward(&coeffs, &[1.0], &grid, 64, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gbm_flow_and_malliavin_derivative() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let coeffs = SdeCoefficients::Gbm { mu: vec![0.05], nu: vec![0.3] };
        let b = simulate_forward(&coeffs, &[2.0], &grid, 32, 5).unwrap();
        for path in 0..32 {
            for node in 0..=10 {
                assert_relative_eq!(b.grad_x(node, path)[0], b.x(node, path)[0] / 2.0, max_relative = 1e-12);
            }
        }
        let dx = malliavin_forward(&b, &coeffs, 3, 7);
        for (path, m) in dx.iter().enumerate() {
            assert_relative_eq!(m[0], 0.3 * b.x(7, path)[0], max_relative = 1e-12);
        }
        let same = malliavin_forward(&b, &coeffs, 4, 4);
        for (path, m) in same.iter().enumerate() {
            assert_relative_eq!(m[0], 0.3 * b.x(4, path)[0], max_relative = 1e-12);
        }
        assert!(malliavin_forward(&b, &coeffs, 5, 4).iter().all(|m| m[0] == 0.0));
    }

    #[test]
    fn dimension_is_checked() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        assert!(simulate_forward(&SdeCoefficients::Brownian { dim: 2 }, &[0.0], &grid, 4, 0).is_err());
    }
}
