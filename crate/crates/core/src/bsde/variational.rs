//! Variational (initial-condition) derivatives of the backward solution,
//! the flow representation of `Z`, and a finite-difference cross-check.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    convolve_field, picard_solve, run_picard, state_field, FeatureSource, PathField, Problem, Scheme, SolutionBundle,
    SolverSettings, ThetaWeights,
};
use crate::error::{Error, Result};
use crate::forward::{mat_mul, ForwardBundle, SdeCoefficients};
use crate::regression::Feature;

/// Solution `(P h, Q h) = (∇Y h, ∇Z h)` of the linearised delay BSDE in direction `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalBundle {
    pub direction: Vec<f64>,
    /// `∇X_{t_i} h` per node and path
    pub grad_x_h: PathField,
    /// `P h` in the `y` slot, `Q h` in the `z` slot
    pub solution: SolutionBundle,
}

impl VariationalBundle {
    pub fn p(&self, node: usize, path: usize) -> &[f64] {
        self.solution.y.at(node, path)
    }

    pub fn q(&self, node: usize, path: usize) -> &[f64] {
        self.solution.z.at(node, path)
    }
}

/// Solves the linear delay BSDE with terminal value `∇g(X_T)∇X_T h` and
/// generator `F̂ = ∇_x f·(∇Xh·α_X) + ∇_y f·(P·α_Y) + ∇_z f·(Q·α_Z)`, the
/// Jacobians evaluated along the frozen base solution. `∇X h` is always
/// offered to the regression as an extra feature.
pub fn variational_solve(
    problem: &Problem,
    forward: &ForwardBundle,
    base: &SolutionBundle,
    h: &[f64],
    settings: &SolverSettings,
) -> Result<VariationalBundle> {
    problem.validate()?;
    let (m, d) = (problem.m(), problem.d());
    if h.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: h.len() });
    }
    if base.paths() != forward.paths() || base.grid() != forward.grid() {
        return Err(Error::InvalidParameter("base solution was computed on a different forward bundle".into()));
    }
    let grid = forward.grid();
    let n = grid.steps();
    let paths = forward.paths();
    let md = m * d;

    let flow = PathField::from_nodes(
        paths,
        d,
        (0..=n).map(|i| (0..paths).flat_map(|k| mat_mul(forward.grad_x(i, k), h, d, d, 1)).collect()).collect(),
    );
    let weights = ThetaWeights::new(grid, &problem.measures);
    let base_xdel = convolve_field(&weights.x, &state_field(forward));
    let flow_del = convolve_field(&weights.x, &flow);
    let base_ydel = convolve_field(&weights.y, &base.y);
    let base_zdel = convolve_field(&weights.z, &base.z);

    // Jacobians along the base solution: [∇_x f | ∇_y f | ∇_z f] per node and path
    let width = md + m * m + m * md;
    let jac: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut out = vec![0.0; paths * width];
            for (k, o) in out.chunks_exact_mut(width).enumerate() {
                let (jx, rest) = o.split_at_mut(md);
                let (jy, jz) = rest.split_at_mut(m * m);
                problem.generator.jacobians(
                    grid.time(j),
                    base_xdel.at(j, k),
                    base_ydel.at(j, k),
                    base_zdel.at(j, k),
                    jx,
                    jy,
                    jz,
                );
            }
            out
        })
        .collect();

    let mut terminal = vec![0.0; paths * m];
    let mut grad_g = vec![0.0; md];
    for (k, out) in terminal.chunks_exact_mut(m).enumerate() {
        problem.terminal.grad(forward.x(n, k), &mut grad_g);
        out.copy_from_slice(&mat_mul(&grad_g, flow.at(n, k), m, d, 1));
    }

    let driver = |j: usize, k: usize, xd: &[f64], pd: &[f64], qd: &[f64], out: &mut [f64]| {
        let jk = &jac[j][k * width..(k + 1) * width];
        let (jx, rest) = jk.split_at(md);
        let (jy, jz) = rest.split_at(m * m);
        for (l, o) in out.iter_mut().enumerate() {
            let dot = |a: &[f64], v: &[f64]| a.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
            *o = dot(&jx[l * d..(l + 1) * d], xd)
                + dot(&jy[l * m..(l + 1) * m], pd)
                + dot(&jz[l * md..(l + 1) * md], qd);
        }
    };

    let mut settings = settings.clone();
    if !settings.basis.features.contains(&Feature::FlowDirection) {
        settings.basis.features.push(Feature::FlowDirection);
    }
    let scheme = Scheme {
        forward,
        weights: &weights,
        features: FeatureSource::new(forward, &base_xdel, Some(&flow), &problem.measures),
        terminal,
        m,
        xdel: &flow_del,
        driver: &driver,
    };
    let (y, z, diagnostics, iterations, converged) = run_picard(&scheme, &settings)?;
    Ok(VariationalBundle {
        direction: h.to_vec(),
        grad_x_h: flow,
        solution: SolutionBundle {
            grid: grid.clone(),
            y,
            z,
            diagnostics,
            iterations,
            converged,
            verdict: base.verdict,
        },
    })
}

/// `Z_t = ∇Y_t (∇X_t)^{-1} σ(t, X_t)` per node and path (`m×d`, row-major),
/// with `∇Y` assembled from `d` directional solves whose directions span `R^d`.
pub fn representation_z(
    forward: &ForwardBundle,
    bundles: &[VariationalBundle],
    coeffs: &SdeCoefficients,
) -> Result<PathField> {
    let d = forward.dim();
    if bundles.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: bundles.len() });
    }
    let m = bundles[0].solution.m();
    let directions = DMatrix::from_fn(d, d, |r, c| bundles[c].direction[r]);
    let inv = directions
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("variational directions do not span the state space".into()))?;
    let inv: Vec<f64> = (0..d * d).map(|i| inv[(i / d, i % d)]).collect();
    let grid = forward.grid();
    let paths = forward.paths();
    let per_node = (0..=grid.steps())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(paths * m * d);
            let mut sigma = vec![0.0; d * d];
            let mut p = vec![0.0; m * d];
            for k in 0..paths {
                for (c, b) in bundles.iter().enumerate() {
                    for l in 0..m {
                        p[l * d + c] = b.p(i, k)[l];
                    }
                }
                let grad_y = mat_mul(&p, &inv, m, d, d);
                coeffs.diffusion(grid.time(i), forward.x(i, k), &mut sigma);
                let tail = mat_mul(forward.grad_x_inv(i, k), &sigma, d, d, d);
                out.extend(mat_mul(&grad_y, &tail, m, d, d));
            }
            out
        })
        .collect();
    Ok(PathField::from_nodes(paths, m * d, per_node))
}

/// Finite-difference check of `∇Y h`: time-averaged RMS of
/// `(Y^{x+εh} - Y^x)/ε - ∇Y h`, with common random numbers across `ε`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
}

pub fn fd_directional_check(
    problem: &Problem,
    settings: &SolverSettings,
    h: &[f64],
    epsilons: &[f64],
) -> Result<FdReport> {
    let forward = problem.simulate(settings)?;
    let base = picard_solve(problem, &forward, settings)?;
    let var = variational_solve(problem, &forward, &base, h, settings)?;
    let grid = forward.grid();
    let n = grid.steps();
    let paths = forward.paths();
    let m = problem.m();
    let horizon = grid.horizon();
    let mut report = FdReport { epsilons: epsilons.to_vec(), errors: Vec::new(), std_errors: Vec::new() };
    for &eps in epsilons {
        let x0: Vec<f64> = problem.x0.iter().zip(h).map(|(x, v)| x + eps * v).collect();
        let shifted = problem.with_x0(x0);
        let fwd = shifted.simulate(settings)?;
        let sol = picard_solve(&shifted, &fwd, settings)?;
        let per_path: Vec<f64> = (0..paths)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        let sq: f64 = (0..m)
                            .map(|l| {
                                let fd = (sol.y.at(i, k)[l] - base.y.at(i, k)[l]) / eps;
                                (fd - var.p(i, k)[l]).powi(2)
                            })
                            .sum();
                        grid.step(i) * sq
                    })
                    .sum::<f64>()
                    / horizon
            })
            .collect();
        let mean = per_path.iter().sum::<f64>() / paths as f64;
        let var_s = per_path.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (paths as f64 - 1.0).max(1.0);
        let err = mean.sqrt();
        let se = if err > 0.0 { (var_s / paths as f64).sqrt() / (2.0 * err) } else { 0.0 };
        report.errors.push(err);
        report.std_errors.push(se);
    }
    Ok(report)
}
