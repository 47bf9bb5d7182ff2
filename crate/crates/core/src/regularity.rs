//! Empirical checks of the regularity and estimate statements: increment
//! rates of `Y`, L²-regularity of `Z`, the best-approximation property of the
//! node-wise conditional averages, a priori perturbation scaling and moment
//! bounds.

use serde::Serialize;

use crate::bsde::{
    picard_solve, picard_solve_perturbed, representation_z, variational_solve, PathField, Perturbation, Problem,
    SolutionBundle, SolutionFeatures, SolverSettings,
};
use crate::constants::{check_contraction, cp_constant};
use crate::delay_measure::TimeGrid;
use crate::error::{Error, Result};
use crate::forward::ForwardBundle;
use crate::regression::Design;

/// Log-log least-squares fit of error values against mesh sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub mesh: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `None` when some value is not positive and no logarithm exists.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// RMS residual of the log-log fit.
    pub residual: Option<f64>,
    pub target_slope: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl RateReport {
    pub fn new(
        mesh: Vec<f64>,
        values: Vec<f64>,
        std_errors: Vec<f64>,
        target_slope: f64,
        tolerance: f64,
    ) -> Result<Self> {
        if mesh.len() < 3 || mesh.len() != values.len() || std_errors.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "a rate fit needs at least 3 matching points, got {} meshes and {} values",
                mesh.len(),
                values.len()
            )));
        }
        let decreasing = mesh.windows(2).all(|w| w[1] < w[0]);
        let increasing = mesh.windows(2).all(|w| w[1] > w[0]);
        if !(decreasing || increasing) || mesh.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::InvalidParameter("mesh sizes must be positive and strictly monotone".into()));
        }
        let (mut slope, mut intercept, mut residual) = (None, None, None);
        if values.iter().all(|v| *v > 0.0 && v.is_finite()) {
            let xs: Vec<f64> = mesh.iter().map(|h| h.ln()).collect();
            let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let b = sxy / sxx;
            let a = my - b * mx;
            let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
            slope = Some(b);
            intercept = Some(a);
            residual = Some((rss / n).sqrt());
        }
        let pass = slope.is_some_and(|b| (b - target_slope).abs() <= tolerance);
        Ok(Self { mesh, values, std_errors, slope, intercept, residual, target_slope, tolerance, pass })
    }
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `E|Y_{t+h} - Y_t|^p` over all node pairs `h = s·Δ` apart, for each
/// separation `s` (in steps) of a single solve; target slope `p/2`.
pub fn y_increment_rate(
    problem: &Problem,
    settings: &SolverSettings,
    p: f64,
    separations: &[usize],
    tolerance: f64,
) -> Result<RateReport> {
    let forward = problem.simulate(settings)?;
    let sol = picard_solve(problem, &forward, settings)?;
    let grid = forward.grid();
    let n = grid.steps();
    let (mut mesh, mut values, mut ses) = (Vec::new(), Vec::new(), Vec::new());
    for &s in separations {
        if s == 0 || s > n {
            return Err(Error::InvalidParameter(format!("separation of {s} steps does not fit {n} steps")));
        }
        let per_path: Vec<f64> = (0..forward.paths())
            .map(|k| {
                (0..=n - s)
                    .map(|i| {
                        let sq: f64 = sol.y.at(i + s, k).iter().zip(sol.y.at(i, k)).map(|(a, b)| (a - b).powi(2)).sum();
                        sq.powf(p / 2.0)
                    })
                    .sum::<f64>()
                    / (n - s + 1) as f64
            })
            .collect();
        let (mean, se) = mean_and_se(&per_path);
        mesh.push(grid.time(s) - grid.time(0));
        values.push(mean);
        ses.push(se);
    }
    RateReport::new(mesh, values, ses, p / 2.0, tolerance)
}

/// `‖Z - Z̄^π‖` against `‖Z - Z^π‖` on one coarse mesh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestApprox {
    pub steps: usize,
    /// `sqrt(Σ_i E∫|Z_s - Z̄_{t_i}|² ds)` and its standard error
    pub norm_bar: f64,
    pub se_bar: f64,
    /// `sqrt(Σ_i E∫|Z_s - Z_{t_i}|² ds)` and its standard error
    pub norm_pi: f64,
    pub se_pi: f64,
    pub holds: bool,
}

/// Fine-grid reference `Z` from the representation formula.
pub struct ReferenceZ {
    problem: Problem,
    settings: SolverSettings,
    forward: ForwardBundle,
    solution: SolutionBundle,
    z: PathField,
}

impl ReferenceZ {
    pub fn new(problem: &Problem, settings: &SolverSettings) -> Result<Self> {
        let forward = problem.simulate(settings)?;
        let solution = picard_solve(problem, &forward, settings)?;
        let d = problem.d();
        let bundles = (0..d)
            .map(|c| {
                let mut h = vec![0.0; d];
                h[c] = 1.0;
                variational_solve(problem, &forward, &solution, &h, settings)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = representation_z(&forward, &bundles, &problem.forward)?;
        Ok(Self { problem: problem.clone(), settings: settings.clone(), forward, solution, z })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.forward.grid()
    }

    pub fn z(&self) -> &PathField {
        &self.z
    }

    /// The regression solution the reference was built from.
    pub fn solution(&self) -> &SolutionBundle {
        &self.solution
    }

    /// Node-wise `‖Z^{reg} - Z^{rep}‖ / max(‖Z^{rep}‖, 1e-6)`, RMS across paths.
    pub fn regression_distance(&self) -> Vec<f64> {
        (0..=self.grid().steps())
            .map(|i| self.solution.z.node_rms_diff(&self.z, i) / self.z.node_rms(i).max(1e-6))
            .collect()
    }

    /// Per-path `Σ_i ∫|Z_s - Z̄_{t_i}|² ds` and `Σ_i ∫|Z_s - Z_{t_i}|² ds` on
    /// the coarse mesh with `steps` cells (trapezoidal fine-grid quadrature).
    fn cell_errors(&self, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let fine = self.grid();
        let n = fine.steps();
        if steps == 0 || !n.is_multiple_of(steps) {
            return Err(Error::InvalidGrid(format!("{steps} coarse steps do not nest in {n} fine steps")));
        }
        let r = n / steps;
        let paths = self.forward.paths();
        let width = self.z.width();
        let features = SolutionFeatures::new(&self.problem, &self.forward, &self.solution);
        let mut bar = vec![0.0; paths];
        let mut pi = vec![0.0; paths];
        for i in 0..steps {
            let first = i * r;
            let span = fine.time(first + r) - fine.time(first);
            let design = Design::new(&features.at(first, &self.settings.basis.features)?, &self.settings.basis)?;
            let mut zbar = vec![0.0; paths * width];
            for c in 0..width {
                let average: Vec<f64> = (0..paths)
                    .map(|k| {
                        (first..first + r)
                            .map(|q| 0.5 * fine.step(q) * (self.z.at(q, k)[c] + self.z.at(q + 1, k)[c]))
                            .sum::<f64>()
                            / span
                    })
                    .collect();
                for (k, v) in design.project(&average)?.into_iter().enumerate() {
                    zbar[k * width + c] = v;
                }
            }
            for k in 0..paths {
                let node_value = self.z.at(first, k);
                let level = &zbar[k * width..(k + 1) * width];
                let dist = |q: usize, centre: &[f64]| -> f64 {
                    self.z.at(q, k).iter().zip(centre).map(|(a, b)| (a - b).powi(2)).sum()
                };
                for q in first..first + r {
                    let half = 0.5 * fine.step(q);
                    bar[k] += half * (dist(q, level) + dist(q + 1, level));
                    pi[k] += half * (dist(q, node_value) + dist(q + 1, node_value));
                }
            }
        }
        Ok((bar, pi))
    }

    pub fn best_approx(&self, steps: usize) -> Result<BestApprox> {
        let (bar, pi) = self.cell_errors(steps)?;
        let norm = |v: &[f64]| {
            let (mean, se) = mean_and_se(v);
            let n = mean.max(0.0).sqrt();
            (n, if n > 0.0 { se / (2.0 * n) } else { 0.0 })
        };
        let (norm_bar, se_bar) = norm(&bar);
        let (norm_pi, se_pi) = norm(&pi);
        let holds = norm_bar <= norm_pi + 3.0 * se_bar.hypot(se_pi) + 1e-12;
        Ok(BestApprox { steps, norm_bar, se_bar, norm_pi, se_pi, holds })
    }

    /// `Σ_i E∫|Z_s - Z̄_{t_i}|² ds` per coarse mesh with a log-log fit; target slope 1.
    pub fn l2_regularity(&self, meshes: &[usize], tolerance: f64) -> Result<RateReport> {
        let (mut mesh, mut values, mut ses) = (Vec::new(), Vec::new(), Vec::new());
        for &steps in meshes {
            let (bar, _) = self.cell_errors(steps)?;
            let (mean, se) = mean_and_se(&bar);
            mesh.push(self.grid().horizon() / steps as f64);
            values.push(mean);
            ses.push(se);
        }
        RateReport::new(mesh, values, ses, 1.0, tolerance)
    }
}

/// Builds the fine reference and runs the L²-regularity study.
pub fn l2_regularity(
    problem: &Problem,
    settings: &SolverSettings,
    meshes: &[usize],
    tolerance: f64,
) -> Result<RateReport> {
    ReferenceZ::new(problem, settings)?.l2_regularity(meshes, tolerance)
}

/// Builds the fine reference and compares `Z̄^π` with `Z^π` on one coarse mesh.
pub fn best_approx_check(problem: &Problem, settings: &SolverSettings, steps: usize) -> Result<BestApprox> {
    ReferenceZ::new(problem, settings)?.best_approx(steps)
}

/// `p`-th powers of `‖Y‖_{S^p_β}`, `‖Y‖_{H^p_β}` and `‖Z‖_{H^p_β}` with left-point sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcessNorms {
    pub s_y: f64,
    pub h_y: f64,
    pub h_z: f64,
}

impl ProcessNorms {
    pub fn total(&self) -> f64 {
        self.s_y + self.h_y + self.h_z
    }
}

pub fn process_norms(grid: &TimeGrid, y: &PathField, z: &PathField, beta: f64, p: f64) -> ProcessNorms {
    let n = grid.steps();
    let paths = y.paths();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let (mut s_y, mut h_y, mut h_z) = (0.0, 0.0, 0.0);
    for k in 0..paths {
        let mut sup: f64 = 0.0;
        let (mut iy, mut iz) = (0.0, 0.0);
        for i in 0..=n {
            let w = (beta * grid.time(i)).exp();
            sup = sup.max(w * sq(y.at(i, k)));
            if i < n {
                iy += grid.step(i) * w * sq(y.at(i, k));
                iz += grid.step(i) * w * sq(z.at(i, k));
            }
        }
        s_y += sup.powf(p / 2.0);
        h_y += iy.powf(p / 2.0);
        h_z += iz.powf(p / 2.0);
    }
    let m = paths as f64;
    ProcessNorms { s_y: s_y / m, h_y: h_y / m, h_z: h_z / m }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub epsilon: f64,
    pub norms: ProcessNorms,
    pub lhs: f64,
    pub rhs_terminal: f64,
    pub rhs_driver: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub p: f64,
    pub beta: f64,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationReport {
    /// Largest `|LHS(ε_b)/LHS(ε_a)·(ε_a/ε_b)^p - 1|` over consecutive scales.
    pub fn scaling_deviation(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| (w[1].lhs / w[0].lhs * (w[0].epsilon / w[1].epsilon).powf(self.p) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `(max - min) / min` of the LHS/RHS ratios.
    pub fn ratio_spread(&self) -> f64 {
        let lo = self.rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        let hi = self.rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo
    }
}

/// Solves the base problem and its `ε`-perturbations on common paths and
/// compares the difference norms with the data terms of the a priori estimate:
/// `E[e^{βT}|δY_T|²] + E∫e^{βs}|δ₂f|²ds` for `p = 2`, and
/// `E[(e^{βT}|δY_T|²)^{p/2}] + E[(∫e^{βs/2}|δ₂f|ds)^p]` for `p > 2`.
pub fn apriori_scaling(
    problem: &Problem,
    settings: &SolverSettings,
    direction: &Perturbation,
    epsilons: &[f64],
    p: f64,
    beta: f64,
) -> Result<PerturbationReport> {
    let forward = problem.simulate(settings)?;
    let base = picard_solve(problem, &forward, settings)?;
    let grid = forward.grid();
    let n = grid.steps();
    let paths = forward.paths();
    let horizon = grid.horizon();
    let mut rows = Vec::new();
    for &eps in epsilons {
        let perturbation = Perturbation { epsilon: eps, ..direction.clone() };
        let sol = picard_solve_perturbed(problem, &forward, settings, Some(&perturbation))?;
        let mut dy = sol.y.clone();
        let mut dz = sol.z.clone();
        for i in 0..=n {
            for k in 0..paths {
                for (a, b) in dy.at_mut(i, k).iter_mut().zip(base.y.at(i, k)) {
                    *a -= b;
                }
                for (a, b) in dz.at_mut(i, k).iter_mut().zip(base.z.at(i, k)) {
                    *a -= b;
                }
            }
        }
        let norms = process_norms(grid, &dy, &dz, beta, p);
        let rhs_terminal = (0..paths)
            .map(|k| ((beta * horizon).exp() * dy.at(n, k).iter().map(|v| v * v).sum::<f64>()).powf(p / 2.0))
            .sum::<f64>()
            / paths as f64;
        let shift2: f64 = direction.driver.iter().map(|v| (eps * v).powi(2)).sum();
        let rhs_driver = if p == 2.0 {
            (0..n).map(|i| grid.step(i) * (beta * grid.time(i)).exp() * shift2).sum()
        } else {
            (0..n).map(|i| grid.step(i) * (0.5 * beta * grid.time(i)).exp() * shift2.sqrt()).sum::<f64>().powf(p)
        };
        let lhs = norms.total();
        let rhs = rhs_terminal + rhs_driver;
        let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        rows.push(PerturbationRow { epsilon: eps, norms, lhs, rhs_terminal, rhs_driver, rhs, ratio });
    }
    Ok(PerturbationReport { p, beta, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub p: f64,
    pub beta: f64,
    pub norms: ProcessNorms,
    pub lhs: f64,
    /// `E[(e^{βT}|Y_T|²)^{p/2}]`
    pub rhs_terminal: f64,
    /// `E[(∫e^{βs}|f(s,0,0,0)|²ds)^p]`
    pub rhs_driver: f64,
    pub ratio: f64,
    /// Explicit constant, available when the contraction condition holds (`p > 2`).
    pub cp: Option<f64>,
    pub bound_holds: Option<bool>,
}

pub fn moment_check(
    problem: &Problem,
    settings: &SolverSettings,
    p: f64,
    beta: f64,
    gamma: f64,
) -> Result<MomentReport> {
    let (forward, sol) = crate::bsde::solve(problem, settings)?;
    let grid = forward.grid();
    let n = grid.steps();
    let paths = forward.paths();
    let norms = process_norms(grid, &sol.y, &sol.z, beta, p);
    let rhs_terminal = (0..paths)
        .map(|k| ((beta * grid.horizon()).exp() * sol.y.at(n, k).iter().map(|v| v * v).sum::<f64>()).powf(p / 2.0))
        .sum::<f64>()
        / paths as f64;
    let (m, d) = (problem.m(), problem.d());
    let rhs_driver = (0..n)
        .map(|i| {
            let f0 = problem.generator.at_zero(grid.time(i), m, d);
            grid.step(i) * (beta * grid.time(i)).exp() * f0.iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        .powf(p);
    let lhs = norms.total();
    let rhs = rhs_terminal + rhs_driver;
    let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
    let cp = if p > 2.0 {
        let params = problem.structural(p, beta, gamma);
        match check_contraction(&params) {
            Ok(check) if check.feasible => cp_constant(&params).ok().map(|c| c.cp),
            _ => None,
        }
    } else {
        None
    };
    let bound_holds = cp.map(|c| lhs <= c * rhs);
    Ok(MomentReport { p, beta, norms, lhs, rhs_terminal, rhs_driver, ratio, cp, bound_holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rate_fit_recovers_power_law() {
        let mesh = vec![0.1, 0.05, 0.025, 0.0125];
        let values: Vec<f64> = mesh.iter().map(|h: &f64| 3.0 * h.powf(1.5)).collect();
        let r = RateReport::new(mesh, values, vec![0.0; 4], 1.5, 0.01).unwrap();
        assert_relative_eq!(r.slope.unwrap(), 1.5, epsilon = 1e-12);
        assert_relative_eq!(r.intercept.unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(r.residual.unwrap() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn rate_fit_validates_points() {
        assert!(RateReport::new(vec![0.1, 0.05], vec![1.0, 0.5], vec![0.0; 2], 1.0, 0.1).is_err());
        assert!(RateReport::new(vec![0.1, 0.2, 0.05], vec![1.0; 3], vec![0.0; 3], 1.0, 0.1).is_err());
        let zero = RateReport::new(vec![0.1, 0.05, 0.025], vec![0.0; 3], vec![0.0; 3], 1.0, 0.1).unwrap();
        assert!(zero.slope.is_none() && !zero.pass);
    }

    #[test]
    fn norms_of_known_paths() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let mut y = PathField::zeros(5, 1, 1);
        let z = PathField::zeros(5, 1, 1);
        for i in 0..=4 {
            y.at_mut(i, 0)[0] = 2.0;
        }
        let n = process_norms(&grid, &y, &z, 0.0, 2.0);
        assert_relative_eq!(n.s_y, 4.0);
        assert_relative_eq!(n.h_y, 4.0);
        assert_eq!(n.h_z, 0.0);
        let n4 = process_norms(&grid, &y, &z, 0.0, 4.0);
        assert_relative_eq!(n4.s_y, 16.0);
    }
}
