//! Forward Picard scheme for decoupled delay FBSDEs.
//!
//! Each sweep freezes the previous iterate inside the generator, so the
//! backward equation becomes an explicit sum that is projected node by node
//! with the least-squares estimator. Sweeps run sequentially; paths and nodes
//! inside a sweep are processed in parallel with order-preserving collection,
//! so results do not depend on the thread count.

mod presets;
mod variational;

pub use presets::{Generator, Terminal};
pub use variational::{fd_directional_check, representation_z, variational_solve, FdReport, VariationalBundle};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{check_existence, ConditionCheck, StructuralParams};
use crate::delay_measure::{DelayMeasure, TimeGrid};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ForwardBundle, SdeCoefficients};
use crate::regression::{BasisSpec, Design, Feature, FeatureMatrix};

/// The three delay measures acting on `X`, `Y` and `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMeasures {
    pub x: DelayMeasure,
    pub y: DelayMeasure,
    pub z: DelayMeasure,
}

impl DelayMeasures {
    pub fn zero(horizon: f64) -> Result<Self> {
        let zero = DelayMeasure::zero(horizon)?;
        Ok(Self { x: zero.clone(), y: zero.clone(), z: zero })
    }

    fn atom_locations(&self) -> Vec<f64> {
        let mut v: Vec<f64> =
            [&self.x, &self.y, &self.z].iter().flat_map(|m| m.atoms().iter().map(|a| a.location)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// A decoupled delay FBSDE: forward diffusion, generator, terminal function
/// and delay measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub forward: SdeCoefficients,
    pub x0: Vec<f64>,
    pub generator: Generator,
    pub terminal: Terminal,
    pub measures: DelayMeasures,
}

impl Problem {
    pub fn d(&self) -> usize {
        self.forward.dim()
    }

    pub fn m(&self) -> usize {
        self.terminal.dim(self.d())
    }

    pub fn horizon(&self) -> f64 {
        self.measures.x.horizon()
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        let d = self.d();
        if self.x0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.x0.len() });
        }
        self.terminal.validate(d)?;
        self.generator.validate(self.m(), d)?;
        let t = self.horizon();
        if self.measures.y.horizon() != t || self.measures.z.horizon() != t {
            return Err(Error::InvalidParameter("delay measures disagree on the horizon".into()));
        }
        Ok(())
    }

    pub fn structural(&self, p: f64, beta: f64, gamma: f64) -> StructuralParams {
        StructuralParams {
            k: self.generator.lipschitz_k(self.d()),
            horizon: self.horizon(),
            p,
            m: self.m(),
            alpha_y: self.measures.y.clone(),
            alpha_z: self.measures.z.clone(),
            beta,
            gamma,
        }
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Self {
        Self { x0, ..self.clone() }
    }

    pub fn simulate(&self, settings: &SolverSettings) -> Result<ForwardBundle> {
        let grid = TimeGrid::uniform(self.horizon(), settings.steps)?;
        simulate_forward(&self.forward, &self.x0, &grid, settings.paths, settings.seed)
    }
}

/// How `Z^{p+1}_{t_i}` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZEstimator {
    /// `Ê[ΔW_i/Δ_i (Y_{i+1} - Ê[Y_{i+1}|F_{t_i}]) | F_{t_i}]` with `Y_{i+1}`
    /// the new iterate: same conditional expectation by the tower property,
    /// far smaller variance.
    #[default]
    Tower,
    /// `Ê[ΔW_i/Δ_i (g(X_T) + Σ_{j>i} f_j Δ_j) | F_{t_i}]` as written.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub paths: usize,
    pub steps: usize,
    pub picard_max: usize,
    pub tol: f64,
    pub seed: u64,
    pub basis: BasisSpec,
    pub z_estimator: ZEstimator,
    /// Subtract `Σ_{j>=i} Z^p_j ΔW_j` (zero conditional mean) from the `Y` targets.
    pub control_variate: bool,
    /// `β` used for the feasibility verdict recorded with the solution.
    pub beta: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 20,
            picard_max: 10,
            tol: 1e-6,
            seed: 0,
            basis: BasisSpec::default(),
            z_estimator: ZEstimator::Tower,
            control_variate: true,
            beta: 1.0,
        }
    }
}

/// Node-major per-path values: `width` numbers per (node, path).
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    nodes: usize,
    paths: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathField {
    pub fn zeros(nodes: usize, paths: usize, width: usize) -> Self {
        Self { nodes, paths, width, data: vec![0.0; nodes * paths * width] }
    }

    fn from_nodes(paths: usize, width: usize, per_node: Vec<Vec<f64>>) -> Self {
        let nodes = per_node.len();
        Self { nodes, paths, width, data: per_node.concat() }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, node: usize, path: usize) -> &[f64] {
        let at = (node * self.paths + path) * self.width;
        &self.data[at..at + self.width]
    }

    pub fn at_mut(&mut self, node: usize, path: usize) -> &mut [f64] {
        let at = (node * self.paths + path) * self.width;
        &mut self.data[at..at + self.width]
    }

    /// All paths at one node, path-major.
    pub fn node(&self, node: usize) -> &[f64] {
        let n = self.paths * self.width;
        &self.data[node * n..(node + 1) * n]
    }

    /// Component `c` at `node` across paths.
    pub fn column(&self, node: usize, c: usize) -> Vec<f64> {
        self.node(node).chunks_exact(self.width).map(|v| v[c]).collect()
    }

    pub fn node_mean(&self, node: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.width];
        for v in self.node(node).chunks_exact(self.width) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.paths as f64);
        mean
    }

    pub fn node_sd(&self, node: usize) -> Vec<f64> {
        let mean = self.node_mean(node);
        let mut var = vec![0.0; self.width];
        for v in self.node(node).chunks_exact(self.width) {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter().map(|s| (s / self.paths as f64).sqrt()).collect()
    }

    /// `sqrt(mean_k |a - b|²)` at one node.
    pub fn node_rms_diff(&self, other: &PathField, node: usize) -> f64 {
        let s: f64 = self.node(node).iter().zip(other.node(node)).map(|(a, b)| (a - b) * (a - b)).sum();
        (s / self.paths as f64).sqrt()
    }

    /// `sqrt(mean_k |a|²)` at one node.
    pub fn node_rms(&self, node: usize) -> f64 {
        (self.node(node).iter().map(|a| a * a).sum::<f64>() / self.paths as f64).sqrt()
    }
}

/// Size of `(Y^{p+1} - Y^p, Z^{p+1} - Z^p)` after one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepDiagnostic {
    pub sweep: usize,
    /// Max over nodes of the per-node RMS across paths.
    pub diff_y: f64,
    pub diff_z: f64,
    /// `sqrt(Σ_i Δ_i mean_k |·|²)`.
    pub diff_y_h2: f64,
    pub diff_z_h2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionBundle {
    grid: TimeGrid,
    pub y: PathField,
    pub z: PathField,
    pub diagnostics: Vec<SweepDiagnostic>,
    pub iterations: usize,
    pub converged: bool,
    pub verdict: Option<ConditionCheck>,
}

impl SolutionBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.y.paths()
    }

    pub fn m(&self) -> usize {
        self.y.width()
    }

    pub fn d(&self) -> usize {
        self.z.width() / self.y.width()
    }

    /// Successive ratios `diff_{p+1} / diff_p` of the larger of the two sup diffs.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        let size: Vec<f64> = self.diagnostics.iter().map(|d| d.diff_y.max(d.diff_z)).collect();
        size.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Non-zero shifted weights `α([t_j - t_i, t_{j+1} - t_i))`, `j < i`, per node `i`.
#[derive(Debug, Clone)]
pub(crate) struct ThetaWeights {
    pub x: Vec<Vec<(usize, f64)>>,
    pub y: Vec<Vec<(usize, f64)>>,
    pub z: Vec<Vec<(usize, f64)>>,
}

impl ThetaWeights {
    pub fn new(grid: &TimeGrid, measures: &DelayMeasures) -> Self {
        let rows = |measure: &DelayMeasure| {
            (0..=grid.steps())
                .map(|i| {
                    let ti = grid.time(i);
                    (0..i)
                        .filter_map(|j| {
                            let w = measure.interval_mass(grid.time(j) - ti, grid.time(j + 1) - ti);
                            (w != 0.0).then_some((j, w))
                        })
                        .collect()
                })
                .collect()
        };
        Self { x: rows(&measures.x), y: rows(&measures.y), z: rows(&measures.z) }
    }
}

fn convolve(weights: &[(usize, f64)], field: &PathField, path: usize, out: &mut [f64]) {
    out.fill(0.0);
    for &(j, w) in weights {
        for (o, v) in out.iter_mut().zip(field.at(j, path)) {
            *o += w * v;
        }
    }
}

/// Delayed convolution of a whole field at every node.
fn convolve_field(weights: &[Vec<(usize, f64)>], field: &PathField) -> PathField {
    let (paths, width) = (field.paths(), field.width());
    let per_node = weights
        .par_iter()
        .map(|row| {
            let mut out = vec![0.0; paths * width];
            for (k, o) in out.chunks_exact_mut(width).enumerate() {
                convolve(row, field, k, o);
            }
            out
        })
        .collect();
    PathField::from_nodes(paths, width, per_node)
}

fn state_field(forward: &ForwardBundle) -> PathField {
    let (paths, d) = (forward.paths(), forward.dim());
    let per_node =
        (0..=forward.grid().steps()).map(|i| (0..paths).flat_map(|k| forward.x(i, k).to_vec()).collect()).collect();
    PathField::from_nodes(paths, d, per_node)
}

/// The discrete `Θ^π_{t_i}` per path: `(xdel, ydel, zdel)`, each flattened path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub xdel: Vec<f64>,
    pub ydel: Vec<f64>,
    pub zdel: Vec<f64>,
}

/// `Θ^π_{t_i} = (Σ_j X_{t_j} w^X_{ij}, Σ_j Y_{t_j} w^Y_{ij}, Σ_j Z_{t_j} w^Z_{ij})` with
/// `w_{ij} = α([t_j - t_i, t_{j+1} - t_i))`.
pub fn discrete_theta(
    i: usize,
    forward: &ForwardBundle,
    sol: &SolutionBundle,
    measures: &DelayMeasures,
) -> Result<Theta> {
    let grid = forward.grid();
    if i > grid.steps() {
        return Err(Error::InvalidParameter(format!("node {i} is past the last node {}", grid.steps())));
    }
    let weights = ThetaWeights::new(grid, measures);
    let x = state_field(forward);
    let collect = |w: &[(usize, f64)], field: &PathField| {
        let width = field.width();
        let mut out = vec![0.0; field.paths() * width];
        for (k, o) in out.chunks_exact_mut(width).enumerate() {
            convolve(w, field, k, o);
        }
        out
    };
    Ok(Theta {
        xdel: collect(&weights.x[i], &x),
        ydel: collect(&weights.y[i], &sol.y),
        zdel: collect(&weights.z[i], &sol.z),
    })
}

/// Path functionals available as regressors, fixed across sweeps.
pub(crate) struct FeatureSource<'a> {
    pub forward: &'a ForwardBundle,
    pub xdel: &'a PathField,
    pub flow: Option<&'a PathField>,
    /// per node, the grid cell holding `t_i + v` for every atom lag `v`
    pub lag_cells: Vec<Vec<Option<usize>>>,
}

impl<'a> FeatureSource<'a> {
    pub fn new(
        forward: &'a ForwardBundle,
        xdel: &'a PathField,
        flow: Option<&'a PathField>,
        measures: &DelayMeasures,
    ) -> Self {
        let grid = forward.grid();
        let lags = measures.atom_locations();
        let lag_cells =
            (0..=grid.steps()).map(|i| lags.iter().map(|v| grid.cell_of(grid.time(i) + v)).collect()).collect();
        Self { forward, xdel, flow, lag_cells }
    }

    fn columns(&self, node: usize, features: &[Feature], ydel: &PathField, zdel: &PathField) -> Result<FeatureMatrix> {
        let paths = self.forward.paths();
        let d = self.forward.dim();
        let mut matrix = FeatureMatrix::empty(paths);
        let push_field = |matrix: &mut FeatureMatrix, field: &PathField| -> Result<()> {
            for c in 0..field.width() {
                matrix.push_column(field.column(node, c))?;
            }
            Ok(())
        };
        for feature in features {
            match feature {
                Feature::State => {
                    for c in 0..d {
                        matrix.push_column((0..paths).map(|k| self.forward.x(node, k)[c]).collect())?;
                    }
                }
                Feature::DelayedState => push_field(&mut matrix, self.xdel)?,
                Feature::DelayedY => push_field(&mut matrix, ydel)?,
                Feature::DelayedZ => push_field(&mut matrix, zdel)?,
                Feature::AtomLags => {
                    for cell in &self.lag_cells[node] {
                        for c in 0..d {
                            let col = match cell {
                                Some(j) => (0..paths).map(|k| self.forward.x(*j, k)[c]).collect(),
                                None => vec![0.0; paths],
                            };
                            matrix.push_column(col)?;
                        }
                    }
                }
                Feature::FlowDirection => {
                    if let Some(flow) = self.flow {
                        push_field(&mut matrix, flow)?;
                    }
                }
            }
        }
        Ok(matrix)
    }
}

pub(crate) type Driver<'a> = dyn Fn(usize, usize, &[f64], &[f64], &[f64], &mut [f64]) + Sync + 'a;

/// Everything the Picard engine needs besides the forward bundle.
pub(crate) struct Scheme<'a> {
    pub forward: &'a ForwardBundle,
    pub weights: &'a ThetaWeights,
    pub features: FeatureSource<'a>,
    /// `m` values per path
    pub terminal: Vec<f64>,
    pub m: usize,
    /// first generator argument at every node (`(X·α_X)` or `(∇Xh·α_X)`)
    pub xdel: &'a PathField,
    /// `driver(node, path, xdel, ydel, zdel, out)`
    pub driver: &'a Driver<'a>,
}

fn wrap(sweep: usize, node: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Solver { sweep, node, source: Box::new(e) }
}

pub(crate) fn run_picard(
    scheme: &Scheme<'_>,
    settings: &SolverSettings,
) -> Result<(PathField, PathField, Vec<SweepDiagnostic>, usize, bool)> {
    let forward = scheme.forward;
    let grid = forward.grid();
    let n = grid.steps();
    let paths = forward.paths();
    let (m, d) = (scheme.m, forward.dim());
    let md = m * d;

    let mut y = PathField::zeros(n + 1, paths, m);
    let mut z = PathField::zeros(n + 1, paths, md);
    for k in 0..paths {
        y.at_mut(n, k).copy_from_slice(&scheme.terminal[k * m..(k + 1) * m]);
    }
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;

    for sweep in 1..=settings.picard_max {
        sweeps = sweep;
        let ydel = convolve_field(&scheme.weights.y, &y);
        let zdel = convolve_field(&scheme.weights.z, &z);

        // generator values f(t_j, Θ^p_{t_j}), j < N
        let f: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut out = vec![0.0; paths * m];
                for (k, o) in out.chunks_exact_mut(m).enumerate() {
                    (scheme.driver)(j, k, scheme.xdel.at(j, k), ydel.at(j, k), zdel.at(j, k), o);
                }
                out
            })
            .collect();

        // per path: G_i = g + Σ_{j>=i} f_j Δ_j and the martingale control C_i = Σ_{j>=i} Z^p_j ΔW_j
        let use_control = settings.control_variate && sweep > 1;
        let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|k| {
                let mut g = vec![0.0; (n + 1) * m];
                let mut c = vec![0.0; (n + 1) * m];
                g[n * m..].copy_from_slice(&scheme.terminal[k * m..(k + 1) * m]);
                for j in (0..n).rev() {
                    let dt = grid.step(j);
                    let dw = forward.dw(j, k);
                    let zj = z.at(j, k);
                    for l in 0..m {
                        g[j * m + l] = g[(j + 1) * m + l] + f[j][k * m + l] * dt;
                        let mart: f64 = if use_control { (0..d).map(|q| zj[l * d + q] * dw[q]).sum() } else { 0.0 };
                        c[j * m + l] = c[(j + 1) * m + l] + mart;
                    }
                }
                (g, c)
            })
            .collect();
        let node_column = |which: usize, node: usize, l: usize| -> Vec<f64> {
            per_path
                .iter()
                .map(|(g, c)| if which == 0 { g[node * m + l] - c[node * m + l] } else { g[node * m + l] })
                .collect()
        };

        let basis = &settings.basis;
        let new_y: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let design = Design::new(&scheme.features.columns(i, &basis.features, &ydel, &zdel)?, basis)
                    .map_err(wrap(sweep, i))?;
                let mut out = vec![0.0; paths * m];
                for l in 0..m {
                    let fitted = design.project(&node_column(0, i, l)).map_err(wrap(sweep, i))?;
                    for (k, v) in fitted.into_iter().enumerate() {
                        out[k * m + l] = v;
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut y_next = PathField::from_nodes(paths, m, new_y);
        y_next.data.extend_from_slice(y.node(n));
        y_next.nodes = n + 1;

        let new_z: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let design = Design::new(&scheme.features.columns(i, &basis.features, &ydel, &zdel)?, basis)
                    .map_err(wrap(sweep, i))?;
                let dt = grid.step(i);
                let mut out = vec![0.0; paths * md];
                for l in 0..m {
                    let ahead: Vec<f64> = match settings.z_estimator {
                        ZEstimator::Tower => {
                            let next = y_next.column(i + 1, l);
                            let proj = design.project(&next).map_err(wrap(sweep, i))?;
                            next.iter().zip(&proj).map(|(a, b)| a - b).collect()
                        }
                        ZEstimator::Literal => node_column(1, i + 1, l),
                    };
                    for q in 0..d {
                        let target: Vec<f64> =
                            ahead.iter().enumerate().map(|(k, a)| forward.dw(i, k)[q] / dt * a).collect();
                        let fitted = design.project(&target).map_err(wrap(sweep, i))?;
                        for (k, v) in fitted.into_iter().enumerate() {
                            out[k * md + l * d + q] = v;
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut z_next = PathField::from_nodes(paths, md, new_z);
        z_next.data.extend(std::iter::repeat_n(0.0, paths * md));
        z_next.nodes = n + 1;

        for (field, width) in [(&y_next, m), (&z_next, md)] {
            if let Some(pos) = field.data.iter().position(|v| !v.is_finite()) {
                let node = pos / (paths * width);
                let path = (pos % (paths * width)) / width;
                return Err(Error::NonFinite { sweep, node, path });
            }
        }

        let mut diag = SweepDiagnostic { sweep, diff_y: 0.0, diff_z: 0.0, diff_y_h2: 0.0, diff_z_h2: 0.0 };
        for i in 0..n {
            let (dy, dz) = (y_next.node_rms_diff(&y, i), z_next.node_rms_diff(&z, i));
            diag.diff_y = diag.diff_y.max(dy);
            diag.diff_z = diag.diff_z.max(dz);
            diag.diff_y_h2 += grid.step(i) * dy * dy;
            diag.diff_z_h2 += grid.step(i) * dz * dz;
        }
        diag.diff_y_h2 = diag.diff_y_h2.sqrt();
        diag.diff_z_h2 = diag.diff_z_h2.sqrt();
        debug!("sweep {sweep}: diff_y {:.3e} diff_z {:.3e}", diag.diff_y, diag.diff_z);
        diagnostics.push(diag);
        y = y_next;
        z = z_next;
        if diag.diff_y.max(diag.diff_z) < settings.tol {
            converged = true;
            break;
        }
    }
    Ok((y, z, diagnostics, sweeps, converged))
}

/// Regression features of a converged solution, for estimators that run
/// after the Picard loop (the delayed `Y`/`Z` features read the solution).
pub struct SolutionFeatures<'a> {
    forward: &'a ForwardBundle,
    measures: DelayMeasures,
    xdel: PathField,
    ydel: PathField,
    zdel: PathField,
}

impl<'a> SolutionFeatures<'a> {
    pub fn new(problem: &Problem, forward: &'a ForwardBundle, solution: &SolutionBundle) -> Self {
        let weights = ThetaWeights::new(forward.grid(), &problem.measures);
        Self {
            forward,
            measures: problem.measures.clone(),
            xdel: convolve_field(&weights.x, &state_field(forward)),
            ydel: convolve_field(&weights.y, &solution.y),
            zdel: convolve_field(&weights.z, &solution.z),
        }
    }

    pub fn at(&self, node: usize, features: &[Feature]) -> Result<FeatureMatrix> {
        FeatureSource::new(self.forward, &self.xdel, None, &self.measures)
            .columns(node, features, &self.ydel, &self.zdel)
    }
}

/// Additive perturbation `ε·(δg, δf)` of the terminal function and the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon: f64,
    pub terminal: Terminal,
    /// constant driver shift (`m` entries)
    pub driver: Vec<f64>,
}

/// Forward Picard scheme started from `Y⁰ = Z⁰ = 0`.
pub fn picard_solve(problem: &Problem, forward: &ForwardBundle, settings: &SolverSettings) -> Result<SolutionBundle> {
    picard_solve_perturbed(problem, forward, settings, None)
}

pub fn picard_solve_perturbed(
    problem: &Problem,
    forward: &ForwardBundle,
    settings: &SolverSettings,
    perturbation: Option<&Perturbation>,
) -> Result<SolutionBundle> {
    problem.validate()?;
    let (m, d) = (problem.m(), problem.d());
    if forward.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: forward.dim() });
    }
    if let Some(p) = perturbation {
        p.terminal.validate(d)?;
        if p.terminal.dim(d) != m || p.driver.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: p.driver.len() });
        }
    }
    let grid = forward.grid();
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::InvalidGrid("forward grid horizon differs from the problem horizon".into()));
    }
    if let Some(msg) =
        [&problem.measures.x, &problem.measures.y, &problem.measures.z].iter().find_map(|mu| mu.short_lag_warning(grid))
    {
        log::warn!("{msg}");
    }
    let n = grid.steps();
    let paths = forward.paths();
    let weights = ThetaWeights::new(grid, &problem.measures);
    let x = state_field(forward);
    let xdel = convolve_field(&weights.x, &x);

    let mut terminal = vec![0.0; paths * m];
    let mut shift = vec![0.0; m];
    for (k, out) in terminal.chunks_exact_mut(m).enumerate() {
        problem.terminal.eval(forward.x(n, k), out);
        if let Some(p) = perturbation {
            p.terminal.eval(forward.x(n, k), &mut shift);
            for (o, s) in out.iter_mut().zip(&shift) {
                *o += p.epsilon * s;
            }
        }
    }
    let offset: Vec<f64> = match perturbation {
        Some(p) => p.driver.iter().map(|v| p.epsilon * v).collect(),
        None => vec![0.0; m],
    };
    let driver = |j: usize, _k: usize, xd: &[f64], yd: &[f64], zd: &[f64], out: &mut [f64]| {
        problem.generator.eval(grid.time(j), xd, yd, zd, out);
        for (o, s) in out.iter_mut().zip(&offset) {
            *o += s;
        }
    };
    let scheme = Scheme {
        forward,
        weights: &weights,
        features: FeatureSource::new(forward, &xdel, None, &problem.measures),
        terminal,
        m,
        xdel: &xdel,
        driver: &driver,
    };
    let (y, z, diagnostics, iterations, converged) = run_picard(&scheme, settings)?;
    let verdict = check_existence(&problem.structural(2.0, settings.beta, 0.0)).ok();
    Ok(SolutionBundle { grid: grid.clone(), y, z, diagnostics, iterations, converged, verdict })
}

/// Simulates the forward bundle and runs the Picard scheme on it.
pub fn solve(problem: &Problem, settings: &SolverSettings) -> Result<(ForwardBundle, SolutionBundle)> {
    let forward = problem.simulate(settings)?;
    let solution = picard_solve(problem, &forward, settings)?;
    Ok((forward, solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn brownian(generator: Generator, terminal: Terminal, measures: DelayMeasures) -> Problem {
        Problem { forward: SdeCoefficients::Brownian { dim: 1 }, x0: vec![0.0], generator, terminal, measures }
    }

    fn settings(paths: usize, steps: usize) -> SolverSettings {
        SolverSettings { paths, steps, seed: 7, ..SolverSettings::default() }
    }

    #[test]
    fn theta_examples() {
        let grid_steps = 2;
        let mut measures = DelayMeasures::zero(0.5).unwrap();
        let problem = brownian(Generator::Zero, Terminal::Identity, measures.clone());
        let (forward, mut sol) = solve(&problem, &settings(50, grid_steps)).unwrap();
        let theta = discrete_theta(2, &forward, &sol, &measures).unwrap();
        assert!(theta.xdel.iter().chain(&theta.ydel).chain(&theta.zdel).all(|v| *v == 0.0));

        measures.z = DelayMeasure::atom(0.5, -0.25, 1.0).unwrap();
        measures.y = DelayMeasure::density(0.5, -0.5, 0.0, 1.0).unwrap();
        sol.z.data.fill(1.0);
        sol.y.data.fill(3.0);
        for (i, expect) in [(0, 0.0), (1, 1.0), (2, 1.0)] {
            let theta = discrete_theta(i, &forward, &sol, &measures).unwrap();
            assert!(theta.zdel.iter().all(|v| *v == expect), "node {i}");
        }
        let theta = discrete_theta(2, &forward, &sol, &measures).unwrap();
        assert!(theta.ydel.iter().all(|v| (v - 1.5).abs() < 1e-14));
        assert!(discrete_theta(3, &forward, &sol, &measures).is_err());
    }

    #[test]
    fn lag_one_step_weights_are_exact() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let mut measures = DelayMeasures::zero(1.0).unwrap();
        measures.z = DelayMeasure::atom(1.0, -0.1, 1.0).unwrap();
        let w = ThetaWeights::new(&grid, &measures);
        assert!(w.z[0].is_empty());
        for i in 1..=10 {
            assert_eq!(w.z[i], vec![(i - 1, 1.0)]);
        }
    }

    #[test]
    fn terminal_values_are_exact() {
        let measures = DelayMeasures::zero(1.0).unwrap();
        let problem = brownian(Generator::Zero, Terminal::Square, measures);
        let (forward, sol) = solve(&problem, &settings(400, 8)).unwrap();
        for k in 0..400 {
            assert_eq!(sol.y.at(8, k)[0], forward.x(8, k)[0].powi(2));
            assert_eq!(sol.z.at(8, k)[0], 0.0);
        }
    }

    #[test]
    fn deterministic_delay_y_fixed_point() {
        let mut measures = DelayMeasures::zero(0.5).unwrap();
        measures.y = DelayMeasure::atom(0.5, -0.25, 1.0).unwrap();
        let problem = brownian(Generator::linear_y(0.1), Terminal::Constant { value: vec![1.0] }, measures);
        let (_, sol) = solve(&problem, &SolverSettings { tol: 1e-13, ..settings(500, 20) }).unwrap();
        assert!(sol.converged);
        assert_relative_eq!(sol.y.node_mean(0)[0], 1.0 / 0.975, epsilon = 1e-9);
    }

    #[test]
    fn regression_errors_carry_context() {
        let measures = DelayMeasures::zero(1.0).unwrap();
        let problem = brownian(Generator::Zero, Terminal::Identity, measures);
        let mut s = settings(20, 4);
        s.basis.degree = 3;
        let err = solve(&problem, &s).unwrap_err();
        assert!(matches!(err, Error::Solver { sweep: 1, .. }), "{err}");
    }
}
