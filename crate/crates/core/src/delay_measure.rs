//! Deterministic delay measures on `[-T, 0)` and the sliding convolutions
//! `(φ·α)(t) = ∫ φ(t+v) α(dv)` they induce on grid paths.
//!
//! Paths live on a [`TimeGrid`] and are read with left-constant interpolation:
//! the value at an off-grid time `s` is the value at the last node `t_k <= s`.
//! Below time zero every path is zero. Interval queries are half-open `[a, b)`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Relative tolerance used when snapping times onto grid nodes or interval
/// endpoints. Grid arithmetic such as `t_j - t_i` is only exact up to a few ulps.
const SNAP_REL: f64 = 1e-10;

/// Strictly increasing time grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    snap: f64,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        let nodes = (0..=steps).map(|i| if i == steps { horizon } else { horizon * i as f64 / steps as f64 }).collect();
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("a grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first node must be 0, got {}", nodes[0])));
        }
        if let Some(w) = nodes.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid(format!("nodes must be strictly increasing ({} then {})", w[0], w[1])));
        }
        let min_step = nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        Ok(Self { nodes, snap: SNAP_REL * min_step })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of steps `N`; there are `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// `Δ_i = t_{i+1} - t_i`.
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn min_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub(crate) fn snap_tolerance(&self) -> f64 {
        self.snap
    }

    /// Index of the node equal to `t` (up to snapping), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let k = self.cell_of(t)?;
        if (self.nodes[k] - t).abs() <= self.snap {
            Some(k)
        } else if k + 1 < self.nodes.len() && (self.nodes[k + 1] - t).abs() <= self.snap {
            Some(k + 1)
        } else {
            None
        }
    }

    /// Largest `k` with `t_k <= s`, or `None` for `s < 0`. Times at or past `T`
    /// map to the last node.
    pub fn cell_of(&self, s: f64) -> Option<usize> {
        if s < -self.snap {
            return None;
        }
        let shifted = s + self.snap;
        let k = self.nodes.partition_point(|&t| t <= shifted);
        Some(k.saturating_sub(1).min(self.nodes.len() - 1))
    }

    /// Returns a coarser grid keeping every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::InvalidGrid(format!("cannot coarsen {} steps by a factor of {factor}", self.steps())));
        }
        Self::from_nodes(self.nodes.iter().step_by(factor).copied().collect())
    }
}

/// A vector-valued path sampled at grid nodes, implicitly zero before time 0.
#[derive(Debug, Clone)]
pub struct GridPath<'g> {
    grid: &'g TimeGrid,
    width: usize,
    values: Vec<f64>,
}

impl<'g> GridPath<'g> {
    /// `values` holds `N + 1` consecutive rows of `width` entries.
    pub fn new(grid: &'g TimeGrid, width: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || values.len() != width * grid.nodes().len() {
            return Err(Error::DimensionMismatch { expected: width.max(1) * grid.nodes().len(), got: values.len() });
        }
        Ok(Self { grid, width, values })
    }

    pub fn scalar(grid: &'g TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn from_fn(grid: &'g TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&t| f(t)).collect();
        Self { grid, width: 1, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn node_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.width..(k + 1) * self.width]
    }

    /// Left-constant lookup; `None` stands for the zero extension below 0.
    pub fn value_at(&self, s: f64) -> Option<&[f64]> {
        self.grid.cell_of(s).map(|k| self.node_value(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    pub location: f64,
    pub weight: f64,
}

/// Constant density `level` on `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityPiece {
    pub start: f64,
    pub end: f64,
    pub level: f64,
}

/// Finite nonnegative measure on `[-T, 0)` made of atoms and piecewise-constant density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayMeasure {
    horizon: f64,
    atoms: Vec<Atom>,
    pieces: Vec<DensityPiece>,
}

impl DelayMeasure {
    pub fn new(horizon: f64, mut atoms: Vec<Atom>, mut pieces: Vec<DensityPiece>) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidMeasure(format!("horizon must be positive, got {horizon}")));
        }
        for a in &atoms {
            if !(a.location >= -horizon && a.location < 0.0) {
                return Err(Error::InvalidMeasure(format!("atom at {} lies outside [-{horizon}, 0)", a.location)));
            }
            if !(a.weight >= 0.0) || !a.weight.is_finite() {
                return Err(Error::InvalidMeasure(format!("atom weight {} is not a nonnegative number", a.weight)));
            }
        }
        for p in &pieces {
            if !(p.start >= -horizon && p.start < p.end && p.end <= 0.0) {
                return Err(Error::InvalidMeasure(format!(
                    "density interval [{}, {}) is empty or outside [-{horizon}, 0)",
                    p.start, p.end
                )));
            }
            if !(p.level >= 0.0) || !p.level.is_finite() {
                return Err(Error::InvalidMeasure(format!("density level {} is not a nonnegative number", p.level)));
            }
        }
        atoms.sort_by(|a, b| a.location.total_cmp(&b.location));
        pieces.sort_by(|a, b| a.start.total_cmp(&b.start));
        if let Some(w) = pieces.windows(2).find(|w| w[1].start < w[0].end) {
            return Err(Error::InvalidMeasure(format!(
                "density intervals [{}, {}) and [{}, {}) overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
        Ok(Self { horizon, atoms, pieces })
    }

    pub fn zero(horizon: f64) -> Result<Self> {
        Self::new(horizon, Vec::new(), Vec::new())
    }

    pub fn atom(horizon: f64, location: f64, weight: f64) -> Result<Self> {
        Self::new(horizon, vec![Atom { location, weight }], Vec::new())
    }

    pub fn density(horizon: f64, start: f64, end: f64, level: f64) -> Result<Self> {
        Self::new(horizon, Vec::new(), vec![DensityPiece { start, end, level }])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn pieces(&self) -> &[DensityPiece] {
        &self.pieces
    }

    pub fn is_zero(&self) -> bool {
        self.total_mass() == 0.0
    }

    /// `α([-T, 0))`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum::<f64>()
            + self.pieces.iter().map(|p| p.level * (p.end - p.start)).sum::<f64>()
            + 0.0
    }

    /// `∫ e^{-βs} α(ds)`, exact for both atoms and density pieces.
    pub fn exp_weighted_mass(&self, beta: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.weight * (-beta * a.location).exp()).sum();
        let pieces: f64 = self
            .pieces
            .iter()
            .map(|p| {
                let len = p.end - p.start;
                if beta == 0.0 {
                    p.level * len
                } else {
                    // c/β (e^{-βa} - e^{-βb}) written without cancellation
                    p.level * (-beta * p.start).exp() * -(-beta * len).exp_m1() / beta
                }
            })
            .sum();
        // empty float sums are -0.0
        atoms + pieces + 0.0
    }

    fn snap(&self) -> f64 {
        1e-12 * self.horizon
    }

    /// `α([a, b) ∩ [-T, 0))`. For atoms the endpoints are snapped by `1e-12·T`
    /// so that round-off in shifted grid times never moves an atom to a
    /// neighbouring cell; densities use the exact endpoints.
    pub fn interval_mass(&self, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        let tol = self.snap();
        let (lo, hi) = (a - tol, b - tol);
        let atoms: f64 = self.atoms.iter().filter(|at| at.location >= lo && at.location < hi).map(|at| at.weight).sum();
        let pieces: f64 = self
            .pieces
            .iter()
            .map(|p| {
                let overlap = p.end.min(b) - p.start.max(a);
                if overlap > 0.0 {
                    p.level * overlap
                } else {
                    0.0
                }
            })
            .sum();
        atoms + pieces
    }

    /// Kernel `α([r - T, (r - t) ∧ 0))` of the integration-order interchange
    /// `∫_t^T (φ^k·α)(s) ds = ∫_0^T α([r-T, (r-t)∧0)) |φ_r|^k dr`.
    pub fn interchange_weight(&self, r: f64, t: f64) -> f64 {
        self.interval_mass(r - self.horizon, (r - t).min(0.0))
    }

    /// `(φ·α)(t)` at a grid node `t`.
    pub fn delayed_convolution(&self, path: &GridPath<'_>, t: f64) -> Result<Vec<f64>> {
        path.grid().node_index(t).ok_or(Error::OffGridTime(t))?;
        Ok(self.convolution_at(path, t))
    }

    /// `(|φ|^power·α)(t)` at a grid node `t`, with `|·|` the Euclidean norm.
    pub fn delayed_power_convolution(&self, path: &GridPath<'_>, t: f64, power: f64) -> Result<f64> {
        if !(power >= 1.0) {
            return Err(Error::InvalidParameter(format!("power must be at least 1, got {power}")));
        }
        path.grid().node_index(t).ok_or(Error::OffGridTime(t))?;
        Ok(self.power_convolution_at(path, t, power))
    }

    /// Convolution at any time in `[0, T]`, integrating the left-constant
    /// interpolant of the path exactly.
    pub(crate) fn convolution_at(&self, path: &GridPath<'_>, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; path.width()];
        self.accumulate(path, s, |weight, value| {
            for (o, v) in out.iter_mut().zip(value) {
                *o += weight * v;
            }
        });
        out
    }

    pub(crate) fn power_convolution_at(&self, path: &GridPath<'_>, s: f64, power: f64) -> f64 {
        let mut acc = 0.0;
        self.accumulate(path, s, |weight, value| {
            let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += weight * norm.powf(power);
        });
        acc
    }

    /// Calls `visit(weight, φ_k)` for every grid value contributing to the
    /// convolution at time `s`.
    fn accumulate<'p>(&self, path: &'p GridPath<'_>, s: f64, mut visit: impl FnMut(f64, &'p [f64])) {
        let grid = path.grid();
        let nodes = grid.nodes();
        let n = grid.steps();
        for atom in &self.atoms {
            if let Some(value) = path.value_at(s + atom.location) {
                visit(atom.weight, value);
            }
        }
        for piece in &self.pieces {
            let lo = (s + piece.start).max(0.0);
            let hi = s + piece.end;
            if !(hi > lo) {
                continue;
            }
            let first = grid.cell_of(lo).unwrap_or(0);
            for k in first..n {
                let overlap = nodes[k + 1].min(hi) - nodes[k].max(lo);
                if nodes[k] >= hi {
                    break;
                }
                if overlap > 0.0 {
                    visit(piece.level * overlap, path.node_value(k));
                }
            }
        }
    }

    /// Warning text when an atom sits closer to 0 than one grid step: such a
    /// lag collapses onto the current node in the discrete convolution.
    pub fn short_lag_warning(&self, grid: &TimeGrid) -> Option<String> {
        let min_step = grid.min_step();
        let short: Vec<f64> =
            self.atoms.iter().filter(|a| a.location > -min_step + grid.snap_tolerance()).map(|a| a.location).collect();
        (!short.is_empty())
            .then(|| format!("atoms at {short:?} are closer to 0 than the smallest grid step {min_step}"))
    }
}

/// Both sides of the interchange identity
/// `∫_t^T (|φ|^k·α)(s) ds = ∫_0^T α([r-T,(r-t)∧0)) |φ_r|^k dr`
/// for the left-constant interpolant of `path`, starting at node `t_index`.
///
/// Each side is integrated exactly: the integrands are affine between the
/// breakpoints generated by grid nodes and measure endpoints, so a midpoint
/// rule on every sub-interval is exact.
pub fn interchange_sides(measure: &DelayMeasure, path: &GridPath<'_>, t_index: usize, k: f64) -> (f64, f64) {
    let grid = path.grid();
    let horizon = grid.horizon();
    let t = grid.time(t_index);

    let mut lhs_breaks = vec![t, horizon];
    for &r in grid.nodes() {
        for a in measure.atoms() {
            lhs_breaks.push(r - a.location);
        }
        for p in measure.pieces() {
            lhs_breaks.push(r - p.start);
            lhs_breaks.push(r - p.end);
        }
    }
    let lhs = integrate_piecewise(lhs_breaks, t, horizon, |s| measure.power_convolution_at(path, s, k));

    let mut rhs_breaks: Vec<f64> = grid.nodes().to_vec();
    rhs_breaks.push(t);
    for base in [t, horizon] {
        for a in measure.atoms() {
            rhs_breaks.push(base + a.location);
        }
        for p in measure.pieces() {
            rhs_breaks.push(base + p.start);
            rhs_breaks.push(base + p.end);
        }
    }
    let rhs = integrate_piecewise(rhs_breaks, 0.0, horizon, |r| {
        let value = path.value_at(r).map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
        measure.interchange_weight(r, t) * value.powf(k)
    });
    (lhs, rhs)
}

fn integrate_piecewise(mut breaks: Vec<f64>, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    breaks.retain(|&b| b >= lo && b <= hi);
    breaks.push(lo);
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * hi.abs().max(1.0));
    breaks.windows(2).map(|w| (w[1] - w[0]) * f(0.5 * (w[0] + w[1]))).sum()
}
