//! Cross-sectional least-squares regression used as the conditional
//! expectation estimator `Ê[· | F_{t_i}]`.
//!
//! Features are centred and scaled, near-constant columns are dropped, and the
//! basis is the set of monomials of total degree `<= q` in the remaining
//! columns. The normal matrix is diagonalised (symmetric eigendecomposition),
//! which exposes rank deficiency; a ridge term `λ·tr(ΦᵀΦ)/B` regularises it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Path functionals available as regression features at a node `t_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// `X_{t_i}`.
    State,
    /// `(X·α_X)(t_i)`.
    DelayedState,
    /// Delayed convolution of the current `Y` iterate.
    DelayedY,
    /// Delayed convolution of the current `Z` iterate.
    DelayedZ,
    /// `X_{t_i + v_k}` for every atom location `v_k` of the delay measures.
    AtomLags,
    /// `∇X_{t_i} h` (only meaningful for variational solves).
    FlowDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_features")]
    pub features: Vec<Feature>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_degree() -> usize {
    2
}

fn default_features() -> Vec<Feature> {
    vec![Feature::State, Feature::DelayedState, Feature::DelayedY, Feature::DelayedZ]
}

fn default_ridge() -> f64 {
    1e-8
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: default_degree(), features: default_features(), ridge: default_ridge() }
    }
}

impl BasisSpec {
    pub fn with_features(mut self, features: &[Feature]) -> Self {
        self.features = features.to_vec();
        self
    }
}

/// Column-major `rows × cols` sample matrix, one row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_columns(rows: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch { expected: rows, got: c.len() });
        }
        Ok(Self { rows, columns })
    }

    /// A matrix with no feature columns: the basis reduces to the constant.
    pub fn empty(rows: usize) -> Self {
        Self { rows, columns: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn push_column(&mut self, column: Vec<f64>) -> Result<()> {
        if column.len() != self.rows {
            return Err(Error::DimensionMismatch { expected: self.rows, got: column.len() });
        }
        self.columns.push(column);
        Ok(())
    }
}

/// Standardisation plus monomial exponents; maps a raw feature row to basis values.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    input_dim: usize,
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

impl PolynomialBasis {
    fn fit(features: &FeatureMatrix, degree: usize) -> Self {
        let rows = features.rows() as f64;
        let mut active = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for (j, col) in features.columns.iter().enumerate() {
            let mu = col.iter().sum::<f64>() / rows;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows;
            let sd = var.sqrt();
            // constant up to round-off: carries no information beyond the intercept
            if sd > 1e-9 * mu.abs() && sd > f64::MIN_POSITIVE {
                active.push(j);
                mean.push(mu);
                scale.push(sd);
            }
        }
        let exponents = monomials(active.len(), degree);
        Self { input_dim: features.cols(), active, mean, scale, exponents }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Indices of the feature columns that survived the constant-column filter.
    pub fn active_features(&self) -> &[usize] {
        &self.active
    }

    fn standardized(&self, row: &[f64]) -> Vec<f64> {
        self.active.iter().zip(self.mean.iter().zip(&self.scale)).map(|(&j, (mu, sd))| (row[j] - mu) / sd).collect()
    }

    pub fn eval_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: row.len() });
        }
        let z = self.standardized(row);
        Ok(self.exponents.iter().map(|e| monomial(&z, e)).collect())
    }
}

fn monomial(z: &[f64], exponents: &[u32]) -> f64 {
    z.iter().zip(exponents).fold(1.0, |acc, (v, &e)| acc * v.powi(e as i32))
}

/// Exponent vectors of total degree `<= degree`, ordered by degree and then
/// lexicographically (constant first).
fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; vars]];
    let mut previous = vec![vec![0u32; vars]];
    for _ in 0..degree {
        let mut next: Vec<Vec<u32>> = Vec::new();
        for e in &previous {
            let last = e.iter().rposition(|&x| x > 0).unwrap_or(0);
            for v in last..vars {
                let mut f = e.clone();
                f[v] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        previous = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    basis: PolynomialBasis,
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
    /// `sqrt(λ_max / λ_min)` of the normal matrix over retained directions.
    pub condition: f64,
}

impl FitResult {
    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    /// Coefficient of the constant monomial.
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }
}

/// Basis expansion of `row` dotted with the fitted coefficients.
pub fn predict(fit: &FitResult, row: &[f64]) -> Result<f64> {
    let values = fit.basis.eval_row(row)?;
    Ok(values.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum())
}

/// A factorised regression design: the basis evaluated on every sample plus
/// the eigendecomposition of its normal matrix. Fitting several targets
/// against the same features reuses it.
#[derive(Debug, Clone)]
pub struct Design {
    basis: PolynomialBasis,
    rows: usize,
    /// non-constant basis columns, centred (`B - 1` columns of length `rows`)
    centred: Vec<Vec<f64>>,
    means: Vec<f64>,
    /// eigendecomposition of the centred normal matrix, absent when `B = 1`
    eigen: Option<SymmetricEigen<f64, nalgebra::Dyn>>,
    ridge: f64,
    cutoff: f64,
}

impl Design {
    pub fn new(features: &FeatureMatrix, spec: &BasisSpec) -> Result<Self> {
        if !(spec.ridge >= 0.0) {
            return Err(Error::Regression(format!("ridge must be nonnegative, got {}", spec.ridge)));
        }
        let rows = features.rows();
        let basis = PolynomialBasis::fit(features, spec.degree);
        let b = basis.len();
        if b * 10 > rows {
            return Err(Error::Regression(format!(
                "basis of {b} functions is too large for {rows} samples (need at least 10 samples per function)"
            )));
        }
        // the constant monomial comes first and is handled through centring,
        // which leaves the intercept unpenalised
        let mut centred = vec![vec![0.0; rows]; b - 1];
        let mut row = vec![0.0; features.cols()];
        for k in 0..rows {
            for (j, r) in row.iter_mut().enumerate() {
                *r = features.columns[j][k];
            }
            let z = basis.standardized(&row);
            for (col, e) in centred.iter_mut().zip(&basis.exponents[1..]) {
                col[k] = monomial(&z, e);
            }
        }
        let means: Vec<f64> = centred.iter().map(|c| c.iter().sum::<f64>() / rows as f64).collect();
        for (col, mu) in centred.iter_mut().zip(&means) {
            col.iter_mut().for_each(|v| *v -= mu);
        }
        let q = b - 1;
        let mut gram = DMatrix::<f64>::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, c)| a * c).sum();
                gram[(i, j)] = s;
                gram[(j, i)] = s;
            }
        }
        let trace_scale = if q > 0 { gram.trace() / q as f64 } else { 0.0 };
        let eigen = (q > 0).then(|| SymmetricEigen::new(gram));
        let eigenvalues = eigen.as_ref().map(|e| e.eigenvalues.as_slice()).unwrap_or(&[]);
        let lambda_max = eigenvalues.iter().copied().fold(0.0, f64::max);
        let lambda_min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if spec.ridge == 0.0 && q > 0 && lambda_min <= 1e-13 * lambda_max {
            return Err(Error::Regression(format!(
                "design is rank-deficient (eigenvalue ratio {:.3e}); use a positive ridge",
                lambda_min / lambda_max
            )));
        }
        Ok(Self { basis, rows, centred, means, eigen, ridge: spec.ridge * trace_scale, cutoff: 1e-14 * lambda_max })
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Ridge least-squares fit of one target column; the intercept is not penalised.
    pub fn fit(&self, targets: &[f64]) -> Result<FitResult> {
        if targets.len() != self.rows {
            return Err(Error::DimensionMismatch { expected: self.rows, got: targets.len() });
        }
        if let Some(k) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::Regression(format!("non-finite target on sample {k}")));
        }
        let q = self.centred.len();
        let mean_y = targets.iter().sum::<f64>() / self.rows as f64;
        let rhs = DVector::from_iterator(
            q,
            self.centred.iter().map(|col| col.iter().zip(targets).map(|(a, y)| a * (y - mean_y)).sum::<f64>()),
        );
        let mut lambda_max: f64 = 0.0;
        let mut lambda_min = f64::INFINITY;
        let slopes = match &self.eigen {
            Some(eigen) => {
                let projected = eigen.eigenvectors.transpose() * rhs;
                let scaled = DVector::from_iterator(
                    q,
                    projected.iter().zip(eigen.eigenvalues.iter()).map(|(v, &lambda)| {
                        if lambda <= self.cutoff {
                            0.0
                        } else {
                            lambda_max = lambda_max.max(lambda);
                            lambda_min = lambda_min.min(lambda);
                            v / (lambda + self.ridge)
                        }
                    }),
                );
                &eigen.eigenvectors * scaled
            }
            None => DVector::zeros(0),
        };
        let intercept = mean_y - slopes.iter().zip(&self.means).map(|(c, mu)| c * mu).sum::<f64>();
        let coefficients: Vec<f64> = std::iter::once(intercept).chain(slopes.iter().copied()).collect();
        let fitted = self.evaluate_centred(mean_y, slopes.as_slice());
        let residual_rms =
            (fitted.iter().zip(targets).map(|(f, y)| (y - f) * (y - f)).sum::<f64>() / self.rows as f64).sqrt();
        Ok(FitResult {
            basis: self.basis.clone(),
            coefficients,
            residual_rms,
            condition: if q > 0 { (lambda_max / lambda_min).sqrt() } else { 1.0 },
        })
    }

    fn evaluate_centred(&self, level: f64, slopes: &[f64]) -> Vec<f64> {
        let mut out = vec![level; self.rows];
        for (col, c) in self.centred.iter().zip(slopes) {
            if *c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(col) {
                *o += c * v;
            }
        }
        out
    }

    /// In-sample predictions `Φ c`.
    pub fn evaluate(&self, coefficients: &[f64]) -> Vec<f64> {
        let slopes = &coefficients[1..];
        let level = coefficients[0] + slopes.iter().zip(&self.means).map(|(c, mu)| c * mu).sum::<f64>();
        self.evaluate_centred(level, slopes)
    }

    /// Fit and return the in-sample predictions directly.
    pub fn project(&self, targets: &[f64]) -> Result<Vec<f64>> {
        let fit = self.fit(targets)?;
        Ok(self.evaluate(&fit.coefficients))
    }

    /// Values of basis function `j` on the samples.
    pub fn basis_column(&self, j: usize) -> Vec<f64> {
        if j == 0 {
            vec![1.0; self.rows]
        } else {
            self.centred[j - 1].iter().map(|v| v + self.means[j - 1]).collect()
        }
    }
}

/// One-shot conditional expectation fit: `min Σ (y - Φc)² + λ|c|²`.
pub fn fit_condexp(features: &FeatureMatrix, targets: &[f64], spec: &BasisSpec) -> Result<FitResult> {
    Design::new(features, spec)?.fit(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(degree: usize, ridge: f64) -> BasisSpec {
        BasisSpec { degree, features: vec![Feature::State], ridge }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(0, 2), vec![Vec::<u32>::new()]);
        assert_eq!(monomials(1, 2).len(), 3);
        assert_eq!(monomials(2, 2), vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(monomials(4, 2).len(), 15);
        assert_eq!(monomials(3, 3).len(), 20);
    }

    #[test]
    fn constant_target_gives_constant_fit() {
        let x: Vec<f64> = (0..200).map(|k| (k as f64 * 0.37).sin()).collect();
        let features = FeatureMatrix::from_columns(200, vec![x]).unwrap();
        let fit = fit_condexp(&features, &vec![5.0; 200], &spec(2, 0.0)).unwrap();
        assert_relative_eq!(fit.intercept(), 5.0, epsilon = 1e-12);
        assert!(fit.coefficients[1..].iter().all(|c| c.abs() < 1e-12));
        assert!(fit.residual_rms < 1e-12);
        assert_relative_eq!(predict(&fit, &[0.3]).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_fit_predicts_exactly() {
        let x: Vec<f64> = (0..100).map(|k| k as f64 / 10.0).collect();
        let features = FeatureMatrix::from_columns(100, vec![x.clone()]).unwrap();
        let fit = fit_condexp(&features, &x, &spec(1, 0.0)).unwrap();
        assert_relative_eq!(predict(&fit, &[0.3]).unwrap(), 0.3, epsilon = 1e-12);
        assert!(matches!(predict(&fit, &[0.3, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rank_deficiency_needs_ridge() {
        let x: Vec<f64> = (0..100).map(|k| (k as f64).cos()).collect();
        let features = FeatureMatrix::from_columns(100, vec![x.clone(), x.iter().map(|v| 2.0 * v).collect()]).unwrap();
        let err = fit_condexp(&features, &x, &spec(1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("ridge"));
        let fit = fit_condexp(&features, &x, &spec(1, 1e-8)).unwrap();
        assert!(fit.residual_rms < 1e-6);
    }

    #[test]
    fn constant_features_are_dropped() {
        let features = FeatureMatrix::from_columns(50, vec![vec![3.0; 50]]).unwrap();
        let targets: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let fit = fit_condexp(&features, &targets, &spec(2, 0.0)).unwrap();
        assert_eq!(fit.basis().len(), 1);
        assert_relative_eq!(fit.intercept(), 24.5, epsilon = 1e-12);
    }

    #[test]
    fn too_many_basis_functions() {
        let cols = (0..4).map(|j| (0..100).map(|k| ((k * (j + 1)) as f64).sin()).collect()).collect();
        let features = FeatureMatrix::from_columns(100, cols).unwrap();
        assert!(fit_condexp(&features, &vec![0.0; 100], &BasisSpec::default()).is_err());
    }

    #[test]
    fn residuals_are_orthogonal_to_basis() {
        let x: Vec<f64> = (0..500).map(|k| ((k * 7919) % 1000) as f64 / 250.0 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) - v + (v * 13.0).sin()).collect();
        let features = FeatureMatrix::from_columns(500, vec![x]).unwrap();
        let design = Design::new(&features, &spec(2, 0.0)).unwrap();
        let fitted = design.project(&y).unwrap();
        let residual: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let rnorm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        for j in 0..design.basis().len() {
            let col = design.basis_column(j);
            let dot: f64 = col.iter().zip(&residual).map(|(a, b)| a * b).sum();
            let cnorm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!(dot.abs() < 1e-8 * cnorm * rnorm, "column {j}: {dot}");
        }
    }
}
