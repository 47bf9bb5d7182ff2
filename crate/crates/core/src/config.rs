//! Experiment configuration: a JSON document naming presets and literal
//! delay measures. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bsde::{DelayMeasures, Generator, Perturbation, Problem, SolverSettings, Terminal, ZEstimator};
use crate::constants::ParamGrid;
use crate::delay_measure::{Atom, DelayMeasure, DensityPiece};
use crate::error::{Error, Result};
use crate::forward::SdeCoefficients;
use crate::regression::BasisSpec;

/// A number or a list of numbers; a bare number stands for a 1-element list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Numbers {
    One(f64),
    Many(Vec<f64>),
}

impl Numbers {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Numbers::One(v) => vec![*v],
            Numbers::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForwardConfig {
    Brownian {
        x0: Numbers,
    },
    Gbm {
        x0: Numbers,
        mu: Numbers,
        nu: Numbers,
    },
    #[serde(alias = "ou")]
    OrnsteinUhlenbeck {
        x0: Numbers,
        kappa: f64,
        theta: Numbers,
        sigma: f64,
    },
}

impl ForwardConfig {
    fn build(&self) -> (SdeCoefficients, Vec<f64>) {
        match self {
            ForwardConfig::Brownian { x0 } => {
                let x0 = x0.to_vec();
                (SdeCoefficients::Brownian { dim: x0.len() }, x0)
            }
            ForwardConfig::Gbm { x0, mu, nu } => {
                (SdeCoefficients::Gbm { mu: mu.to_vec(), nu: nu.to_vec() }, x0.to_vec())
            }
            ForwardConfig::OrnsteinUhlenbeck { x0, kappa, theta, sigma } => (
                SdeCoefficients::OrnsteinUhlenbeck { kappa: *kappa, theta: theta.to_vec(), sigma: *sigma },
                x0.to_vec(),
            ),
        }
    }
}

/// Generator presets; omitted linear coefficients are zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    #[default]
    Zero,
    Linear {
        ax: Option<Numbers>,
        ay: Option<Numbers>,
        az: Option<Numbers>,
        c: Option<Numbers>,
        /// declared Lipschitz constant `K`
        k: Option<f64>,
    },
    Sine {
        amplitude: f64,
    },
}

impl GeneratorConfig {
    fn build(&self, m: usize, d: usize) -> Generator {
        match self {
            GeneratorConfig::Zero => Generator::Zero,
            GeneratorConfig::Linear { ax, ay, az, c, k } => {
                let or_zero =
                    |v: &Option<Numbers>, len: usize| v.as_ref().map_or_else(|| vec![0.0; len], Numbers::to_vec);
                Generator::Linear {
                    ax: or_zero(ax, m * d),
                    ay: or_zero(ay, m * m),
                    az: or_zero(az, m * m * d),
                    c: or_zero(c, m),
                    k: *k,
                }
            }
            GeneratorConfig::Sine { amplitude } => Generator::Sine { amplitude: *amplitude },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Identity,
    Square,
    Constant { value: Numbers },
    Linear { a: Numbers, c: Option<Numbers> },
}

impl TerminalConfig {
    fn build(&self, d: usize) -> Terminal {
        match self {
            TerminalConfig::Identity => Terminal::Identity,
            TerminalConfig::Square => Terminal::Square,
            TerminalConfig::Constant { value } => Terminal::Constant { value: value.to_vec() },
            TerminalConfig::Linear { a, c } => {
                let a = a.to_vec();
                let c = c.as_ref().map_or_else(|| vec![0.0; a.len() / d.max(1)], Numbers::to_vec);
                Terminal::Linear { a, c }
            }
        }
    }
}

/// `{"atom": [v, w]}` or `{"density": [a, b, level]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureLiteral {
    Atom([f64; 2]),
    Density([f64; 3]),
}

fn build_measure(horizon: f64, literals: &[MeasureLiteral]) -> Result<DelayMeasure> {
    let mut atoms = Vec::new();
    let mut pieces = Vec::new();
    for lit in literals {
        match *lit {
            MeasureLiteral::Atom([location, weight]) => atoms.push(Atom { location, weight }),
            MeasureLiteral::Density([start, end, level]) => pieces.push(DensityPiece { start, end, level }),
        }
    }
    DelayMeasure::new(horizon, atoms, pieces)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasuresConfig {
    pub x: Vec<MeasureLiteral>,
    pub y: Vec<MeasureLiteral>,
    pub z: Vec<MeasureLiteral>,
}

/// Solver block; the seed lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub paths: usize,
    pub steps: usize,
    pub picard_max: usize,
    pub tol: f64,
    pub basis: BasisSpec,
    pub z_estimator: ZEstimator,
    pub control_variate: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            paths: s.paths,
            steps: s.steps,
            picard_max: s.picard_max,
            tol: s.tol,
            basis: s.basis,
            z_estimator: s.z_estimator,
            control_variate: s.control_variate,
        }
    }
}

/// Parameters of the studies and of the derivative commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// coarse step counts for `study-l2reg`
    pub meshes: Vec<usize>,
    /// step separations for `study-yinc`
    pub separations: Vec<usize>,
    /// slope tolerance; defaults to 0.15·p/2 for increments and 0.3 for L²-regularity
    pub tolerance: Option<f64>,
    /// direction `h` for `variational` and `fd-check` (default: first unit vector)
    pub direction: Option<Numbers>,
    pub fd_epsilons: Vec<f64>,
    pub apriori_epsilons: Vec<f64>,
    /// terminal part `δg` of the a priori perturbation
    pub perturb_terminal: Option<TerminalConfig>,
    /// constant driver part `δf` (default: ones)
    pub perturb_driver: Option<Numbers>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            meshes: vec![10, 20, 40, 80],
            separations: vec![1, 2, 4, 8],
            tolerance: None,
            direction: None,
            fd_epsilons: vec![0.5, 0.25, 0.125],
            apriori_epsilons: vec![0.4, 0.2, 0.1],
            perturb_terminal: None,
            perturb_driver: None,
        }
    }
}

fn default_p() -> f64 {
    2.0
}

fn default_beta() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub horizon: f64,
    pub forward: ForwardConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub measures: MeasuresConfig,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// `lo:hi:n`
    pub beta_grid: Option<String>,
    pub gamma_grid: Option<String>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates; errors carry line and column of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((config, text))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.p >= 2.0) {
            return Err(Error::Config(format!("p must be at least 2, got {}", self.p)));
        }
        if !(self.gamma > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative and gamma positive".into()));
        }
        for grid in [&self.beta_grid, &self.gamma_grid].into_iter().flatten() {
            grid.parse::<ParamGrid>()?;
        }
        if self.solver.paths < 2 || self.solver.steps == 0 {
            return Err(Error::Config("solver needs at least 2 paths and 1 step".into()));
        }
        self.problem()?;
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem> {
        let t = self.horizon;
        let (forward, x0) = self.forward.build();
        let d = forward.dim();
        let terminal = self.terminal.build(d);
        let m = terminal.dim(d);
        let measures = DelayMeasures {
            x: build_measure(t, &self.measures.x)?,
            y: build_measure(t, &self.measures.y)?,
            z: build_measure(t, &self.measures.z)?,
        };
        let problem = Problem { forward, x0, generator: self.generator.build(m, d), terminal, measures };
        problem.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(problem)
    }

    pub fn settings(&self) -> SolverSettings {
        let s = &self.solver;
        SolverSettings {
            paths: s.paths,
            steps: s.steps,
            picard_max: s.picard_max,
            tol: s.tol,
            seed: self.seed,
            basis: s.basis.clone(),
            z_estimator: s.z_estimator,
            control_variate: s.control_variate,
            beta: self.beta,
        }
    }

    pub fn direction(&self, d: usize) -> Result<Vec<f64>> {
        match &self.study.direction {
            Some(h) => {
                let h = h.to_vec();
                if h.len() != d {
                    return Err(Error::Config(format!("direction needs {d} entries, got {}", h.len())));
                }
                Ok(h)
            }
            None => {
                let mut h = vec![0.0; d];
                h[0] = 1.0;
                Ok(h)
            }
        }
    }

    pub fn perturbation(&self, d: usize, m: usize) -> Result<Perturbation> {
        let terminal = self.study.perturb_terminal.as_ref().unwrap_or(&TerminalConfig::Identity).build(d);
        let driver = self.study.perturb_driver.as_ref().map_or_else(|| vec![1.0; m], Numbers::to_vec);
        if terminal.dim(d) != m || driver.len() != m {
            return Err(Error::Config(format!("perturbation must have dimension {m}")));
        }
        Ok(Perturbation { epsilon: 1.0, terminal, driver })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DELAY_Z: &str = r#"{
        "horizon": 0.5,
        "forward": {"preset": "brownian", "x0": 0.0},
        "generator": {"preset": "linear", "az": 0.1, "k": 0.1},
        "terminal": {"preset": "identity"},
        "measures": {"z": [{"atom": [-0.25, 1.0]}]}
    }"#;

    #[test]
    fn parses_fixture() {
        let c = ExperimentConfig::from_json(DELAY_Z).unwrap();
        let p = c.problem().unwrap();
        assert_eq!(
            p.generator,
            Generator::Linear { ax: vec![0.0], ay: vec![0.0], az: vec![0.1], c: vec![0.0], k: Some(0.1) }
        );
        assert_eq!(p.measures.z.total_mass(), 1.0);
        assert!(p.measures.y.is_zero());
        assert_eq!(c.settings().paths, 10_000);
    }

    #[test]
    fn missing_horizon_is_reported() {
        let text = DELAY_Z.replace("\"horizon\": 0.5,", "");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("missing field `horizon`") && err.contains("line"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            DELAY_Z.replace("\"horizon\"", "\"horizn\": 1, \"horizon\""),
            DELAY_Z.replace("\"k\": 0.1", "\"k\": 0.1, \"kk\": 1"),
            DELAY_Z.replace("\"preset\": \"identity\"", "\"preset\": \"cubic\""),
            DELAY_Z.replace("{\"atom\"", "{\"spike\""),
        ] {
            assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_measure_is_a_config_error() {
        let text = DELAY_Z.replace("-0.25, 1.0", "0.25, 1.0");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
