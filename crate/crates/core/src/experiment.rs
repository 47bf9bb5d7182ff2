//! Runs one command of an experiment config and writes plot-ready CSVs, a
//! one-line verdict and a manifest into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bsde::{fd_directional_check, solve, variational_solve, PathField, SolutionBundle, SolverSettings};
use crate::config::ExperimentConfig;
use crate::constants::{search_feasible, ConstantsReport, ParamGrid};
use crate::error::{Error, Result};
use crate::regularity::{apriori_scaling, y_increment_rate, ReferenceZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckConstants,
    Solve,
    Variational,
    CompareZ,
    FdCheck,
    StudyPicard,
    StudyL2reg,
    StudyYinc,
    StudyApriori,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CheckConstants => "check-constants",
            Command::Solve => "solve",
            Command::Variational => "variational",
            Command::CompareZ => "compare-z",
            Command::FdCheck => "fd-check",
            Command::StudyPicard => "study-picard",
            Command::StudyL2reg => "study-l2reg",
            Command::StudyYinc => "study-yinc",
            Command::StudyApriori => "study-apriori",
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub picard: Option<usize>,
    pub tol: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub beta_grid: Option<String>,
    pub gamma_grid: Option<String>,
    pub meshes: Option<Vec<usize>>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.paths {
            config.solver.paths = v;
        }
        if let Some(v) = self.steps {
            config.solver.steps = v;
        }
        if let Some(v) = self.picard {
            config.solver.picard_max = v;
        }
        if let Some(v) = self.tol {
            config.solver.tol = v;
        }
        if let Some(v) = &self.out {
            config.out = Some(v.clone());
        }
        if let Some(v) = &self.beta_grid {
            config.beta_grid = Some(v.clone());
        }
        if let Some(v) = &self.gamma_grid {
            config.gamma_grid = Some(v.clone());
        }
        if let Some(v) = &self.meshes {
            config.study.meshes = v.clone();
            config.study.separations = v.clone();
        }
        config.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub verdict: String,
    pub pass: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: u64,
    threads: Option<usize>,
    settings: &'a SolverSettings,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(header: &[String]) -> Self {
        Self { text: header.join(",") + "\n" }
    }

    fn with(header: &[&str]) -> Self {
        Self::new(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }
}

fn num(v: f64) -> String {
    // no "-0" in outputs
    format!("{}", v + 0.0)
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn labels(base: &str, width: usize) -> Vec<String> {
    if width == 1 {
        vec![base.to_string()]
    } else {
        (0..width).map(|c| format!("{base}_{c}")).collect()
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text)?;
        self.files.push(path);
        Ok(())
    }
}

/// Loads `config_path`, applies the overrides and runs `command`.
pub fn run(config_path: &Path, command: Command, overrides: &Overrides) -> Result<Outcome> {
    let (mut config, _) = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut config)?;
    run_config(&config, command, overrides.threads)
}

pub fn run_config(config: &ExperimentConfig, command: Command, threads: Option<usize>) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| execute(config, command, threads))
}

fn execute(config: &ExperimentConfig, command: Command, threads: Option<usize>) -> Result<Outcome> {
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    fs::create_dir_all(&dir)?;
    let mut art = Artifacts { dir: dir.clone(), files: Vec::new() };
    let problem = config.problem()?;
    let settings = config.settings();
    info!("{} with {} paths, {} steps, seed {}", command.name(), settings.paths, settings.steps, settings.seed);

    let (verdict, pass) = match command {
        Command::CheckConstants => check_constants(config, &mut art)?,
        Command::Solve => {
            let (_, sol) = solve(&problem, &settings)?;
            art.write("summary.csv", &summary_csv(&sol, "Y", "Z"))?;
            art.write("diagnostics.csv", &diagnostics_csv(&sol))?;
            let condition = match sol.verdict {
                Some(c) => format!(
                    "existence condition {} (lhs_Y={}, lhs_Z={})",
                    if c.feasible { "feasible" } else { "infeasible" },
                    num(c.lhs_y),
                    num(c.lhs_z)
                ),
                None => "existence condition not evaluated".into(),
            };
            let verdict = format!(
                "{} after {} sweeps; Y0={}; {condition}",
                if sol.converged { "converged" } else { "not converged" },
                sol.iterations,
                num(sol.y.node_mean(0)[0])
            );
            (verdict, sol.converged)
        }
        Command::Variational => {
            let forward = problem.simulate(&settings)?;
            let base = crate::bsde::picard_solve(&problem, &forward, &settings)?;
            let h = config.direction(problem.d())?;
            let var = variational_solve(&problem, &forward, &base, &h, &settings)?;
            art.write("variational.csv", &summary_csv(&var.solution, "P", "Q"))?;
            art.write("diagnostics.csv", &diagnostics_csv(&var.solution))?;
            let sol = &var.solution;
            let verdict = format!(
                "{} after {} sweeps; P0={}",
                if sol.converged { "converged" } else { "not converged" },
                sol.iterations,
                num(sol.y.node_mean(0)[0])
            );
            (verdict, sol.converged)
        }
        Command::CompareZ => {
            let reference = ReferenceZ::new(&problem, &settings)?;
            let dist = reference.regression_distance();
            let grid = reference.grid();
            let mut csv = Csv::with(&["t", "rel_l2", "rms_z_regression", "rms_z_representation"]);
            for (i, d) in dist.iter().enumerate() {
                csv.row(&[
                    num(grid.time(i)),
                    num(*d),
                    num(reference.solution().z.node_rms(i)),
                    num(reference.z().node_rms(i)),
                ]);
            }
            art.write("compare_z.csv", &csv.text)?;
            let n = grid.steps();
            let worst = dist[1..n.max(1)].iter().copied().fold(0.0, f64::max);
            let pass = worst <= 0.1;
            (format!("max interior relative distance {} (target <= 0.1): {}", num(worst), pass_word(pass)), pass)
        }
        Command::FdCheck => {
            let h = config.direction(problem.d())?;
            let report = fd_directional_check(&problem, &settings, &h, &config.study.fd_epsilons)?;
            let mut csv = Csv::with(&["epsilon", "error", "std_error"]);
            for i in 0..report.epsilons.len() {
                csv.row(&[num(report.epsilons[i]), num(report.errors[i]), num(report.std_errors[i])]);
            }
            art.write("fd.csv", &csv.text)?;
            // first-order bias: the error should shrink in proportion to ε
            let pass = (1..report.errors.len()).all(|i| {
                let scale = report.epsilons[i] / report.epsilons[i - 1];
                let slack = 3.0 * report.std_errors[i].hypot(report.std_errors[i - 1]) + 1e-9;
                report.errors[i] <= scale * report.errors[i - 1] + slack
            });
            (format!("errors {:?} shrink proportionally to epsilon: {}", report.errors, pass_word(pass)), pass)
        }
        Command::StudyPicard => {
            let (_, sol) = solve(&problem, &settings)?;
            art.write("picard.csv", &diagnostics_csv(&sol))?;
            let worst = late_ratio(&sol);
            let pass = worst < 1.0;
            (format!("max contraction ratio after sweep 2 {} (target < 1): {}", num(worst), pass_word(pass)), pass)
        }
        Command::StudyL2reg => {
            let reference = ReferenceZ::new(&problem, &settings)?;
            let tolerance = config.study.tolerance.unwrap_or(0.3);
            let report = reference.l2_regularity(&config.study.meshes, tolerance)?;
            let mut csv = Csv::with(&[
                "steps",
                "mesh",
                "value",
                "std_error",
                "norm_bar",
                "se_bar",
                "norm_pi",
                "se_pi",
                "best_approx",
            ]);
            let mut best_all = true;
            for (j, &steps) in config.study.meshes.iter().enumerate() {
                let b = reference.best_approx(steps)?;
                best_all &= b.holds;
                csv.row(&[
                    steps.to_string(),
                    num(report.mesh[j]),
                    num(report.values[j]),
                    num(report.std_errors[j]),
                    num(b.norm_bar),
                    num(b.se_bar),
                    num(b.norm_pi),
                    num(b.se_pi),
                    b.holds.to_string(),
                ]);
            }
            art.write("l2reg.csv", &csv.text)?;
            let negligible = report.values.iter().all(|v| *v < 1e-3);
            let pass = (report.pass || negligible) && best_all;
            let verdict = format!(
                "target slope 1, fitted slope {}, max functional {}, best approximation {}: {}",
                opt(report.slope),
                num(report.values.iter().copied().fold(0.0, f64::max)),
                if best_all { "holds" } else { "violated" },
                pass_word(pass)
            );
            (verdict, pass)
        }
        Command::StudyYinc => {
            let tolerance = config.study.tolerance.unwrap_or(0.15 * config.p / 2.0);
            let report = y_increment_rate(&problem, &settings, config.p, &config.study.separations, tolerance)?;
            let mut csv = Csv::with(&["separation", "mesh", "value", "std_error"]);
            for (j, s) in config.study.separations.iter().enumerate() {
                csv.row(&[s.to_string(), num(report.mesh[j]), num(report.values[j]), num(report.std_errors[j])]);
            }
            art.write("yinc.csv", &csv.text)?;
            let verdict = format!(
                "target slope {}, fitted slope {}, tolerance {}: {}",
                num(report.target_slope),
                opt(report.slope),
                num(tolerance),
                pass_word(report.pass)
            );
            (verdict, report.pass)
        }
        Command::StudyApriori => {
            let direction = config.perturbation(problem.d(), problem.m())?;
            let report = apriori_scaling(
                &problem,
                &settings,
                &direction,
                &config.study.apriori_epsilons,
                config.p,
                config.beta,
            )?;
            let mut csv =
                Csv::with(&["epsilon", "s_y", "h_y", "h_z", "lhs", "rhs_terminal", "rhs_driver", "rhs", "ratio"]);
            for r in &report.rows {
                csv.row(&[
                    num(r.epsilon),
                    num(r.norms.s_y),
                    num(r.norms.h_y),
                    num(r.norms.h_z),
                    num(r.lhs),
                    num(r.rhs_terminal),
                    num(r.rhs_driver),
                    num(r.rhs),
                    num(r.ratio),
                ]);
            }
            art.write("apriori.csv", &csv.text)?;
            let (dev, spread) = (report.scaling_deviation(), report.ratio_spread());
            let pass = dev <= 0.2 && spread < 0.25;
            let verdict = format!(
                "scaling deviation {} (target <= 0.2), ratio spread {} (target < 0.25): {}",
                num(dev),
                num(spread),
                pass_word(pass)
            );
            (verdict, pass)
        }
    };

    art.write("verdict.txt", &format!("{verdict}\n"))?;
    let effective = serde_json::to_string(config)?;
    let outputs = art.files.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: hex::encode(Sha256::digest(effective.as_bytes())),
        seed: config.seed,
        threads,
        settings: &settings,
        config,
        outputs,
    };
    art.write("manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(Outcome { out_dir: dir, files: art.files, verdict, pass })
}

fn pass_word(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Largest successive diff ratio from the third sweep on, ignoring diffs at
/// round-off level where ratios carry no information.
fn late_ratio(sol: &SolutionBundle) -> f64 {
    let size: Vec<f64> = sol.diagnostics.iter().map(|d| d.diff_y.max(d.diff_z)).collect();
    sol.contraction_ratios()
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(i, _)| size[*i] > 1e-10)
        .map(|(_, r)| *r)
        .fold(0.0, f64::max)
}

fn summary_csv(sol: &SolutionBundle, y: &str, z: &str) -> String {
    let (m, w) = (sol.y.width(), sol.z.width());
    let mut header = vec!["t".to_string()];
    for (label, width) in [(y, m), (z, w)] {
        header.extend(labels(&format!("mean{label}"), width));
        header.extend(labels(&format!("sd{label}"), width));
    }
    let mut csv = Csv::new(&header);
    let grid = sol.grid();
    let cells =
        |f: &PathField, i: usize| -> Vec<String> { f.node_mean(i).into_iter().chain(f.node_sd(i)).map(num).collect() };
    for i in 0..=grid.steps() {
        let mut row = vec![num(grid.time(i))];
        row.extend(cells(&sol.y, i));
        row.extend(cells(&sol.z, i));
        csv.row(&row);
    }
    csv.text
}

fn diagnostics_csv(sol: &SolutionBundle) -> String {
    let mut csv = Csv::with(&["sweep", "diffY", "diffZ", "diffY_H2", "diffZ_H2", "ratio"]);
    let ratios = sol.contraction_ratios();
    for (i, d) in sol.diagnostics.iter().enumerate() {
        let ratio = if i == 0 { String::new() } else { num(ratios[i - 1]) };
        csv.row(&[d.sweep.to_string(), num(d.diff_y), num(d.diff_z), num(d.diff_y_h2), num(d.diff_z_h2), ratio]);
    }
    csv.text
}

fn check_constants(config: &ExperimentConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let problem = config.problem()?;
    let base = problem.structural(config.p, config.beta, config.gamma);
    let grid = |spec: &Option<String>, value: f64| -> Result<ParamGrid> {
        match spec {
            Some(s) => s.parse(),
            None => Ok(ParamGrid { lo: value, hi: value, n: 1 }),
        }
    };
    let betas = grid(&config.beta_grid, config.beta)?;
    let gammas = grid(&config.gamma_grid, config.gamma)?;
    let mut csv = Csv::with(&[
        "beta",
        "gamma",
        "D1",
        "D2",
        "D3",
        "Cp",
        "thm21_lhs_Y",
        "thm21_lhs_Z",
        "contraction_lhs_Y",
        "contraction_lhs_Z",
        "feasible",
    ]);
    for &beta in &betas.values() {
        for &gamma in &gammas.values() {
            let r = ConstantsReport::evaluate(&base.with_beta_gamma(beta, gamma));
            let feasible = r.margin(config.p).is_some_and(|m| m > 0.0);
            csv.row(&[
                num(beta),
                num(gamma),
                opt(r.d1),
                opt(r.d2),
                opt(r.d3),
                opt(r.cp.map(|c| c.cp)),
                opt(r.existence.map(|c| c.lhs_y)),
                opt(r.existence.map(|c| c.lhs_z)),
                opt(r.contraction.map(|c| c.lhs_y)),
                opt(r.contraction.map(|c| c.lhs_z)),
                feasible.to_string(),
            ]);
        }
    }
    art.write("constants.csv", &csv.text)?;

    let at = ConstantsReport::evaluate(&base);
    let mut report = String::new();
    let _ = writeln!(report, "K = {}", num(base.k));
    let _ = writeln!(report, "T = {}", num(base.horizon));
    let _ = writeln!(report, "p = {}", num(base.p));
    let _ = writeln!(report, "m = {}", base.m);
    let _ = writeln!(report, "alpha_bar = {}", num(at.alpha_bar));
    let _ = writeln!(report, "alpha_tilde(beta={}) = {}", num(config.beta), num(at.alpha_tilde));
    let _ = writeln!(report, "L = {}", num(at.l));
    let _ = writeln!(report, "d_half_p = {}", opt(at.d_half_p));
    if let Some(cp) = at.cp {
        let _ = writeln!(
            report,
            "gamma3 = {}\nCp1 = {}\nCp2 = {}\nCp3 = {}\nCp4 = {}\nCp = {}",
            num(cp.gamma3),
            num(cp.cp1),
            num(cp.cp2),
            num(cp.cp3),
            num(cp.cp4),
            num(cp.cp)
        );
    }
    let best = search_feasible(&base, &betas, &gammas);
    let verdict = match best {
        Some(b) => {
            format!("feasible: best (beta, gamma) = ({}, {}) with margin {}", num(b.beta), num(b.gamma), num(b.margin))
        }
        None => "infeasible on the whole (beta, gamma) grid".to_string(),
    };
    let _ = writeln!(report, "{verdict}");
    art.write("report.txt", &report)?;
    Ok((verdict, best.is_some()))
}
