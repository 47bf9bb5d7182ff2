use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use delay_bsde::experiment::{run, Command, Overrides};
use delay_bsde::Error;

#[derive(Parser)]
#[command(name = "delay-bsde", version, about = "Monte Carlo experiments for BSDEs with time-delayed generators")]
struct Cli {
    command: Cmd,

    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// number of Monte Carlo paths
    #[arg(long)]
    paths: Option<usize>,
    /// number of time steps
    #[arg(long)]
    steps: Option<usize>,
    /// maximal number of Picard sweeps
    #[arg(long)]
    picard: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// worker thread cap (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// lo:hi:n
    #[arg(long)]
    beta_grid: Option<String>,
    /// lo:hi:n
    #[arg(long)]
    gamma_grid: Option<String>,
    /// comma-separated step counts (study-l2reg) or separations (study-yinc)
    #[arg(long, value_delimiter = ',')]
    meshes: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
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

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::CheckConstants => Command::CheckConstants,
            Cmd::Solve => Command::Solve,
            Cmd::Variational => Command::Variational,
            Cmd::CompareZ => Command::CompareZ,
            Cmd::FdCheck => Command::FdCheck,
            Cmd::StudyPicard => Command::StudyPicard,
            Cmd::StudyL2reg => Command::StudyL2reg,
            Cmd::StudyYinc => Command::StudyYinc,
            Cmd::StudyApriori => Command::StudyApriori,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        picard: cli.picard,
        tol: cli.tol,
        threads: cli.threads,
        out: cli.out,
        beta_grid: cli.beta_grid,
        gamma_grid: cli.gamma_grid,
        meshes: cli.meshes,
    };
    match run(&cli.config, cli.command.into(), &overrides) {
        Ok(outcome) => {
            println!("{}", outcome.verdict);
            println!("outputs written to {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
