//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a check did not pass, 2 parse or usage error,
//! 3 solve failure or unknown backend, 4 singular reduced KKT system.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::diff::{dqp_solve_named, DifferentiableSolution, DiffError, DqpOptions};
use crate::generators::{gen_chain, gen_random_dense, gen_random_sparse, gen_simplex, gen_two_param_family, two_param_sample};
use crate::kkt::FactorMode;
use crate::problem::io::load_problem;
use crate::problem::QpProblem;
use crate::solvers::{Registry, SolveSettings, SolveStatus};

pub mod bench;
pub mod bilevel;
pub mod checkgrad;
pub mod profile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_SOLVE: i32 = 3;
pub const EXIT_SINGULAR: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dqp", version, about = "Solve and differentiate convex quadratic programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Backend name; a comma-separated list for bench and profile.
    #[arg(long, value_delimiter = ',')]
    pub solver: Option<Vec<String>>,
    #[arg(long, default_value_t = 1e-6)]
    pub eps_abs: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps_active: f64,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub refine_active_set: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seconds per backend solve; 0 disables the limit.
    #[arg(long, default_value_t = 60.0)]
    pub time_limit: f64,
}

impl Common {
    pub fn settings(&self) -> SolveSettings {
        SolveSettings {
            eps_abs: self.eps_abs,
            time_limit: (self.time_limit > 0.0).then(|| Duration::from_secs_f64(self.time_limit)),
            ..SolveSettings::default()
        }
    }

    pub fn options(&self) -> DqpOptions {
        DqpOptions {
            eps_active: self.eps_active,
            normalize: self.normalize,
            refine: self.refine_active_set,
            ..DqpOptions::default()
        }
    }

    pub fn solvers(&self, default: &[&str]) -> Vec<String> {
        self.solver
            .clone()
            .unwrap_or_else(|| default.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Simplex,
    Chain,
    RandomSparse,
    RandomDense,
    TwoParam,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Simplex => "simplex",
            Suite::Chain => "chain",
            Suite::RandomSparse => "random-sparse",
            Suite::RandomDense => "random-dense",
            Suite::TwoParam => "two-param",
        }
    }

    /// `size` is `n`, except for chains where it is the number of points.
    pub fn build(self, size: usize, dim: usize, seed: u64) -> QpProblem {
        match self {
            Suite::Simplex => gen_simplex(size, seed).0,
            Suite::Chain => gen_chain(size, dim, seed).0,
            Suite::RandomSparse => gen_random_sparse(size, seed),
            Suite::RandomDense => gen_random_dense(size, seed),
            Suite::TwoParam => {
                let (t1, t2) = two_param_sample(seed);
                gen_two_param_family(t1, t2)
            }
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem file and report the solution and diagnosis.
    Solve {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Time forward and backward passes over a generated suite.
    Bench {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, value_delimiter = ',', default_value = "100")]
        sizes: Vec<usize>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Point dimension for the chain suite.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Rank backends by time across tolerance regimes.
    Profile {
        #[arg(long, conflicts_with = "suite")]
        problem: Option<PathBuf>,
        #[arg(long, value_enum)]
        suite: Option<Suite>,
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "1e-8,1e-5,1e-2")]
        tolerances: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare backward gradients with finite differences and the full
    /// implicit system.
    CheckGrad {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Drive the inequality duals to zero by descent on `d`.
    Bilevel {
        /// Inner problem; the built-in toy instance when omitted.
        #[arg(long)]
        problem: Option<PathBuf>,
        #[arg(long, default_value_t = bilevel::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-10)]
        target: f64,
        #[arg(long)]
        warm_start: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run(cli, &mut out)
}

/// Runs a parsed command, writing reports to `out` and errors to stderr.
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Solve { path, common } => cmd_solve(&path, &common, out),
        Command::Bench {
            suite,
            sizes,
            seeds,
            dim,
            common,
        } => bench::cmd_bench(suite, &sizes, seeds, dim, &common, out),
        Command::Profile {
            problem,
            suite,
            size,
            dim,
            tolerances,
            common,
        } => profile::cmd_profile(problem.as_deref(), suite, size, dim, &tolerances, &common, out),
        Command::CheckGrad {
            suite,
            size,
            dim,
            h,
            common,
        } => checkgrad::cmd_checkgrad(suite, size, dim, h, &common, out),
        Command::Bilevel {
            problem,
            step,
            max_iter,
            target,
            warm_start,
            common,
        } => bilevel::cmd_bilevel(problem.as_deref(), step, max_iter, target, warm_start, &common, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new(EXIT_SOLVE, format!("output failed: {e}"))
    }
}

pub(crate) fn diff_error(e: DiffError) -> CliError {
    CliError::new(EXIT_SOLVE, e.to_string())
}

pub fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Solved => "solved",
        SolveStatus::MaxIter => "max_iter",
        SolveStatus::Failed => "failed",
    }
}

pub fn mode_name(mode: FactorMode) -> &'static str {
    match mode {
        FactorMode::Direct => "direct",
        FactorMode::LeastSquares => "least_squares",
    }
}

/// The reduced KKT matrix is numerically rank deficient.
pub fn is_singular(sol: &DifferentiableSolution) -> bool {
    let fact = sol.factorization();
    fact.mode() == FactorMode::LeastSquares && fact.rank().is_some_and(|r| r < fact.order())
}

/// Writes `text` to `--out` when given, to `out` otherwise.
pub(crate) fn emit(common: &Common, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match &common.out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::new(EXIT_SOLVE, format!("{}: {e}", path.display()))),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

/// Machine-readable record printed by `solve --json`.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct SolveReport {
    pub backend: String,
    pub status: String,
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub active: Vec<usize>,
    pub r_p: f64,
    pub r_d: f64,
    pub r_g: f64,
    pub mode: String,
    pub weakly_active: Vec<usize>,
    pub dimension_ok: bool,
    pub iterations: usize,
    pub solve_ms: f64,
    pub post_solve_ms: f64,
}

impl SolveReport {
    pub fn new(backend: &str, sol: &DifferentiableSolution) -> Self {
        let r = sol.residuals();
        Self {
            backend: backend.to_string(),
            status: status_name(sol.point().status).to_string(),
            z: sol.z().to_vec(),
            lambda: sol.lambda().to_vec(),
            mu: sol.mu().to_vec(),
            active: sol.active().indices().to_vec(),
            r_p: r.r_p,
            r_d: r.r_d,
            r_g: r.r_g,
            mode: mode_name(sol.mode()).to_string(),
            weakly_active: sol.diagnosis().weakly_active.clone(),
            dimension_ok: sol.diagnosis().dimension_ok,
            iterations: sol.point().iterations,
            solve_ms: millis(sol.solve_time()),
            post_solve_ms: millis(sol.post_solve_time()),
        }
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ");
        let set = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "backend: {}\nstatus: {}\nz = [{}]\nlambda = [{}]\nmu = [{}]\nJ = {{{}}}\nr_p = {:.3e}\nr_d = {:.3e}\nr_g = {:.3e}\nmode: {}\nweakly active: {{{}}}\ndimension ok: {}\niterations: {}\n",
            self.backend,
            self.status,
            list(&self.z),
            list(&self.lambda),
            list(&self.mu),
            set(&self.active),
            self.r_p,
            self.r_d,
            self.r_g,
            self.mode,
            set(&self.weakly_active),
            self.dimension_ok,
            self.iterations,
        )
    }
}

/// Milliseconds with microsecond resolution.
pub fn millis(d: Duration) -> f64 {
    d.as_micros() as f64 / 1000.0
}

fn cmd_solve(path: &Path, common: &Common, out: &mut dyn Write) -> Result<i32, CliError> {
    let problem = load_problem(path).map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?;
    let backend = common.solvers(&["active_set"]).remove(0);
    let registry = Registry::with_defaults();
    let sol = dqp_solve_named(&problem, &registry, &backend, &common.settings(), &common.options()).map_err(diff_error)?;
    let report = SolveReport::new(&backend, &sol);
    let text = if common.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_text()
    };
    emit(common, &text, out)?;
    Ok(if is_singular(&sol) { EXIT_SINGULAR } else { EXIT_OK })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::io::store_problem;
    use crate::sparse::CscMatrix;

    fn run_args(args: &[&str]) -> (i32, String) {
        let cli = Cli::try_parse_from(std::iter::once("dqp").chain(args.iter().copied())).unwrap();
        let mut buf = Vec::new();
        let code = run(cli, &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    fn one_d_file(dir: &tempfile::TempDir) -> PathBuf {
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::identity(1),
            vec![-1.0],
        )
        .unwrap();
        let path = dir.path().join("one_d.json");
        store_problem(&prob, &path).unwrap();
        path
    }

    #[test]
    fn solve_one_d() {
        let dir = tempfile::tempdir().unwrap();
        let path = one_d_file(&dir);
        let (code, text) = run_args(&["solve", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert!(text.contains("z = [-1]"), "{text}");
        assert!(text.contains("mu = [1]"), "{text}");
        assert!(text.contains("J = {0}"), "{text}");
    }

    #[test]
    fn unknown_backend_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = one_d_file(&dir);
        let (code, _) = run_args(&["solve", path.to_str().unwrap(), "--solver", "nope"]);
        assert_eq!(code, EXIT_SOLVE);
    }

    #[test]
    fn missing_file_exit_two() {
        let (code, _) = run_args(&["solve", "/nonexistent/problem.json"]);
        assert_eq!(code, EXIT_PARSE);
    }

    #[test]
    fn json_report_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = one_d_file(&dir);
        let (code, text) = run_args(&["solve", path.to_str().unwrap(), "--json"]);
        assert_eq!(code, EXIT_OK);
        let report: SolveReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report.z, vec![-1.0]);
        assert_eq!(report.active, vec![0]);
        assert_eq!(report.status, "solved");
    }

    #[test]
    fn singular_exit_four() {
        // Two copies of the same tight row.
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::from_rows(&[&[1.0], &[1.0]]),
            vec![-1.0, -1.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.json");
        store_problem(&prob, &path).unwrap();
        let (code, _) = run_args(&["solve", path.to_str().unwrap(), "--solver", "brute_force"]);
        assert_eq!(code, EXIT_SINGULAR);
    }
}
