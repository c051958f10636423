//! `safechain`: verify, certify and synthesize Markov chains under
//! polyhedral safety constraints.
//!
//! Exit codes: 0 success, 1 valid but negative verdict, 2 input or
//! validation error, 3 numerical failure.

mod artifact;
mod inputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use safechain::gridworld::{scenario_report, simulate_ensemble, GridConfig, GridError, GridWorld};
use safechain::invariant::{
    certify_invariance, maximal_invariant_set, InvarianceVerdict, InvariantError, InvariantOptions, InvariantStatus,
    CERTIFICATE_TOL,
};
use safechain::markov::{check_distribution, DISTRIBUTION_TOL, STOCHASTIC_TOL};
use safechain::polytope::MEMBERSHIP_TOL;
use safechain::synthesis::{
    check_stationary_safe, EntryBound, Mode, Objective, StrategyRegistry, SynthesisError, SynthesisProblem,
};

use artifact::{sha256_hex, to_json, write_text, Envelope, Tolerances};
use inputs::DistSource;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<InvariantError> for CliError {
    fn from(e: InvariantError) -> Self {
        match e {
            InvariantError::SolverUnknown { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::NumericalFailure(_) => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Invariant(inner) => inner.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Parser, Debug, Serialize)]
#[command(name = "safechain", version, about = "Safety analysis and synthesis for Markov chains")]
struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// LP feasibility tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    feas_tol: f64,
    /// Spectral (LMI) feasibility tolerance.
    #[arg(long, global = true, default_value_t = 1e-7)]
    spectral_tol: f64,
    /// Bisection tolerance on the mixing bound.
    #[arg(long, global = true, default_value_t = 1e-4)]
    lambda_tol: f64,
    /// Iteration cap for the invariant-set computation (default: max(2K, 1000)).
    #[arg(long, global = true)]
    cap: Option<usize>,
    /// Seed for ensemble simulation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Accept row-stochastic chain files by transposing them.
    #[arg(long, global = true)]
    transpose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Reversible,
    FixedD,
    MetropolisHastings,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ObjectiveArg {
    None,
    MinTransitionFrequency,
    MaxSelfLoopMass,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Validate a chain and report its stationary distribution and mixing radius.
    CheckChain {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Compute the maximal invariant subset of a safe set.
    InvariantSet {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        safe: PathBuf,
    },
    /// Test an initial distribution against a computed invariant set.
    Membership {
        #[arg(long)]
        result: PathBuf,
        /// JSON array file or `uniform`.
        #[arg(long)]
        x0: String,
    },
    /// Decide whether a polyhedron (intersected with the simplex) is invariant.
    Certify {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        set: PathBuf,
    },
    /// Synthesize a fast-mixing chain on a graph with a given stationary distribution.
    Synthesize {
        /// JSON 0/1 adjacency matrix; entry (i, j) = 1 allows moving from i to j.
        #[arg(long)]
        graph: PathBuf,
        /// JSON array file or `uniform`.
        #[arg(long, default_value = "uniform")]
        v: String,
        #[arg(long, value_enum, default_value = "reversible")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "none")]
        objective: ObjectiveArg,
        /// JSON matrix for the fixed-D mode (default diag(v)^-1).
        #[arg(long)]
        d: Option<PathBuf>,
        /// JSON list of {"row", "col", "lower", "upper"} entry bounds.
        #[arg(long)]
        bounds: Option<PathBuf>,
        /// Safe set that `v` must lie strictly inside.
        #[arg(long)]
        safe: Option<PathBuf>,
    },
    /// Run the grid scenario end to end.
    Gridworld {
        /// Grid config JSON (default: the built-in 7x7 grid).
        #[arg(long)]
        config: Option<PathBuf>,
        /// `stationary`, `uniform`, or a JSON array file.
        #[arg(long, default_value = "stationary")]
        x0: String,
        /// Agents for an ensemble cross-check (0 skips it).
        #[arg(long, default_value_t = 0)]
        agents: usize,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
    },
    /// Monte Carlo agent simulation of a chain.
    Simulate {
        #[arg(long)]
        chain: PathBuf,
        /// JSON array file or `uniform`.
        #[arg(long)]
        x0: String,
        #[arg(long, default_value_t = 100_000)]
        agents: usize,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
        /// Grid config used to label states with cell coordinates.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CheckChain { .. } => "check-chain",
            Command::InvariantSet { .. } => "invariant-set",
            Command::Membership { .. } => "membership",
            Command::Certify { .. } => "certify",
            Command::Synthesize { .. } => "synthesize",
            Command::Gridworld { .. } => "gridworld",
            Command::Simulate { .. } => "simulate",
        }
    }
}

/// Verdict of a successful run.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Verdict {
    Positive,
    Negative,
}

struct Ctx<'a> {
    cli: &'a Cli,
    tol: Tolerances,
    inputs: Vec<Vec<u8>>,
}

impl<'a> Ctx<'a> {
    fn new(cli: &'a Cli) -> Result<Self, CliError> {
        for (name, v) in [
            ("--feas-tol", cli.feas_tol),
            ("--spectral-tol", cli.spectral_tol),
            ("--lambda-tol", cli.lambda_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Input(format!("{name} must be positive, got {v}")));
            }
        }
        if cli.lambda_tol >= 1.0 {
            return Err(CliError::Input("--lambda-tol must be below 1".into()));
        }
        std::fs::create_dir_all(&cli.out)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", cli.out.display())))?;
        Ok(Self {
            cli,
            tol: Tolerances {
                lp_feasibility: cli.feas_tol,
                spectral_feasibility: cli.spectral_tol,
                membership: MEMBERSHIP_TOL,
                certificate: CERTIFICATE_TOL,
                stochasticity: STOCHASTIC_TOL,
                lambda: cli.lambda_tol,
            },
            inputs: Vec::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let b = inputs::read(path)?;
        self.inputs.push(b.clone());
        Ok(b)
    }

    fn dist(&mut self, arg: &str) -> Result<DistSource, CliError> {
        let d = DistSource::from_arg(arg)?;
        self.inputs.push(d.bytes().to_vec());
        Ok(d)
    }

    /// Hash of the parsed command line (minus the output directory) and
    /// every input read so far.
    fn config_hash(&self) -> Result<String, CliError> {
        let mut args = serde_json::to_value(self.cli).map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(obj) = args.as_object_mut() {
            obj.remove("out");
        }
        let args = to_json(&args)?;
        let mut parts: Vec<&[u8]> = vec![args.as_bytes()];
        parts.extend(self.inputs.iter().map(|v| v.as_slice()));
        Ok(sha256_hex(&parts))
    }

    fn emit<T: Serialize>(&self, file: &str, result: &T) -> Result<PathBuf, CliError> {
        let hash = self.config_hash()?;
        let env = Envelope {
            tool: "safechain",
            version: env!("CARGO_PKG_VERSION"),
            command: self.cli.command.name(),
            config_hash: &hash,
            tolerances: &self.tol,
            result,
        };
        let path = write_text(&self.cli.out, file, &to_json(&env)?)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn csv(&self, file: &str, text: &str) -> Result<(), CliError> {
        let path = write_text(&self.cli.out, file, text)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

#[derive(Serialize)]
struct ChainReport {
    n: usize,
    ergodic: bool,
    stationary: Option<Vec<f64>>,
    rho: Option<f64>,
}

#[derive(Serialize)]
struct MembershipReport {
    member: bool,
    t_star: usize,
    /// `(block k, row)` of the first violated constraint.
    first_violation: Option<(usize, usize)>,
}

#[derive(Serialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
enum CertifyReport {
    Invariant { certificate: safechain::polytope::ContainmentCertificate },
    NotInvariant,
    Empty,
}

#[derive(Serialize)]
struct GridReport<'a> {
    config: &'a GridConfig,
    v: Vec<f64>,
    synthesis: &'a safechain::synthesis::SynthesisResult,
    invariant_status: InvariantStatus,
    k_estimate: Option<&'a safechain::invariant::KEstimate>,
    scenario: Option<safechain::gridworld::ScenarioReport>,
    ensemble_agreement: Option<f64>,
}

fn run(cli: &Cli) -> Result<Verdict, CliError> {
    let mut ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::CheckChain { chain } => {
            let bytes = ctx.read(chain)?;
            let c = inputs::chain(chain, &bytes, cli.transpose)?;
            let report = match c.stationary() {
                Ok(info) => ChainReport {
                    n: c.n(),
                    ergodic: true,
                    stationary: Some(info.v.iter().copied().collect()),
                    rho: Some(info.rho),
                },
                Err(_) => ChainReport { n: c.n(), ergodic: false, stationary: None, rho: None },
            };
            println!("valid column-stochastic chain, n = {}, ergodic = {}", report.n, report.ergodic);
            if let Some(rho) = report.rho {
                println!("rho(M - v1^T) = {rho:.16e}");
            }
            ctx.emit("check_chain.json", &report)?;
            Ok(if report.ergodic { Verdict::Positive } else { Verdict::Negative })
        }
        Command::InvariantSet { chain, safe } => {
            let cb = ctx.read(chain)?;
            let sb = ctx.read(safe)?;
            let c = inputs::chain(chain, &cb, cli.transpose)?;
            let p = inputs::polyhedron(safe, &sb)?;
            let opts = InvariantOptions { cap: cli.cap, feas_tol: cli.feas_tol };
            let r = maximal_invariant_set(&c, &p, &opts)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            match r.status {
                InvariantStatus::Converged { t_star } => println!("converged: t* = {t_star}"),
                InvariantStatus::IterationCapReached { t_reached } => println!(
                    "iteration cap reached at t = {t_reached}: safety is guaranteed only for the next {t_reached} steps"
                ),
                InvariantStatus::EmptyConstraintSet => println!("safe set is empty on the simplex"),
            }
            ctx.emit("invariant_set.json", &r)?;
            ctx.csv("invariant_history.csv", &r.history_csv())?;
            Ok(if r.t_star().is_some() { Verdict::Positive } else { Verdict::Negative })
        }
        Command::Membership { result, x0 } => {
            let rb = ctx.read(result)?;
            let r = inputs::invariant_result(result, &rb)?;
            let d = ctx.dist(x0)?;
            let x = d.resolve(r.stacked.dim())?;
            check_distribution(&x, x.len(), DISTRIBUTION_TOL).map_err(|e| CliError::Input(format!("--x0: {e}")))?;
            let t_star = r.t_star().ok_or_else(|| CliError::Input("result did not converge".into()))?;
            let member = r.membership(&x)?;
            let report = MembershipReport { member, t_star, first_violation: r.first_violation(&x)? };
            println!("{}", if member { "member" } else { "not a member" });
            ctx.emit("membership.json", &report)?;
            Ok(if member { Verdict::Positive } else { Verdict::Negative })
        }
        Command::Certify { chain, set } => {
            let cb = ctx.read(chain)?;
            let sb = ctx.read(set)?;
            let c = inputs::chain(chain, &cb, cli.transpose)?;
            let p = inputs::polyhedron(set, &sb)?;
            let (report, verdict) = match certify_invariance(&c, &p, cli.feas_tol)? {
                InvarianceVerdict::Invariant(certificate) => (CertifyReport::Invariant { certificate }, Verdict::Positive),
                InvarianceVerdict::Empty => (CertifyReport::Empty, Verdict::Positive),
                InvarianceVerdict::NotInvariant => (CertifyReport::NotInvariant, Verdict::Negative),
                InvarianceVerdict::Unknown(msg) => return Err(CliError::Numerical(msg)),
            };
            println!(
                "{}",
                match report {
                    CertifyReport::Invariant { .. } => "invariant",
                    CertifyReport::Empty => "empty (invariant vacuously)",
                    CertifyReport::NotInvariant => "not invariant",
                }
            );
            ctx.emit("certify.json", &report)?;
            Ok(verdict)
        }
        Command::Synthesize { graph, v, mode, objective, d, bounds, safe } => {
            let gb = ctx.read(graph)?;
            let g = inputs::graph(graph, &gb)?;
            let vs = ctx.dist(v)?;
            let vv = vs.resolve(g.len())?;
            let mut problem = SynthesisProblem::new(g, vv.clone());
            problem.lambda_tol = cli.lambda_tol;
            problem.feas_tol = cli.spectral_tol;
            problem.objective = match objective {
                ObjectiveArg::None => Objective::None,
                ObjectiveArg::MinTransitionFrequency => Objective::MinTransitionFrequency,
                ObjectiveArg::MaxSelfLoopMass => Objective::MaxSelfLoopMass,
            };
            problem.mode = match mode {
                ModeArg::Reversible => Mode::Reversible,
                ModeArg::MetropolisHastings => Mode::MetropolisHastings,
                ModeArg::FixedD => {
                    let dm = match d {
                        Some(p) => {
                            let b = ctx.read(p)?;
                            Some(inputs::parse::<Vec<Vec<f64>>>(p, &b)?)
                        }
                        None => None,
                    };
                    Mode::FixedD { d: dm }
                }
            };
            if let Some(p) = bounds {
                let b = ctx.read(p)?;
                problem.bounds = inputs::parse::<Vec<EntryBound>>(p, &b)?;
            }
            if let Some(p) = safe {
                let b = ctx.read(p)?;
                let s = inputs::polyhedron(p, &b)?;
                check_stationary_safe(&s, &vv)?;
            }
            let registry = StrategyRegistry::default();
            let r = match registry.synthesize(&problem) {
                Err(SynthesisError::InfeasibleAtLambdaOne) => {
                    println!("infeasible: no admissible chain exists even at lambda = 1");
                    return Ok(Verdict::Negative);
                }
                other => other?,
            };
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: lambda* = {:.6}, rho = {:.6}, certified = {}",
                r.strategy, r.lambda_star, r.rho_achieved, r.certified
            );
            ctx.emit("synthesis.json", &r)?;
            Ok(Verdict::Positive)
        }
        Command::Gridworld { config, x0, agents, horizon } => {
            let cfg = match config {
                Some(p) => {
                    let b = ctx.read(p)?;
                    inputs::parse::<GridConfig>(p, &b)?
                }
                None => GridConfig::canonical(),
            };
            let grid = GridWorld::new(cfg.clone())?;
            let sc = grid.build()?;
            let mut problem = SynthesisProblem::new(sc.graph.clone(), sc.v.clone());
            problem.lambda_tol = cli.lambda_tol;
            problem.feas_tol = cli.spectral_tol;
            problem.bounds = cfg.entry_bounds.clone();
            let syn = StrategyRegistry::default().synthesize(&problem)?;
            let chain = syn.chain().map_err(|e| CliError::Numerical(e.to_string()))?;
            let opts = InvariantOptions { cap: cli.cap, feas_tol: cli.feas_tol };
            let inv = maximal_invariant_set(&chain, &sc.safe, &opts)?;
            let x = match x0.as_str() {
                "stationary" => {
                    ctx.inputs.push(b"stationary".to_vec());
                    sc.v.clone()
                }
                other => ctx.dist(other)?.resolve(grid.num_states())?,
            };
            check_distribution(&x, x.len(), DISTRIBUTION_TOL).map_err(|e| CliError::Input(format!("--x0: {e}")))?;
            let scenario = match inv.t_star() {
                Some(_) => Some(scenario_report(&grid, &chain, &inv, &x)?),
                None => None,
            };
            let agreement = if *agents > 0 {
                let run = simulate_ensemble(&chain, &x, *agents, *horizon, cli.seed)
                    .map_err(|e| CliError::Input(e.to_string()))?;
                ctx.csv("histogram.csv", &run.histogram_csv(&grid))?;
                Some(run.agreement(&chain, &x).map_err(|e| CliError::Input(e.to_string()))?)
            } else {
                None
            };
            println!(
                "lambda* = {:.6}, status = {:?}, member = {}",
                syn.lambda_star,
                inv.status,
                scenario.as_ref().is_some_and(|s| s.member)
            );
            ctx.csv("grid_v.csv", &grid.grid_csv(&sc.v))?;
            ctx.csv("grid_x0.csv", &grid.grid_csv(&x))?;
            if let Some(s) = &scenario {
                ctx.csv("densities.csv", &s.densities_csv(&grid))?;
            }
            ctx.csv("invariant_history.csv", &inv.history_csv())?;
            let verdict = if scenario.as_ref().is_some_and(|s| s.member) { Verdict::Positive } else { Verdict::Negative };
            let report = GridReport {
                config: &cfg,
                v: sc.v.iter().copied().collect(),
                synthesis: &syn,
                invariant_status: inv.status,
                k_estimate: inv.k_estimate.as_ref(),
                scenario,
                ensemble_agreement: agreement,
            };
            ctx.emit("gridworld.json", &report)?;
            ctx.emit("invariant_set.json", &inv)?;
            Ok(verdict)
        }
        Command::Simulate { chain, x0, agents, horizon, grid } => {
            let cb = ctx.read(chain)?;
            let c = inputs::chain(chain, &cb, cli.transpose)?;
            let x = ctx.dist(x0)?.resolve(c.n())?;
            let run = simulate_ensemble(&c, &x, *agents, *horizon, cli.seed)
                .map_err(|e| CliError::Input(format!("--x0: {e}")))?;
            let csv = match grid {
                Some(p) => {
                    let b = ctx.read(p)?;
                    let g = GridWorld::new(inputs::parse::<GridConfig>(p, &b)?)?;
                    if g.num_states() != c.n() {
                        return Err(CliError::Input(format!(
                            "grid has {} free cells but the chain has {} states",
                            g.num_states(),
                            c.n()
                        )));
                    }
                    run.histogram_csv(&g)
                }
                None => state_histogram_csv(&run.counts),
            };
            ctx.csv("histogram.csv", &csv)?;
            ctx.emit("ensemble.json", &run)?;
            Ok(Verdict::Positive)
        }
    }
}

/// Histogram rows for a chain without grid geometry: the state index is
/// the row and the column is 0.
fn state_histogram_csv(counts: &[Vec<u64>]) -> String {
    let mut out = String::from("step,cell_row,cell_col,count\n");
    for (k, row) in counts.iter().enumerate() {
        for (s, c) in row.iter().enumerate() {
            out.push_str(&format!("{k},{s},0,{c}\n"));
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_default_env().filter_level(log::LevelFilter::Error).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Verdict::Positive) => ExitCode::SUCCESS,
        Ok(Verdict::Negative) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
