//! `speedbump`: probe, solve, simulate, session, analyze and verify.
//!
//! Exit codes: 0 success, 1 usage, 2 domain error, 3 verification failure,
//! 4 I/O.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use speedbump::session::AgentPolicy;
use speedbump::Error;

#[derive(Parser)]
#[command(name = "speedbump", version, about = "Latency races behind exchange speed bumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execution probabilities of one race: published formula, exact value
    /// and optionally Monte Carlo.
    #[command(args_override_self = true)]
    Probe(ProbeArgs),
    /// Symmetric equilibrium investment for one cell or the canonical grid.
    #[command(args_override_self = true)]
    Solve(SolveArgs),
    /// Monte Carlo win frequencies of one race against the exact values.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Simulated 32-round lab session written as round records.
    #[command(args_override_self = true)]
    Session(SessionArgs),
    /// Panel regressions of a session's round records.
    #[command(args_override_self = true)]
    Analyze(AnalyzeArgs),
    /// Oracle cross-checks; exits 3 if any fails.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Probe(_) => "probe",
            Command::Solve(_) => "solve",
            Command::Simulate(_) => "simulate",
            Command::Session(_) => "session",
            Command::Analyze(_) => "analyze",
            Command::Verify(_) => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Options shared by every subcommand.
#[derive(Args, Serialize)]
pub struct Common {
    /// JSON object of option values keyed by flag name; flags win.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory for output files and the run manifest.
    #[arg(long, value_name = "DIR")]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Run on a single thread.
    #[arg(long)]
    pub sequential: bool,
}

impl Common {
    pub fn exec(&self) -> speedbump::Execution {
        if self.sequential {
            speedbump::Execution::Sequential
        } else {
            speedbump::Execution::default()
        }
    }
}

/// Comma-separated numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct NumList(pub Vec<f64>);

impl FromStr for NumList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number")))
            .collect::<Result<_, _>>()
            .map(NumList)
    }
}

/// Comma-separated words.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WordList(pub Vec<String>);

impl FromStr for WordList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(WordList(s.split(',').map(|w| w.trim().to_string()).collect()))
    }
}

/// Comma-separated agent policies.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PolicyList(pub Vec<AgentPolicy>);

impl FromStr for PolicyList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<AgentPolicy>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()
            .map(PolicyList)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    Paper,
    Exact,
    Both,
}

/// One race: a design cell plus either raw rates or a tier and investments.
#[derive(Args, Serialize)]
pub struct RaceArgs {
    /// none, sym-det, asym-det, sym-rand or asym-rand.
    #[arg(long)]
    pub design: String,
    /// Mean bump delay Δ in seconds.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Trader rates followed by the market maker's, e.g. 0.2,0.2,0.2.
    #[arg(long, conflicts_with_all = ["tier", "invests"])]
    pub rates: Option<NumList>,
    /// Technology tier label, used with --invests.
    #[arg(long, requires = "invests")]
    pub tier: Option<String>,
    /// Investment of each trader in ECoins.
    #[arg(long, requires = "tier")]
    pub invests: Option<NumList>,
    #[arg(long, default_value_t = 10.0)]
    pub endowment: f64,
    /// Market maker rate when rates come from --tier.
    #[arg(long, default_value_t = speedbump::model::BASE_RATE)]
    pub mm_rate: f64,
}

#[derive(Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub race: RaceArgs,
    #[arg(long, value_enum, default_value_t = EngineChoice::Both)]
    pub engine: EngineChoice,
    /// Also estimate by Monte Carlo with this many races.
    #[arg(long, value_name = "REPS")]
    pub mc: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Three sizes × four designs × two endowments plus no bump, per tier.
    Canonical,
}

#[derive(Args, Serialize)]
pub struct SolveArgs {
    #[arg(long, value_enum, conflicts_with_all = ["design", "delta", "endowment"])]
    pub grid: Option<Grid>,
    /// Single cell: design (with --delta and --endowment).
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub endowment: Option<f64>,
    /// Restrict to one tier; all configured tiers by default.
    #[arg(long)]
    pub tier: Option<String>,
    #[arg(long, value_enum, default_value_t = EngineChoice::Exact)]
    pub engine: EngineChoice,
    /// Traders per race.
    #[arg(long, default_value_t = 2)]
    pub traders: usize,
    /// JSON file with tiers, prize and market-maker rate.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub race: RaceArgs,
    #[arg(long, default_value_t = 1_000_000)]
    pub reps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize)]
pub struct SessionArgs {
    #[arg(long, default_value_t = 18)]
    pub groups: usize,
    /// One policy for everyone or one per trader slot: equilibrium,
    /// fixed:F, noisy-br:S, uniform.
    #[arg(long, default_value = "equilibrium")]
    pub policy: PolicyList,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub session_id: u64,
    /// Tier label per group, cycled; drawn from the seed when absent.
    #[arg(long)]
    pub tiers: Option<WordList>,
    #[arg(long, default_value_t = 3)]
    pub traders: usize,
    /// JSON file with tiers, prize and market-maker rate.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    /// Round records written by `session` (.csv or .json).
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub input: PathBuf,
    /// JSON battery of tables and tests; the lab battery by default.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub battery: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Serialize)]
pub struct VerifyArgs {
    /// Monte Carlo races per probability cell.
    #[arg(long, default_value_t = 1_000_000)]
    pub reps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

/// A failed run and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
    Verification(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Domain(_) => 2,
            Failure::Verification(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Domain(m) | Failure::Verification(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(_) => Failure::Io(e.to_string()),
            Error::Csv(c) if c.is_io_error() => Failure::Io(e.to_string()),
            Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Splices the options of a `--config` file in front of the command-line
/// flags of the subcommand, so that flags given explicitly win.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(sub) = argv.get(1).filter(|s| !s.starts_with('-')).cloned() else {
        return Ok(argv);
    };
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(2) {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = argv.get(i + 1).cloned();
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some(sc) = cmd.find_subcommand(&sub) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Io(format!("{path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {path}: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Failure::Usage(format!("config {path}: expected a JSON object")));
    };
    let mut tokens = Vec::new();
    for (key, v) in map {
        let known = sc.get_arguments().any(|a| a.get_long() == Some(key.as_str()));
        if !known || key == "config" {
            return Err(Failure::Usage(format!("config {path}: unknown option `{key}` for `{sub}`")));
        }
        let flag = format!("--{key}");
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            other => Err(Failure::Usage(format!("config {path}: bad value {other} for `{key}`"))),
        };
        match &v {
            serde_json::Value::Bool(true) => tokens.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
                tokens.extend([flag, joined]);
            }
            other => tokens.extend([flag, scalar(other)?]),
        }
    }
    argv.splice(2..2, tokens);
    Ok(argv)
}

fn run(argv: Vec<String>) -> Result<(), Failure> {
    let argv = expand_config(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Err(Failure::Usage(String::new())) } else { Ok(()) };
        }
    };
    let name = cli.command.name();
    match &cli.command {
        Command::Probe(a) => commands::probe(a).and_then(|o| o.finish(name, a, &a.common)),
        Command::Solve(a) => commands::solve(a).and_then(|o| o.finish(name, a, &a.common)),
        Command::Simulate(a) => commands::simulate(a).and_then(|o| o.finish(name, a, &a.common)),
        Command::Session(a) => commands::session(a).and_then(|o| o.finish(name, a, &a.common)),
        Command::Analyze(a) => commands::analyze(a).and_then(|o| o.finish(name, a, &a.common)),
        Command::Verify(a) => commands::verify(a).and_then(|o| o.finish(name, a, &a.common)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message().is_empty() {
                eprintln!("error: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}
