//! Experiment harness: `run`, `verify`, `bound` and `fixtures`.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 invariant violation,
//! 3 round budget exhausted.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::analysis::{
    CheckReport, CheckSuite, JsonlWriter, LineSink, RunTrace, TraceDigest, TraceHeader, TraceTap,
    Verbosity,
};
use crate::llmc::{run_llmc, run_mmct, LlmcError, LlmcSettings, MmctConfig};
use crate::mmc::{run_mmc, seeded_roles, MmcConfig, MmcError, Observer, ProtocolConfig};
use crate::netsim::{
    build_cycle_of_gadgets, build_gadget_g1, build_gadget_g2, AdversarySpec, Role,
};
use crate::params::{worst_case_schedule, Mode};

pub const LOG_ENV: &str = "ADN_COUNT_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invariant violation: {0}")]
    Violation(String),
    #[error("round budget exhausted: {0}")]
    Budget(String),
    #[error(transparent)]
    Run(Box<dyn std::error::Error + Send + Sync>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Run(_) => 1,
            CliError::Violation(_) => 2,
            CliError::Budget(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mmc,
    Mmct,
    Llmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TraceVerbosity {
    /// No trace file.
    #[default]
    None,
    States,
    TopologyIds,
    Full,
}

impl TraceVerbosity {
    fn tap(self) -> Verbosity {
        match self {
            TraceVerbosity::None | TraceVerbosity::States => Verbosity::States,
            TraceVerbosity::TopologyIds => Verbosity::TopologyIds,
            TraceVerbosity::Full => Verbosity::Full,
        }
    }
}

fn yes() -> bool {
    true
}

/// Everything needed to reproduce a run; echoed into its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub n: usize,
    /// Black count (mmc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<u64>,
    /// Error parameter of the randomized protocol (llmc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    /// Iterations to run (llmc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Estimate cap (mmct).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_cap: Option<u64>,
    /// Actual number of black nodes (mmct).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blacks: Option<usize>,
    /// Explicit placement; otherwise blacks are placed from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<Role>>,
    pub epsilon: f64,
    pub adversary: AdversarySpec,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_budget: Option<u64>,
    #[serde(default = "yes")]
    pub fast_forward: bool,
    #[serde(default)]
    pub trace_verbosity: TraceVerbosity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn mmc(n: usize, ell: u64, epsilon: f64, adversary: AdversarySpec, seed: u64, mode: Mode) -> Self {
        ExperimentConfig {
            protocol: Protocol::Mmc,
            n,
            ell: Some(ell),
            zeta: None,
            iterations: None,
            k_cap: None,
            blacks: None,
            roles: None,
            epsilon,
            adversary,
            seed,
            mode,
            round_budget: None,
            fast_forward: true,
            trace_verbosity: TraceVerbosity::None,
            trace: None,
            summary: None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        self.mode
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(r) = &self.roles {
            if r.len() != self.n {
                return bad(format!("{} roles given for n={}", r.len(), self.n));
            }
        }
        if self.trace.is_some() && self.trace_verbosity == TraceVerbosity::None {
            return bad("a trace path needs a trace verbosity".into());
        }
        match self.protocol {
            Protocol::Mmc => match self.ell {
                None => return bad("mmc needs ell".into()),
                Some(ell) if ell == 0 || ell >= self.n as u64 => {
                    return bad(format!("mmc needs 1 <= ell < n, got ell={ell}"))
                }
                _ => {}
            },
            Protocol::Mmct => {
                let Some(k) = self.k_cap else {
                    return bad("mmct needs k_cap".into());
                };
                if k < 2 {
                    return bad(format!("k_cap must be at least 2, got {k}"));
                }
                if self.roles.is_none() && self.blacks.is_none_or(|b| b > self.n) {
                    return bad("mmct needs blacks <= n or explicit roles".into());
                }
            }
            Protocol::Llmc => {
                if !self.zeta.is_some_and(|z| z.is_finite() && z > 0.0) {
                    return bad("llmc needs a positive zeta".into());
                }
                if self.iterations.is_none() {
                    return bad("llmc needs iterations".into());
                }
                if self.trace.is_some() {
                    return bad("tracing is supported for mmc and mmct only".into());
                }
            }
        }
        Ok(())
    }

    fn placement(&self, blacks: usize) -> Vec<Role> {
        self.roles
            .clone()
            .unwrap_or_else(|| seeded_roles(self.n, blacks, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub crate_version: String,
    /// Per-node outputs (`null` for no output).
    pub counts: Vec<Option<u64>>,
    pub total_rounds: u64,
    pub executed_rounds: u64,
    pub budget_exhausted: bool,
    /// SHA-256 of the JSONL trace (mmc, mmct) or of the iteration reports (llmc).
    pub trace_digest: String,
    pub checks: Vec<CheckReport>,
    pub result: serde_json::Value,
}

impl Summary {
    pub fn checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs an experiment. Budget exhaustion is reported in the summary rather
/// than as an error, so the partial result can still be written.
pub fn execute(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    cfg.validate()?;
    match cfg.protocol {
        Protocol::Mmc | Protocol::Mmct => execute_traced(cfg),
        Protocol::Llmc => execute_llmc(cfg),
    }
}

fn execute_traced(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let (protocol, roles) = match cfg.protocol {
        Protocol::Mmc => {
            let ell = cfg.ell.expect("validated");
            (
                ProtocolConfig {
                    ell,
                    epsilon: cfg.epsilon,
                    mode: cfg.mode,
                    cap: None,
                    trimmed: false,
                },
                cfg.placement(ell as usize),
            )
        }
        _ => (
            ProtocolConfig {
                ell: 1,
                epsilon: cfg.epsilon,
                mode: cfg.mode,
                cap: cfg.k_cap,
                trimmed: true,
            },
            cfg.placement(cfg.blacks.unwrap_or(0)),
        ),
    };
    let header = TraceHeader {
        protocol,
        n: cfg.n,
        lanes: 1,
        // output locations do not affect the run, so they stay out of the digest
        config: serde_json::to_value(ExperimentConfig {
            trace: None,
            summary: None,
            ..cfg.clone()
        })
        .expect("config serializes"),
    };

    let mut digest = TraceDigest::default();
    let mut suite = CheckSuite::standard(header.clone());
    let mut writer = match &cfg.trace {
        Some(p) => Some(JsonlWriter::new(BufWriter::new(
            File::create(p).map_err(io_err(p))?,
        ))),
        None => None,
    };
    let outcome = {
        let mut sinks: Vec<&mut dyn LineSink> = vec![&mut digest, &mut suite];
        if let Some(w) = writer.as_mut() {
            sinks.push(w);
        }
        let mut tap = TraceTap::new(cfg.trace_verbosity.tap(), sinks);
        tap.header(&header);
        let mut observers: [&mut dyn Observer; 1] = [&mut tap];
        run_protocol(cfg, &roles, &mut observers)
    };
    if let (Some(w), Some(p)) = (writer, &cfg.trace) {
        w.finish().map_err(io_err(p))?;
    }
    let (counts, total_rounds, executed_rounds, budget_exhausted, result) = outcome?;
    Ok(Summary {
        config: cfg.clone(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        counts,
        total_rounds,
        executed_rounds,
        budget_exhausted,
        trace_digest: digest.hex(),
        checks: suite.reports(),
        result,
    })
}

type Outcome = (Vec<Option<u64>>, u64, u64, bool, serde_json::Value);

fn run_protocol(
    cfg: &ExperimentConfig,
    roles: &[Role],
    observers: &mut [&mut dyn Observer],
) -> Result<Outcome, CliError> {
    match cfg.protocol {
        Protocol::Mmc => {
            let mut m = MmcConfig::new(
                cfg.n,
                cfg.ell.expect("validated"),
                cfg.epsilon,
                cfg.adversary.clone(),
                cfg.mode,
            );
            m.roles = Some(roles.to_vec());
            m.round_budget = cfg.round_budget;
            m.fast_forward = cfg.fast_forward;
            let (res, exhausted) = match run_mmc(&m, observers) {
                Ok(r) => (r, false),
                Err(MmcError::BudgetExhausted { partial, .. }) => (*partial, true),
                Err(e) => return Err(CliError::Run(Box::new(e))),
            };
            let value = serde_json::to_value(&res).expect("result serializes");
            Ok((res.counts, res.total_rounds, res.executed_rounds, exhausted, value))
        }
        _ => {
            let k = cfg.k_cap.expect("validated");
            let mcfg = MmctConfig::new(k, 1, cfg.epsilon, cfg.mode).map_err(|e| CliError::Config(e.to_string()))?;
            if cfg.round_budget.is_some_and(|b| b < mcfg.round_max) {
                return Err(CliError::Budget(format!(
                    "round_max {} exceeds the round budget",
                    mcfg.round_max
                )));
            }
            let run = run_mmct(&mcfg, roles, cfg.adversary.clone(), cfg.fast_forward, observers)
                .map_err(|e| CliError::Run(Box::new(e)))?;
            let value = json!({"round_max": mcfg.round_max, "run": run});
            Ok((
                run.outcomes.iter().map(|o| Some(o.count)).collect(),
                run.rounds,
                run.executed_rounds,
                false,
                value,
            ))
        }
    }
}

fn execute_llmc(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let settings = LlmcSettings {
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        seed: cfg.seed,
        fast_forward: cfg.fast_forward,
        executed_budget: cfg.round_budget,
    };
    let run = match run_llmc(
        cfg.n,
        cfg.zeta.expect("validated"),
        cfg.adversary.clone(),
        &settings,
        cfg.iterations.expect("validated"),
    ) {
        Ok(r) => r,
        Err(e @ LlmcError::Budget { .. }) => return Err(CliError::Budget(e.to_string())),
        Err(e @ (LlmcError::BadZeta(_) | LlmcError::TooFewNodes(_) | LlmcError::BadCap(_))) => {
            return Err(CliError::Config(e.to_string()))
        }
        Err(e) => return Err(CliError::Run(Box::new(e))),
    };
    let mut digest = TraceDigest::default();
    let reports = serde_json::to_string(&run.state.iterations).expect("reports serialize");
    let header = TraceHeader {
        protocol: ProtocolConfig {
            ell: 1,
            epsilon: cfg.epsilon,
            mode: cfg.mode,
            cap: None,
            trimmed: true,
        },
        n: cfg.n,
        lanes: 0,
        config: json!(reports),
    };
    digest.line(crate::analysis::Line::Header(&header));
    Ok(Summary {
        config: cfg.clone(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        counts: run.state.counts().into_iter().map(Some).collect(),
        total_rounds: run.state.clock,
        executed_rounds: run.state.iterations.iter().map(|i| i.executed_rounds).sum(),
        budget_exhausted: false,
        trace_digest: digest.hex(),
        checks: Vec::new(),
        result: serde_json::to_value(&run).expect("run serializes"),
    })
}

/// Loads a trace file and runs every checker over it.
pub fn verify_trace(path: &Path) -> Result<Vec<CheckReport>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let trace = RunTrace::read_jsonl(BufReader::new(file)).map_err(|e| CliError::Config(e.to_string()))?;
    if let Err(e) = trace.validate() {
        return Ok(vec![CheckReport {
            check: "trace_format".into(),
            pass: false,
            first_violation_round: None,
            details: json!({"error": e.to_string()}),
        }]);
    }
    Ok(CheckSuite::run(&trace))
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "adn-count", version, about = "Counting in anonymous dynamic networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a protocol and write a summary (and optionally a JSONL trace).
    Run(Box<RunArgs>),
    /// Check every invariant on a JSONL trace.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Print the worst-case estimate schedule and round bound.
    Bound {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        ell: u64,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Write the gadget topologies as JSON.
    Fixtures {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        lambda: usize,
        /// Gadgets in the cycle fixture.
        #[arg(long, default_value_t = 3)]
        x: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeName {
    Paper,
    Scaled,
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    #[arg(long, value_enum, default_value = "paper")]
    pub mode: ModeName,
    /// Phase-count scale (scaled mode).
    #[arg(long)]
    pub s_p: Option<f64>,
    /// Round-count scale (scaled mode).
    #[arg(long)]
    pub s_r: Option<f64>,
}

impl ModeArgs {
    fn resolve(&self) -> Result<Mode, CliError> {
        match self.mode {
            ModeName::Paper => Ok(Mode::Paper),
            ModeName::Scaled => match (self.s_p, self.s_r) {
                (Some(s_p), Some(s_r)) => Ok(Mode::Scaled { s_p, s_r }),
                _ => Err(CliError::Config("scaled mode needs --s-p and --s-r".into())),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment config; the other flags are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mmc")]
    pub protocol: Protocol,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ell: Option<u64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub k_cap: Option<u64>,
    #[arg(long)]
    pub blacks: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long, default_value = "permuted_path")]
    pub adversary: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[arg(long)]
    pub round_budget: Option<u64>,
    /// Disable skipping of provably quiescent rounds.
    #[arg(long)]
    pub no_fast_forward: bool,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub verbosity: Option<TraceVerbosity>,
    /// Summary path; stdout when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

impl RunArgs {
    pub fn to_config(&self) -> Result<ExperimentConfig, CliError> {
        if let Some(p) = &self.config {
            let file = File::open(p).map_err(io_err(p))?;
            return serde_json::from_reader(BufReader::new(file))
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
        }
        let n = self.n.ok_or_else(|| CliError::Config("--n is required".into()))?;
        let adversary = AdversarySpec::from_name(&self.adversary, self.seed)
            .ok_or_else(|| CliError::Config(format!("unknown adversary {:?}", self.adversary)))?;
        let trace_verbosity = match (self.verbosity, &self.trace) {
            (Some(v), _) => v,
            (None, Some(_)) => TraceVerbosity::States,
            (None, None) => TraceVerbosity::None,
        };
        Ok(ExperimentConfig {
            protocol: self.protocol,
            n,
            ell: self.ell,
            zeta: self.zeta,
            iterations: self.iterations,
            k_cap: self.k_cap,
            blacks: self.blacks,
            roles: None,
            epsilon: self.epsilon,
            adversary,
            seed: self.seed,
            mode: self.mode.resolve()?,
            round_budget: self.round_budget,
            fast_forward: !self.no_fast_forward,
            trace_verbosity,
            trace: self.trace.clone(),
            summary: self.summary.clone(),
        })
    }
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(io_err(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.to_config()?;
            info!("running {:?} with n={}", cfg.protocol, cfg.n);
            let summary = execute(&cfg)?;
            write_json(&summary, cfg.summary.as_deref())?;
            if summary.budget_exhausted {
                return Err(CliError::Budget(format!(
                    "stopped after {} rounds",
                    summary.total_rounds
                )));
            }
            Ok(())
        }
        Command::Verify { trace } => {
            let reports = verify_trace(&trace)?;
            write_json(&reports, None)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Violation(failed.join(", ")))
            }
        }
        Command::Bound { n, ell, epsilon, mode } => {
            let mode = mode.resolve()?;
            let schedule = worst_case_schedule(n, ell, epsilon, mode).map_err(|e| CliError::Config(e.to_string()))?;
            write_json(
                &json!({"n": n, "ell": ell, "epsilon": epsilon, "mode": mode, "schedule": schedule}),
                None,
            )
        }
        Command::Fixtures { out, lambda, x } => {
            std::fs::create_dir_all(&out).map_err(io_err(&out))?;
            let conf = |e: crate::netsim::NetError| CliError::Config(e.to_string());
            let g1 = build_gadget_g1(lambda).map_err(conf)?;
            let g2 = build_gadget_g2(lambda).map_err(conf)?;
            let cyc = build_cycle_of_gadgets(x, lambda, 0).map_err(conf)?;
            for (name, fx) in [("g1", &g1), ("g2", &g2), ("gadget_cycle", &cyc)] {
                let p = out.join(format!("{name}_lambda{lambda}.json"));
                write_json(fx, Some(&p))?;
                info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("adn-count: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
}
