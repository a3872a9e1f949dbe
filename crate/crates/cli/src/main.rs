//! `lacer`: run searches, inspect spaces, parse agent responses, compute
//! feature information and aggregate run directories.
//!
//! Machine-readable output goes to stdout (JSON or CSV); diagnostics go to
//! stderr. Exit codes: 0 success, 2 configuration or input error, 3 run
//! stopped before its budget was used up.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lacer_core::agent::{BackendKind, FeedbackFlags};
use lacer_core::orchestrator::{
    aggregate, load_run, resolve_space, run, write_summary, EvalBackend, RunConfig, RunError,
};
use lacer_core::parser::{parse_design_vectors, PatternSet};
use lacer_core::searchers::SearcherKind;
use lacer_core::signals::{collect_feature_info, feature_pairs, read_trace_csv, DEFAULT_BINS};
use lacer_core::{CompositeSpace, DesignVector};

#[derive(Debug, Parser)]
#[command(
    name = "lacer",
    version,
    about = "Composite state-encoder architecture search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one search and write its log directory.
    Run(Box<RunArgs>),
    /// List valid design vectors in canonical order, one JSON object per line.
    Enumerate(EnumerateArgs),
    /// Check a design vector (JSON) against a space.
    Validate(ValidateArgs),
    /// Extract design vectors from an agent response.
    Parse(ParseArgs),
    /// Estimate feature information from a trace CSV.
    Signals(SignalsArgs),
    /// Aggregate best-so-far curves of several run directories into CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Searcher {
    Random,
    Local,
    Evolutionary,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Surrogate,
    Microflow,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LlmBackend {
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Signal {
    Fi,
    Ri,
    Ie,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in space id (traffic, minigrid) or a space JSON file.
    #[arg(long)]
    space: Option<String>,
    #[arg(long, value_enum)]
    searcher: Option<Searcher>,
    /// Evaluation backend.
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Completion backend of the llm searcher.
    #[arg(long, value_enum)]
    llm_backend: Option<LlmBackend>,
    /// Total number of evaluated candidates.
    #[arg(long)]
    budget: Option<usize>,
    /// Candidates per iteration.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feedback signals withheld from the agent.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Signal>,
    /// Chat-completion endpoint for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Transcript replayed by the replay backend.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Training steps per MicroFlow evaluation.
    #[arg(long)]
    train_steps: Option<usize>,
    /// Greedy evaluation steps per MicroFlow evaluation.
    #[arg(long)]
    eval_steps: Option<usize>,
    /// Noise scale of the surrogate objective.
    #[arg(long)]
    sigma: Option<f64>,
    /// Ramp training steps from 25% to 100% over the run.
    #[arg(long)]
    budget_schedule: bool,
    /// Write each candidate's evaluation traces as CSV.
    #[arg(long)]
    dump_traces: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run in the output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct EnumerateArgs {
    #[arg(long)]
    space: String,
    /// Restrict to one module's subspace.
    #[arg(long)]
    module: Option<String>,
    /// Stop after this many vectors.
    #[arg(long)]
    limit: Option<usize>,
    /// Print only the cardinality.
    #[arg(long)]
    count: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    space: String,
    /// Design vector JSON file; stdin when omitted or `-`.
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParseArgs {
    #[arg(long)]
    space: String,
    /// Number of architectures the response was asked for.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Response text file; stdin when omitted or `-`.
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SignalsArgs {
    #[arg(long)]
    space: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Trace CSV file; stdin when omitted or `-`.
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories sharing one configuration up to the seed.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Summary CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = if matches!(e, RunError::Incomplete { .. }) {
            3
        } else {
            2
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_input(path: Option<&Path>) -> Result<String, Failure> {
    match path {
        Some(p) if p != Path::new("-") => {
            fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
        }
        _ => {
            let mut s = String::new();
            io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| Failure::input(format!("stdin: {e}")))?;
            Ok(s)
        }
    }
}

fn emit_json<T: serde::Serialize>(value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Failure::input)?;
    println!("{text}");
    Ok(())
}

fn space(id: &str) -> Result<CompositeSpace, Failure> {
    Ok(resolve_space(id)?)
}

fn build_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = &args.space {
        cfg.space_id = s.clone();
    }
    if let Some(s) = args.searcher {
        cfg.searcher.kind = match s {
            Searcher::Random => SearcherKind::Random,
            Searcher::Local => SearcherKind::Local,
            Searcher::Evolutionary => SearcherKind::Evolutionary,
            Searcher::Llm => SearcherKind::Llm,
        };
    }
    if let Some(b) = args.backend {
        cfg.eval_backend = match b {
            Backend::Surrogate => EvalBackend::Surrogate,
            Backend::Microflow => EvalBackend::Microflow,
        };
    }
    let agent = &mut cfg.searcher.agent;
    if let Some(b) = args.llm_backend {
        agent.backend = match b {
            LlmBackend::Mock => BackendKind::Mock,
            LlmBackend::Replay => BackendKind::Replay,
            LlmBackend::Http => BackendKind::Http,
        };
    }
    if let Some(e) = &args.endpoint {
        agent.endpoint = Some(e.clone());
    }
    if let Some(m) = &args.model {
        agent.model_id = m.clone();
    }
    if let Some(t) = args.temperature {
        agent.temperature = t;
    }
    if let Some(t) = &args.transcript {
        agent.transcript = Some(t.clone());
    }
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    if let Some(k) = args.batch {
        cfg.searcher.batch_size = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if !args.ablate.is_empty() {
        cfg.feedback = FeedbackFlags {
            feature_info: !args.ablate.contains(&Signal::Fi),
            average_reward: !args.ablate.contains(&Signal::Ri),
            initial_evaluation: !args.ablate.contains(&Signal::Ie),
        };
    }
    if let Some(n) = args.train_steps {
        cfg.budgets.train_steps = n;
    }
    if let Some(n) = args.eval_steps {
        cfg.budgets.eval_steps = n;
    }
    if let Some(s) = args.sigma {
        cfg.surrogate_sigma = s;
    }
    cfg.searcher.budget_schedule |= args.budget_schedule;
    cfg.dump_traces |= args.dump_traces;
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.overwrite = args.overwrite;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    let cfg = build_config(args)?;
    eprintln!(
        "running {} ({} candidates, batch {})",
        cfg.run_id(),
        cfg.budget,
        cfg.batch_size()
    );
    let log = run(&cfg)?;
    let best = log.final_best();
    eprintln!("done: {} candidates, best {best}", log.records.len());
    emit_json(&serde_json::json!({
        "run_id": cfg.run_id(),
        "records": log.records.len(),
        "iterations": log.iterations(),
        "final_best": if best.is_finite() { Some(best) } else { None },
    }))
}

fn cmd_enumerate(args: &EnumerateArgs) -> CmdResult {
    let mut s = space(&args.space)?;
    if let Some(m) = &args.module {
        s = s.module_subspace(m).map_err(Failure::input)?;
    }
    if args.count {
        return emit_json(&serde_json::json!({
            "space_id": s.space_id(),
            "cardinality": s.cardinality().to_string(),
        }));
    }
    let mut out = BufWriter::new(io::stdout().lock());
    for v in s.enumerate(args.limit) {
        let line = serde_json::to_string(&v).map_err(Failure::input)?;
        if writeln!(out, "{line}").is_err() {
            // Closed pipe, e.g. `| head`.
            return Ok(());
        }
    }
    out.flush().ok();
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CmdResult {
    let s = space(&args.space)?;
    let text = read_input(args.input.as_deref())?;
    let v: DesignVector =
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("design vector: {e}")))?;
    let report = s.validate(&v);
    emit_json(&report)?;
    if report.is_valid() {
        Ok(())
    } else {
        Err(Failure::input(format!(
            "invalid design vector: {}",
            report.summary()
        )))
    }
}

fn cmd_parse(args: &ParseArgs) -> CmdResult {
    let s = space(&args.space)?;
    let text = read_input(args.input.as_deref())?;
    let result = parse_design_vectors(&text, &s, &PatternSet::for_space(&s), args.k);
    for d in result.problems() {
        eprintln!("block {}: {} {:?}", d.block, d.path, d.status);
    }
    emit_json(&result)
}

fn cmd_signals(args: &SignalsArgs) -> CmdResult {
    let s = space(&args.space)?;
    let text = read_input(args.input.as_deref())?;
    let traces = read_trace_csv(text.as_bytes()).map_err(Failure::input)?;
    let info =
        collect_feature_info(&traces, &feature_pairs(&s), args.bins).map_err(Failure::input)?;
    emit_json(&info)
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let logs = args
        .runs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = aggregate(&logs)?;
    match &args.out {
        Some(p) => {
            let f =
                fs::File::create(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            write_summary(&rows, BufWriter::new(f)).map_err(Failure::input)?;
            eprintln!("wrote {} rows to {}", rows.len(), p.display());
        }
        None => write_summary(&rows, io::stdout().lock()).map_err(Failure::input)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Enumerate(a) => cmd_enumerate(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Parse(a) => cmd_parse(a),
        Command::Signals(a) => cmd_signals(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
