//! `neon`: drives the pipeline, the evaluation service and the mock model
//! server from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use neon_core::evalsvc::{
    self, CreateSession, EvalError, EvalStore, InstantiationSet, SessionInput,
};
use neon_core::explain::ExplanationRecord;
use neon_core::gateway::mock::MockBackend;
use neon_core::gateway::server;
use neon_core::jsonl::read_jsonl;
use neon_core::pipeline::{self, report, PipelineError, RunConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(
    name = "neon",
    version,
    about = "Explain false statements through correct instantiations"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the data, sample the exemplar pool.
    Ingest(StageArgs),
    /// Run phase I (instantiation generation).
    Instantiate(StageArgs),
    /// Assemble hints and generate explanations (phase II).
    Explain(StageArgs),
    /// Score explanations and write the run report.
    Score(StageArgs),
    /// Every stage, optionally as a sweep over one config key.
    Run(RunArgs),
    /// Comparison table over finished runs, in the order given.
    Report(ReportArgs),
    /// Serve the human evaluation API.
    EvalServe(EvalServeArgs),
    /// Drive an evaluation store directly, without the HTTP server.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the deterministic mock model over the wire protocol.
    MockServe(MockServeArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Config override, `key.path=value`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Recompute stages whose outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Sweep one key, e.g. `ensemble_size=1..10` or `template=default_A,instruction`.
    /// Sub-runs go to `<out>/<key>-<value>`.
    #[arg(long, value_name = "KEY=VALUES", conflicts_with = "repeat")]
    sweep: Option<String>,
    /// Repeat the run with seeds seed, seed+1, ...
    #[arg(long, value_name = "N")]
    repeat: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalServeArgs {
    /// Directory holding sessions and event logs.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8090")]
    addr: SocketAddr,
}

#[derive(Args)]
struct MockServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    HeadToHead,
    InstantiationQuality,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Create a session; prints its id.
    Create {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Records of system A (head-to-head).
        #[arg(long, required_if_eq("protocol", "head-to-head"))]
        a: Option<PathBuf>,
        /// Records of system B (head-to-head).
        #[arg(long, required_if_eq("protocol", "head-to-head"))]
        b: Option<PathBuf>,
        /// JSONL of instantiation sets (instantiation quality).
        #[arg(long, required_if_eq("protocol", "instantiation-quality"))]
        sets: Option<PathBuf>,
        #[arg(long, default_value_t = evalsvc::DEFAULT_ITEMS)]
        items: usize,
        /// Comma-separated annotator ids.
        #[arg(long, value_delimiter = ',')]
        annotators: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Next item for an annotator, as JSON.
    Next {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        annotator: String,
    },
    /// Submit responses (a JSON object) for one item.
    Submit {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        annotator: String,
        #[arg(long)]
        item: String,
        #[arg(long)]
        responses: String,
    },
    /// Vote shares and agreement.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session: String,
        /// Allow a report before every assignment is answered.
        #[arg(long)]
        partial: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Validation,
    Runtime,
}

struct Failure {
    kind: Kind,
    err: anyhow::Error,
}

impl Failure {
    fn validation(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind: Kind::Validation,
            err: err.into(),
        }
    }

    fn runtime(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind: Kind::Runtime,
            err: err.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            Kind::Validation => 1,
            Kind::Runtime => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.err)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::validation(e)
        } else {
            Failure::runtime(e)
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Corrupt { .. } => Failure::runtime(e),
            _ => Failure::validation(e),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let cfg = RunConfig::load(&args.config, &args.set).map_err(Failure::validation)?;
    cfg.validate().map_err(Failure::validation)?;
    Ok(cfg)
}

fn run_until(args: &StageArgs, until: Stage) -> Result<()> {
    let cfg = load_config(args)?;
    let gateway = cfg.gateway.build().map_err(Failure::validation)?;
    let opts = RunOptions {
        force: args.force,
        reuse_from: None,
        until: Some(until),
    };
    let summary = pipeline::run(&cfg, &args.out, &gateway, &opts)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &pipeline::RunSummary) {
    let names = |v: &[Stage]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
    eprintln!(
        "{}: ran [{}] skipped [{}]",
        s.run_dir.display(),
        names(&s.executed),
        names(&s.skipped)
    );
    if !s.reports.is_empty() {
        let rows = report::rows_for_run(&s.run_dir.display().to_string(), &s.reports);
        print!("{}", report::render_text(&rows));
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let (key, values) = match (&args.sweep, args.repeat) {
        (Some(spec), _) => {
            let (k, v) = spec.split_once('=').ok_or_else(|| {
                Failure::validation(anyhow::anyhow!("--sweep expects KEY=VALUES"))
            })?;
            let values = pipeline::expand_values(v);
            if values.is_empty() {
                return Err(Failure::validation(anyhow::anyhow!(
                    "--sweep {k}: no values"
                )));
            }
            (k.trim().to_string(), values)
        }
        (None, Some(n)) => {
            let base = load_config(&args.stage)?.seed;
            (
                "seed".to_string(),
                (0..n.max(1)).map(|i| (base + i).to_string()).collect(),
            )
        }
        (None, None) => return run_until(&args.stage, Stage::Metrics),
    };
    let st = &args.stage;
    let text = std::fs::read_to_string(&st.config)
        .with_context(|| format!("reading {}", st.config.display()))
        .map_err(Failure::validation)?;
    // validate every point up front so a bad value fails before any work
    let mut gateway = None;
    for v in &values {
        let mut o = st.set.clone();
        o.push(format!("{key}={v}"));
        let cfg = RunConfig::load(&st.config, &o).map_err(Failure::validation)?;
        cfg.validate().map_err(Failure::validation)?;
        gateway.get_or_insert(cfg.gateway.build().map_err(Failure::validation)?);
    }
    let base_dir = st.config.parent().unwrap_or(Path::new("."));
    let gateway = gateway.expect("at least one value");
    let runs = pipeline::sweep(
        &text, base_dir, &st.set, &key, &values, &st.out, &gateway, st.force,
    )?;
    for s in &runs {
        print_summary(s);
    }
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let rows = report::collect_rows(&args.runs)?;
    print!("{}", report::render_text(&rows));
    if let Some(p) = &args.csv {
        report::write_csv(p, &rows)?;
    }
    Ok(())
}

fn open_store(path: &Path) -> Result<EvalStore> {
    Ok(EvalStore::open(path)?)
}

fn read_records(p: &Path) -> Result<Vec<ExplanationRecord>> {
    read_jsonl(p)
        .with_context(|| format!("reading {}", p.display()))
        .map_err(Failure::validation)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn eval_cmd(cmd: &EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Create {
            store,
            protocol,
            a,
            b,
            sets,
            items,
            annotators,
            seed,
        } => {
            let input = match protocol {
                ProtocolArg::HeadToHead => SessionInput::HeadToHead {
                    records_a: read_records(a.as_deref().expect("required by clap"))?,
                    records_b: read_records(b.as_deref().expect("required by clap"))?,
                },
                ProtocolArg::InstantiationQuality => {
                    let p = sets.as_deref().expect("required by clap");
                    let sets: Vec<InstantiationSet> = read_jsonl(p)
                        .with_context(|| format!("reading {}", p.display()))
                        .map_err(Failure::validation)?;
                    SessionInput::InstantiationQuality { sets }
                }
            };
            let req = CreateSession {
                input,
                n_items: *items,
                annotators: annotators
                    .clone()
                    .unwrap_or_else(evalsvc::default_annotators),
                seed: *seed,
            };
            let summary = open_store(store)?.create(&req)?;
            print_json(&summary);
        }
        EvalCommand::Next {
            store,
            session,
            annotator,
        } => print_json(&open_store(store)?.next(session, annotator)?),
        EvalCommand::Submit {
            store,
            session,
            annotator,
            item,
            responses,
        } => {
            let v: Value = serde_json::from_str(responses)
                .context("--responses is not JSON")
                .map_err(Failure::validation)?;
            print_json(&open_store(store)?.submit(session, annotator, item, &v)?);
        }
        EvalCommand::Report {
            store,
            session,
            partial,
            json,
        } => {
            let r = open_store(store)?.report(session, *partial)?;
            if *json {
                print_json(&r);
            } else {
                print!("{}", r.to_text());
            }
        }
    }
    Ok(())
}

fn eval_serve(args: &EvalServeArgs) -> Result<()> {
    let store = Arc::new(open_store(&args.store)?);
    let handle =
        server::spawn(evalsvc::http::router(store), args.addr).map_err(Failure::runtime)?;
    eprintln!("evaluation API on {}", handle.url());
    handle.wait().map_err(Failure::runtime)
}

fn mock_serve(args: &MockServeArgs) -> Result<()> {
    let handle = server::spawn_model(Arc::new(MockBackend::new(args.seed)), args.addr)
        .map_err(Failure::runtime)?;
    eprintln!("mock model on {}", handle.url());
    handle.wait().map_err(Failure::runtime)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => run_until(a, Stage::Ingest),
        Command::Instantiate(a) => run_until(a, Stage::Phase1),
        Command::Explain(a) => run_until(a, Stage::Phase2),
        Command::Score(a) => run_until(a, Stage::Metrics),
        Command::Run(a) => run(a),
        Command::Report(a) => report_cmd(a),
        Command::EvalServe(a) => eval_serve(a),
        Command::Eval(c) => eval_cmd(c),
        Command::MockServe(a) => mock_serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
