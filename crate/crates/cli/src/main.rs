//! `planout`: compile, run and simulate scripts, administer namespaces,
//! serve the HTTP API.
//!
//! Exit status: 0 on success, 1 for user errors (bad arguments, scripts
//! with errors, rejected admin actions), 2 for internal errors (store or
//! log I/O, server failures).

mod config;
mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use planout::dsl::{decompile, parse};
use planout::exposure::{ExposureLogger, FileSink, StdoutSink};
use planout::interpreter::{ExperimentContext, Inputs};
use planout::ir;
use planout::namespace::{NamespaceError, DEFAULT_SEGMENTS};
use planout::overrides::parse_override_string;
use planout::simulator::{simulate, sweep_unit, SimulationOptions, UnitSpec};
use planout::store::{Action, AssignError};
use planout::{Diagnostic, NamespaceManager, Overrides, Script, ScriptIR, Value};
use serde_json::json;

use config::Config;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
    /// Already reported on stderr.
    Reported,
}

impl From<NamespaceError> for CliError {
    fn from(e: NamespaceError) -> Self {
        match e {
            NamespaceError::Io(_) | NamespaceError::Corrupt { .. } => CliError::Internal(e.to_string()),
            NamespaceError::InvalidScript(diags) => {
                for d in &diags {
                    eprintln!("{d}");
                }
                CliError::Reported
            }
            other => CliError::User(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Parser)]
#[command(name = "planout", version, about = "Randomized experiment scripts: compile, run, simulate, manage")]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,
    /// Config file (default: ./planout.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate a script to canonical IR text.
    Compile {
        file: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Translate IR text back to script source.
    Decompile { file: PathBuf },
    /// Evaluate a script (source or IR) for one set of inputs.
    Run {
        file: PathBuf,
        #[command(flatten)]
        inputs: InputArgs,
        /// Namespace name used in salts.
        #[arg(long, default_value = "default")]
        ns: String,
        /// Experiment name used in salts (default: the file stem).
        #[arg(long)]
        exp: Option<String>,
    },
    /// Evaluate a script over many units and tabulate the results.
    Simulate {
        file: PathBuf,
        /// Number of units.
        #[arg(long)]
        n: u64,
        /// Input to sweep over 0..n (inferred when the script randomizes
        /// over a single input).
        #[arg(long)]
        unit: Option<String>,
        /// Sweep a grid instead, `name=size`, repeatable; the last varies
        /// fastest and the sizes must multiply to n.
        #[arg(long, value_name = "NAME=SIZE")]
        grid: Vec<String>,
        /// Use pseudo-random ids instead of 0..n.
        #[arg(long)]
        hashed: bool,
        /// Cross-tabulate two parameters, `a,b`, repeatable.
        #[arg(long, value_name = "A,B")]
        pairs: Vec<String>,
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, default_value = "simulation")]
        ns: String,
        #[arg(long, default_value = "draft")]
        exp: String,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Namespace administration.
    Ns {
        /// Store file (default: `store` from the config).
        #[arg(long, global = true)]
        store: Option<PathBuf>,
        /// Fail unless the store is at this version.
        #[arg(long, global = true)]
        expected_version: Option<u64>,
        #[command(subcommand)]
        command: NsCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Store file; without one the store lives in memory.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Exposure log file, or `stdout`.
        #[arg(long)]
        exposure_log: Option<String>,
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Subcommand)]
enum NsCommand {
    /// Create a namespace.
    Create {
        name: String,
        /// Primary unit input name.
        #[arg(long)]
        unit: String,
        #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
        segments: u32,
        /// Launch value, `param=value`, repeatable.
        #[arg(long = "default", value_name = "PARAM=VALUE")]
        defaults: Vec<String>,
    },
    /// Launch a script on free segments.
    Alloc {
        namespace: String,
        experiment: String,
        file: PathBuf,
        #[arg(long)]
        segments: u32,
    },
    /// Return an experiment's segments to the pool.
    Dealloc { namespace: String, experiment: String },
    /// Show launch values, or set (`param=value`) and unset them.
    Defaults {
        namespace: String,
        #[arg(value_name = "PARAM=VALUE")]
        set: Vec<String>,
        #[arg(long, value_name = "PARAM")]
        unset: Vec<String>,
    },
    /// Show which experiment owns each segment.
    Map { namespace: String },
    /// List namespaces.
    List,
    /// Assign one unit through a namespace.
    Assign {
        namespace: String,
        /// Value of the primary unit.
        unit: String,
        #[command(flatten)]
        inputs: InputArgs,
    },
}

#[derive(Args, Default)]
struct InputArgs {
    /// Input, `name=value`; values are typed like override values.
    #[arg(long = "input", value_name = "NAME=VALUE")]
    input: Vec<String>,
    /// Input with a JSON value, `name=JSON`.
    #[arg(long = "input-json", value_name = "NAME=JSON")]
    input_json: Vec<String>,
    /// Frozen parameters, `name=value` or `a:1,b:2`, repeatable.
    #[arg(long = "override", value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl InputArgs {
    fn inputs(&self) -> CliResult<Inputs> {
        let mut out = Inputs::new();
        for raw in &self.input {
            let (k, v) = split_pair(raw, '=')?;
            out.insert(k, Value::parse_typed(&v));
        }
        for raw in &self.input_json {
            let (k, v) = split_pair(raw, '=')?;
            let value: Value = serde_json::from_str(&v)
                .map_err(|e| CliError::User(format!("--input-json {k}: {e}")))?;
            out.insert(k, value);
        }
        Ok(out)
    }

    fn overrides(&self) -> CliResult<Overrides> {
        let mut out = Overrides::new();
        for raw in &self.overrides {
            // `name=value` is accepted as a shorthand for `name:value`.
            let text = match raw.split_once('=') {
                Some((k, v)) if !k.contains(':') && !k.contains(',') => format!("{k}:{v}"),
                _ => raw.clone(),
            };
            let parsed = parse_override_string(&text).map_err(|e| CliError::User(e.to_string()))?;
            out.extend(parsed);
        }
        Ok(out)
    }
}

fn split_pair(raw: &str, sep: char) -> CliResult<(String, String)> {
    match raw.split_once(sep) {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(CliError::User(format!("expected NAME{sep}VALUE, got {raw:?}"))),
    }
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

fn report(path: &Path, src: &str, d: &Diagnostic) {
    let sev = if d.is_error() { "error" } else { "warning" };
    match d.offset {
        Some(off) => {
            let (l, c) = line_col(src, off);
            eprintln!("{}:{l}:{c}: {sev}: {}", path.display(), d.message);
        }
        None => eprintln!("{}: {sev}: {}", path.display(), d.message),
    }
}

/// Loads source text or IR text (anything starting with `{`) and
/// validates it. Warnings go to stderr; errors fail.
fn load_script(path: &Path) -> CliResult<ScriptIR> {
    let src = read(path)?;
    let ir = if src.trim_start().starts_with('{') {
        ir::deserialize(&src).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
    } else {
        parse(&src).map_err(|diags| {
            for d in &diags {
                report(path, &src, d);
            }
            CliError::Reported
        })?
    };
    let diags = ir::validate(&ir);
    for d in &diags {
        report(path, &src, d);
    }
    if diags.iter().any(Diagnostic::is_error) {
        return Err(CliError::Reported);
    }
    Ok(ir)
}

fn context(ns: &str, exp: &str) -> CliResult<ExperimentContext> {
    ExperimentContext::new(ns, exp).map_err(|e| CliError::User(format!("--ns/--exp: {e}")))
}

fn run_script(file: &Path, args: &InputArgs, ns: &str, exp: Option<&str>, format: Format) -> CliResult {
    let ir = load_script(file)?;
    let stem = file
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .unwrap_or("script");
    let ctx = context(ns, exp.unwrap_or(stem))?;
    let ev = Script::new(ir)
        .evaluate(&args.inputs()?, &args.overrides()?, &ctx)
        .map_err(|e| CliError::User(e.to_string()))?;
    match format {
        Format::Json => println!("{}", serde_json::to_string(&ev).expect("evaluations serialize")),
        Format::Table => print!("{}", render::evaluation(&ev)),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_script(
    file: &Path,
    n: u64,
    unit: Option<String>,
    grid: &[String],
    hashed: bool,
    pairs: &[String],
    args: &InputArgs,
    ctx: ExperimentContext,
    jobs: Option<usize>,
    format: Format,
) -> CliResult {
    let ir = load_script(file)?;
    let units = if !grid.is_empty() {
        if unit.is_some() {
            return Err(CliError::User("give --unit or --grid, not both".into()));
        }
        let mut dims = Vec::new();
        for g in grid {
            let (name, size) = split_pair(g, '=')?;
            let size: u64 = size
                .parse()
                .map_err(|_| CliError::User(format!("--grid {g}: size must be a positive integer")))?;
            dims.push((name, size));
        }
        UnitSpec::Grid(dims)
    } else {
        let name = unit.or_else(|| sweep_unit(&ir)).ok_or_else(|| {
            CliError::User("cannot infer the unit input; pass --unit or --grid".into())
        })?;
        if hashed {
            UnitSpec::Hashed(name)
        } else {
            UnitSpec::Sequential(name)
        }
    };
    if let Some(size) = units.grid_size() {
        if size != n {
            return Err(CliError::User(format!("grid has {size} cells but --n is {n}")));
        }
    }
    let mut pair_list = Vec::new();
    for p in pairs {
        let (a, b) = split_pair(p, ',')?;
        pair_list.push((a, b.trim().to_string()));
    }
    let constant = args.inputs()?;
    let extra = move |_: u64| constant.clone();
    let mut opts = SimulationOptions::new(n, units);
    opts.extra_inputs = Some(&extra);
    opts.overrides = args.overrides()?;
    opts.pairs = pair_list;
    opts.context = ctx;
    opts.jobs = jobs;
    let report = simulate(&Script::new(ir), &opts).map_err(|e| match e {
        planout::simulator::SimulationError::Pool(m) => CliError::Internal(m),
        other => CliError::User(other.to_string()),
    })?;
    match format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn open_store(flag: Option<PathBuf>, config: &Config) -> CliResult<NamespaceManager> {
    let path = flag.or_else(|| config.store.clone()).ok_or_else(|| {
        CliError::User("no store: pass --store or set `store` in planout.toml".into())
    })?;
    Ok(NamespaceManager::open(path)?)
}

fn print_version(version: u64, format: Format) {
    match format {
        Format::Json => println!("{}", json!({ "version": version })),
        Format::Table => println!("version {version}"),
    }
}

fn typed_pairs(raw: &[String]) -> CliResult<BTreeMap<String, Value>> {
    raw.iter()
        .map(|p| split_pair(p, '=').map(|(k, v)| (k, Value::parse_typed(&v))))
        .collect()
}

fn namespace_command(
    m: &NamespaceManager,
    expected: Option<u64>,
    command: NsCommand,
    format: Format,
) -> CliResult {
    match command {
        NsCommand::Create {
            name,
            unit,
            segments,
            defaults,
        } => {
            let v = m.create_namespace(expected, &name, &unit, segments, typed_pairs(&defaults)?)?;
            print_version(v, format);
        }
        NsCommand::Alloc {
            namespace,
            experiment,
            file,
            segments,
        } => {
            let ir = load_script(&file)?;
            let v = m.allocate(expected, &namespace, &experiment, &ir, segments)?;
            print_version(v, format);
        }
        NsCommand::Dealloc {
            namespace,
            experiment,
        } => {
            let (v, prior) = m.deallocate(expected, &namespace, &experiment)?;
            match format {
                Format::Json => println!("{}", json!({ "version": v, "prior_status": prior })),
                Format::Table => println!("version {v} (was {})", render::status(prior)),
            }
        }
        NsCommand::Defaults {
            namespace,
            set,
            unset,
        } => {
            let mut expected = expected;
            let mut changed = false;
            for (k, v) in typed_pairs(&set)? {
                let nv = m.set_launch_value(expected, &namespace, &k, v)?;
                expected = expected.map(|_| nv);
                changed = true;
            }
            for k in unset {
                let action = Action::UnsetLaunchValue {
                    namespace: namespace.clone(),
                    parameter: k,
                };
                let (_, after) = m.commit(expected, action)?;
                expected = expected.map(|_| after.version);
                changed = true;
            }
            let state = m.snapshot();
            let ns = state.namespace(&namespace)?;
            match format {
                Format::Json => println!(
                    "{}",
                    json!({ "version": state.version, "launch_defaults": ns.launch_defaults() })
                ),
                Format::Table => {
                    if changed {
                        println!("version {}", state.version);
                    }
                    print!("{}", render::defaults(ns.launch_defaults()));
                }
            }
        }
        NsCommand::Map { namespace } => {
            let state = m.snapshot();
            let ns = state.namespace(&namespace)?;
            match format {
                Format::Json => {
                    let segments: Vec<Option<&str>> = ns.segment_map().iter().map(|s| s.as_deref()).collect();
                    println!(
                        "{}",
                        json!({
                            "version": state.version,
                            "num_segments": ns.num_segments(),
                            "free_segments": ns.free_segments(),
                            "segments": segments,
                        })
                    );
                }
                Format::Table => print!("{}", render::segment_map(ns)),
            }
        }
        NsCommand::List => {
            let state = m.snapshot();
            match format {
                Format::Json => {
                    let list: Vec<_> = state
                        .namespaces
                        .values()
                        .map(|ns| {
                            json!({
                                "name": ns.name(),
                                "primary_unit": ns.primary_unit(),
                                "num_segments": ns.num_segments(),
                                "free_segments": ns.free_segments(),
                                "experiments": ns.experiments().map(|e| json!({
                                    "name": e.name,
                                    "status": e.status,
                                    "segments": e.segments.len(),
                                })).collect::<Vec<_>>(),
                            })
                        })
                        .collect();
                    println!("{}", json!({ "version": state.version, "namespaces": list }));
                }
                Format::Table => print!("{}", render::namespaces(&state)),
            }
            for (param, namespaces) in state.cross_namespace_parameters() {
                eprintln!(
                    "warning: parameter `{param}` is set in several namespaces: {}",
                    namespaces.join(", ")
                );
            }
        }
        NsCommand::Assign {
            namespace,
            unit,
            inputs,
        } => {
            let a = m
                .assign(&namespace, &Value::parse_typed(&unit), &inputs.inputs()?, &inputs.overrides()?)
                .map_err(|e| match e {
                    AssignError::UnknownNamespace(_) => CliError::User(e.to_string()),
                    AssignError::Eval(inner) => CliError::User(inner.to_string()),
                })?;
            match format {
                Format::Json => println!(
                    "{}",
                    json!({
                        "namespace": a.namespace,
                        "segment": a.segment,
                        "experiment": a.experiment,
                        "in_experiment": a.in_experiment(),
                        "params": a.params(),
                    })
                ),
                Format::Table => print!("{}", render::namespace_assignment(&a)),
            }
        }
    }
    Ok(())
}

fn serve(
    config: &Config,
    port: Option<u16>,
    host: String,
    store: Option<PathBuf>,
    exposure_log: Option<String>,
    cors_origin: Option<String>,
) -> CliResult {
    let mut manager = match store.or_else(|| config.store.clone()) {
        Some(path) => NamespaceManager::open(path)?,
        None => {
            eprintln!("warning: no store configured; namespaces live in memory only");
            NamespaceManager::in_memory()
        }
    };
    let _logger = match exposure_log.or_else(|| config.exposure_log.clone()) {
        None => None,
        Some(target) => {
            let logger = if target == "stdout" {
                ExposureLogger::new(Box::new(StdoutSink))
            } else {
                let sink = FileSink::open(
                    &target,
                    config.exposure_log_max_bytes.unwrap_or(100 << 20),
                    config.exposure_log_keep.unwrap_or(5),
                )
                .map_err(|e| CliError::Internal(format!("{target}: {e}")))?;
                ExposureLogger::new(Box::new(sink))
            };
            manager = manager.with_exposure_hook(logger.hook());
            Some(logger)
        }
    };
    let mut state = planout_server::AppState::new(Arc::new(manager));
    if let Some(origin) = cors_origin.or_else(|| config.cors_origin.clone()) {
        state = state.with_cors_origin(origin);
    }
    let addr = format!("{host}:{}", port.or(config.port).unwrap_or(8080));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::User(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        eprintln!("listening on http://{local}");
        planout_server::serve(listener, state)
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}

fn dispatch(cli: Cli) -> CliResult {
    let config = Config::load(cli.config.as_deref())?;
    let format = cli.format;
    match cli.command {
        Command::Compile { file, output } => {
            let ir = load_script(&file)?;
            let text = ir::serialize(&ir);
            match output {
                Some(path) => std::fs::write(&path, format!("{text}\n"))
                    .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?,
                None => println!("{text}"),
            }
        }
        Command::Decompile { file } => {
            let src = read(&file)?;
            let ir = ir::deserialize(&src).map_err(|e| CliError::User(format!("{}: {e}", file.display())))?;
            print!("{}", decompile(&ir));
        }
        Command::Run { file, inputs, ns, exp } => {
            run_script(&file, &inputs, &ns, exp.as_deref(), format)?;
        }
        Command::Simulate {
            file,
            n,
            unit,
            grid,
            hashed,
            pairs,
            inputs,
            ns,
            exp,
            jobs,
        } => {
            let ctx = context(&ns, &exp)?;
            simulate_script(&file, n, unit, &grid, hashed, &pairs, &inputs, ctx, jobs, format)?;
        }
        Command::Ns {
            store,
            expected_version,
            command,
        } => {
            let m = open_store(store, &config)?;
            namespace_command(&m, expected_version, command, format)?;
        }
        Command::Serve {
            port,
            host,
            store,
            exposure_log,
            cors_origin,
        } => serve(&config, port, host, store, exposure_log, cors_origin)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Reported) => ExitCode::from(1),
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
