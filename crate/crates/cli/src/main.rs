//! `smrepair`: fetch benchmarks, run repair experiments, and report results.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};

use summary_repair::dataset::{self, Benchmark, RepairTask};
use summary_repair::llm::{load_roster, ChatProvider, HttpProvider, LlmConfig};
use summary_repair::metrics::{aggregate, case_analysis, render_report, CaseScope, Completeness, ReportFormat};
use summary_repair::pipeline::{Pipeline, PipelineError, RunOptions};
use summary_repair::prompts::PromptRegistry;
use summary_repair::record::{new_run_id, Protocol, RepairMethod, RunManifest, RunOptionsSnapshot};
use summary_repair::sandbox::{Executor, ScriptedExecutor, SubprocessSandbox, VerdictStatus, DEFAULT_TIMEOUT};
use summary_repair::store::RunStore;
use summary_repair::{MockDefault, MockProvider};

/// Exit status for configuration and environment errors.
const EXIT_CONFIG: u8 = 3;
const EXIT_CANCELLED: u8 = 130;

#[derive(Parser)]
#[command(name = "smrepair", version, about = "Summary-mediated program repair benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download a benchmark into the cache and check its record count.
    Fetch(FetchArgs),
    /// Run every canonical solution (and buggy solution) against its tests.
    Validate(ValidateArgs),
    /// Run or resume a repair experiment.
    Run(Box<RunArgs>),
    /// Render fix@1 / pass@1 tables for a run.
    Report(ReportArgs),
    /// List tasks every summary style fixes but direct repair does not.
    Cases(CasesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Hep,
    Mbpp,
}

impl DatasetName {
    fn benchmark(self) -> Benchmark {
        match self {
            DatasetName::Hep => Benchmark::HumanEvalPack,
            DatasetName::Mbpp => Benchmark::Mbpp,
        }
    }
}

#[derive(Args)]
struct DataSource {
    /// Benchmark file (defaults to the cached copy).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cache directory used by `fetch`.
    #[arg(long, default_value = "data")]
    cache_dir: PathBuf,
}

impl DataSource {
    fn path(&self, benchmark: Benchmark) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.cache_dir.join(benchmark.file_name()))
    }

    fn load(&self, benchmark: Benchmark) -> anyhow::Result<Vec<RepairTask>> {
        let path = self.path(benchmark);
        let tasks = benchmark.load(&path).with_context(|| format!("loading {}", path.display()))?;
        log::info!("{} records loaded from {}", tasks.len(), path.display());
        Ok(tasks)
    }
}

#[derive(Args)]
struct FetchArgs {
    #[arg(long, value_enum)]
    dataset: DatasetName,
    #[arg(long, default_value = "data")]
    cache_dir: PathBuf,
    /// Download from this URL instead of the upstream location.
    #[arg(long)]
    url: Option<String>,
}

#[derive(Args)]
struct ExecutorArgs {
    /// Execution shim run as `interpreter shim program`.
    #[arg(long, conflicts_with = "stub_verdicts")]
    shim: Option<PathBuf>,
    #[arg(long, default_value = "python3")]
    interpreter: PathBuf,
    /// Scripted verdicts (JSON lines) instead of executing code.
    #[arg(long)]
    stub_verdicts: Option<PathBuf>,
    /// Maximum concurrent child processes (defaults to --concurrency).
    #[arg(long)]
    max_children: Option<usize>,
}

impl ExecutorArgs {
    fn build(&self, default_children: usize) -> anyhow::Result<Box<dyn Executor>> {
        match (&self.shim, &self.stub_verdicts) {
            (_, Some(path)) => Ok(Box::new(
                ScriptedExecutor::load(path, VerdictStatus::Fail).map_err(|e| config(anyhow!(e)))?,
            )),
            (Some(shim), None) => Ok(Box::new(
                SubprocessSandbox::new(&self.interpreter, shim, self.max_children.unwrap_or(default_children))
                    .map_err(|e| config(anyhow!(e)))?,
            )),
            (None, None) => Err(config(anyhow!("pass --shim <path> or --stub-verdicts <file>"))),
        }
    }

    fn describe(&self) -> String {
        match (&self.shim, &self.stub_verdicts) {
            (_, Some(p)) => format!("stub:{}", p.display()),
            (Some(s), None) => format!("{} {}", self.interpreter.display(), s.display()),
            (None, None) => String::new(),
        }
    }
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum)]
    dataset: DatasetName,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    executor: ExecutorArgs,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout_secs: u64,
    /// Write ids of failing canonical solutions here, for `run --exclude`.
    #[arg(long)]
    write_exclusions: Option<PathBuf>,
    /// Write per-task verdicts as JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    BugRepair,
    SelfRepair,
}

#[derive(Clone, Copy, ValueEnum)]
enum MockDefaultArg {
    Echo,
    Error,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, required_unless_present = "resume")]
    protocol: Option<ProtocolArg>,
    #[command(flatten)]
    source: DataSource,
    /// Model roster (JSON array of model configs).
    #[arg(long, default_value = "config/models.json")]
    roster: PathBuf,
    /// Comma-separated roster names or model ids, or `all`.
    #[arg(long, default_value = "all")]
    models: String,
    /// Comma-separated methods (`direct`, `summary:<style>`) or `all`.
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    timeout_secs: u64,
    /// Answer prompts from a fixtures file instead of calling a provider.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// What the mock answers when no fixture matches.
    #[arg(long, value_enum, default_value = "error")]
    mock_default: MockDefaultArg,
    #[command(flatten)]
    executor: ExecutorArgs,
    /// Continue an existing run; its manifest fixes tasks, models and methods.
    #[arg(long)]
    resume: Option<String>,
    /// Run store directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// File of task ids to leave out (one per line).
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Stop after writing this many records.
    #[arg(long)]
    limit: Option<usize>,
    /// JSON object mapping template names to replacement bodies.
    #[arg(long)]
    template_overrides: Option<PathBuf>,
    /// Allow overriding the fixed summarise/generate/repair templates.
    #[arg(long)]
    allow_template_override: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Run id.
    run: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    /// Report an unfinished run from the records present.
    #[arg(long)]
    partial: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerModel,
    Pooled,
}

#[derive(Args)]
struct CasesArgs {
    /// Run id.
    run: String,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[arg(long, value_enum, default_value = "pooled")]
    scope: ScopeArg,
    /// Write the cases as JSON lines here.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Marks an error as a configuration/environment failure.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_fetch(args: &FetchArgs) -> anyhow::Result<()> {
    let out = dataset::fetch(args.dataset.benchmark(), &args.cache_dir, args.url.as_deref())?;
    let how = if out.cache_hit { "cache hit" } else { "downloaded" };
    println!("{}: {} records ({how})", out.path.display(), out.records);
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let benchmark = args.dataset.benchmark();
    let tasks = args.source.load(benchmark)?;
    let executor = args.executor.build(4)?;
    let timeout = Duration::from_secs(args.timeout_secs);
    let report = dataset::validate_dataset(&tasks, executor.as_ref(), timeout).map_err(|e| config(anyhow!(e)))?;
    println!("{}/{} canonical solutions pass", report.passed(), tasks.len());
    let failed = report.failed_ids();
    for id in &failed {
        println!("  failing: {id}");
    }
    if benchmark == Benchmark::HumanEvalPack {
        let passing = dataset::verify_bugs(&tasks, executor.as_ref(), timeout).map_err(|e| config(anyhow!(e)))?;
        println!("{} buggy solutions pass their tests", passing.len());
        for id in &passing {
            println!("  bug not observable: {id}");
        }
    }
    if let Some(path) = &args.report {
        report.write_jsonl(path)?;
    }
    if let Some(path) = &args.write_exclusions {
        dataset::write_exclusions(path, &failed)?;
        println!("{} exclusions written to {}", failed.len(), path.display());
    }
    Ok(())
}

fn select_models(args: &RunArgs) -> anyhow::Result<Vec<LlmConfig>> {
    let wanted: Vec<&str> = args.models.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let roster = if args.mock.is_some() && !args.roster.exists() {
        Vec::new()
    } else {
        load_roster(&args.roster).map_err(|e| config(anyhow!(e)))?
    };
    if args.mock.is_some() {
        // mock runs accept any model id; roster entries keep their settings
        let ids: Vec<&str> = if wanted == ["all"] { vec!["mock-1"] } else { wanted };
        return Ok(ids
            .into_iter()
            .map(|id| {
                roster
                    .iter()
                    .find(|m| m.model_id == id || m.name == id)
                    .cloned()
                    .unwrap_or_else(|| LlmConfig::mock(id))
            })
            .collect());
    }
    if wanted == ["all"] {
        return Ok(roster);
    }
    wanted
        .iter()
        .map(|id| {
            roster
                .iter()
                .find(|m| m.model_id == *id || m.name == *id)
                .cloned()
                .ok_or_else(|| config(anyhow!("model `{id}` is not in {}", args.roster.display())))
        })
        .collect()
}

fn registry_for(options: &RunOptionsSnapshot) -> anyhow::Result<PromptRegistry> {
    PromptRegistry::default()
        .with_overrides(&options.template_overrides, options.allow_template_override)
        .map_err(|e| config(anyhow!(e)))
}

fn new_manifest(args: &RunArgs, protocol: Protocol, tasks: &[RepairTask]) -> anyhow::Result<RunManifest> {
    let methods = RepairMethod::parse_list(&args.methods).map_err(|e| config(anyhow!(e)))?;
    let models = select_models(args)?;
    if models.is_empty() {
        return Err(config(anyhow!("no models selected")));
    }
    let excluded: BTreeSet<String> = match &args.exclude {
        Some(p) => dataset::load_exclusions(p)?,
        None => BTreeSet::new(),
    };
    let template_overrides = match &args.template_overrides {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PromptRegistry::load_overrides(&text).map_err(|e| config(anyhow!(e)))?
        }
        None => Default::default(),
    };
    let mut options = RunOptionsSnapshot {
        concurrency: args.concurrency,
        timeout_secs: args.timeout_secs,
        template_overrides,
        allow_template_override: args.allow_template_override,
        excluded_task_ids: excluded.iter().cloned().collect(),
        ..Default::default()
    };
    options.extra.insert("dataset".into(), args.source.path(protocol_benchmark(protocol)).display().to_string());
    options.extra.insert("executor".into(), args.executor.describe());
    let provider = match &args.mock {
        Some(p) => format!("mock:{}", p.display()),
        None => "http".into(),
    };
    options.extra.insert("provider".into(), provider);
    Ok(RunManifest {
        run_id: new_run_id(protocol),
        protocol,
        dataset_digest: dataset::dataset_digest(tasks),
        task_ids: tasks.iter().map(|t| t.id.clone()).filter(|id| !excluded.contains(id)).collect(),
        model_ids: models.iter().map(|m| m.model_id.clone()).collect(),
        models,
        methods,
        options,
        created_at: Utc::now(),
    })
}

fn protocol_benchmark(protocol: Protocol) -> Benchmark {
    match protocol {
        Protocol::BugRepair => Benchmark::HumanEvalPack,
        Protocol::SelfRepair => Benchmark::Mbpp,
    }
}

fn cmd_run(args: &RunArgs, cancel: Arc<AtomicBool>) -> anyhow::Result<()> {
    let store = RunStore::open(&args.out)?;
    let (manifest, tasks) = match &args.resume {
        Some(run_id) => {
            let manifest = store.manifest(run_id)?;
            let tasks = args.source.load(protocol_benchmark(manifest.protocol))?;
            (manifest, tasks)
        }
        None => {
            let protocol = match args.protocol.expect("required by clap") {
                ProtocolArg::BugRepair => Protocol::BugRepair,
                ProtocolArg::SelfRepair => Protocol::SelfRepair,
            };
            let tasks = args.source.load(protocol_benchmark(protocol))?;
            (new_manifest(args, protocol, &tasks)?, tasks)
        }
    };
    let registry = registry_for(&manifest.options)?;
    let provider: Box<dyn ChatProvider> = match &args.mock {
        Some(path) => {
            let default = match args.mock_default {
                MockDefaultArg::Echo => MockDefault::Echo,
                MockDefaultArg::Error => MockDefault::Error,
            };
            Box::new(MockProvider::load(path, default).map_err(|e| config(anyhow!(e)))?)
        }
        None => Box::new(HttpProvider::new(&manifest.models).map_err(|e| config(anyhow!(e)))?),
    };
    let executor = args.executor.build(args.concurrency)?;
    let pipeline = Pipeline {
        run_id: manifest.run_id.clone(),
        registry: &registry,
        provider: provider.as_ref(),
        executor: executor.as_ref(),
        timeout: Duration::from_secs(manifest.options.timeout_secs),
    };
    let options = RunOptions { concurrency: args.concurrency, max_new_records: args.limit, cancel: Some(cancel) };
    println!("run {}", manifest.run_id);
    let outcome = pipeline.run_experiment(&store, &manifest, &tasks, &options)?;
    println!("{} pending keys, {} records written", outcome.pending, outcome.new_records);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let store = RunStore::open(&args.out)?;
    let manifest = store.manifest(&args.run)?;
    let records = store.records(&args.run)?;
    let completeness = if args.partial { Completeness::Partial } else { Completeness::Strict };
    let cells = aggregate(&manifest, &records, completeness)?;
    let format = match args.format {
        FormatArg::Markdown => ReportFormat::Markdown,
        FormatArg::Csv => ReportFormat::Csv,
    };
    write_output(args.output.as_deref(), &render_report(&cells, format))
}

fn cmd_cases(args: &CasesArgs) -> anyhow::Result<()> {
    let store = RunStore::open(&args.out)?;
    let manifest = store.manifest(&args.run)?;
    if manifest.protocol != Protocol::BugRepair {
        bail!("case analysis is only defined for bug-repair runs");
    }
    let records = store.records(&args.run)?;
    let tasks = args.source.load(Benchmark::HumanEvalPack)?;
    let scope = match args.scope {
        ScopeArg::PerModel => CaseScope::PerModel,
        ScopeArg::Pooled => CaseScope::Pooled,
    };
    let report = case_analysis(&manifest, &records, &tasks, scope)?;
    print!("{}", report.to_markdown());
    if let Some(path) = &args.output {
        fs::write(path, report.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Cancelled) => EXIT_CANCELLED,
        Some(PipelineError::Configuration(_) | PipelineError::Sandbox(_) | PipelineError::Prompt(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&cancel);
    if let Err(e) = ctrlc::set_handler(move || {
        // in-flight units finish; no new ones start
        flag.store(true, Ordering::SeqCst);
        eprintln!("interrupt received; finishing in-flight work");
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }

    let result = match &cli.command {
        Command::Fetch(a) => cmd_fetch(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Run(a) => cmd_run(a, cancel),
        Command::Report(a) => cmd_report(a),
        Command::Cases(a) => cmd_cases(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
