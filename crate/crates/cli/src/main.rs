//! `counsel`: serve the session API, validate inputs, debug the matcher and
//! run scenario suites. Exit codes: 0 ok, 1 validation or eval failure,
//! 2 usage or configuration error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use counsel_core::agents::AgentSuite;
use counsel_core::clock::SystemClock;
use counsel_core::graph::{ecp_registry, Runtime, RuntimeConfig};
use counsel_core::harness::{self, HarnessEnv, Verdict};
use counsel_core::kb::{load_kb, KnowledgeBase, Table};
use counsel_core::lm::{Backend, BackendConfig, BackendKind, HttpBackend, ScriptedBackend};
use counsel_core::matching::find_most_similar;
use counsel_core::session::{JsonlStore, MemoryStore, SessionManager, SessionStore};
use counsel_core::spec::{parse_spec, ConversationSpec};

#[derive(Parser)]
#[command(name = "counsel", version, about = "Pharmacy counseling runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP session API.
    Serve(ServeArgs),
    /// Check a conversation spec, knowledge base, agent profiles and script.
    Validate(Inputs),
    /// Look a term up in one knowledge base table.
    Match(MatchArgs),
    /// Run every scenario in a directory against the scripted backend.
    Eval(EvalArgs),
}

/// Input files; anything omitted falls back to the built-in fixtures.
#[derive(Args, Clone, Default)]
struct Inputs {
    /// Conversation spec (YAML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Knowledge base (YAML).
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Directory of agent profiles with a graph.yaml.
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Scripted backend rules (YAML).
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML file with a [serve] section; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Address to listen on [default: 127.0.0.1:8080].
    #[arg(long)]
    listen: Option<String>,
    #[command(flatten)]
    inputs: Inputs,
    /// `scripted` (offline) or `remote`; remote reads COUNSEL_BACKEND_* variables.
    #[arg(long)]
    backend: Option<String>,
    /// Directory for session transcripts; sessions are kept in memory without it.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Bearer token required on /v1 routes.
    #[arg(long, env = "COUNSEL_API_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Minutes of inactivity before a session is abandoned.
    #[arg(long)]
    idle_minutes: Option<i64>,
}

#[derive(Args)]
struct MatchArgs {
    term: String,
    /// `allergies` or `medications`.
    #[arg(long, default_value = "allergies")]
    table: String,
    #[arg(long, default_value_t = counsel_core::matching::STRICT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of scenario files.
    dir: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

/// Why a command failed, mapped onto the exit code.
enum Failure {
    Invalid(String),
    Config(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Invalid(m) => {
                eprintln!("error: {m}");
                ExitCode::from(1)
            }
            Failure::Config(m) => {
                eprintln!("error: {m}");
                ExitCode::from(2)
            }
        }
    }
}

fn read(path: &Path, what: &str) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {what} {}: {e}", path.display())))
}

/// Loaded inputs. Read errors are configuration errors; content errors are
/// reported through `invalid` so `validate` can exit 1 while `serve` exits 2.
struct Loaded {
    spec: ConversationSpec,
    kb: KnowledgeBase,
    suite: AgentSuite,
    script: ScriptedBackend,
}

fn load(inputs: &Inputs, invalid: fn(String) -> Failure) -> Result<Loaded, Failure> {
    let spec = match &inputs.spec {
        Some(p) => parse_spec(&read(p, "spec")?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => parse_spec(harness::ECP_SPEC).expect("builtin spec"),
    };
    let kb = match &inputs.kb {
        Some(p) => load_kb(&read(p, "knowledge base")?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => load_kb(harness::ECP_KB).expect("builtin kb"),
    };
    let suite = match &inputs.agents {
        Some(dir) if !dir.is_dir() => return Err(Failure::Config(format!("no agents directory {}", dir.display()))),
        Some(dir) => AgentSuite::load_dir(dir).map_err(|e| invalid(e.to_string()))?,
        None => AgentSuite::builtin(),
    };
    let script = match &inputs.script {
        Some(p) => {
            ScriptedBackend::from_yaml(&read(p, "script")?).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ScriptedBackend::from_yaml(harness::BASE_SCRIPT).expect("builtin script"),
    };
    Ok(Loaded {
        spec,
        kb,
        suite,
        script,
    })
}

fn validate(inputs: &Inputs) -> Result<(), Failure> {
    let l = load(inputs, Failure::Invalid)?;
    Runtime::new(
        Arc::new(l.kb.clone()),
        l.suite,
        ecp_registry(),
        Arc::new(l.script),
        Arc::new(SystemClock),
        RuntimeConfig::default(),
    )
    .map_err(|e| Failure::Invalid(e.to_string()))?;
    println!(
        "spec {} v{}: {} steps",
        l.spec.medication_id,
        l.spec.version,
        l.spec.steps.len()
    );
    println!(
        "kb {}: {} products, {} allergy terms, {} medication and disease terms, {} aliases",
        l.kb.id,
        l.kb.products.len(),
        l.kb.terms(Table::Allergies).len(),
        l.kb.terms(Table::MedicationsAndDiseases).len(),
        l.kb.aliases().len()
    );
    println!("agents and tools: ok");
    Ok(())
}

fn run_match(args: &MatchArgs) -> Result<(), Failure> {
    let table: Table = args.table.parse().map_err(Failure::Config)?;
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Failure::Config(format!(
            "threshold {} is outside [0, 1]",
            args.threshold
        )));
    }
    let kb = match &args.kb {
        Some(p) => load_kb(&read(p, "knowledge base")?).map_err(|e| Failure::Config(e.to_string()))?,
        None => load_kb(harness::ECP_KB).expect("builtin kb"),
    };
    let r = find_most_similar(&kb, table, &args.term, args.threshold);
    if r.matches.is_empty() {
        println!("no match");
    }
    for m in &r.matches {
        match &m.alias {
            Some(a) => println!("{} {:.4} (via alias {a})", m.term, m.score),
            None => println!("{} {:.4}", m.term, m.score),
        }
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let l = load(&args.inputs, Failure::Config)?;
    let mut env = HarnessEnv::builtin();
    env.spec = Arc::new(l.spec);
    env.kb = Arc::new(l.kb);
    env.suite = l.suite;
    env.script = l.script;
    let scenarios = harness::load_scenarios(&args.dir).map_err(|e| match e {
        harness::HarnessError::Io { .. } => Failure::Config(e.to_string()),
        e => Failure::Invalid(e.to_string()),
    })?;
    let report = harness::run_suite(&env, &scenarios).map_err(|e| Failure::Invalid(e.to_string()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!(
            "{:<36} {:<9} {:<10} {:>5}  safe",
            "scenario", "verdict", "status", "turns"
        );
        for r in &report.results {
            let verdict = serde_json::to_value(r.verdict).expect("verdict");
            let status = serde_json::to_value(r.status).expect("status");
            let safe = r.safe.as_ref().map(|s| s.join(",")).unwrap_or_else(|| "-".into());
            println!(
                "{:<36} {:<9} {:<10} {:>5}  {safe}",
                r.scenario_id,
                verdict.as_str().unwrap_or_default(),
                status.as_str().unwrap_or_default(),
                r.turns
            );
            for f in &r.failures {
                println!("    {f}");
            }
        }
        println!(
            "{} scenarios: {} passed, {} failed, {} escalated",
            report.results.len(),
            report.passed,
            report.failed,
            report.escalated
        );
    }
    if report.results.iter().all(|r| r.verdict == Verdict::Pass) {
        Ok(())
    } else {
        Err(Failure::Invalid("scenario suite failed".into()))
    }
}

struct ServeSettings {
    listen: String,
    inputs: Inputs,
    backend: BackendConfig,
    store: Option<PathBuf>,
    token: Option<String>,
    idle_minutes: i64,
}

fn serve_settings(args: ServeArgs) -> Result<ServeSettings, Failure> {
    let file = match &args.config {
        Some(p) => config::load(p).map_err(Failure::Config)?.serve,
        None => config::ServeFile::default(),
    };
    let mut backend = BackendConfig::from_env().map_err(Failure::Config)?;
    if let Some(kind) = args.backend.or(file.backend) {
        backend.kind = kind.parse::<BackendKind>().map_err(Failure::Config)?;
    }
    if backend.kind == BackendKind::Remote && backend.endpoint.is_none() {
        return Err(Failure::Config("remote backend needs COUNSEL_BACKEND_ENDPOINT".into()));
    }
    let inputs = Inputs {
        spec: args.inputs.spec.or(file.spec),
        kb: args.inputs.kb.or(file.kb),
        agents: args.inputs.agents.or(file.agents),
        script: args.inputs.script.or(file.script).or(backend.script.clone()),
    };
    let idle_minutes = args
        .idle_minutes
        .or(file.idle_minutes)
        .unwrap_or(counsel_core::session::DEFAULT_IDLE_MINUTES);
    if idle_minutes <= 0 {
        return Err(Failure::Config("idle_minutes must be positive".into()));
    }
    Ok(ServeSettings {
        listen: args.listen.or(file.listen).unwrap_or_else(|| "127.0.0.1:8080".into()),
        inputs,
        backend,
        store: args.store.or(file.store),
        token: args.token.or(file.token).filter(|t| !t.is_empty()),
        idle_minutes,
    })
}

fn build_manager(s: &ServeSettings) -> Result<SessionManager, Failure> {
    let l = load(&s.inputs, Failure::Config)?;
    let backend: Arc<dyn Backend> = match s.backend.kind {
        BackendKind::Scripted => Arc::new(l.script),
        BackendKind::Remote => {
            Arc::new(HttpBackend::from_config(&s.backend).map_err(|e| Failure::Config(e.to_string()))?)
        }
    };
    let runtime = Runtime::new(
        Arc::new(l.kb),
        l.suite,
        ecp_registry(),
        backend,
        Arc::new(SystemClock),
        RuntimeConfig::default(),
    )
    .map_err(|e| Failure::Config(e.to_string()))?;
    let store: Arc<dyn SessionStore> = match &s.store {
        Some(dir) => Arc::new(JsonlStore::open(dir).map_err(|e| Failure::Config(e.to_string()))?),
        None => {
            eprintln!("warning: no --store given, sessions are kept in memory only");
            Arc::new(MemoryStore::default())
        }
    };
    SessionManager::open(Arc::new(runtime), Arc::new(l.spec), store)
        .map(|m| m.with_idle_timeout(chrono::Duration::minutes(s.idle_minutes)))
        .map_err(|e| Failure::Config(e.to_string()))
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let settings = serve_settings(args)?;
    // the remote backend's blocking client must be built outside the async runtime
    let manager = Arc::new(build_manager(&settings)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Config(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&settings.listen)
            .await
            .map_err(|e| Failure::Config(format!("cannot listen on {}: {e}", settings.listen)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Config(e.to_string()))?;
        println!("listening on http://{addr}");
        let state = counsel_server::AppState {
            manager,
            token: settings.token,
        };
        counsel_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::Invalid(format!("server stopped: {e}")))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Validate(i) => validate(&i),
        Command::Match(a) => run_match(&a),
        Command::Eval(a) => eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
