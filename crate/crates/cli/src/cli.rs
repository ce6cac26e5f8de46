//! `trk` subcommands. Exit status: 0 ok, 1 user error, 2 internal error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use trk_core::compare::{align, compare_states, datum_map_json, line_timeline, CompareError, SessionWindow};
use trk_core::guest::{Granularity, Line};
use trk_core::host::{EventScript, Host, HostConfig};
use trk_core::monitor::{specs_from_program, MonitorSpec};
use trk_core::store::{
    export_stream, import_stream, open_store, CallId, Location, SessionId, SessionStatus, SnapshotId, Store, StoreError,
    StoreHandle,
};

use crate::api::{aligned_json, call_json, parse_state, state_view};
use crate::request::{Mode, Outcome, ReplayRequest, RequestError, RunRequest};
use crate::service::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "trk", version, about = "Record, replay and compare Trk program executions")]
struct Cli {
    /// Trace database file.
    #[arg(long, global = true, env = "TRK_DB", default_value = "trk.db")]
    db: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a program under the monitor and record a session.
    Run(RunArgs),
    /// Replay a recorded session, window, call or snapshot.
    Replay(ReplayArgs),
    /// List sessions.
    Sessions,
    /// Print calls, states or line timelines.
    Inspect(InspectArgs),
    /// Compare two states, or align two sessions.
    Compare(CompareArgs),
    /// Write the store (or some sessions) as an interchange stream.
    Export(ExportArgs),
    /// Load an interchange stream into the database file.
    Import(ImportArgs),
    /// Serve the HTTP and WebSocket API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Program file, or `demo:NAME` for a bundled demo.
    program: String,
    /// JSON file with a list of monitor specs; replaces in-source pragmas.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monitor this function too (repeatable).
    #[arg(long = "monitor")]
    monitor: Vec<String>,
    /// Granularity for every spec.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    /// Track this external callable in every spec (repeatable, comma lists allowed).
    #[arg(long, value_delimiter = ',')]
    track: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Event script (JSON lines).
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    session: Option<SessionId>,
    /// Replay this single call.
    #[arg(long, conflicts_with_all = ["session", "snapshot"])]
    call: Option<CallId>,
    /// Resume inside a call at this snapshot.
    #[arg(long, conflicts_with_all = ["session", "call"])]
    snapshot: Option<SnapshotId>,
    /// Replay from this call ordinal to the end.
    #[arg(long, requires = "session", conflicts_with = "window")]
    from: Option<u64>,
    /// Inclusive ordinal range `a:b`.
    #[arg(long, requires = "session", value_parser = parse_window)]
    window: Option<(u64, u64)>,
    /// Serve these callables from the recording (comma lists allowed).
    #[arg(long, value_delimiter = ',')]
    mock: Vec<String>,
    /// `all`, `only:a,b` or `except:a,b`.
    #[arg(long)]
    migrate: Option<String>,
    /// Manual global `name=value`, value as a guest literal (repeatable).
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// File with replacement function definitions.
    #[arg(long)]
    code: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Event script feeding unmocked `get_events`.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// List the calls of a session.
    #[arg(long, conflicts_with_all = ["call", "snapshot"])]
    session: Option<SessionId>,
    #[arg(long, conflicts_with = "snapshot")]
    call: Option<CallId>,
    #[arg(long)]
    snapshot: Option<SnapshotId>,
    /// With --call: every visit of this function line.
    #[arg(long, requires = "call")]
    line: Option<Line>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// States as `c12` or `p3`.
    #[arg(required_unless_present = "align", num_args = 2)]
    states: Vec<String>,
    /// Align two sessions instead.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    align: Option<Vec<SessionId>>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Only these sessions (repeatable).
    #[arg(long)]
    session: Vec<SessionId>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImportArgs {
    file: PathBuf,
    /// Replace an existing database.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "function" => Ok(Granularity::Function),
        "line" => Ok(Granularity::Line),
        _ => Err(format!("expected function or line, got {s:?}")),
    }
}

fn parse_window(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or("expected a:b")?;
    let n = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
    Ok((n(a)?, n(b)?))
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (name, value) = s.split_once('=').ok_or("expected name=value")?;
    Ok((name.trim().to_string(), value.trim().to_string()))
}

#[derive(Debug)]
enum Failure {
    User(String),
    Internal(String),
    /// The reader of stdout went away.
    Closed,
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
            Failure::Closed => 0,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Corrupt { .. } | StoreError::VersionMismatch { .. } => {
                Failure::Internal(e.to_string())
            }
            _ => Failure::User(e.to_string()),
        }
    }
}

impl From<RequestError> for Failure {
    fn from(e: RequestError) -> Self {
        if e.is_internal() {
            Failure::Internal(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

fn user(message: impl Into<String>) -> Failure {
    Failure::User(message.into())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(cli, &mut out) {
        Ok(()) => 0,
        Err(f) => {
            if let Failure::User(m) | Failure::Internal(m) = &f {
                eprintln!("trk: {m}");
            }
            f.code()
        }
    }
}

fn open(db: &Path) -> Result<StoreHandle, Failure> {
    Ok(StoreHandle::new(open_store(Location::Path(db))?))
}

fn stdout_failure(e: std::io::Error) -> Failure {
    match e.kind() {
        std::io::ErrorKind::BrokenPipe => Failure::Closed,
        _ => Failure::Internal(format!("stdout: {e}")),
    }
}

fn emit(out: &mut impl Write, text: impl std::fmt::Display) -> Result<(), Failure> {
    writeln!(out, "{text}").map_err(stdout_failure)
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json renders")
}

fn dispatch(cli: Cli, out: &mut impl Write) -> Result<(), Failure> {
    let db = cli.db.as_path();
    match cli.command {
        Command::Run(a) => run(db, a, out),
        Command::Replay(a) => replay(db, a, out),
        Command::Sessions => sessions(&open(db)?.read(), out),
        Command::Inspect(a) => inspect(&open(db)?.read(), a, out),
        Command::Compare(a) => compare(&open(db)?.read(), a, out),
        Command::Export(a) => export(&open(db)?.read(), a, out),
        Command::Import(a) => import(db, a, out),
        Command::Serve(a) => serve_db(db, a, out),
    }
}

fn summary(label: &str, o: &Outcome) -> String {
    let s = &o.stats;
    format!(
        "{label} session {}: {} calls, {} snapshots, {} events, {} skipped, {} mocked",
        o.session, s.calls, s.snapshots, s.events, s.skipped, s.mocked
    )
}

/// Persists the store whatever `result` is, so failed sessions are kept.
fn persist_then<T>(store: &StoreHandle, result: Result<T, RequestError>) -> Result<T, Failure> {
    store.read().persist(None)?;
    result.map_err(|e| {
        let hint = e.session().map(|s| format!(" (failed session {s} recorded)")).unwrap_or_default();
        match Failure::from(e) {
            Failure::User(m) => Failure::User(m + &hint),
            Failure::Internal(m) => Failure::Internal(m + &hint),
            Failure::Closed => Failure::Closed,
        }
    })
}

fn run(db: &Path, a: RunArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut req = RunRequest { seed: a.seed, label: a.label, ..RunRequest::default() };
    match a.program.strip_prefix("demo:") {
        Some(name) => req.demo = Some(name.to_string()),
        None => {
            req.source = Some(read_text(Path::new(&a.program))?);
            req.path = Some(a.program.clone());
        }
    }
    if let Some(p) = &a.events {
        req.events = Some(read_text(p)?);
    }
    let (program, _, _) = req.program().map_err(Failure::from)?;
    let mut specs = match &a.config {
        Some(p) => serde_json::from_str::<Vec<MonitorSpec>>(&read_text(p)?)
            .map_err(|e| user(format!("{}: {e}", p.display())))?,
        None => specs_from_program(&program).map_err(|e| user(e.to_string()))?,
    };
    for f in &a.monitor {
        if !specs.iter().any(|s| &s.function == f) {
            specs.push(MonitorSpec::new(f, a.granularity.unwrap_or(Granularity::Function)));
        }
    }
    for s in &mut specs {
        if let Some(g) = a.granularity {
            s.granularity = g;
        }
        s.tracked.extend(a.track.iter().cloned());
    }
    if a.config.is_some() || !a.monitor.is_empty() || a.granularity.is_some() || !a.track.is_empty() {
        req.specs = Some(specs);
    }
    let store = open(db)?;
    let outcome = persist_then(&store, req.execute(&store, &Host::default(), None))?;
    emit(out, summary("recorded", &outcome))
}

fn replay_request(a: &ReplayArgs) -> Result<ReplayRequest, Failure> {
    let mode = if a.snapshot.is_some() {
        Mode::FromSnapshot
    } else if a.call.is_some() {
        Mode::Function
    } else if a.from.is_some() {
        Mode::FromStep
    } else if a.window.is_some() {
        Mode::Window
    } else {
        Mode::Full
    };
    let code = a.code.as_deref().map(read_text).transpose()?;
    let req = ReplayRequest {
        mode,
        session: a.session,
        call: a.call,
        snapshot: a.snapshot,
        from: a.from,
        window: a.window,
        mock: a.mock.iter().filter(|m| !m.is_empty()).cloned().collect(),
        migrate: a.migrate.clone(),
        set: a.set.iter().cloned().collect(),
        code,
        seed: a.seed,
        label: a.label.clone(),
    };
    req.validate().map_err(user)?;
    Ok(req)
}

fn replay(db: &Path, a: ReplayArgs, out: &mut impl Write) -> Result<(), Failure> {
    let req = replay_request(&a)?;
    let script = match &a.events {
        Some(p) => Some(EventScript::parse(&read_text(p)?).map_err(|e| user(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let host = Host::new(HostConfig { seed: req.seed.unwrap_or(0), script });
    let store = open(db)?;
    let outcome = persist_then(&store, req.execute(&store, &host, None))?;
    emit(out, summary("replayed", &outcome))?;
    if let Some(v) = &outcome.value {
        emit(out, format!("value {v}"))?;
    }
    Ok(())
}

fn sessions(store: &Store, out: &mut impl Write) -> Result<(), Failure> {
    for s in store.sessions() {
        let status = match &s.status {
            SessionStatus::Recording => "recording".to_string(),
            SessionStatus::Complete => "complete".to_string(),
            SessionStatus::Failed { ordinal, message } => match ordinal {
                Some(o) => format!("failed at call {o}: {message}"),
                None => format!("failed: {message}"),
            },
        };
        let parent = match (s.parent_session, s.parent_offset) {
            (Some(p), Some(o)) => format!(" from {p}@{o}"),
            (Some(p), None) => format!(" from {p}"),
            _ => String::new(),
        };
        emit(out, format!("{}\t{}\t{} calls\t{status}{parent}", s.id, s.label, store.session_calls(s.id).len()))?;
    }
    Ok(())
}

fn inspect(store: &Store, a: InspectArgs, out: &mut impl Write) -> Result<(), Failure> {
    if let Some(s) = a.session {
        store.session(s)?;
        for c in store.session_calls(s) {
            emit(out, call_json(store, c.id)?)?;
        }
        return Ok(());
    }
    if let (Some(c), Some(line)) = (a.call, a.line) {
        let visits = line_timeline(store, c, line)?;
        let rows: Vec<Value> = visits.iter().map(|(p, v)| json!({ "snapshot": p, "variables": datum_map_json(v) })).collect();
        return emit(out, pretty(&Value::Array(rows)));
    }
    let state = match (a.call, a.snapshot) {
        (Some(c), _) => trk_core::compare::StateRef::Call(c),
        (_, Some(p)) => trk_core::compare::StateRef::Snapshot(p),
        _ => return Err(user("inspect needs --session, --call or --snapshot")),
    };
    let v = state_view(store, state)?;
    emit(out, pretty(&serde_json::to_value(v).expect("views serialize")))
}

fn compare(store: &Store, a: CompareArgs, out: &mut impl Write) -> Result<(), Failure> {
    if let Some(pair) = a.align {
        let pairs = align(store, &SessionWindow::whole(pair[0]), &SessionWindow::whole(pair[1]))?;
        for p in &pairs {
            emit(out, aligned_json(store, p))?;
        }
        return Ok(());
    }
    let x = parse_state(&a.states[0]).map_err(user)?;
    let y = parse_state(&a.states[1]).map_err(user)?;
    let d = compare_states(store, x, y).map_err(|e| match e {
        CompareError::Store(e) => Failure::from(e),
        e => user(e.to_string()),
    })?;
    emit(out, pretty(&d.to_json()))
}

fn export(store: &Store, a: ExportArgs, out: &mut impl Write) -> Result<(), Failure> {
    for s in &a.session {
        store.session(*s)?;
    }
    let text = export_stream(store, (!a.session.is_empty()).then_some(a.session.as_slice()));
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| user(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(stdout_failure),
    }
}

fn import(db: &Path, a: ImportArgs, out: &mut impl Write) -> Result<(), Failure> {
    if db.exists() && !a.force {
        return Err(user(format!("{} exists; pass --force to replace it", db.display())));
    }
    let store = import_stream(&read_text(&a.file)?).map_err(|e| user(format!("{}: {e}", a.file.display())))?;
    store.persist(Some(db))?;
    let c = store.counts();
    emit(out, format!("imported {} sessions, {} calls into {}", c.sessions, c.calls, db.display()))
}

fn serve_db(db: &Path, a: ServeArgs, out: &mut impl Write) -> Result<(), Failure> {
    if !db.is_file() {
        return Err(user(format!("no database at {}", db.display())));
    }
    let store = open(db)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| user(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Internal(e.to_string()))?;
        emit(out, format!("listening on http://{local}"))?;
        out.flush().map_err(|e| Failure::Internal(e.to_string()))?;
        serve(AppState::new(store), listener).await.map_err(|e| Failure::Internal(e.to_string()))
    })
}
