//! Replay and run requests shared by the command line and the service, so
//! both build identical plans.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use trk_core::demos;
use trk_core::guest::{self, parse_literal, Program};
use trk_core::host::{EventScript, Host};
use trk_core::monitor::{run_monitored_observed, Entry, MonitorConfig, MonitorSpec, RecordStats, RunError};
use trk_core::replay::{
    replay_from_snapshot, replay_function, replay_session, CodeSource, Migration, ReplayError, ReplayHost, ReplayPlan,
};
use trk_core::store::{CallId, SessionId, SnapshotId, StoreError, StoreHandle};

pub type CommitFn = Box<dyn FnMut(SessionId, u64)>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every top-level call of the session.
    #[default]
    Full,
    /// From ordinal `from` to the end.
    FromStep,
    /// Inclusive ordinal range `window`.
    Window,
    /// Resume inside a line-granularity call at `snapshot`.
    FromSnapshot,
    /// Re-invoke the single call `call`.
    Function,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::FromStep => "from_step",
            Mode::Window => "window",
            Mode::FromSnapshot => "from_snapshot",
            Mode::Function => "function",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayRequest {
    pub mode: Mode,
    pub session: Option<SessionId>,
    pub call: Option<CallId>,
    pub snapshot: Option<SnapshotId>,
    pub from: Option<u64>,
    pub window: Option<(u64, u64)>,
    pub mock: Vec<String>,
    /// `all`, `only:a,b` or `except:a,b`.
    pub migrate: Option<String>,
    /// Manual globals as guest literals.
    pub set: BTreeMap<String, String>,
    /// Source text holding one or more replacement function definitions.
    pub code: Option<String>,
    /// Seed of the live generator behind unmocked externals.
    pub seed: Option<u64>,
    pub label: Option<String>,
}

#[derive(Debug)]
pub enum RequestError {
    Invalid(String),
    Replay(ReplayError),
    Run(RunError),
}

impl RequestError {
    /// Session left behind by a failed run or replay.
    pub fn session(&self) -> Option<SessionId> {
        match self {
            RequestError::Replay(ReplayError::Failed { session, .. }) | RequestError::Run(RunError::Failed { session, .. }) => {
                Some(*session)
            }
            _ => None,
        }
    }

    /// Unknown ids and bad input are the caller's fault; storage faults
    /// are not.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            RequestError::Replay(ReplayError::Store(StoreError::Io { .. } | StoreError::Corrupt { .. } | StoreError::VersionMismatch { .. }))
        )
    }

    pub fn is_unknown_id(&self) -> bool {
        matches!(
            self,
            RequestError::Replay(ReplayError::Store(
                StoreError::UnknownSession(_)
                    | StoreError::UnknownCall(_)
                    | StoreError::UnknownSnapshot(_)
                    | StoreError::UnknownCode(_)
            ))
        )
    }
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestError::Invalid(m) => f.write_str(m),
            RequestError::Replay(e) => write!(f, "{e}"),
            RequestError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<ReplayError> for RequestError {
    fn from(e: ReplayError) -> Self {
        RequestError::Replay(e)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub session: SessionId,
    pub stats: RecordStats,
    /// Return value of the last top-level call, for replays.
    pub value: Option<Json>,
}

/// Replacement functions defined in `text`, by name.
pub fn code_overrides(text: &str) -> Result<BTreeMap<String, CodeSource>, String> {
    let unit = guest::parse(text, "<variant>").map_err(|e| format!("variant code: {e}"))?;
    if unit.functions.is_empty() {
        return Err("variant code defines no function".into());
    }
    Ok(unit.functions.into_iter().map(|f| (f.name, CodeSource::Text(f.source_text))).collect())
}

impl ReplayRequest {
    /// Checks that the ids the mode needs are present and no others.
    pub fn validate(&self) -> Result<(), String> {
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("mode {} needs {what}", self.mode.name())) };
        match self.mode {
            Mode::Full => need(self.session.is_some(), "a session")?,
            Mode::FromStep => need(self.session.is_some() && self.from.is_some(), "a session and from")?,
            Mode::Window => need(self.session.is_some() && self.window.is_some(), "a session and a window")?,
            Mode::FromSnapshot => need(self.snapshot.is_some(), "a snapshot")?,
            Mode::Function => need(self.call.is_some(), "a call")?,
        }
        if self.from.is_some() && self.mode != Mode::FromStep {
            return Err("from only applies to mode from_step".into());
        }
        if self.window.is_some() && self.mode != Mode::Window {
            return Err("window only applies to mode window".into());
        }
        Ok(())
    }

    fn plan(&self, store: &StoreHandle) -> Result<ReplayPlan, RequestError> {
        let invalid = RequestError::Invalid;
        let mut plan = ReplayPlan::faithful(self.mock.iter().cloned());
        plan.window = match self.mode {
            Mode::FromStep => {
                let session = self.session.expect("validated");
                let r = store.read();
                let last = r.session_calls(session).last().map(|c| c.ordinal);
                r.session(session).map_err(ReplayError::from)?;
                let last = last.ok_or_else(|| invalid(format!("session {session} has no calls")))?;
                Some((self.from.expect("validated"), last))
            }
            Mode::Window => self.window,
            _ => None,
        };
        if let Some(m) = &self.migrate {
            plan.migrate_globals = m.parse::<Migration>().map_err(invalid)?;
        }
        for (name, text) in &self.set {
            let d = parse_literal(text).map_err(|e| invalid(format!("value of {name}: {e}")))?;
            plan.manual_globals.insert(name.clone(), d);
        }
        if let Some(code) = &self.code {
            plan.code_override = code_overrides(code).map_err(invalid)?;
        }
        Ok(plan)
    }

    /// Runs the replay on the calling thread with `host` supplying live
    /// externals.
    pub fn execute(&self, store: &StoreHandle, host: &Host, on_commit: Option<CommitFn>) -> Result<Outcome, RequestError> {
        self.validate().map_err(RequestError::Invalid)?;
        let plan = self.plan(store)?;
        let mut env = host.env();
        let mut rh = ReplayHost::new(&mut env, Rc::new(Host::hooks()), Rc::new(Host::serializers()));
        rh.label = self.label.clone();
        rh.on_commit = on_commit;
        let report = match self.mode {
            Mode::Full | Mode::FromStep | Mode::Window => replay_session(store, self.session.expect("validated"), &plan, rh),
            Mode::FromSnapshot => replay_from_snapshot(store, self.snapshot.expect("validated"), &plan, rh),
            Mode::Function => replay_function(store, self.call.expect("validated"), &plan, rh),
        }?;
        let value = report.value.as_ref().and_then(|v| v.to_datum().ok()).map(|d| d.to_json());
        Ok(Outcome { session: report.session, stats: report.stats, value })
    }
}

/// A program to record: a bundled demo by name or source text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunRequest {
    pub demo: Option<String>,
    pub source: Option<String>,
    pub path: Option<String>,
    /// Monitor specs replacing the in-source pragmas.
    pub specs: Option<Vec<MonitorSpec>>,
    pub seed: u64,
    /// Event script as JSON lines.
    pub events: Option<String>,
    pub label: Option<String>,
}

impl RunRequest {
    /// The program and its default event script (the bundled one for the
    /// flappy demo).
    pub fn program(&self) -> Result<(Program, Option<String>, String), RequestError> {
        let invalid = RequestError::Invalid;
        match (&self.demo, &self.source) {
            (Some(name), None) => {
                let demo = demos::by_name(name).ok_or_else(|| invalid(format!("no bundled demo {name:?}")))?;
                let events = (demo.name == demos::FLAPPY.name).then(|| demos::FLAPPY_EVENTS.to_string());
                Ok((demo.program(), events, demo.name.to_string()))
            }
            (None, Some(src)) => {
                let path = self.path.clone().unwrap_or_else(|| "<source>".into());
                let program = Program::from_source(src, &path).map_err(|e| invalid(format!("{path}: {e}")))?;
                Ok((program, None, path))
            }
            _ => Err(invalid("give exactly one of demo or source".into())),
        }
    }

    pub fn execute(&self, store: &StoreHandle, host: &Host, on_commit: Option<CommitFn>) -> Result<Outcome, RequestError> {
        let invalid = RequestError::Invalid;
        let (program, default_events, name) = self.program()?;
        let script = match self.events.as_deref().or(default_events.as_deref()) {
            Some(text) => Some(EventScript::parse(text).map_err(|e| invalid(e.to_string()))?),
            None => None,
        };
        let host = Host::with_input(trk_core::host::HostConfig { seed: self.seed, script }, host.input());
        let config = match &self.specs {
            Some(specs) => MonitorConfig { specs: specs.clone(), hooks: Rc::new(Host::hooks()), serializers: Rc::new(Host::serializers()) },
            None => Host::monitor_config(&program).map_err(|e| invalid(e.to_string()))?,
        };
        let label = self.label.clone().unwrap_or(name);
        let mut env = host.env();
        let report = run_monitored_observed(&program, &Entry::TopLevel, &mut env, &config, store, &label, on_commit)
            .map_err(RequestError::Run)?;
        Ok(Outcome { session: report.session, stats: report.stats, value: None })
    }
}
