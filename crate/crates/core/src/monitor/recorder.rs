use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::rc::Rc;

use crate::guest::{
    self, CallError, Datum, Env, FrameView, Granularity, IdGen, Instrumentation, Line, Program, Value,
};
use crate::replay::{rebuild_datum, MockSet};
use crate::store::{
    CallId, MonitoredCall, ProgramRecord, SessionId, SessionStatus, SnapshotId, Store, StoreHandle, StoreWriteGuard,
    VersionRef,
};

use super::{analyze_global_refs, Capturer, HookInput, HookPoint, MonitorConfig, MonitorError, MonitorSpec};

type Slots = BTreeMap<String, VersionRef>;

struct ActiveSpec {
    spec: MonitorSpec,
    globals: BTreeSet<String>,
}

struct ActiveCall {
    call: CallId,
    spec: Rc<ActiveSpec>,
    last_snapshot: Option<SnapshotId>,
}

/// Counters for one recording.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct RecordStats {
    pub calls: u64,
    pub snapshots: u64,
    pub events: u64,
    /// Non-serializable values captured as skipped markers.
    pub skipped: u64,
    pub mocked: u64,
    /// Calls to mocked callables served live after their queue ran out.
    pub fell_through: u64,
}

/// Instrumentation that writes a session into the store.
///
/// The store's write lock is held for the duration of each top-level
/// monitored call, so readers only ever observe whole calls.
pub struct Recorder {
    store: StoreHandle,
    guard: Option<StoreWriteGuard>,
    session: SessionId,
    specs: BTreeMap<String, Rc<ActiveSpec>>,
    tracked: HashSet<String>,
    config: MonitorConfig,
    capturer: Capturer,
    stack: Vec<ActiveCall>,
    next_ordinal: u64,
    mocks: MockSet,
    served_mock: bool,
    pending: Vec<u64>,
    on_commit: Option<Box<dyn FnMut(SessionId, u64)>>,
    stats: RecordStats,
    failed_ordinal: Option<u64>,
}

impl Recorder {
    pub fn new(store: StoreHandle, session: SessionId, program: &Program, config: &MonitorConfig) -> Recorder {
        let specs: BTreeMap<String, Rc<ActiveSpec>> = config
            .specs
            .iter()
            .map(|s| {
                let globals = analyze_global_refs(program, &s.function);
                (s.function.clone(), Rc::new(ActiveSpec { spec: s.clone(), globals }))
            })
            .collect();
        let tracked = config.specs.iter().flat_map(|s| s.tracked.iter().cloned()).collect();
        Recorder {
            store,
            guard: None,
            session,
            specs,
            tracked,
            config: config.clone(),
            capturer: Capturer::new(config.serializers.clone(), session),
            stack: vec![],
            next_ordinal: 0,
            mocks: MockSet::default(),
            served_mock: false,
            pending: vec![],
            on_commit: None,
            stats: RecordStats::default(),
            failed_ordinal: None,
        }
    }

    pub fn with_mocks(mut self, mocks: MockSet) -> Recorder {
        self.mocks = mocks;
        self
    }

    /// Called with `(session, ordinal)` after each top-level monitored
    /// call becomes visible to readers, once per call it contained.
    pub fn on_commit(mut self, f: impl FnMut(SessionId, u64) + 'static) -> Recorder {
        self.on_commit = Some(Box::new(f));
        self
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn stats(&self) -> RecordStats {
        RecordStats { skipped: self.capturer.skipped(), ..self.stats }
    }

    pub fn mocks(&self) -> &MockSet {
        &self.mocks
    }

    /// Marks the session complete or failed and returns the counters.
    pub fn finish(mut self, outcome: Result<(), &CallError>) -> RecordStats {
        self.release();
        let status = match outcome {
            Ok(()) => SessionStatus::Complete,
            Err(e) => SessionStatus::Failed { ordinal: self.failed_ordinal, message: e.to_string() },
        };
        let _ = self.store.write().set_session_status(self.session, status);
        self.stats()
    }

    fn store(&mut self) -> &mut Store {
        if self.guard.is_none() {
            self.guard = Some(self.store.write_owned());
        }
        self.guard.as_mut().expect("guard just acquired")
    }

    fn release(&mut self) {
        self.guard = None;
        let pending = std::mem::take(&mut self.pending);
        if let Some(f) = &mut self.on_commit {
            for ordinal in pending {
                f(self.session, ordinal);
            }
        }
    }

    fn capture_slots<'v>(
        &mut self,
        spec: &ActiveSpec,
        frame: &FrameView<'v>,
        call: CallId,
    ) -> Result<(Slots, Slots), String> {
        let mut locals = BTreeMap::new();
        let mut globals = BTreeMap::new();
        self.store();
        let store: &mut Store = self.guard.as_mut().expect("guard held");
        for (name, v) in frame.locals() {
            if spec.spec.captures(name) {
                locals.insert(name.to_string(), self.capturer.capture(store, v, call).map_err(|e| e.to_string())?);
            }
        }
        for name in &spec.globals {
            if !spec.spec.captures(name) {
                continue;
            }
            if let Some(v) = frame.globals.get(name) {
                globals.insert(name.clone(), self.capturer.capture(store, v, call).map_err(|e| e.to_string())?);
            }
        }
        Ok((locals, globals))
    }

    fn run_hooks(
        &mut self,
        names: &[String],
        input: &HookInput<'_>,
        call: CallId,
    ) -> Result<(), String> {
        for name in names {
            let hook = self.config.hooks.get(name).ok_or_else(|| format!("hook {name}: not registered"))?;
            let out = hook(input).map_err(|e| format!("hook {name} failed: {e}"))?;
            let store = self.store();
            let blob = store.intern_hook_blob(&out.kind, out.bytes);
            store.call_mut(call).expect("active call").hook_meta.insert(name.clone(), blob);
        }
        Ok(())
    }

    fn end_call(&mut self, error: Option<String>) {
        let Some(active) = self.stack.pop() else { return };
        if let Some(e) = error {
            let store = self.store();
            let call = store.call_mut(active.call).expect("active call");
            call.error = Some(e);
            let ordinal = call.ordinal;
            self.failed_ordinal.get_or_insert(ordinal);
        }
        if self.stack.is_empty() {
            self.release();
        }
    }
}

impl Instrumentation for Recorder {
    fn observes(&self, function: &str) -> Option<Granularity> {
        self.specs.get(function).map(|s| s.spec.granularity)
    }

    fn on_call(&mut self, frame: &FrameView<'_>) -> Result<(), String> {
        let spec = self.specs.get(frame.name()).cloned().ok_or("call to unmonitored function")?;
        let session = self.session;
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        let parent_call = self.stack.last().map(|a| a.call);
        let store = self.store();
        let code = store.intern_code(&frame.function.def);
        let id = store.next_call_id();
        store.push_call(MonitoredCall {
            id,
            session,
            ordinal,
            function: frame.name().to_string(),
            code,
            def_line: frame.function.def.line,
            parent_call,
            locals: BTreeMap::new(),
            globals: BTreeMap::new(),
            return_value: None,
            hook_meta: BTreeMap::new(),
            error: None,
        });
        self.pending.push(ordinal);
        self.stats.calls += 1;
        self.stack.push(ActiveCall { call: id, spec: spec.clone(), last_snapshot: None });
        let result: Result<(), String> = (|| {
            let (locals, globals) = self.capture_slots(&spec, frame, id)?;
            let call = self.store().call_mut(id).expect("active call");
            call.locals = locals;
            call.globals = globals;
            if !spec.spec.call_hooks.is_empty() {
                let input = HookInput {
                    function: frame.name(),
                    point: HookPoint::Call,
                    args: frame.locals().collect(),
                    return_value: None,
                    globals: frame.globals,
                };
                self.run_hooks(&spec.spec.call_hooks, &input, id)?;
            }
            Ok(())
        })();
        if let Err(e) = &result {
            self.end_call(Some(e.clone()));
        }
        result
    }

    fn on_line(&mut self, frame: &FrameView<'_>, line: Line) -> Result<(), String> {
        let (call, spec) = match self.stack.last() {
            Some(a) => (a.call, a.spec.clone()),
            None => return Ok(()),
        };
        let (locals, globals) = self.capture_slots(&spec, frame, call)?;
        let snap = self.store().push_snapshot(call, line, locals, globals);
        self.stack.last_mut().expect("active call").last_snapshot = Some(snap);
        self.stats.snapshots += 1;
        Ok(())
    }

    fn on_return(&mut self, frame: &FrameView<'_>, value: &Value) -> Result<(), String> {
        let Some(active) = self.stack.last() else { return Ok(()) };
        let (call, spec) = (active.call, active.spec.clone());
        let result: Result<(), String> = (|| {
            self.store();
            let store: &mut Store = self.guard.as_mut().expect("guard held");
            let r = self.capturer.capture(store, value, call).map_err(|e| e.to_string())?;
            store.call_mut(call).expect("active call").return_value = Some(r);
            if !spec.spec.return_hooks.is_empty() {
                let input = HookInput {
                    function: frame.name(),
                    point: HookPoint::Return,
                    args: vec![],
                    return_value: Some(value),
                    globals: frame.globals,
                };
                self.run_hooks(&spec.spec.return_hooks, &input, call)?;
            }
            Ok(())
        })();
        self.end_call(result.as_ref().err().cloned());
        result
    }

    fn on_unwind(&mut self, _function: &str, error: &CallError) {
        self.end_call(Some(error.to_string()));
    }

    fn intercepts(&self, callable: &str) -> bool {
        !self.stack.is_empty() && self.tracked.contains(callable)
    }

    fn intercept(&mut self, callable: &str, _args: &[Value], ids: &IdGen) -> Result<Option<Value>, String> {
        use crate::replay::MockPop;
        match self.mocks.pop(callable) {
            MockPop::Served(entry) => {
                self.served_mock = true;
                self.stats.mocked += 1;
                rebuild_datum(&entry.return_value, ids, &self.config.serializers)
                    .map(Some)
                    .map_err(|e| format!("mocked {callable} return: {e}"))
            }
            MockPop::Exhausted => {
                self.stats.fell_through += 1;
                Ok(None)
            }
            MockPop::NotMocked => Ok(None),
        }
    }

    fn on_external(&mut self, callable: &str, args: &[Value], result: &Value) -> Result<(), String> {
        let mocked = std::mem::take(&mut self.served_mock);
        let Some(active) = self.stack.last() else { return Ok(()) };
        let (call, snapshot) = (active.call, active.last_snapshot);
        self.store();
        let store: &mut Store = self.guard.as_mut().expect("guard held");
        let args = args
            .iter()
            .map(|a| self.capturer.capture(store, a, call))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let ret = self.capturer.capture(store, result, call).map_err(|e| e.to_string())?;
        store.push_event(call, snapshot, callable, args, ret, mocked);
        self.stats.events += 1;
        Ok(())
    }
}

/// What to run under monitoring.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    /// The program's top-level statements.
    TopLevel,
    Function { name: String, args: Vec<Datum> },
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] MonitorError),
    #[error("argument {index}: {message}")]
    BadArgument { index: usize, message: String },
    /// The run started and was persisted as a failed session.
    #[error("session {session} failed: {error}")]
    Failed { session: SessionId, error: CallError, stats: RecordStats },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub session: SessionId,
    pub stats: RecordStats,
    /// Return value for [`Entry::Function`] runs.
    pub value: Option<Value>,
}

/// Runs `entry` under `config`, recording one new session.
pub fn run_monitored(
    program: &Program,
    entry: &Entry,
    env: &mut Env,
    config: &MonitorConfig,
    store: &StoreHandle,
    label: &str,
) -> Result<RunReport, RunError> {
    run_monitored_observed(program, entry, env, config, store, label, None)
}

/// [`run_monitored`] with a callback fired after each committed top-level
/// call, given its session and ordinal.
pub fn run_monitored_observed(
    program: &Program,
    entry: &Entry,
    env: &mut Env,
    config: &MonitorConfig,
    store: &StoreHandle,
    label: &str,
    on_commit: Option<Box<dyn FnMut(SessionId, u64)>>,
) -> Result<RunReport, RunError> {
    config.validate(program, env)?;
    let args = match entry {
        Entry::TopLevel => vec![],
        Entry::Function { args, .. } => args
            .iter()
            .enumerate()
            .map(|(index, d)| {
                rebuild_datum(d, env.ids(), &config.serializers).map_err(|message| RunError::BadArgument { index, message })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    let session = {
        let mut w = store.write();
        let hash = w.intern_program(ProgramRecord::from_program(program));
        w.create_session(label, hash, None, config.specs.clone())
    };
    let mut rec = Recorder::new(store.clone(), session, program, config);
    if let Some(f) = on_commit {
        rec = rec.on_commit(f);
    }
    let result = match entry {
        Entry::TopLevel => guest::run_top_level(program, env, &mut rec).map(|_| None),
        Entry::Function { name, .. } => guest::call(program, name, args, env, &mut rec, None, None).map(Some),
    };
    let stats = rec.finish(result.as_ref().map(|_| ()));
    match result {
        Ok(value) => Ok(RunReport { session, stats, value }),
        Err(error) => Err(RunError::Failed { session, error, stats }),
    }
}
