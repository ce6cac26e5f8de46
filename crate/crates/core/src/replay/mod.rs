//! Re-execution of recorded calls, sessions and snapshots under a
//! [`ReplayPlan`].

mod mocks;
mod plan;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use crate::compare::diff_code;
use crate::guest::{self, CallError, Datum, Env, IdGen, Program, ProgramError, Value};
use crate::monitor::{
    analyze_global_refs, HookRegistry, MonitorConfig, MonitorError, RecordStats, Recorder, Serializers,
};
use crate::store::{
    CallId, MonitoredCall, ObjectId, ProgramRecord, SessionId, SnapshotId, Store, StoreError, StoreHandle,
    ValueKind, VersionRef,
};

pub use mocks::{build_mocks, MockEntry, MockPop, MockScope, MockSet};
pub use plan::{CodeSource, Migration, ReplayPlan};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("global {name}: {reason}")]
    MissingGlobal { name: String, reason: String },
    #[error("cannot restore {name}: {reason}")]
    Restore { name: String, reason: String },
    #[error("line {line} of {function} has no counterpart in the new code")]
    UnmappedLine { function: String, line: u32 },
    /// The replay ran and was persisted as a failed session.
    #[error("replay session {session} failed: {error}")]
    Failed { session: SessionId, error: CallError, stats: RecordStats },
}

/// Host pieces a replay runs with.
pub struct ReplayHost<'a> {
    /// Live environment; supplies builtins and every global the plan does
    /// not restore from the trace.
    pub env: &'a mut Env,
    pub hooks: Rc<HookRegistry>,
    pub serializers: Rc<Serializers>,
    pub label: Option<String>,
    pub on_commit: Option<Box<dyn FnMut(SessionId, u64)>>,
}

impl<'a> ReplayHost<'a> {
    pub fn new(env: &'a mut Env, hooks: Rc<HookRegistry>, serializers: Rc<Serializers>) -> ReplayHost<'a> {
        ReplayHost { env, hooks, serializers, label: None, on_commit: None }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub session: SessionId,
    pub stats: RecordStats,
    /// Return value of the last replayed top-level call.
    pub value: Option<Value>,
}

/// Builds a runtime value from an identity-free datum, decoding blobs with
/// their registered codec.
pub fn rebuild_datum(d: &Datum, ids: &IdGen, serializers: &Serializers) -> Result<Value, String> {
    Ok(match d {
        Datum::List(items) => Value::new_list(
            ids,
            items.iter().map(|x| rebuild_datum(x, ids, serializers)).collect::<Result<_, _>>()?,
        ),
        Datum::Map(entries) => Value::new_map(
            ids,
            entries
                .iter()
                .map(|(k, x)| Ok((k.clone(), rebuild_datum(x, ids, serializers)?)))
                .collect::<Result<_, String>>()?,
        ),
        Datum::Blob { kind, bytes } => {
            let decode = serializers
                .get(kind)
                .and_then(|c| c.decode.as_ref())
                .ok_or_else(|| format!("no decoder registered for {kind}"))?;
            decode(bytes, ids)?
        }
        other => other.to_value(ids)?,
    })
}

enum RebuildError {
    Skipped(String),
    Other(String),
}

/// Turns stored versions back into runtime values. Versions of the same
/// stored object come back as one shared runtime object.
struct Rebuilder<'s> {
    store: &'s Store,
    ids: IdGen,
    serializers: Rc<Serializers>,
    objects: HashMap<ObjectId, Value>,
}

impl<'s> Rebuilder<'s> {
    fn new(store: &'s Store, ids: &IdGen, serializers: Rc<Serializers>) -> Self {
        Rebuilder { store, ids: ids.clone(), serializers, objects: HashMap::new() }
    }

    fn value(&mut self, v: VersionRef) -> Result<Value, RebuildError> {
        let ver = self.store.version(v).map_err(|e| RebuildError::Other(e.to_string()))?;
        if let Some(o) = ver.object {
            if let Some(existing) = self.objects.get(&o) {
                return Ok(existing.clone());
            }
        }
        let value = match ver.kind {
            ValueKind::Skipped => {
                let reason = match self.store.materialize(v) {
                    Ok(Datum::Skipped(r)) => r,
                    _ => "not captured".into(),
                };
                return Err(RebuildError::Skipped(reason));
            }
            ValueKind::List => {
                let list = Value::new_list(&self.ids, vec![]);
                if let Some(o) = ver.object {
                    self.objects.insert(o, list.clone());
                }
                let items = ver.elements.iter().map(|e| self.value(*e)).collect::<Result<Vec<_>, _>>()?;
                if let Value::List(l) = &list {
                    *l.items_mut() = items;
                }
                list
            }
            ValueKind::Map => {
                let map = Value::new_map(&self.ids, BTreeMap::new());
                if let Some(o) = ver.object {
                    self.objects.insert(o, map.clone());
                }
                let mut entries = BTreeMap::new();
                for (k, e) in ver.keys.iter().zip(&ver.elements) {
                    entries.insert(k.clone(), self.value(*e)?);
                }
                if let Value::Map(m) = &map {
                    *m.entries_mut() = entries;
                }
                map
            }
            _ => {
                let d = self.store.materialize(v).map_err(|e| RebuildError::Other(e.to_string()))?;
                let value = rebuild_datum(&d, &self.ids, &self.serializers).map_err(RebuildError::Other)?;
                if let Some(o) = ver.object {
                    self.objects.insert(o, value.clone());
                }
                value
            }
        };
        Ok(value)
    }
}

fn load_program(store: &Store, session: SessionId) -> Result<Program, ReplayError> {
    let s = store.session(session)?;
    Ok(store.program(s.program_hash)?.load()?)
}

fn apply_overrides(store: &Store, program: Program, plan: &ReplayPlan) -> Result<Program, ReplayError> {
    let mut program = program;
    for (name, src) in &plan.code_override {
        let text = match src {
            CodeSource::Text(t) => t.clone(),
            CodeSource::Version(k) => {
                let cv = store.code_version(*k)?;
                if &cv.function_name != name {
                    return Err(ReplayError::Plan(format!("code version {k} belongs to {}, not {name}", cv.function_name)));
                }
                cv.source_text.clone()
            }
        };
        program = program.with_override(name, &text)?;
    }
    Ok(program)
}

/// Globals the overridden functions read that neither the recorded context
/// nor the manual values provide.
fn check_override_globals(
    program: &Program,
    plan: &ReplayPlan,
    recorded: &BTreeMap<String, VersionRef>,
    env: &Env,
) -> Result<(), ReplayError> {
    for name in plan.code_override.keys() {
        for r in analyze_global_refs(program, name) {
            if program.function(&r).is_some() || env.builtin(&r).is_some() {
                continue;
            }
            if !recorded.contains_key(&r) && !plan.manual_globals.contains_key(&r) {
                return Err(ReplayError::MissingGlobal {
                    name: r,
                    reason: format!("read by overridden {name} but not recorded; supply it as a manual global"),
                });
            }
        }
    }
    Ok(())
}

/// Installs recorded, manual or live globals into `env` according to the
/// plan.
fn restore_globals(
    rb: &mut Rebuilder<'_>,
    recorded: &BTreeMap<String, VersionRef>,
    plan: &ReplayPlan,
    env: &mut Env,
) -> Result<(), ReplayError> {
    for (name, v) in recorded {
        if plan.manual_globals.contains_key(name) {
            continue;
        }
        let live = env.globals.contains_key(name);
        if plan.migrate_globals.migrates(name) {
            match rb.value(*v) {
                Ok(value) => {
                    env.globals.insert(name.clone(), value);
                }
                Err(RebuildError::Skipped(reason)) if live => {
                    let _ = reason;
                }
                Err(RebuildError::Skipped(reason)) => {
                    return Err(ReplayError::MissingGlobal {
                        name: name.clone(),
                        reason: format!("recorded value was skipped ({reason}) and the environment has none"),
                    })
                }
                Err(RebuildError::Other(reason)) => return Err(ReplayError::Restore { name: name.clone(), reason }),
            }
        } else if !live {
            return Err(ReplayError::MissingGlobal {
                name: name.clone(),
                reason: "not migrated and not bound in the environment".into(),
            });
        }
    }
    for (name, d) in &plan.manual_globals {
        let value = rebuild_datum(d, env.ids(), &rb.serializers)
            .map_err(|reason| ReplayError::Restore { name: name.clone(), reason })?;
        env.globals.insert(name.clone(), value);
    }
    Ok(())
}

fn rebuild_slots(
    rb: &mut Rebuilder<'_>,
    slots: &BTreeMap<String, VersionRef>,
) -> Result<BTreeMap<String, Value>, ReplayError> {
    slots
        .iter()
        .map(|(k, v)| match rb.value(*v) {
            Ok(value) => Ok((k.clone(), value)),
            Err(RebuildError::Skipped(reason)) => {
                Err(ReplayError::Restore { name: k.clone(), reason: format!("recorded value was skipped ({reason})") })
            }
            Err(RebuildError::Other(reason)) => Err(ReplayError::Restore { name: k.clone(), reason }),
        })
        .collect()
}

fn call_args(original: &Program, call: &MonitoredCall, locals: &BTreeMap<String, Value>) -> Result<Vec<Value>, ReplayError> {
    let f = original.function(&call.function).ok_or_else(|| ReplayError::Plan(format!("unknown function {}", call.function)))?;
    f.def
        .params
        .iter()
        .map(|p| {
            locals.get(p).cloned().ok_or_else(|| ReplayError::Restore {
                name: p.clone(),
                reason: format!("argument of call {} was not recorded", call.id),
            })
        })
        .collect()
}

struct Prepared {
    program: Program,
    session: SessionId,
    config: MonitorConfig,
}

fn start_session(
    store: &StoreHandle,
    source: SessionId,
    offset: u64,
    program: Program,
    host: &ReplayHost<'_>,
    default_label: String,
) -> Result<Prepared, ReplayError> {
    let mut w = store.write();
    let specs = w.session(source)?.specs.clone();
    let config = MonitorConfig { specs, hooks: host.hooks.clone(), serializers: host.serializers.clone() };
    config.validate(&program, host.env)?;
    let hash = w.intern_program(ProgramRecord::from_program(&program));
    let label = host.label.clone().unwrap_or(default_label);
    let session = w.create_session(&label, hash, Some((source, offset)), config.specs.clone());
    Ok(Prepared { program, session, config })
}

fn recorder(store: &StoreHandle, p: &Prepared, mocks: MockSet, host: &mut ReplayHost<'_>) -> Recorder {
    let mut rec = Recorder::new(store.clone(), p.session, &p.program, &p.config).with_mocks(mocks);
    if let Some(f) = host.on_commit.take() {
        rec = rec.on_commit(f);
    }
    rec
}

fn finish(rec: Recorder, session: SessionId, result: Result<Option<Value>, CallError>) -> Result<ReplayReport, ReplayError> {
    let stats = rec.finish(result.as_ref().map(|_| ()));
    match result {
        Ok(value) => Ok(ReplayReport { session, stats, value }),
        Err(error) => Err(ReplayError::Failed { session, error, stats }),
    }
}

/// Re-invokes one recorded call with its recorded arguments.
pub fn replay_function(
    store: &StoreHandle,
    call: CallId,
    plan: &ReplayPlan,
    mut host: ReplayHost<'_>,
) -> Result<ReplayReport, ReplayError> {
    plan.validate()?;
    let (prepared_program, call_row, args, mocks) = {
        let r = store.read();
        let c = r.call(call)?.clone();
        let original = load_program(&r, c.session)?;
        let program = apply_overrides(&r, original.clone(), plan)?;
        check_override_globals(&program, plan, &c.globals, host.env)?;
        let mocks = build_mocks(&r, &MockScope::Call(call), &plan.mocked)?;
        let mut rb = Rebuilder::new(&r, host.env.ids(), host.serializers.clone());
        restore_globals(&mut rb, &c.globals, plan, host.env)?;
        let locals = rebuild_slots(&mut rb, &c.locals)?;
        let args = call_args(&original, &c, &locals)?;
        (program, c, args, mocks)
    };
    let p = start_session(store, call_row.session, call_row.ordinal, prepared_program, &host, format!("replay of {call}"))?;
    let mut rec = recorder(store, &p, mocks, &mut host);
    let result = guest::call(&p.program, &call_row.function, args, host.env, &mut rec, None, None).map(Some);
    finish(rec, p.session, result)
}

/// Re-invokes the top-level monitored calls of a session whose ordinals
/// fall in the plan's window, in order.
pub fn replay_session(
    store: &StoreHandle,
    session: SessionId,
    plan: &ReplayPlan,
    mut host: ReplayHost<'_>,
) -> Result<ReplayReport, ReplayError> {
    plan.validate()?;
    let (program, original, calls, mocks, start) = {
        let r = store.read();
        let all = r.session_calls(session);
        r.session(session)?;
        let top: Vec<MonitoredCall> = all.iter().filter(|c| c.parent_call.is_none()).map(|c| (*c).clone()).collect();
        let last = all.last().map(|c| c.ordinal).ok_or_else(|| ReplayError::Plan(format!("session {session} has no calls")))?;
        let (start, end) = plan.window.unwrap_or((0, last));
        if end > last {
            return Err(ReplayError::Plan(format!("window end {end} is past the last ordinal {last}")));
        }
        let calls: Vec<MonitoredCall> = top.into_iter().filter(|c| c.ordinal >= start && c.ordinal <= end).collect();
        match calls.first() {
            Some(c) if c.ordinal == start => {}
            _ => return Err(ReplayError::Plan(format!("ordinal {start} is not a top-level call of {session}"))),
        }
        let original = load_program(&r, session)?;
        let program = apply_overrides(&r, original.clone(), plan)?;
        check_override_globals(&program, plan, &calls[0].globals, host.env)?;
        let mocks = build_mocks(&r, &MockScope::Window { session, start, end }, &plan.mocked)?;
        let mut rb = Rebuilder::new(&r, host.env.ids(), host.serializers.clone());
        restore_globals(&mut rb, &calls[0].globals, plan, host.env)?;
        (program, original, calls, mocks, start)
    };
    let p = start_session(store, session, start, program, &host, format!("replay of {session} from {start}"))?;
    let mut rec = recorder(store, &p, mocks, &mut host);
    let mut result = Ok(None);
    for c in &calls {
        let args = {
            let r = store.read();
            let mut rb = Rebuilder::new(&r, host.env.ids(), host.serializers.clone());
            rebuild_slots(&mut rb, &c.locals).and_then(|locals| call_args(&original, c, &locals))
        };
        let args = match args {
            Ok(a) => a,
            Err(e) => {
                rec.finish(Err(&CallError::Runtime { function: Some(c.function.clone()), line: c.def_line, message: e.to_string() }));
                return Err(e);
            }
        };
        result = guest::call(&p.program, &c.function, args, host.env, &mut rec, None, None).map(Some);
        if result.is_err() {
            break;
        }
    }
    finish(rec, p.session, result)
}

/// Resumes the function of a line-granularity call at the line of
/// `snapshot`, with the snapshot's variables restored.
pub fn replay_from_snapshot(
    store: &StoreHandle,
    snapshot: SnapshotId,
    plan: &ReplayPlan,
    mut host: ReplayHost<'_>,
) -> Result<ReplayReport, ReplayError> {
    plan.validate()?;
    let (program, call_row, line, locals, mocks) = {
        let r = store.read();
        let snap = r.snapshot(snapshot)?.clone();
        let c = r.call(snap.call)?.clone();
        let original = load_program(&r, c.session)?;
        let program = apply_overrides(&r, original, plan)?;
        check_override_globals(&program, plan, &snap.globals, host.env)?;
        let mut line = snap.line;
        if plan.code_override.contains_key(&c.function) {
            let old = r.code_version(c.code)?;
            let new = &program.function(&c.function).expect("override target exists").def;
            let mapping = diff_code(&old.source_text, &new.source_text);
            let rel = snap.line + 1 - c.def_line;
            let mapped = mapping
                .map_a_to_b(rel)
                .ok_or(ReplayError::UnmappedLine { function: c.function.clone(), line: snap.line })?;
            line = mapped + new.line - 1;
        }
        let events: BTreeSet<SnapshotId> =
            r.call_snapshots(c.id).iter().filter(|s| s.ordinal >= snap.ordinal).map(|s| s.id).collect();
        let mocks = build_mocks(&r, &MockScope::CallFrom { call: c.id, snapshots: events }, &plan.mocked)?;
        let mut rb = Rebuilder::new(&r, host.env.ids(), host.serializers.clone());
        restore_globals(&mut rb, &snap.globals, plan, host.env)?;
        let locals = rebuild_slots(&mut rb, &snap.locals)?;
        (program, c, line, locals, mocks)
    };
    let p = start_session(
        store,
        call_row.session,
        call_row.ordinal,
        program,
        &host,
        format!("resume of {snapshot} at line {line}"),
    )?;
    let mut rec = recorder(store, &p, mocks, &mut host);
    let result = guest::call(&p.program, &call_row.function, vec![], host.env, &mut rec, Some(line), Some(&locals)).map(Some);
    finish(rec, p.session, result)
}
