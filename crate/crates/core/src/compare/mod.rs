//! Viewing, diffing and aligning recorded states.

mod diff;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::guest::{Datum, Line};
use crate::store::{
    BlobId, CallId, CodeVersionId, ContentHash, EventRecord, SessionId, SnapshotId, Store, StoreError, VersionRef,
};

pub use diff::{diff_code, LineMapping};

/// A recorded state: a call (its entry context) or a line snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum StateRef {
    Call(CallId),
    Snapshot(SnapshotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facet {
    Variables,
    Events,
    Code,
    Hooks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventView {
    pub callable: String,
    pub seq: u32,
    pub args: Vec<Datum>,
    pub return_value: Datum,
    pub mocked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FacetView {
    Variables {
        locals: BTreeMap<String, Datum>,
        globals: BTreeMap<String, Datum>,
        /// Return value, for calls that returned.
        return_value: Option<Datum>,
    },
    Events(Vec<EventView>),
    Code {
        code: CodeVersionId,
        function: String,
        source: String,
        /// Line within `source` (1 = `def` header), for snapshots.
        line: Option<Line>,
        /// Line in the program file, for snapshots.
        file_line: Option<Line>,
    },
    Hooks(BTreeMap<String, (String, Vec<u8>)>),
}

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot compare a call state with a line state")]
    GranularityMismatch,
}

fn state_call(store: &Store, s: StateRef) -> Result<CallId, StoreError> {
    Ok(match s {
        StateRef::Call(c) => store.call(c)?.id,
        StateRef::Snapshot(p) => store.snapshot(p)?.call,
    })
}

type Slots<'s> = (&'s BTreeMap<String, VersionRef>, &'s BTreeMap<String, VersionRef>);

fn state_slots(store: &Store, s: StateRef) -> Result<Slots<'_>, StoreError> {
    Ok(match s {
        StateRef::Call(c) => {
            let c = store.call(c)?;
            (&c.locals, &c.globals)
        }
        StateRef::Snapshot(p) => {
            let p = store.snapshot(p)?;
            (&p.locals, &p.globals)
        }
    })
}

fn state_events(store: &Store, s: StateRef) -> Result<Vec<&EventRecord>, StoreError> {
    Ok(match s {
        StateRef::Call(c) => {
            store.call(c)?;
            store.call_events(c)
        }
        StateRef::Snapshot(p) => {
            store.snapshot(p)?;
            store.snapshot_events(p)
        }
    })
}

fn state_hooks(store: &Store, s: StateRef) -> Result<&BTreeMap<String, BlobId>, StoreError> {
    Ok(&store.call(state_call(store, s)?)?.hook_meta)
}

/// Materializes one facet of a state.
pub fn view(store: &Store, state: StateRef, facet: Facet) -> Result<FacetView, StoreError> {
    Ok(match facet {
        Facet::Variables => {
            let (locals, globals) = state_slots(store, state)?;
            let return_value = match state {
                StateRef::Call(c) => store.call(c)?.return_value.map(|v| store.materialize(v)).transpose()?,
                StateRef::Snapshot(_) => None,
            };
            FacetView::Variables {
                locals: store.materialize_map(locals)?,
                globals: store.materialize_map(globals)?,
                return_value,
            }
        }
        Facet::Events => FacetView::Events(
            state_events(store, state)?
                .into_iter()
                .map(|e| {
                    Ok(EventView {
                        callable: e.callable.clone(),
                        seq: e.seq,
                        args: e.args.iter().map(|a| store.materialize(*a)).collect::<Result<_, StoreError>>()?,
                        return_value: store.materialize(e.return_value)?,
                        mocked: e.mocked,
                    })
                })
                .collect::<Result<_, StoreError>>()?,
        ),
        Facet::Code => {
            let call = store.call(state_call(store, state)?)?;
            let cv = store.code_version(call.code)?;
            let file_line = match state {
                StateRef::Snapshot(p) => Some(store.snapshot(p)?.line),
                StateRef::Call(_) => None,
            };
            FacetView::Code {
                code: cv.id,
                function: cv.function_name.clone(),
                source: cv.source_text.clone(),
                line: file_line.map(|l| l + 1 - call.def_line),
                file_line,
            }
        }
        Facet::Hooks => FacetView::Hooks(
            state_hooks(store, state)?
                .iter()
                .map(|(name, b)| {
                    let blob = store.hook_blob(*b)?;
                    Ok((name.clone(), (blob.kind.clone(), blob.bytes.clone())))
                })
                .collect::<Result<_, StoreError>>()?,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChangedVar {
    pub name: String,
    pub hash_a: ContentHash,
    pub hash_b: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct VariableDiff {
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub changed: Vec<ChangedVar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventDiff {
    pub count_a: usize,
    pub count_b: usize,
    /// First per-callable position where the recorded invocations differ.
    pub first_divergence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CodeDiff {
    pub code_a: CodeVersionId,
    pub code_b: CodeVersionId,
    pub mapping: LineMapping,
}

impl CodeDiff {
    pub fn changed(&self) -> bool {
        !self.mapping.unmatched_a.is_empty() || !self.mapping.unmatched_b.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum HookDiff {
    Equal,
    Differs { hash_a: Option<ContentHash>, hash_b: Option<ContentHash> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateDiff {
    pub a: StateRef,
    pub b: StateRef,
    pub variables: VariableDiff,
    pub events: BTreeMap<String, EventDiff>,
    pub code: CodeDiff,
    pub hooks: BTreeMap<String, HookDiff>,
}

impl StateDiff {
    pub fn is_empty(&self) -> bool {
        self.variables == VariableDiff::default()
            && self.events.values().all(|e| e.first_divergence.is_none())
            && !self.code.changed()
            && self.hooks.values().all(|h| *h == HookDiff::Equal)
    }

    /// Every variable name in any bucket.
    pub fn touched(&self) -> BTreeSet<String> {
        let v = &self.variables;
        v.added.iter().chain(&v.removed).cloned().chain(v.changed.iter().map(|c| c.name.clone())).collect()
    }

    pub fn changed_names(&self) -> BTreeSet<String> {
        self.variables.changed.iter().map(|c| c.name.clone()).collect()
    }

    pub fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("diffs serialize")
    }
}

/// Name to content hash, locals shadowing globals.
fn visible(store: &Store, s: StateRef) -> Result<BTreeMap<String, ContentHash>, StoreError> {
    let (locals, globals) = state_slots(store, s)?;
    let mut out = BTreeMap::new();
    for (k, v) in globals.iter().chain(locals) {
        out.insert(k.clone(), store.version_hash(*v)?);
    }
    Ok(out)
}

fn event_keys(store: &Store, events: &[&EventRecord]) -> Result<BTreeMap<String, Vec<Vec<ContentHash>>>, StoreError> {
    let mut out: BTreeMap<String, Vec<Vec<ContentHash>>> = BTreeMap::new();
    for e in events {
        let mut key = e.args.iter().map(|a| store.version_hash(*a)).collect::<Result<Vec<_>, _>>()?;
        key.push(store.version_hash(e.return_value)?);
        out.entry(e.callable.clone()).or_default().push(key);
    }
    Ok(out)
}

/// Compares two states of the same kind.
pub fn compare_states(store: &Store, a: StateRef, b: StateRef) -> Result<StateDiff, CompareError> {
    if matches!(a, StateRef::Call(_)) != matches!(b, StateRef::Call(_)) {
        return Err(CompareError::GranularityMismatch);
    }
    let (va, vb) = (visible(store, a)?, visible(store, b)?);
    let mut variables = VariableDiff::default();
    for (k, ha) in &va {
        match vb.get(k) {
            None => {
                variables.removed.insert(k.clone());
            }
            Some(hb) if hb != ha => variables.changed.push(ChangedVar { name: k.clone(), hash_a: *ha, hash_b: *hb }),
            Some(_) => {}
        }
    }
    variables.added = vb.keys().filter(|k| !va.contains_key(*k)).cloned().collect();

    let (ea, eb) = (event_keys(store, &state_events(store, a)?)?, event_keys(store, &state_events(store, b)?)?);
    let names: BTreeSet<&String> = ea.keys().chain(eb.keys()).collect();
    let empty = Vec::new();
    let events = names
        .into_iter()
        .map(|n| {
            let (xa, xb) = (ea.get(n).unwrap_or(&empty), eb.get(n).unwrap_or(&empty));
            let first = xa.iter().zip(xb).position(|(p, q)| p != q);
            let first_divergence = first.or((xa.len() != xb.len()).then(|| xa.len().min(xb.len())));
            (n.clone(), EventDiff { count_a: xa.len(), count_b: xb.len(), first_divergence })
        })
        .collect();

    let (ca, cb) = (store.call(state_call(store, a)?)?, store.call(state_call(store, b)?)?);
    let (ka, kb) = (store.code_version(ca.code)?, store.code_version(cb.code)?);
    let code = CodeDiff { code_a: ka.id, code_b: kb.id, mapping: diff_code(&ka.source_text, &kb.source_text) };

    let (ha, hb) = (state_hooks(store, a)?, state_hooks(store, b)?);
    let hook_names: BTreeSet<&String> = ha.keys().chain(hb.keys()).collect();
    let mut hooks = BTreeMap::new();
    for n in hook_names {
        let x = ha.get(n).map(|id| store.hook_blob(*id).map(|h| h.content_hash)).transpose()?;
        let y = hb.get(n).map(|id| store.hook_blob(*id).map(|h| h.content_hash)).transpose()?;
        hooks.insert(n.clone(), if x == y { HookDiff::Equal } else { HookDiff::Differs { hash_a: x, hash_b: y } });
    }
    Ok(StateDiff { a, b, variables, events, code, hooks })
}

/// Calls of a session from `start` (inclusive) to `end` (inclusive, or the
/// last call).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionWindow {
    pub session: SessionId,
    pub start: u64,
    pub end: Option<u64>,
}

impl SessionWindow {
    pub fn whole(session: SessionId) -> SessionWindow {
        SessionWindow { session, start: 0, end: None }
    }
}

/// Two aligned items; `None` on one side is a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AlignedPair<T> {
    pub a: Option<T>,
    pub b: Option<T>,
}

impl<T> AlignedPair<T> {
    pub fn is_gap(&self) -> bool {
        self.a.is_none() || self.b.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignedCall {
    pub a: Option<CallId>,
    pub b: Option<CallId>,
    /// Snapshot pairing inside the two calls (line granularity only).
    pub snapshots: Vec<AlignedPair<SnapshotId>>,
}

impl AlignedCall {
    pub fn has_gap(&self) -> bool {
        self.a.is_none() || self.b.is_none() || self.snapshots.iter().any(AlignedPair::is_gap)
    }
}

fn window_calls(store: &Store, w: &SessionWindow) -> Result<Vec<CallId>, StoreError> {
    store.session(w.session)?;
    Ok(store
        .session_calls(w.session)
        .into_iter()
        .filter(|c| c.ordinal >= w.start && w.end.is_none_or(|e| c.ordinal <= e))
        .map(|c| c.id)
        .collect())
}

/// Pairs calls by ordinal offset from the window starts and, inside paired
/// line-granularity calls, snapshots by (mapped line, occurrence).
pub fn align(store: &Store, a: &SessionWindow, b: &SessionWindow) -> Result<Vec<AlignedCall>, StoreError> {
    let (ca, cb) = (window_calls(store, a)?, window_calls(store, b)?);
    let n = ca.len().max(cb.len());
    (0..n)
        .map(|i| {
            let (x, y) = (ca.get(i).copied(), cb.get(i).copied());
            let snapshots = match (x, y) {
                (Some(x), Some(y)) => align_snapshots(store, x, y)?,
                _ => vec![],
            };
            Ok(AlignedCall { a: x, b: y, snapshots })
        })
        .collect()
}

/// Snapshot pairing between two calls of the same function.
pub fn align_snapshots(store: &Store, a: CallId, b: CallId) -> Result<Vec<AlignedPair<SnapshotId>>, StoreError> {
    let (call_a, call_b) = (store.call(a)?, store.call(b)?);
    let (sa, sb) = (store.call_snapshots(a), store.call_snapshots(b));
    if sa.is_empty() && sb.is_empty() {
        return Ok(vec![]);
    }
    let mapping = diff_code(&store.code_version(call_a.code)?.source_text, &store.code_version(call_b.code)?.source_text);
    let mut occurrences: HashMap<Line, usize> = HashMap::new();
    let mut b_keys: HashMap<(Line, usize), usize> = HashMap::new();
    for (j, s) in sb.iter().enumerate() {
        let rel = s.line + 1 - call_b.def_line;
        let k = occurrences.entry(rel).or_default();
        b_keys.insert((rel, *k), j);
        *k += 1;
    }
    occurrences.clear();
    let mut partner: Vec<Option<usize>> = Vec::with_capacity(sa.len());
    let mut taken = vec![false; sb.len()];
    for s in &sa {
        let rel = s.line + 1 - call_a.def_line;
        let k = occurrences.entry(rel).or_default();
        let j = mapping.map_a_to_b(rel).and_then(|lb| b_keys.get(&(lb, *k)).copied());
        *k += 1;
        if let Some(j) = j {
            taken[j] = true;
        }
        partner.push(j);
    }
    let mut out = Vec::new();
    let mut next_b = 0;
    for (i, p) in partner.iter().enumerate() {
        match p {
            Some(j) => {
                while next_b < *j {
                    if !taken[next_b] {
                        out.push(AlignedPair { a: None, b: Some(sb[next_b].id) });
                    }
                    next_b += 1;
                }
                next_b = next_b.max(j + 1);
                out.push(AlignedPair { a: Some(sa[i].id), b: Some(sb[*j].id) });
            }
            None => out.push(AlignedPair { a: Some(sa[i].id), b: None }),
        }
    }
    for (j, s) in sb.iter().enumerate().skip(next_b) {
        if !taken[j] {
            out.push(AlignedPair { a: None, b: Some(s.id) });
        }
    }
    Ok(out)
}

/// A snapshot and the values visible there.
pub type LineVisit = (SnapshotId, BTreeMap<String, Datum>);

/// Every visit of `line` (relative to the `def` header) in a call.
pub fn line_timeline(store: &Store, call: CallId, line: Line) -> Result<Vec<LineVisit>, StoreError> {
    let c = store.call(call)?;
    store
        .call_snapshots(call)
        .into_iter()
        .filter(|s| s.line + 1 - c.def_line == line)
        .map(|s| {
            let mut vars = store.materialize_map(&s.globals)?;
            vars.extend(store.materialize_map(&s.locals)?);
            Ok((s.id, vars))
        })
        .collect()
}

/// JSON form of a datum map, for service responses.
pub fn datum_map_json(m: &BTreeMap<String, Datum>) -> Json {
    Json::Object(m.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
}

pub fn event_json(e: &EventView) -> Json {
    json!({
        "callable": e.callable,
        "seq": e.seq,
        "args": e.args.iter().map(Datum::to_json).collect::<Vec<_>>(),
        "return": e.return_value.to_json(),
        "mocked": e.mocked,
    })
}
