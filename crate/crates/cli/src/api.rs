//! JSON shapes served to the explorer and printed by `trk inspect`.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value as Json};

use trk_core::compare::{event_json, view, AlignedCall, Facet, FacetView, StateRef};
use trk_core::guest::{Datum, Line};
use trk_core::store::{BlobId, CallId, CodeVersionId, SessionId, Store, StoreError, VersionRef};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiVariable {
    pub value: Json,
    /// Guest-literal rendering.
    pub rendered: String,
    pub version: VersionRef,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiHook {
    pub blob: BlobId,
    pub kind: String,
}

/// One recorded state with every facet materialized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiStateView {
    pub state: StateRef,
    pub kind: &'static str,
    pub session: SessionId,
    pub call: CallId,
    pub function: String,
    pub ordinal: u64,
    /// Line within the function source (1 = `def`), for snapshots.
    pub line_no: Option<Line>,
    pub file_line: Option<Line>,
    pub locals: BTreeMap<String, ApiVariable>,
    pub globals: BTreeMap<String, ApiVariable>,
    pub return_value: Option<Json>,
    pub events: Vec<Json>,
    pub hooks: BTreeMap<String, ApiHook>,
    pub code_version: CodeVersionId,
}

fn variables(values: BTreeMap<String, Datum>, refs: &BTreeMap<String, VersionRef>) -> BTreeMap<String, ApiVariable> {
    values
        .into_iter()
        .map(|(k, d)| {
            let version = refs[&k];
            (k, ApiVariable { value: d.to_json(), rendered: d.to_string(), version })
        })
        .collect()
}

pub fn state_view(store: &Store, state: StateRef) -> Result<ApiStateView, StoreError> {
    let (call_id, refs) = match state {
        StateRef::Call(c) => {
            let call = store.call(c)?;
            (c, (&call.locals, &call.globals))
        }
        StateRef::Snapshot(p) => {
            let s = store.snapshot(p)?;
            (s.call, (&s.locals, &s.globals))
        }
    };
    let call = store.call(call_id)?;
    let FacetView::Variables { locals, globals, return_value } = view(store, state, Facet::Variables)? else {
        unreachable!("variables facet")
    };
    let FacetView::Events(events) = view(store, state, Facet::Events)? else { unreachable!("events facet") };
    let FacetView::Code { code, line, file_line, .. } = view(store, state, Facet::Code)? else { unreachable!("code facet") };
    let hooks = call
        .hook_meta
        .iter()
        .map(|(name, id)| Ok((name.clone(), ApiHook { blob: *id, kind: store.hook_blob(*id)?.kind.clone() })))
        .collect::<Result<_, StoreError>>()?;
    Ok(ApiStateView {
        state,
        kind: match state {
            StateRef::Call(_) => "call",
            StateRef::Snapshot(_) => "snapshot",
        },
        session: call.session,
        call: call.id,
        function: call.function.clone(),
        ordinal: call.ordinal,
        line_no: line,
        file_line,
        locals: variables(locals, refs.0),
        globals: variables(globals, refs.1),
        return_value: return_value.map(|d| d.to_json()),
        events: events.iter().map(event_json).collect(),
        hooks,
        code_version: code,
    })
}

/// A call row plus its snapshot count, for timelines.
pub fn call_json(store: &Store, call: CallId) -> Result<Json, StoreError> {
    let c = store.call(call)?;
    let mut j = serde_json::to_value(c).expect("calls serialize");
    j["snapshots"] = json!(store.call_snapshots(call).len());
    Ok(j)
}

pub fn aligned_json(store: &Store, pair: &AlignedCall) -> Json {
    let side = |c: Option<CallId>| c.and_then(|c| store.call(c).ok()).map(|c| json!({ "call": c.id, "ordinal": c.ordinal }));
    json!({
        "a": side(pair.a),
        "b": side(pair.b),
        "gap": pair.has_gap(),
        "snapshots": pair.snapshots,
    })
}

/// Parses `c12`, `p3` (or `call:12`, `snapshot:3`) into a state.
pub fn parse_state(text: &str) -> Result<StateRef, String> {
    let (kind, id) = match text.split_once(':') {
        Some((k, id)) => (k, id),
        None if text.starts_with('c') => ("call", text),
        None if text.starts_with('p') => ("snapshot", text),
        None => return Err(format!("state {text:?} should look like c12 or p3")),
    };
    match kind {
        "call" | "c" => id.parse().map(StateRef::Call),
        "snapshot" | "p" => id.parse().map(StateRef::Snapshot),
        other => Err(format!("unknown state kind {other:?}")),
    }
}
