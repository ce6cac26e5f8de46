//! Line-delimited interchange stream: a manifest record followed by one
//! record per table row, each a JSON object with sorted keys.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Map, Value as Json};

use super::*;

pub const FORMAT_VERSION: u64 = 1;

const TABLE_ORDER: [&str; 10] = [
    "programs",
    "sessions",
    "code_versions",
    "hook_blobs",
    "payloads",
    "objects",
    "object_versions",
    "calls",
    "snapshots",
    "events",
];

fn record<T: Serialize>(table: &str, row: &T) -> String {
    let mut v = serde_json::to_value(row).expect("rows serialize");
    if let Json::Object(m) = &mut v {
        m.insert("table".into(), Json::String(table.into()));
    }
    v.to_string()
}

fn payload_json(p: &Payload) -> Json {
    let mut m = Map::new();
    m.insert("hash".into(), Json::String(p.hash.to_hex()));
    m.insert("kind".into(), serde_json::to_value(p.kind).expect("kind serializes"));
    match &p.blob_kind {
        Some(b) => {
            m.insert("blob_kind".into(), Json::String(b.clone()));
            m.insert("base64".into(), Json::String(B64.encode(&p.bytes)));
        }
        None => {
            m.insert("text".into(), Json::String(String::from_utf8_lossy(&p.bytes).into_owned()));
        }
    }
    Json::Object(m)
}

fn blob_json(b: &HookBlob) -> Json {
    json!({
        "id": b.id,
        "kind": b.kind,
        "content_hash": b.content_hash,
        "base64": B64.encode(&b.bytes),
    })
}

impl Store {
    fn table_lines(&self, table: &str) -> Vec<String> {
        match table {
            "programs" => self.programs.iter().map(|r| record(table, r)).collect(),
            "sessions" => self.sessions.iter().map(|r| record(table, r)).collect(),
            "code_versions" => self.code.iter().map(|r| record(table, r)).collect(),
            "hook_blobs" => self.hook_blobs.iter().map(|r| record(table, &blob_json(r))).collect(),
            "payloads" => self.payloads.iter().map(|r| record(table, &payload_json(r))).collect(),
            "objects" => self.objects.iter().map(|r| record(table, r)).collect(),
            "object_versions" => self.versions.iter().map(|r| record(table, r)).collect(),
            "calls" => self.calls.iter().map(|r| record(table, r)).collect(),
            "snapshots" => self.snapshots.iter().map(|r| record(table, r)).collect(),
            "events" => self.events.iter().map(|r| record(table, r)).collect(),
            other => unreachable!("unknown table {other}"),
        }
    }

    /// One digest per table over its exported records.
    pub fn table_digests(&self) -> BTreeMap<&'static str, ContentHash> {
        TABLE_ORDER
            .iter()
            .map(|t| {
                let mut text = String::new();
                for line in self.table_lines(t) {
                    text.push_str(&line);
                    text.push('\n');
                }
                (*t, content_hash("table", text.as_bytes()))
            })
            .collect()
    }

    /// Copy holding only `sessions`, their ancestors, and the rows they
    /// reach. Ids are renumbered densely in the original order.
    pub fn subset(&self, sessions: &[SessionId]) -> Result<Store, StoreError> {
        let mut keep_sessions = BTreeSet::new();
        for s in sessions {
            let mut cur = Some(*s);
            while let Some(id) = cur {
                if !keep_sessions.insert(id) {
                    break;
                }
                cur = self.session(id)?.parent_session;
            }
        }
        let calls: Vec<&MonitoredCall> = self.calls.iter().filter(|c| keep_sessions.contains(&c.session)).collect();
        let call_set: BTreeSet<CallId> = calls.iter().map(|c| c.id).collect();
        let snaps: Vec<&Snapshot> = self.snapshots.iter().filter(|s| call_set.contains(&s.call)).collect();
        let events: Vec<&EventRecord> = self.events.iter().filter(|e| call_set.contains(&e.call)).collect();

        let mut versions = BTreeSet::new();
        let mut stack: Vec<VersionRef> = Vec::new();
        for c in &calls {
            stack.extend(c.locals.values().chain(c.globals.values()).chain(c.return_value.iter()));
        }
        for s in &snaps {
            stack.extend(s.locals.values().chain(s.globals.values()));
        }
        for e in &events {
            stack.extend(e.args.iter().chain(std::iter::once(&e.return_value)));
        }
        while let Some(v) = stack.pop() {
            if versions.insert(v) {
                stack.extend(self.version(v)?.elements.iter().copied());
            }
        }
        let mut out = Store::default();
        let programs: BTreeSet<ContentHash> =
            keep_sessions.iter().map(|s| self.sessions[s.index()].program_hash).collect();
        for p in &self.programs {
            if programs.contains(&p.hash) {
                out.push_program(p.clone());
            }
        }
        let mut smap = HashMap::new();
        for s in &self.sessions {
            if keep_sessions.contains(&s.id) {
                let mut row = s.clone();
                row.id = SessionId(out.sessions.len() as u64);
                row.parent_session = s.parent_session.map(|p| smap[&p]);
                smap.insert(s.id, row.id);
                out.push_session(row);
            }
        }
        let used_code: BTreeSet<CodeVersionId> = calls.iter().map(|c| c.code).collect();
        let mut kmap = HashMap::new();
        for k in &self.code {
            if used_code.contains(&k.id) {
                let mut row = k.clone();
                row.id = CodeVersionId(out.code.len() as u64);
                kmap.insert(k.id, row.id);
                out.push_code(row);
            }
        }
        let used_blobs: BTreeSet<BlobId> = calls.iter().flat_map(|c| c.hook_meta.values().copied()).collect();
        let mut bmap = HashMap::new();
        for b in &self.hook_blobs {
            if used_blobs.contains(&b.id) {
                let mut row = b.clone();
                row.id = BlobId(out.hook_blobs.len() as u64);
                bmap.insert(b.id, row.id);
                out.push_blob(row);
            }
        }
        let hashes: BTreeSet<ContentHash> = versions.iter().map(|v| self.versions[v.index()].content_hash).collect();
        for p in &self.payloads {
            if hashes.contains(&p.hash) {
                out.push_payload(p.clone());
            }
        }
        let used_objects: BTreeSet<ObjectId> = versions.iter().filter_map(|v| self.versions[v.index()].object).collect();
        let mut cmap = HashMap::new();
        for (i, c) in calls.iter().enumerate() {
            cmap.insert(c.id, CallId(i as u64));
        }
        let mut omap = HashMap::new();
        for o in &self.objects {
            if used_objects.contains(&o.id) {
                let row = StoredObject {
                    id: ObjectId(out.objects.len() as u64),
                    session: smap[&o.session],
                    first_seen: cmap[&o.first_seen],
                };
                omap.insert(o.id, row.id);
                out.objects.push(row);
            }
        }
        let mut vmap = HashMap::new();
        for v in &self.versions {
            if versions.contains(&v.id) {
                let mut row = v.clone();
                row.id = VersionRef(out.versions.len() as u64);
                row.object = v.object.map(|o| omap[&o]);
                row.elements = v.elements.iter().map(|e| vmap[e]).collect();
                vmap.insert(v.id, row.id);
                out.push_version(row);
            }
        }
        let remap = |m: &BTreeMap<String, VersionRef>| m.iter().map(|(k, v)| (k.clone(), vmap[v])).collect();
        for c in &calls {
            let mut row = (*c).clone();
            row.id = cmap[&c.id];
            row.session = smap[&c.session];
            row.code = kmap[&c.code];
            row.parent_call = c.parent_call.map(|p| cmap[&p]);
            row.locals = remap(&c.locals);
            row.globals = remap(&c.globals);
            row.return_value = c.return_value.map(|v| vmap[&v]);
            row.hook_meta = c.hook_meta.iter().map(|(k, b)| (k.clone(), bmap[b])).collect();
            out.push_call(row);
        }
        let mut pmap = HashMap::new();
        for s in &snaps {
            let mut row = (*s).clone();
            row.id = SnapshotId(out.snapshots.len() as u64);
            row.call = cmap[&s.call];
            row.locals = remap(&s.locals);
            row.globals = remap(&s.globals);
            pmap.insert(s.id, row.id);
            out.push_snapshot_row(row);
        }
        for e in &events {
            let mut row = (*e).clone();
            row.id = EventId(out.events.len() as u64);
            row.call = cmap[&e.call];
            row.snapshot = e.snapshot.map(|s| pmap[&s]);
            row.args = e.args.iter().map(|a| vmap[a]).collect();
            row.return_value = vmap[&e.return_value];
            out.push_event_row(row);
        }
        Ok(out)
    }
}

/// Serializes the store (or a session subset of it) to the interchange
/// stream.
pub fn export_stream(store: &Store, sessions: Option<&[SessionId]>) -> String {
    let subset;
    let store = match sessions {
        Some(s) => {
            subset = store.subset(s).unwrap_or_default();
            &subset
        }
        None => store,
    };
    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "program_hash": store.programs.first().map(|p| p.hash.to_hex()),
        "tables": store.counts(),
    });
    let mut out = manifest.to_string();
    out.push('\n');
    for t in TABLE_ORDER {
        for line in store.table_lines(t) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

struct Importer {
    store: Store,
    record: usize,
    table: String,
}

impl Importer {
    fn err(&self, message: impl Into<String>) -> StoreError {
        StoreError::Corrupt { record: self.record, table: self.table.clone(), message: message.into() }
    }

    fn check_version(&self, v: VersionRef) -> Result<(), StoreError> {
        if v.index() >= self.store.versions.len() {
            return Err(self.err(format!("dangling version ref {v}")));
        }
        Ok(())
    }

    fn check_slots(&self, m: &BTreeMap<String, VersionRef>) -> Result<(), StoreError> {
        m.values().try_for_each(|v| self.check_version(*v))
    }

    fn check_id(&self, id: u64, len: usize) -> Result<(), StoreError> {
        if id as usize != len {
            return Err(self.err(format!("id {id} out of sequence (expected {len})")));
        }
        Ok(())
    }

    fn parse<T: serde::de::DeserializeOwned>(&self, j: Json) -> Result<T, StoreError> {
        serde_json::from_value(j).map_err(|e| self.err(e.to_string()))
    }

    fn field<'j>(&self, m: &'j Map<String, Json>, key: &str) -> Result<&'j str, StoreError> {
        m.get(key).and_then(Json::as_str).ok_or_else(|| self.err(format!("missing field {key}")))
    }

    fn decode(&self, b64: &str) -> Result<Vec<u8>, StoreError> {
        B64.decode(b64).map_err(|e| self.err(format!("bad base64: {e}")))
    }

    fn row(&mut self, table: &str, mut j: Json) -> Result<(), StoreError> {
        if let Json::Object(m) = &mut j {
            m.remove("table");
        }
        let s = &self.store;
        match table {
            "programs" => {
                let p: ProgramRecord = self.parse(j)?;
                if ProgramRecord::new(p.units.clone(), p.overrides.clone()).hash != p.hash {
                    return Err(self.err(format!("program {} does not match its hash", p.hash.short())));
                }
                self.store.push_program(p);
            }
            "sessions" => {
                let r: Session = self.parse(j)?;
                self.check_id(r.id.0, s.sessions.len())?;
                if r.parent_session.is_some() != r.parent_offset.is_some() {
                    return Err(self.err("parent_offset must be present exactly when parent_session is"));
                }
                if let Some(p) = r.parent_session {
                    if p >= r.id {
                        return Err(self.err(format!("dangling parent session {p}")));
                    }
                }
                if !s.idx.program.contains_key(&r.program_hash) {
                    return Err(self.err(format!("unknown program {}", r.program_hash)));
                }
                self.store.push_session(r);
            }
            "code_versions" => {
                let r: CodeVersion = self.parse(j)?;
                self.check_id(r.id.0, s.code.len())?;
                if content_hash("code", r.source_text.as_bytes()) != r.text_hash {
                    return Err(self.err(format!("code version {} does not match its hash", r.id)));
                }
                self.store.push_code(r);
            }
            "hook_blobs" => {
                let Json::Object(m) = &j else { return Err(self.err("record is not an object")) };
                let id: BlobId = self.parse(m.get("id").cloned().unwrap_or(Json::Null))?;
                self.check_id(id.0, s.hook_blobs.len())?;
                let kind = self.field(m, "kind")?.to_string();
                let bytes = self.decode(self.field(m, "base64")?)?;
                let hash = ContentHash::from_hex(self.field(m, "content_hash")?).map_err(|e| self.err(e))?;
                if content_hash(&format!("hook:{kind}"), &bytes) != hash {
                    return Err(self.err(format!("hook blob {id} does not match its hash")));
                }
                self.store.push_blob(HookBlob { id, kind, content_hash: hash, bytes });
            }
            "payloads" => {
                let Json::Object(m) = &j else { return Err(self.err("record is not an object")) };
                let hash = ContentHash::from_hex(self.field(m, "hash")?).map_err(|e| self.err(e))?;
                let kind: ValueKind = self.parse(m.get("kind").cloned().unwrap_or(Json::Null))?;
                let blob_kind = m.get("blob_kind").and_then(Json::as_str).map(str::to_string);
                let bytes = match &blob_kind {
                    Some(_) => self.decode(self.field(m, "base64")?)?,
                    None => self.field(m, "text")?.as_bytes().to_vec(),
                };
                if content_hash(&canonical::kind_tag(kind, blob_kind.as_deref()), &bytes) != hash {
                    return Err(self.err(format!("payload {} does not match its hash", hash.short())));
                }
                if s.idx.payload.contains_key(&hash) {
                    return Err(self.err(format!("duplicate payload {}", hash.short())));
                }
                self.store.push_payload(Payload { hash, kind, blob_kind, bytes });
            }
            "objects" => {
                let r: StoredObject = self.parse(j)?;
                self.check_id(r.id.0, s.objects.len())?;
                if r.session.index() >= s.sessions.len() {
                    return Err(self.err(format!("dangling session {}", r.session)));
                }
                self.store.objects.push(r);
            }
            "object_versions" => {
                let r: ObjectVersion = self.parse(j)?;
                self.check_id(r.id.0, s.versions.len())?;
                if let Some(o) = r.object {
                    if o.index() >= s.objects.len() {
                        return Err(self.err(format!("dangling object {o}")));
                    }
                }
                let p = s.payload(&r.content_hash).ok_or_else(|| self.err(format!("missing payload {}", r.content_hash)))?;
                if p.kind != r.kind {
                    return Err(self.err(format!("version {} kind differs from its payload", r.id)));
                }
                for e in &r.elements {
                    if *e >= r.id {
                        return Err(self.err(format!("dangling version ref {e}")));
                    }
                }
                if r.kind == ValueKind::Map && r.keys.len() != r.elements.len() {
                    return Err(self.err(format!("map version {} has mismatched keys", r.id)));
                }
                self.store.push_version(r);
            }
            "calls" => {
                let r: MonitoredCall = self.parse(j)?;
                self.check_id(r.id.0, s.calls.len())?;
                if r.session.index() >= s.sessions.len() {
                    return Err(self.err(format!("dangling session {}", r.session)));
                }
                let expected = s.idx.session_calls.get(&r.session).map_or(0, Vec::len) as u64;
                if r.ordinal != expected {
                    return Err(self.err(format!("call {} has ordinal {} (expected {expected})", r.id, r.ordinal)));
                }
                if r.code.index() >= s.code.len() {
                    return Err(self.err(format!("dangling code version {}", r.code)));
                }
                if let Some(p) = r.parent_call {
                    if p >= r.id {
                        return Err(self.err(format!("dangling parent call {p}")));
                    }
                }
                self.check_slots(&r.locals)?;
                self.check_slots(&r.globals)?;
                if let Some(v) = r.return_value {
                    self.check_version(v)?;
                }
                for b in r.hook_meta.values() {
                    if b.index() >= s.hook_blobs.len() {
                        return Err(self.err(format!("dangling hook blob {b}")));
                    }
                }
                self.store.push_call(r);
            }
            "snapshots" => {
                let r: Snapshot = self.parse(j)?;
                self.check_id(r.id.0, s.snapshots.len())?;
                if r.call.index() >= s.calls.len() {
                    return Err(self.err(format!("dangling call {}", r.call)));
                }
                let expected = s.idx.call_snapshots.get(&r.call).map_or(0, Vec::len) as u32;
                if r.ordinal != expected {
                    return Err(self.err(format!("snapshot {} has ordinal {} (expected {expected})", r.id, r.ordinal)));
                }
                self.check_slots(&r.locals)?;
                self.check_slots(&r.globals)?;
                self.store.push_snapshot_row(r);
            }
            "events" => {
                let r: EventRecord = self.parse(j)?;
                self.check_id(r.id.0, s.events.len())?;
                if r.call.index() >= s.calls.len() {
                    return Err(self.err(format!("dangling call {}", r.call)));
                }
                if let Some(p) = r.snapshot {
                    if s.snapshots.get(p.index()).is_none_or(|x| x.call != r.call) {
                        return Err(self.err(format!("dangling snapshot {p}")));
                    }
                }
                let expected = s.idx.call_events.get(&r.call).map_or(0, Vec::len) as u32;
                if r.seq != expected {
                    return Err(self.err(format!("event {} has seq {} (expected {expected})", r.id, r.seq)));
                }
                for v in r.args.iter().chain(std::iter::once(&r.return_value)) {
                    self.check_version(*v)?;
                }
                self.store.push_event_row(r);
            }
            other => return Err(self.err(format!("unknown table {other:?}"))),
        }
        Ok(())
    }
}

/// Parses an interchange stream, validating ids, hashes and references.
pub fn import_stream(text: &str) -> Result<Store, StoreError> {
    let mut imp = Importer { store: Store::default(), record: 0, table: "manifest".into() };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| imp.err("empty stream"))?;
    let manifest: Json = serde_json::from_str(first).map_err(|e| imp.err(e.to_string()))?;
    let version = manifest.get("format_version").and_then(Json::as_u64).ok_or_else(|| imp.err("missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let counts: TableCounts =
        serde_json::from_value(manifest.get("tables").cloned().unwrap_or(Json::Null)).map_err(|e| imp.err(e.to_string()))?;
    let mut order = 0usize;
    for (i, line) in lines.enumerate() {
        imp.record = i + 1;
        imp.table = "?".into();
        let j: Json = serde_json::from_str(line).map_err(|e| imp.err(e.to_string()))?;
        let table = j.get("table").and_then(Json::as_str).ok_or_else(|| imp.err("missing table"))?.to_string();
        imp.table = table.clone();
        let pos = TABLE_ORDER.iter().position(|t| *t == table).ok_or_else(|| imp.err(format!("unknown table {table:?}")))?;
        if pos < order {
            return Err(imp.err("records out of table order"));
        }
        order = pos;
        imp.row(&table, j)?;
    }
    imp.record = 0;
    imp.table = "objects".into();
    for o in &imp.store.objects {
        if o.first_seen.index() >= imp.store.calls.len() {
            return Err(imp.err(format!("object {} has dangling first_seen {}", o.id, o.first_seen)));
        }
    }
    imp.table = "manifest".into();
    if imp.store.counts() != counts {
        return Err(imp.err(format!("table counts {:?} do not match manifest {:?}", imp.store.counts(), counts)));
    }
    Ok(imp.store)
}
