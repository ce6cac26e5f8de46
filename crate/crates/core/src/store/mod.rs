//! Deduplicating trace database.
//!
//! Tables live in memory as row vectors whose ids equal their positions.
//! The on-disk form is the line-delimited interchange stream produced by
//! [`export_stream`], so a persisted file and an export are the same bytes.

mod canonical;
mod query;
mod stream;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use crate::guest::{Datum, FunctionDef, Line};
use crate::monitor::MonitorSpec;

pub use canonical::{content_hash, ContentHash, ValueKind};
pub use query::{CallingContext, TraceStep};
pub use stream::{export_stream, import_stream, FORMAT_VERSION};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                let digits = s.strip_prefix($prefix).unwrap_or(s);
                digits.parse().map($name).map_err(|_| format!("invalid {} id {s:?}", stringify!($name)))
            }
        }
    };
}

id_type!(SessionId, "s");
id_type!(CallId, "c");
id_type!(SnapshotId, "p");
id_type!(EventId, "e");
id_type!(ObjectId, "o");
id_type!(VersionRef, "v");
id_type!(CodeVersionId, "k");
id_type!(BlobId, "b");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum SessionStatus {
    Recording,
    Complete,
    /// The run stopped with an error; `ordinal` is the failing call if the
    /// error happened inside one.
    Failed { ordinal: Option<u64>, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub label: String,
    /// Milliseconds since the Unix epoch.
    pub started_at: u64,
    pub program_hash: ContentHash,
    pub parent_session: Option<SessionId>,
    pub parent_offset: Option<u64>,
    pub specs: Vec<MonitorSpec>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoredCall {
    pub id: CallId,
    pub session: SessionId,
    pub ordinal: u64,
    pub function: String,
    pub code: CodeVersionId,
    /// Absolute line of the `def` header in the program file.
    pub def_line: Line,
    pub parent_call: Option<CallId>,
    pub locals: BTreeMap<String, VersionRef>,
    pub globals: BTreeMap<String, VersionRef>,
    pub return_value: Option<VersionRef>,
    /// Hook name to blob.
    pub hook_meta: BTreeMap<String, BlobId>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: SnapshotId,
    pub call: CallId,
    pub ordinal: u32,
    /// Absolute line in the program file.
    pub line: Line,
    pub locals: BTreeMap<String, VersionRef>,
    pub globals: BTreeMap<String, VersionRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: EventId,
    pub call: CallId,
    /// Latest snapshot of `call` when the event happened (line granularity).
    pub snapshot: Option<SnapshotId>,
    pub callable: String,
    /// Position among all events of `call`.
    pub seq: u32,
    pub args: Vec<VersionRef>,
    pub return_value: VersionRef,
    /// Served from a mock queue rather than the live callable.
    pub mocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredObject {
    pub id: ObjectId,
    pub session: SessionId,
    pub first_seen: CallId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectVersion {
    pub id: VersionRef,
    pub object: Option<ObjectId>,
    pub content_hash: ContentHash,
    pub kind: ValueKind,
    /// Element versions of a list, or of a map in key order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub elements: Vec<VersionRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keys: Vec<String>,
}

/// Canonical bytes shared by every version with the same content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub hash: ContentHash,
    pub kind: ValueKind,
    pub blob_kind: Option<String>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeVersion {
    pub id: CodeVersionId,
    pub function_name: String,
    pub source_text: String,
    pub text_hash: ContentHash,
    /// Statement lines, numbered from 1 at the `def` header.
    pub line_map: BTreeSet<Line>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookBlob {
    pub id: BlobId,
    pub kind: String,
    pub content_hash: ContentHash,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSource {
    pub path: String,
    pub source: String,
}

/// Full program text of a session, so replays never depend on files that
/// may have changed since recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramRecord {
    pub hash: ContentHash,
    pub units: Vec<UnitSource>,
    /// Function name to replacement text.
    pub overrides: BTreeMap<String, String>,
}

impl ProgramRecord {
    pub fn new(units: Vec<UnitSource>, overrides: BTreeMap<String, String>) -> ProgramRecord {
        let mut text = String::new();
        for u in &units {
            text.push_str(&format!("unit {}\n{}\n{}\n", u.path.len(), u.path, u.source.len()));
            text.push_str(&u.source);
        }
        for (name, src) in &overrides {
            text.push_str(&format!("override {}\n{}\n{}\n", name.len(), name, src.len()));
            text.push_str(src);
        }
        ProgramRecord { hash: content_hash("program", text.as_bytes()), units, overrides }
    }

    pub fn from_program(program: &crate::guest::Program) -> ProgramRecord {
        let units = program.units.iter().map(|u| UnitSource { path: u.path.clone(), source: u.source.clone() }).collect();
        ProgramRecord::new(units, BTreeMap::new())
    }

    /// Parses the units and applies the overrides.
    pub fn load(&self) -> Result<crate::guest::Program, crate::guest::ProgramError> {
        let units =
            self.units.iter().map(|u| crate::guest::parse(&u.source, &u.path)).collect::<Result<Vec<_>, _>>()?;
        let mut program = crate::guest::lower_units(units)?;
        for (name, text) in &self.overrides {
            program = program.with_override(name, text)?;
        }
        Ok(program)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown call {0}")]
    UnknownCall(CallId),
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(SnapshotId),
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("unknown version {0}")]
    UnknownVersion(VersionRef),
    #[error("unknown code version {0}")]
    UnknownCode(CodeVersionId),
    #[error("unknown hook blob {0}")]
    UnknownBlob(BlobId),
    #[error("unknown program {0}")]
    UnknownProgram(ContentHash),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("unsupported store format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("corrupt store: record {record} ({table}): {message}")]
    Corrupt { record: usize, table: String, message: String },
}

#[derive(Debug, Default, Clone)]
struct Indexes {
    payload: HashMap<ContentHash, usize>,
    free_version: HashMap<ContentHash, VersionRef>,
    object_latest: HashMap<ObjectId, VersionRef>,
    object_hash: HashMap<(ObjectId, ContentHash), VersionRef>,
    code: HashMap<(String, ContentHash), CodeVersionId>,
    blob: HashMap<ContentHash, BlobId>,
    program: HashMap<ContentHash, usize>,
    session_calls: HashMap<SessionId, Vec<CallId>>,
    call_snapshots: HashMap<CallId, Vec<SnapshotId>>,
    call_events: HashMap<CallId, Vec<EventId>>,
    snapshot_events: HashMap<SnapshotId, Vec<EventId>>,
}

#[derive(Debug, Default, Clone)]
pub struct Store {
    sessions: Vec<Session>,
    calls: Vec<MonitoredCall>,
    snapshots: Vec<Snapshot>,
    events: Vec<EventRecord>,
    objects: Vec<StoredObject>,
    versions: Vec<ObjectVersion>,
    payloads: Vec<Payload>,
    code: Vec<CodeVersion>,
    hook_blobs: Vec<HookBlob>,
    programs: Vec<ProgramRecord>,
    idx: Indexes,
    location: Option<PathBuf>,
}

/// Row counts per table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableCounts {
    pub sessions: u64,
    pub calls: u64,
    pub snapshots: u64,
    pub events: u64,
    pub objects: u64,
    pub object_versions: u64,
    pub payloads: u64,
    pub code_versions: u64,
    pub hook_blobs: u64,
    pub programs: u64,
}

pub enum Location<'a> {
    InMemory,
    Path(&'a Path),
}

/// Opens (or prepares) a store. A path that does not exist yet gives an
/// empty store bound to that path; its directory must exist.
pub fn open_store(location: Location<'_>) -> Result<Store, StoreError> {
    match location {
        Location::InMemory => Ok(Store::default()),
        Location::Path(path) => {
            if path.exists() {
                let text =
                    std::fs::read_to_string(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e })?;
                let mut store = import_stream(&text)?;
                store.location = Some(path.to_path_buf());
                Ok(store)
            } else {
                let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                if !dir.is_dir() {
                    return Err(StoreError::MissingDirectory(dir.to_path_buf()));
                }
                Ok(Store { location: Some(path.to_path_buf()), ..Store::default() })
            }
        }
    }
}

impl Store {
    pub fn location(&self) -> Option<&Path> {
        self.location.as_deref()
    }

    /// Writes the store to `path` (or its bound location) atomically.
    pub fn persist(&self, path: Option<&Path>) -> Result<(), StoreError> {
        let path = path.or(self.location.as_deref()).ok_or_else(|| StoreError::Io {
            path: PathBuf::from("<in-memory>"),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "store has no location"),
        })?;
        let io = |e| StoreError::Io { path: path.to_path_buf(), source: e };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(StoreError::MissingDirectory(dir.to_path_buf()));
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, export_stream(self, None)).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn counts(&self) -> TableCounts {
        TableCounts {
            sessions: self.sessions.len() as u64,
            calls: self.calls.len() as u64,
            snapshots: self.snapshots.len() as u64,
            events: self.events.len() as u64,
            objects: self.objects.len() as u64,
            object_versions: self.versions.len() as u64,
            payloads: self.payloads.len() as u64,
            code_versions: self.code.len() as u64,
            hook_blobs: self.hook_blobs.len() as u64,
            programs: self.programs.len() as u64,
        }
    }

    // ----- writers -----

    pub fn intern_program(&mut self, record: ProgramRecord) -> ContentHash {
        let hash = record.hash;
        if !self.idx.program.contains_key(&hash) {
            self.push_program(record);
        }
        hash
    }

    pub fn create_session(
        &mut self,
        label: &str,
        program_hash: ContentHash,
        parent: Option<(SessionId, u64)>,
        specs: Vec<MonitorSpec>,
    ) -> SessionId {
        let id = SessionId(self.sessions.len() as u64);
        let started_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.push_session(Session {
            id,
            label: label.to_string(),
            started_at,
            program_hash,
            parent_session: parent.map(|p| p.0),
            parent_offset: parent.map(|p| p.1),
            specs,
            status: SessionStatus::Recording,
        });
        id
    }

    pub fn set_session_status(&mut self, id: SessionId, status: SessionStatus) -> Result<(), StoreError> {
        self.sessions.get_mut(id.index()).ok_or(StoreError::UnknownSession(id))?.status = status;
        Ok(())
    }

    pub fn next_call_id(&self) -> CallId {
        CallId(self.calls.len() as u64)
    }

    pub fn push_call(&mut self, call: MonitoredCall) -> CallId {
        assert_eq!(call.id.index(), self.calls.len(), "call ids are dense");
        self.idx.session_calls.entry(call.session).or_default().push(call.id);
        let id = call.id;
        self.calls.push(call);
        id
    }

    /// In-place update of a call row owned by the active writer.
    pub fn call_mut(&mut self, id: CallId) -> Option<&mut MonitoredCall> {
        self.calls.get_mut(id.index())
    }

    pub fn push_snapshot(&mut self, call: CallId, line: Line, locals: BTreeMap<String, VersionRef>, globals: BTreeMap<String, VersionRef>) -> SnapshotId {
        let id = SnapshotId(self.snapshots.len() as u64);
        let list = self.idx.call_snapshots.entry(call).or_default();
        let ordinal = list.len() as u32;
        list.push(id);
        self.snapshots.push(Snapshot { id, call, ordinal, line, locals, globals });
        id
    }

    pub fn push_event(
        &mut self,
        call: CallId,
        snapshot: Option<SnapshotId>,
        callable: &str,
        args: Vec<VersionRef>,
        return_value: VersionRef,
        mocked: bool,
    ) -> EventId {
        let id = EventId(self.events.len() as u64);
        let list = self.idx.call_events.entry(call).or_default();
        let seq = list.len() as u32;
        list.push(id);
        if let Some(s) = snapshot {
            self.idx.snapshot_events.entry(s).or_default().push(id);
        }
        self.events.push(EventRecord { id, call, snapshot, callable: callable.to_string(), seq, args, return_value, mocked });
        id
    }

    pub fn new_object(&mut self, session: SessionId, first_seen: CallId) -> ObjectId {
        let id = ObjectId(self.objects.len() as u64);
        self.objects.push(StoredObject { id, session, first_seen });
        id
    }

    pub fn intern_code(&mut self, def: &FunctionDef) -> CodeVersionId {
        let text_hash = content_hash("code", def.source_text.as_bytes());
        let key = (def.name.clone(), text_hash);
        if let Some(id) = self.idx.code.get(&key) {
            return *id;
        }
        let id = CodeVersionId(self.code.len() as u64);
        let line_map = def.statement_lines().into_iter().map(|l| l + 1 - def.line).collect();
        self.push_code(CodeVersion {
            id,
            function_name: def.name.clone(),
            source_text: def.source_text.clone(),
            text_hash,
            line_map,
        });
        id
    }

    pub fn intern_hook_blob(&mut self, kind: &str, bytes: Vec<u8>) -> BlobId {
        let hash = content_hash(&format!("hook:{kind}"), &bytes);
        if let Some(id) = self.idx.blob.get(&hash) {
            return *id;
        }
        let id = BlobId(self.hook_blobs.len() as u64);
        self.push_blob(HookBlob { id, kind: kind.to_string(), content_hash: hash, bytes });
        id
    }

    fn intern_payload(&mut self, kind: ValueKind, blob_kind: Option<&str>, bytes: Vec<u8>) -> ContentHash {
        let hash = content_hash(&canonical::kind_tag(kind, blob_kind), &bytes);
        if !self.idx.payload.contains_key(&hash) {
            self.push_payload(Payload { hash, kind, blob_kind: blob_kind.map(str::to_string), bytes });
        }
        hash
    }

    fn intern_version(
        &mut self,
        object: Option<ObjectId>,
        kind: ValueKind,
        blob_kind: Option<&str>,
        bytes: Vec<u8>,
        elements: Vec<VersionRef>,
        keys: Vec<String>,
    ) -> VersionRef {
        let hash = content_hash(&canonical::kind_tag(kind, blob_kind), &bytes);
        match object {
            None => {
                if let Some(v) = self.idx.free_version.get(&hash) {
                    return *v;
                }
            }
            Some(o) => {
                if let Some(v) = self.idx.object_hash.get(&(o, hash)).copied() {
                    self.idx.object_latest.insert(o, v);
                    return v;
                }
            }
        }
        self.intern_payload(kind, blob_kind, bytes);
        let id = VersionRef(self.versions.len() as u64);
        self.push_version(ObjectVersion { id, object, content_hash: hash, kind, elements, keys });
        id
    }

    pub fn intern_int(&mut self, i: i64) -> VersionRef {
        self.intern_version(None, ValueKind::Int, None, canonical::int_payload(i), vec![], vec![])
    }

    pub fn intern_float(&mut self, f: f64) -> VersionRef {
        self.intern_version(None, ValueKind::Float, None, canonical::float_payload(f), vec![], vec![])
    }

    pub fn intern_bool(&mut self, b: bool) -> VersionRef {
        self.intern_version(None, ValueKind::Bool, None, canonical::bool_payload(b), vec![], vec![])
    }

    pub fn intern_str(&mut self, s: &str) -> VersionRef {
        self.intern_version(None, ValueKind::Str, None, s.as_bytes().to_vec(), vec![], vec![])
    }

    pub fn intern_nil(&mut self) -> VersionRef {
        self.intern_version(None, ValueKind::Nil, None, canonical::NIL_PAYLOAD.to_vec(), vec![], vec![])
    }

    /// Placeholder for a value that was not captured.
    pub fn intern_skipped(&mut self, reason: &str) -> VersionRef {
        self.intern_version(None, ValueKind::Skipped, None, reason.as_bytes().to_vec(), vec![], vec![])
    }

    pub fn intern_list(&mut self, object: Option<ObjectId>, elements: Vec<VersionRef>) -> VersionRef {
        let hashes: Vec<ContentHash> = elements.iter().map(|e| self.versions[e.index()].content_hash).collect();
        let payload = canonical::list_payload(&hashes);
        self.intern_version(object, ValueKind::List, None, payload, elements, vec![])
    }

    /// `entries` must be sorted by key.
    pub fn intern_map(&mut self, object: Option<ObjectId>, entries: Vec<(String, VersionRef)>) -> VersionRef {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        let payload =
            canonical::map_payload(entries.iter().map(|(k, v)| (k.as_str(), self.versions[v.index()].content_hash)));
        let (keys, elements) = entries.into_iter().unzip();
        self.intern_version(object, ValueKind::Map, None, payload, elements, keys)
    }

    pub fn intern_blob(&mut self, object: Option<ObjectId>, blob_kind: &str, bytes: Vec<u8>) -> VersionRef {
        self.intern_version(object, ValueKind::Blob, Some(blob_kind), bytes, vec![], vec![])
    }

    /// Interns an identity-free value tree.
    pub fn intern_datum(&mut self, d: &Datum) -> VersionRef {
        match d {
            Datum::Int(i) => self.intern_int(*i),
            Datum::Float(f) => self.intern_float(*f),
            Datum::Bool(b) => self.intern_bool(*b),
            Datum::Str(s) => self.intern_str(s),
            Datum::Nil => self.intern_nil(),
            Datum::List(items) => {
                let refs = items.iter().map(|x| self.intern_datum(x)).collect();
                self.intern_list(None, refs)
            }
            Datum::Map(entries) => {
                let refs = entries.iter().map(|(k, x)| (k.clone(), self.intern_datum(x))).collect();
                self.intern_map(None, refs)
            }
            Datum::Blob { kind, bytes } => self.intern_blob(None, kind, bytes.clone()),
            Datum::Skipped(reason) => self.intern_skipped(reason),
        }
    }

    // ----- raw row insertion (also used by import) -----

    fn push_session(&mut self, s: Session) {
        self.sessions.push(s);
    }

    fn push_program(&mut self, p: ProgramRecord) {
        self.idx.program.insert(p.hash, self.programs.len());
        self.programs.push(p);
    }

    fn push_code(&mut self, c: CodeVersion) {
        self.idx.code.insert((c.function_name.clone(), c.text_hash), c.id);
        self.code.push(c);
    }

    fn push_blob(&mut self, b: HookBlob) {
        self.idx.blob.insert(b.content_hash, b.id);
        self.hook_blobs.push(b);
    }

    fn push_payload(&mut self, p: Payload) {
        self.idx.payload.insert(p.hash, self.payloads.len());
        self.payloads.push(p);
    }

    fn push_version(&mut self, v: ObjectVersion) {
        match v.object {
            None => {
                self.idx.free_version.entry(v.content_hash).or_insert(v.id);
            }
            Some(o) => {
                self.idx.object_hash.insert((o, v.content_hash), v.id);
                self.idx.object_latest.insert(o, v.id);
            }
        }
        self.versions.push(v);
    }

    fn push_snapshot_row(&mut self, s: Snapshot) {
        self.idx.call_snapshots.entry(s.call).or_default().push(s.id);
        self.snapshots.push(s);
    }

    fn push_event_row(&mut self, e: EventRecord) {
        self.idx.call_events.entry(e.call).or_default().push(e.id);
        if let Some(s) = e.snapshot {
            self.idx.snapshot_events.entry(s).or_default().push(e.id);
        }
        self.events.push(e);
    }
}

/// Shared handle: one writer at a time, any number of readers.
#[derive(Debug, Clone, Default)]
pub struct StoreHandle(Arc<RwLock<Store>>);

pub type StoreWriteGuard = parking_lot::lock_api::ArcRwLockWriteGuard<parking_lot::RawRwLock, Store>;

impl StoreHandle {
    pub fn new(store: Store) -> StoreHandle {
        StoreHandle(Arc::new(RwLock::new(store)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Store> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Store> {
        self.0.write()
    }

    /// Write guard that owns a reference to the store, for writers that
    /// keep the lock across callbacks.
    pub fn write_owned(&self) -> StoreWriteGuard {
        self.0.write_arc()
    }
}
