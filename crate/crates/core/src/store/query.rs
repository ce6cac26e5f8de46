use std::collections::BTreeMap;

use super::*;

/// Values a call started with, plus the code it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct CallingContext {
    pub locals: BTreeMap<String, Datum>,
    pub globals: BTreeMap<String, Datum>,
    pub code: CodeVersion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub snapshot: Snapshot,
    pub events: Vec<EventRecord>,
}

impl Store {
    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn get_sessions(&self) -> Vec<Session> {
        self.sessions.clone()
    }

    pub fn session(&self, id: SessionId) -> Result<&Session, StoreError> {
        self.sessions.get(id.index()).ok_or(StoreError::UnknownSession(id))
    }

    pub fn call(&self, id: CallId) -> Result<&MonitoredCall, StoreError> {
        self.calls.get(id.index()).ok_or(StoreError::UnknownCall(id))
    }

    pub fn snapshot(&self, id: SnapshotId) -> Result<&Snapshot, StoreError> {
        self.snapshots.get(id.index()).ok_or(StoreError::UnknownSnapshot(id))
    }

    pub fn event(&self, id: EventId) -> Result<&EventRecord, StoreError> {
        self.events.get(id.index()).ok_or(StoreError::UnknownEvent(id))
    }

    pub fn version(&self, id: VersionRef) -> Result<&ObjectVersion, StoreError> {
        self.versions.get(id.index()).ok_or(StoreError::UnknownVersion(id))
    }

    pub fn object(&self, id: ObjectId) -> Option<&StoredObject> {
        self.objects.get(id.index())
    }

    pub fn code_version(&self, id: CodeVersionId) -> Result<&CodeVersion, StoreError> {
        self.code.get(id.index()).ok_or(StoreError::UnknownCode(id))
    }

    pub fn code_versions(&self) -> &[CodeVersion] {
        &self.code
    }

    pub fn hook_blob(&self, id: BlobId) -> Result<&HookBlob, StoreError> {
        self.hook_blobs.get(id.index()).ok_or(StoreError::UnknownBlob(id))
    }

    pub fn program(&self, hash: ContentHash) -> Result<&ProgramRecord, StoreError> {
        self.idx.program.get(&hash).map(|i| &self.programs[*i]).ok_or(StoreError::UnknownProgram(hash))
    }

    pub fn payload(&self, hash: &ContentHash) -> Option<&Payload> {
        self.idx.payload.get(hash).map(|i| &self.payloads[*i])
    }

    /// Versions of one object in creation order.
    pub fn object_versions(&self, object: ObjectId) -> Vec<&ObjectVersion> {
        self.versions.iter().filter(|v| v.object == Some(object)).collect()
    }

    /// Calls to `function`, ordered by session then ordinal. Unknown names
    /// give an empty list.
    pub fn get_calls(&self, function: &str, session: Option<SessionId>) -> Vec<&MonitoredCall> {
        match session {
            Some(s) => self.session_calls(s).into_iter().filter(|c| c.function == function).collect(),
            None => {
                let mut out: Vec<&MonitoredCall> = self.calls.iter().filter(|c| c.function == function).collect();
                out.sort_by_key(|c| (c.session, c.ordinal));
                out
            }
        }
    }

    /// Every recorded call of a session in ordinal order.
    pub fn session_calls(&self, session: SessionId) -> Vec<&MonitoredCall> {
        self.idx
            .session_calls
            .get(&session)
            .map(|ids| ids.iter().map(|c| &self.calls[c.index()]).collect())
            .unwrap_or_default()
    }

    pub fn call_by_ordinal(&self, session: SessionId, ordinal: u64) -> Option<&MonitoredCall> {
        self.idx.session_calls.get(&session)?.get(ordinal as usize).map(|c| &self.calls[c.index()])
    }

    pub fn call_snapshots(&self, call: CallId) -> Vec<&Snapshot> {
        self.idx
            .call_snapshots
            .get(&call)
            .map(|ids| ids.iter().map(|s| &self.snapshots[s.index()]).collect())
            .unwrap_or_default()
    }

    /// Events attached to a call, in `seq` order.
    pub fn call_events(&self, call: CallId) -> Vec<&EventRecord> {
        self.idx
            .call_events
            .get(&call)
            .map(|ids| ids.iter().map(|e| &self.events[e.index()]).collect())
            .unwrap_or_default()
    }

    pub fn snapshot_events(&self, snapshot: SnapshotId) -> Vec<&EventRecord> {
        self.idx
            .snapshot_events
            .get(&snapshot)
            .map(|ids| ids.iter().map(|e| &self.events[e.index()]).collect())
            .unwrap_or_default()
    }

    pub fn get_calling_context(&self, call: CallId) -> Result<CallingContext, StoreError> {
        let c = self.call(call)?;
        Ok(CallingContext {
            locals: self.materialize_map(&c.locals)?,
            globals: self.materialize_map(&c.globals)?,
            code: self.code_version(c.code)?.clone(),
        })
    }

    pub fn get_trace(&self, call: CallId) -> Result<Vec<TraceStep>, StoreError> {
        self.call(call)?;
        Ok(self
            .call_snapshots(call)
            .into_iter()
            .map(|s| TraceStep {
                snapshot: s.clone(),
                events: self.snapshot_events(s.id).into_iter().cloned().collect(),
            })
            .collect())
    }

    pub fn materialize_map(&self, m: &BTreeMap<String, VersionRef>) -> Result<BTreeMap<String, Datum>, StoreError> {
        m.iter().map(|(k, v)| Ok((k.clone(), self.materialize(*v)?))).collect()
    }

    /// Rebuilds the value tree of a version.
    pub fn materialize(&self, v: VersionRef) -> Result<Datum, StoreError> {
        let ver = self.version(v)?;
        let corrupt = |message: String| StoreError::Corrupt { record: 0, table: "object_versions".into(), message };
        let text = || -> Result<String, StoreError> {
            let p = self.payload(&ver.content_hash).ok_or_else(|| corrupt(format!("{v} has no payload")))?;
            String::from_utf8(p.bytes.clone()).map_err(|_| corrupt(format!("{v} payload is not UTF-8")))
        };
        Ok(match ver.kind {
            ValueKind::Int => Datum::Int(text()?.parse().map_err(|_| corrupt(format!("{v} is not an int")))?),
            ValueKind::Float => Datum::Float(text()?.parse().map_err(|_| corrupt(format!("{v} is not a float")))?),
            ValueKind::Bool => Datum::Bool(text()? == "true"),
            ValueKind::Str => Datum::Str(text()?),
            ValueKind::Nil => Datum::Nil,
            ValueKind::Skipped => Datum::Skipped(text()?),
            ValueKind::List => {
                Datum::List(ver.elements.iter().map(|e| self.materialize(*e)).collect::<Result<_, _>>()?)
            }
            ValueKind::Map => Datum::Map(
                ver.keys
                    .iter()
                    .zip(&ver.elements)
                    .map(|(k, e)| Ok((k.clone(), self.materialize(*e)?)))
                    .collect::<Result<_, StoreError>>()?,
            ),
            ValueKind::Blob => {
                let p = self.payload(&ver.content_hash).ok_or_else(|| corrupt(format!("{v} has no payload")))?;
                Datum::Blob { kind: p.blob_kind.clone().unwrap_or_default(), bytes: p.bytes.clone() }
            }
        })
    }

    pub fn version_hash(&self, v: VersionRef) -> Result<ContentHash, StoreError> {
        Ok(self.version(v)?.content_hash)
    }

    pub fn is_skipped(&self, v: VersionRef) -> bool {
        self.versions.get(v.index()).is_some_and(|x| x.kind == ValueKind::Skipped)
    }

    fn push_slots(&self, out: &mut String, tag: &str, slots: &BTreeMap<String, VersionRef>) {
        for (k, v) in slots {
            let h = self.versions[v.index()].content_hash;
            out.push_str(&format!("{tag} {} {k} {h}\n", k.len()));
        }
    }

    fn push_events(&self, out: &mut String, events: &[&EventRecord]) {
        for e in events {
            out.push_str(&format!("event {} {}", e.seq, e.callable));
            for a in &e.args {
                out.push_str(&format!(" {}", self.versions[a.index()].content_hash));
            }
            out.push_str(&format!(" -> {}\n", self.versions[e.return_value.index()].content_hash));
        }
    }

    /// Content digest of a snapshot: line, bindings and attached events.
    pub fn snapshot_digest(&self, id: SnapshotId) -> Result<ContentHash, StoreError> {
        let s = self.snapshot(id)?;
        let c = self.call(s.call)?;
        let mut text = format!("line {}\n", s.line + 1 - c.def_line);
        self.push_slots(&mut text, "local", &s.locals);
        self.push_slots(&mut text, "global", &s.globals);
        self.push_events(&mut text, &self.snapshot_events(id));
        Ok(content_hash("snapshot", text.as_bytes()))
    }

    /// Content digest of everything recorded for a call: code, calling
    /// context, return value, hook blobs, events and snapshots. Ids and
    /// timestamps do not contribute.
    pub fn call_digest(&self, id: CallId) -> Result<ContentHash, StoreError> {
        let c = self.call(id)?;
        let code = self.code_version(c.code)?;
        let mut text = format!("function {}\ncode {}\n", c.function, code.text_hash);
        self.push_slots(&mut text, "local", &c.locals);
        self.push_slots(&mut text, "global", &c.globals);
        if let Some(r) = c.return_value {
            text.push_str(&format!("return {}\n", self.versions[r.index()].content_hash));
        }
        if let Some(e) = &c.error {
            text.push_str(&format!("error {e}\n"));
        }
        for (name, b) in &c.hook_meta {
            text.push_str(&format!("hook {name} {}\n", self.hook_blob(*b)?.content_hash));
        }
        self.push_events(&mut text, &self.call_events(id));
        for s in self.call_snapshots(id) {
            text.push_str(&format!("snapshot {}\n", self.snapshot_digest(s.id)?));
        }
        Ok(content_hash("call", text.as_bytes()))
    }

    /// Per-call digests of a session in ordinal order.
    pub fn session_digests(&self, session: SessionId) -> Result<Vec<ContentHash>, StoreError> {
        self.session(session)?;
        self.session_calls(session).into_iter().map(|c| self.call_digest(c.id)).collect()
    }

    /// Number of captured bindings (call contexts, snapshots, returns,
    /// event values) that hold a skipped marker.
    pub fn skipped_count(&self, session: SessionId) -> u64 {
        let mut n = 0u64;
        let mut count = |v: &VersionRef| n += self.is_skipped(*v) as u64;
        for c in self.session_calls(session) {
            c.locals.values().chain(c.globals.values()).chain(c.return_value.iter()).for_each(&mut count);
            for s in self.call_snapshots(c.id) {
                s.locals.values().chain(s.globals.values()).for_each(&mut count);
            }
            for e in self.call_events(c.id) {
                e.args.iter().chain(std::iter::once(&e.return_value)).for_each(&mut count);
            }
        }
        n
    }
}
