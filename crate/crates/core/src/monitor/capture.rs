use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::guest::{HeapId, Value};
use crate::store::{CallId, ObjectId, SessionId, Store, VersionRef};

use super::Serializers;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("custom serializer for {type_tag} failed: {message}")]
pub struct CaptureError {
    pub type_tag: String,
    pub message: String,
}

#[derive(Hash, PartialEq, Eq)]
enum PrimKey {
    Int(i64),
    Float(u64),
    Bool(bool),
    Nil,
    Str(Rc<str>),
}

struct CachedObject {
    epoch: u64,
    version: VersionRef,
    /// Identity-bearing elements, whose own epochs must also be unchanged
    /// for the cached version to stay valid.
    children: Vec<Value>,
}

/// Converts runtime values into store versions, remembering which heap
/// objects were already captured and at which epoch so that unchanged
/// objects cost a lookup instead of a walk.
pub struct Capturer {
    serializers: Rc<Serializers>,
    session: Option<SessionId>,
    objects: HashMap<HeapId, ObjectId>,
    cache: HashMap<HeapId, CachedObject>,
    prims: HashMap<PrimKey, VersionRef>,
    in_progress: HashSet<HeapId>,
    skipped: u64,
}

impl Capturer {
    /// Capturer that records object identities for `session`.
    pub fn new(serializers: Rc<Serializers>, session: SessionId) -> Capturer {
        Capturer::build(serializers, Some(session))
    }

    /// Capturer that stores content only.
    pub fn identity_free(serializers: Rc<Serializers>) -> Capturer {
        Capturer::build(serializers, None)
    }

    fn build(serializers: Rc<Serializers>, session: Option<SessionId>) -> Capturer {
        Capturer {
            serializers,
            session,
            objects: HashMap::new(),
            cache: HashMap::new(),
            prims: HashMap::new(),
            in_progress: HashSet::new(),
            skipped: 0,
        }
    }

    /// Natives captured as skipped so far.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Stored object for a runtime identity, if one was assigned.
    pub fn object_of(&self, id: HeapId) -> Option<ObjectId> {
        self.objects.get(&id).copied()
    }

    fn object_for(&mut self, store: &mut Store, id: HeapId, first_seen: CallId) -> Option<ObjectId> {
        let session = self.session?;
        Some(*self.objects.entry(id).or_insert_with(|| store.new_object(session, first_seen)))
    }

    fn prim(&mut self, store: &mut Store, key: PrimKey) -> VersionRef {
        if let Some(v) = self.prims.get(&key) {
            return *v;
        }
        let v = match &key {
            PrimKey::Int(i) => store.intern_int(*i),
            PrimKey::Float(bits) => store.intern_float(f64::from_bits(*bits)),
            PrimKey::Bool(b) => store.intern_bool(*b),
            PrimKey::Nil => store.intern_nil(),
            PrimKey::Str(s) => store.intern_str(s),
        };
        self.prims.insert(key, v);
        v
    }

    fn clean(&self, children: &[Value], visiting: &mut HashSet<HeapId>) -> bool {
        children.iter().all(|c| {
            let Some(id) = c.identity() else { return true };
            if !visiting.insert(id) {
                return true;
            }
            match (self.cache.get(&id), c.epoch()) {
                (Some(entry), Some(epoch)) => entry.epoch == epoch && self.clean(&entry.children, visiting),
                _ => false,
            }
        })
    }

    fn cached(&self, v: &Value) -> Option<VersionRef> {
        let id = v.identity()?;
        let entry = self.cache.get(&id)?;
        if Some(entry.epoch) != v.epoch() {
            return None;
        }
        let mut visiting = HashSet::from([id]);
        self.clean(&entry.children, &mut visiting).then_some(entry.version)
    }

    /// Interns `v`, attributing newly seen objects to `first_seen`.
    pub fn capture(&mut self, store: &mut Store, v: &Value, first_seen: CallId) -> Result<VersionRef, CaptureError> {
        Ok(match v {
            Value::Int(i) => self.prim(store, PrimKey::Int(*i)),
            Value::Float(f) => self.prim(store, PrimKey::Float(f.to_bits())),
            Value::Bool(b) => self.prim(store, PrimKey::Bool(*b)),
            Value::Nil => self.prim(store, PrimKey::Nil),
            Value::Str(s) => self.prim(store, PrimKey::Str(s.clone())),
            Value::List(l) => {
                if let Some(v) = self.cached(v) {
                    return Ok(v);
                }
                let id = l.id();
                if !self.in_progress.insert(id) {
                    return Ok(store.intern_skipped("cyclic reference"));
                }
                let items = l.items().clone();
                let mut refs = Vec::with_capacity(items.len());
                for item in &items {
                    match self.capture(store, item, first_seen) {
                        Ok(r) => refs.push(r),
                        Err(e) => {
                            self.in_progress.remove(&id);
                            return Err(e);
                        }
                    }
                }
                self.in_progress.remove(&id);
                let object = self.object_for(store, id, first_seen);
                let version = store.intern_list(object, refs);
                let children = items.into_iter().filter(|x| x.identity().is_some()).collect();
                self.cache.insert(id, CachedObject { epoch: l.epoch(), version, children });
                version
            }
            Value::Map(m) => {
                if let Some(v) = self.cached(v) {
                    return Ok(v);
                }
                let id = m.id();
                if !self.in_progress.insert(id) {
                    return Ok(store.intern_skipped("cyclic reference"));
                }
                let entries: Vec<(String, Value)> = m.entries().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                let mut refs = Vec::with_capacity(entries.len());
                for (k, item) in &entries {
                    match self.capture(store, item, first_seen) {
                        Ok(r) => refs.push((k.clone(), r)),
                        Err(e) => {
                            self.in_progress.remove(&id);
                            return Err(e);
                        }
                    }
                }
                self.in_progress.remove(&id);
                let object = self.object_for(store, id, first_seen);
                let version = store.intern_map(object, refs);
                let children = entries.into_iter().map(|(_, x)| x).filter(|x| x.identity().is_some()).collect();
                self.cache.insert(id, CachedObject { epoch: m.epoch(), version, children });
                version
            }
            Value::Native(n) => {
                let serializers = self.serializers.clone();
                match serializers.get(n.type_tag()) {
                    Some(codec) => {
                        let bytes = (codec.encode)(n)
                            .map_err(|message| CaptureError { type_tag: n.type_tag().to_string(), message })?;
                        let object = self.object_for(store, n.id(), first_seen);
                        store.intern_blob(object, n.type_tag(), bytes)
                    }
                    None => {
                        self.skipped += 1;
                        store.intern_skipped(&format!("non-serializable {}", n.type_tag()))
                    }
                }
            }
        })
    }
}

/// One-off, identity-free capture of a single value.
pub fn capture_value(store: &mut Store, v: &Value, serializers: Rc<Serializers>) -> Result<VersionRef, CaptureError> {
    Capturer::identity_free(serializers).capture(store, v, CallId(0))
}
