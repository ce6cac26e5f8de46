//! Runtime values of the guest language.
//!
//! Primitives are compared by content only. Lists, maps and native handles
//! live on the heap and carry a [`HeapId`] that is unique within one
//! interpreter run; mutating them in place keeps the id and bumps the
//! object's epoch.

use std::any::Any;
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde_json::Value as Json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeapId(pub u64);

impl fmt::Display for HeapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Allocator for heap identities, shared by everything that creates heap
/// values during one run.
#[derive(Debug, Clone, Default)]
pub struct IdGen(Rc<Cell<u64>>);

impl IdGen {
    pub fn next(&self) -> HeapId {
        let id = self.0.get() + 1;
        self.0.set(id);
        HeapId(id)
    }
}

#[derive(Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(Rc<str>),
    Nil,
    List(Rc<ListObj>),
    Map(Rc<MapObj>),
    Native(Rc<NativeObj>),
}

pub struct ListObj {
    id: HeapId,
    epoch: Cell<u64>,
    items: RefCell<Vec<Value>>,
}

pub struct MapObj {
    id: HeapId,
    epoch: Cell<u64>,
    entries: RefCell<BTreeMap<String, Value>>,
}

/// Host-provided opaque object. Serializable only through a custom codec
/// registered for its `type_tag`.
pub struct NativeObj {
    id: HeapId,
    type_tag: String,
    data: RefCell<Box<dyn Any>>,
}

impl ListObj {
    pub fn id(&self) -> HeapId {
        self.id
    }
    pub fn epoch(&self) -> u64 {
        self.epoch.get()
    }
    pub fn items(&self) -> Ref<'_, Vec<Value>> {
        self.items.borrow()
    }
    /// Mutable access; counts as a mutation.
    pub fn items_mut(&self) -> RefMut<'_, Vec<Value>> {
        self.epoch.set(self.epoch.get() + 1);
        self.items.borrow_mut()
    }
}

impl MapObj {
    pub fn id(&self) -> HeapId {
        self.id
    }
    pub fn epoch(&self) -> u64 {
        self.epoch.get()
    }
    pub fn entries(&self) -> Ref<'_, BTreeMap<String, Value>> {
        self.entries.borrow()
    }
    pub fn entries_mut(&self) -> RefMut<'_, BTreeMap<String, Value>> {
        self.epoch.set(self.epoch.get() + 1);
        self.entries.borrow_mut()
    }
}

impl NativeObj {
    pub fn id(&self) -> HeapId {
        self.id
    }
    pub fn type_tag(&self) -> &str {
        &self.type_tag
    }
    pub fn data(&self) -> Ref<'_, Box<dyn Any>> {
        self.data.borrow()
    }
    pub fn data_mut(&self) -> RefMut<'_, Box<dyn Any>> {
        self.data.borrow_mut()
    }
    pub fn downcast<T: 'static, R>(&self, f: impl FnOnce(&T) -> R) -> Option<R> {
        self.data.borrow().downcast_ref::<T>().map(f)
    }
    pub fn downcast_mut<T: 'static, R>(&self, f: impl FnOnce(&mut T) -> R) -> Option<R> {
        self.data.borrow_mut().downcast_mut::<T>().map(f)
    }
}

impl Value {
    pub fn str(s: impl Into<Rc<str>>) -> Value {
        Value::Str(s.into())
    }

    pub fn new_list(ids: &IdGen, items: Vec<Value>) -> Value {
        Value::List(Rc::new(ListObj { id: ids.next(), epoch: Cell::new(0), items: RefCell::new(items) }))
    }

    pub fn new_map(ids: &IdGen, entries: BTreeMap<String, Value>) -> Value {
        Value::Map(Rc::new(MapObj { id: ids.next(), epoch: Cell::new(0), entries: RefCell::new(entries) }))
    }

    pub fn new_native(ids: &IdGen, type_tag: impl Into<String>, data: Box<dyn Any>) -> Value {
        Value::Native(Rc::new(NativeObj { id: ids.next(), type_tag: type_tag.into(), data: RefCell::new(data) }))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Str(_) => "str",
            Value::Nil => "nil",
            Value::List(_) => "list",
            Value::Map(_) => "map",
            Value::Native(_) => "native",
        }
    }

    /// Identity of heap values; `None` for primitives.
    pub fn identity(&self) -> Option<HeapId> {
        match self {
            Value::List(l) => Some(l.id),
            Value::Map(m) => Some(m.id),
            Value::Native(n) => Some(n.id),
            _ => None,
        }
    }

    /// Mutation counter of lists and maps.
    pub fn epoch(&self) -> Option<u64> {
        match self {
            Value::List(l) => Some(l.epoch()),
            Value::Map(m) => Some(m.epoch()),
            _ => None,
        }
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::Int(i) => *i != 0,
            Value::Float(f) => *f != 0.0,
            Value::Bool(b) => *b,
            Value::Str(s) => !s.is_empty(),
            Value::Nil => false,
            Value::List(l) => !l.items().is_empty(),
            Value::Map(m) => !m.entries().is_empty(),
            Value::Native(_) => true,
        }
    }

    /// Guest-level `==`: structural for data, identity for native handles.
    pub fn guest_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a == b,
            (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => (*a as f64) == *b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Nil, Value::Nil) => true,
            (Value::List(a), Value::List(b)) => {
                if Rc::ptr_eq(a, b) {
                    return true;
                }
                let (a, b) = (a.items(), b.items());
                a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.guest_eq(y))
            }
            (Value::Map(a), Value::Map(b)) => {
                if Rc::ptr_eq(a, b) {
                    return true;
                }
                let (a, b) = (a.entries(), b.entries());
                a.len() == b.len() && a.iter().zip(b.iter()).all(|((ka, va), (kb, vb))| ka == kb && va.guest_eq(vb))
            }
            (Value::Native(a), Value::Native(b)) => Rc::ptr_eq(a, b),
            _ => false,
        }
    }

    /// Converts to plain data. Native handles have no plain form.
    pub fn to_datum(&self) -> Result<Datum, String> {
        self.to_datum_depth(0)
    }

    fn to_datum_depth(&self, depth: usize) -> Result<Datum, String> {
        if depth > MAX_DEPTH {
            return Err("value nesting too deep (cyclic?)".into());
        }
        Ok(match self {
            Value::Int(i) => Datum::Int(*i),
            Value::Float(f) => Datum::Float(*f),
            Value::Bool(b) => Datum::Bool(*b),
            Value::Str(s) => Datum::Str(s.to_string()),
            Value::Nil => Datum::Nil,
            Value::List(l) => {
                Datum::List(l.items().iter().map(|v| v.to_datum_depth(depth + 1)).collect::<Result<_, _>>()?)
            }
            Value::Map(m) => Datum::Map(
                m.entries()
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), v.to_datum_depth(depth + 1)?)))
                    .collect::<Result<_, String>>()?,
            ),
            Value::Native(n) => return Err(format!("native handle <{}> has no plain form", n.type_tag)),
        })
    }
}

const MAX_DEPTH: usize = 256;

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(v: &Value, f: &mut fmt::Formatter<'_>, depth: usize) -> fmt::Result {
            if depth > MAX_DEPTH {
                return f.write_str("...");
            }
            match v {
                Value::Int(i) => write!(f, "{i}"),
                Value::Float(x) => f.write_str(&format_float(*x)),
                Value::Bool(b) => write!(f, "{b}"),
                Value::Str(s) => write!(f, "{}", quote(s)),
                Value::Nil => f.write_str("nil"),
                Value::List(l) => {
                    f.write_str("[")?;
                    for (i, item) in l.items().iter().enumerate() {
                        if i > 0 {
                            f.write_str(", ")?;
                        }
                        go(item, f, depth + 1)?;
                    }
                    f.write_str("]")
                }
                Value::Map(m) => {
                    f.write_str("{")?;
                    for (i, (k, item)) in m.entries().iter().enumerate() {
                        if i > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{}: ", quote(k))?;
                        go(item, f, depth + 1)?;
                    }
                    f.write_str("}")
                }
                Value::Native(n) => write!(f, "<{}{}>", n.type_tag, n.id),
            }
        }
        go(self, f, 0)
    }
}

/// Shortest decimal text that reads back to the same `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\0' => out.push_str("\\0"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Owned, identity-free value tree. Used wherever values cross a boundary
/// that runtime heap values cannot: event scripts, replay plans, views
/// materialized from the store, and the service API.
#[derive(Debug, Clone, PartialEq)]
pub enum Datum {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    Nil,
    List(Vec<Datum>),
    Map(BTreeMap<String, Datum>),
    /// Custom-serialized native value.
    Blob { kind: String, bytes: Vec<u8> },
    /// A value that was not captured, with the reason.
    Skipped(String),
}

impl Datum {
    /// Builds a runtime value with fresh identities.
    pub fn to_value(&self, ids: &IdGen) -> Result<Value, String> {
        Ok(match self {
            Datum::Int(i) => Value::Int(*i),
            Datum::Float(f) => Value::Float(*f),
            Datum::Bool(b) => Value::Bool(*b),
            Datum::Str(s) => Value::str(s.as_str()),
            Datum::Nil => Value::Nil,
            Datum::List(items) => {
                Value::new_list(ids, items.iter().map(|d| d.to_value(ids)).collect::<Result<_, _>>()?)
            }
            Datum::Map(entries) => Value::new_map(
                ids,
                entries.iter().map(|(k, d)| Ok((k.clone(), d.to_value(ids)?))).collect::<Result<_, String>>()?,
            ),
            Datum::Blob { kind, .. } => return Err(format!("blob of kind {kind} cannot be rebuilt without a codec")),
            Datum::Skipped(reason) => return Err(format!("value was not captured ({reason})")),
        })
    }

    /// JSON form: numbers keep their int/float distinction (floats always
    /// carry a fraction or exponent), blobs and skipped markers use tagged
    /// objects.
    pub fn to_json(&self) -> Json {
        match self {
            Datum::Int(i) => Json::from(*i),
            Datum::Float(f) => match serde_json::Number::from_f64(*f) {
                Some(n) => Json::Number(n),
                None => serde_json::json!({ "$float": format_float(*f) }),
            },
            Datum::Bool(b) => Json::Bool(*b),
            Datum::Str(s) => Json::String(s.clone()),
            Datum::Nil => Json::Null,
            Datum::List(items) => Json::Array(items.iter().map(Datum::to_json).collect()),
            Datum::Map(entries) => {
                Json::Object(entries.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
            }
            Datum::Blob { kind, bytes } => {
                use base64::Engine;
                serde_json::json!({ "$blob": kind, "base64": base64::engine::general_purpose::STANDARD.encode(bytes) })
            }
            Datum::Skipped(reason) => serde_json::json!({ "$skipped": reason }),
        }
    }

    pub fn from_json(j: &Json) -> Result<Datum, String> {
        Ok(match j {
            Json::Null => Datum::Nil,
            Json::Bool(b) => Datum::Bool(*b),
            Json::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Datum::Int(i)
                } else if n.is_u64() {
                    return Err(format!("integer {n} out of range"));
                } else {
                    Datum::Float(n.as_f64().ok_or_else(|| format!("bad number {n}"))?)
                }
            }
            Json::String(s) => Datum::Str(s.clone()),
            Json::Array(items) => Datum::List(items.iter().map(Datum::from_json).collect::<Result<_, _>>()?),
            Json::Object(map) => {
                if let Some(Json::String(f)) = map.get("$float") {
                    if map.len() == 1 {
                        return f.parse().map(Datum::Float).map_err(|_| format!("bad float {f:?}"));
                    }
                }
                if let Some(Json::String(reason)) = map.get("$skipped") {
                    if map.len() == 1 {
                        return Ok(Datum::Skipped(reason.clone()));
                    }
                }
                if let (Some(Json::String(kind)), Some(Json::String(b64))) = (map.get("$blob"), map.get("base64")) {
                    use base64::Engine;
                    let bytes = base64::engine::general_purpose::STANDARD
                        .decode(b64)
                        .map_err(|e| format!("bad blob encoding: {e}"))?;
                    return Ok(Datum::Blob { kind: kind.clone(), bytes });
                }
                Datum::Map(map.iter().map(|(k, v)| Ok((k.clone(), Datum::from_json(v)?))).collect::<Result<_, String>>()?)
            }
        })
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::Int(i) => write!(f, "{i}"),
            Datum::Float(x) => f.write_str(&format_float(*x)),
            Datum::Bool(b) => write!(f, "{b}"),
            Datum::Str(s) => f.write_str(&quote(s)),
            Datum::Nil => f.write_str("nil"),
            Datum::List(items) => {
                f.write_str("[")?;
                for (i, d) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{d}")?;
                }
                f.write_str("]")
            }
            Datum::Map(entries) => {
                f.write_str("{")?;
                for (i, (k, d)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}: {d}", quote(k))?;
                }
                f.write_str("}")
            }
            Datum::Blob { kind, bytes } => write!(f, "<blob {kind} {} bytes>", bytes.len()),
            Datum::Skipped(reason) => write!(f, "<skipped: {reason}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_keeps_identity_and_bumps_epoch() {
        let ids = IdGen::default();
        let l = Value::new_list(&ids, vec![Value::Int(1)]);
        let Value::List(obj) = &l else { unreachable!() };
        let (id, epoch) = (obj.id(), obj.epoch());
        obj.items_mut().push(Value::Int(2));
        assert_eq!(obj.id(), id);
        assert!(obj.epoch() > epoch);
    }

    #[test]
    fn json_round_trip_keeps_number_kinds() {
        let d = Datum::List(vec![Datum::Int(3), Datum::Float(3.0), Datum::Nil, Datum::Str("x".into())]);
        let text = d.to_json().to_string();
        assert_eq!(text, r#"[3,3.0,null,"x"]"#);
        let back = Datum::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn display_uses_literal_syntax() {
        let ids = IdGen::default();
        let mut m = BTreeMap::new();
        m.insert("k".to_string(), Value::Float(0.5));
        let v = Value::new_list(&ids, vec![Value::str("a"), Value::new_map(&ids, m), Value::Nil]);
        assert_eq!(v.to_string(), r#"["a", {"k": 0.5}, nil]"#);
    }
}
