//! Canonical payload encoding and content hashing.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::guest::format_float;

/// SHA-256 digest identifying a payload by content.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<ContentHash, String> {
        let bytes = hex::decode(s).map_err(|e| format!("bad content hash {s:?}: {e}"))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| format!("content hash {s:?} is not 32 bytes"))?;
        Ok(ContentHash(arr))
    }

    /// Short prefix for human-facing output.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Payload kind of a stored value version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Int,
    Float,
    Bool,
    Str,
    Nil,
    List,
    Map,
    Blob,
    Skipped,
}

impl ValueKind {
    pub fn tag(self) -> &'static str {
        match self {
            ValueKind::Int => "int",
            ValueKind::Float => "float",
            ValueKind::Bool => "bool",
            ValueKind::Str => "str",
            ValueKind::Nil => "nil",
            ValueKind::List => "list",
            ValueKind::Map => "map",
            ValueKind::Blob => "blob",
            ValueKind::Skipped => "skipped",
        }
    }
}

/// Hash over `tag`, a zero byte, then `payload`.
pub fn content_hash(tag: &str, payload: &[u8]) -> ContentHash {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(payload);
    ContentHash(h.finalize().into())
}

/// Hash tag for a payload: the kind, or `blob:<kind>` for blobs.
pub fn kind_tag(kind: ValueKind, blob_kind: Option<&str>) -> String {
    match (kind, blob_kind) {
        (ValueKind::Blob, Some(b)) => format!("blob:{b}"),
        (k, _) => k.tag().to_string(),
    }
}

pub fn int_payload(i: i64) -> Vec<u8> {
    i.to_string().into_bytes()
}

pub fn float_payload(f: f64) -> Vec<u8> {
    format_float(f).into_bytes()
}

pub fn bool_payload(b: bool) -> Vec<u8> {
    if b { b"true".to_vec() } else { b"false".to_vec() }
}

pub const NIL_PAYLOAD: &[u8] = b"nil";

fn push_hex(out: &mut Vec<u8>, h: &ContentHash) {
    let mut buf = [0u8; 64];
    hex::encode_to_slice(h.0, &mut buf).expect("64 hex digits");
    out.extend_from_slice(&buf);
}

pub fn list_payload(elements: &[ContentHash]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + elements.len() * 65);
    out.push(b'[');
    for (i, h) in elements.iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        push_hex(&mut out, h);
    }
    out.push(b']');
    out
}

/// `entries` must already be sorted by key.
pub fn map_payload<'a>(entries: impl IntoIterator<Item = (&'a str, ContentHash)>) -> Vec<u8> {
    let mut out = vec![b'{'];
    for (i, (k, h)) in entries.into_iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        out.extend_from_slice(serde_json::to_string(k).expect("strings serialize").as_bytes());
        out.push(b':');
        push_hex(&mut out, &h);
    }
    out.push(b'}');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_use_shortest_round_trip_form() {
        assert_eq!(float_payload(0.1), b"0.1");
        assert_eq!(float_payload(300.0), b"300.0");
        assert_eq!(float_payload(-5.0), b"-5.0");
        let back: f64 = std::str::from_utf8(&float_payload(1.0 / 3.0)).unwrap().parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }

    #[test]
    fn kind_separates_equal_payloads() {
        assert_ne!(content_hash("int", b"1"), content_hash("str", b"1"));
        assert_eq!(content_hash("int", b"1"), content_hash("int", b"1"));
    }

    #[test]
    fn map_keys_are_json_quoted() {
        let h = content_hash("nil", NIL_PAYLOAD);
        let p = map_payload([("a\"b", h)]);
        assert!(p.starts_with(b"{\"a\\\"b\":"));
    }
}
