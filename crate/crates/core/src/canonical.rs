//! Canonical JSON encoding shared by the wire protocol, archive format,
//! state files, and CLI output.
//!
//! Canonical form: UTF-8, compact (no insignificant whitespace), object keys
//! in lexicographic order, `snake_case` field names, enum variants as
//! lowercase strings. Parsers accept keys in any order; only the encoder is
//! constrained. Byte sequences are carried as base64 strings since JSON has
//! no binary type. Floats must be finite.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Encode a value in canonical form.
///
/// Routing through `serde_json::Value` sorts every object's keys (the
/// default `Value` map is a BTreeMap), which is what makes the output
/// canonical rather than declaration-ordered.
pub fn to_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

/// Encode a value in canonical form as a `String`.
pub fn to_string<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Encode a value in indented (non-canonical, human-oriented) form with
/// the same sorted-key discipline.
pub fn to_string_pretty<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

/// Decode a value from JSON bytes. Key order is not significant.
pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Serde adapter encoding `Vec<u8>` fields as standard base64 strings.
pub mod bytes_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(de)?;
        STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Sample {
        zeta: u32,
        alpha: String,
        map: BTreeMap<String, i64>,
    }

    #[test]
    fn keys_are_sorted() {
        let mut map = BTreeMap::new();
        map.insert("b".to_string(), 2);
        map.insert("a".to_string(), 1);
        let s = Sample {
            zeta: 9,
            alpha: "x".to_string(),
            map,
        };
        let out = to_string(&s).unwrap();
        assert_eq!(out, r#"{"alpha":"x","map":{"a":1,"b":2},"zeta":9}"#);
    }

    #[test]
    fn round_trip_accepts_any_key_order() {
        let input = r#"{"zeta":1,"map":{},"alpha":"y"}"#;
        let s: Sample = from_slice(input.as_bytes()).unwrap();
        assert_eq!(s.zeta, 1);
        assert_eq!(s.alpha, "y");
    }

    #[test]
    fn b64_round_trip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Blob {
            #[serde(with = "super::bytes_b64")]
            data: Vec<u8>,
        }
        let b = Blob {
            data: vec![0, 1, 2, 255],
        };
        let enc = to_bytes(&b).unwrap();
        let back: Blob = from_slice(&enc).unwrap();
        assert_eq!(b, back);
    }
}
