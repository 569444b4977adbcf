//! Header parsing for the safetensors container.
//!
//! ```text
//! [u64 LE: N][N bytes UTF-8 JSON][data region]
//! ```
//!
//! Offsets in the JSON are relative to the start of the data region. The
//! parser is strict: every tensor must fit its shape exactly, and the sorted
//! extents must tile the data region with no holes, overlaps or trailing
//! bytes.

use std::fmt;

use indexmap::IndexMap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use super::{Dtype, Metadata, TensorMeta};
use crate::error::HeaderError;

pub const METADATA_KEY: &str = "__metadata__";
pub const DEFAULT_HEADER_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub header_cap: u64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            header_cap: DEFAULT_HEADER_CAP,
        }
    }
}

/// Everything the header says, validated against the data region length.
#[derive(Debug, Clone)]
pub(crate) struct ParsedHeader {
    pub tensors: IndexMap<String, TensorMeta>,
    pub metadata: Option<Metadata>,
}

/// JSON object entries in document order, duplicates preserved.
struct OrderedEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(OrderedEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Read the 8-byte length prefix and check it against the cap and the file.
pub(crate) fn header_len(prefix: &[u8], file_len: u64, opts: &ParseOptions) -> Result<u64, HeaderError> {
    if file_len < 8 || prefix.len() < 8 {
        return Err(HeaderError::TooSmall(file_len.min(prefix.len() as u64)));
    }
    let len = u64::from_le_bytes(prefix[..8].try_into().unwrap());
    if len > opts.header_cap {
        return Err(HeaderError::TooLarge {
            len,
            cap: opts.header_cap,
        });
    }
    if len > file_len - 8 {
        return Err(HeaderError::Truncated { len, file_len });
    }
    Ok(len)
}

pub(crate) fn parse_json(json: &[u8], data_len: u64) -> Result<ParsedHeader, HeaderError> {
    let OrderedEntries(entries) =
        serde_json::from_slice(json).map_err(|e| HeaderError::Json(e.to_string()))?;

    let mut metadata = None;
    let mut listed: Vec<TensorMeta> = Vec::with_capacity(entries.len());
    let mut seen = std::collections::HashSet::with_capacity(entries.len());

    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(HeaderError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            let map: Metadata = serde_json::from_value(value)
                .map_err(|e| HeaderError::Json(format!("{METADATA_KEY}: {e}")))?;
            metadata = Some(map);
            continue;
        }
        let raw: RawEntry =
            serde_json::from_value(value).map_err(|e| HeaderError::Json(format!("{name}: {e}")))?;
        let dtype: Dtype = raw.dtype.parse().map_err(|dtype| HeaderError::UnknownDtype {
            name: name.clone(),
            dtype,
        })?;
        let [begin, end] = raw.data_offsets;
        if end < begin {
            return Err(HeaderError::Descending { name, begin, end });
        }
        let expected = raw
            .shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
        if end - begin != expected {
            return Err(HeaderError::ExtentMismatch {
                name,
                begin,
                end,
                expected,
                actual: end - begin,
            });
        }
        if end > data_len {
            return Err(HeaderError::ExtentPastEnd {
                name,
                end,
                data_len,
            });
        }
        listed.push(TensorMeta {
            name,
            dtype,
            shape: raw.shape,
            data_offsets: (begin as usize, end as usize),
        });
    }

    // stable: zero-length tensors sharing an offset keep document order
    listed.sort_by_key(|m| m.data_offsets);
    let mut prev_end = 0u64;
    for m in &listed {
        let begin = m.data_offsets.0 as u64;
        if begin < prev_end {
            return Err(HeaderError::Overlap {
                name: m.name.clone(),
                begin,
                prev_end,
            });
        }
        if begin > prev_end {
            return Err(HeaderError::Gap {
                name: m.name.clone(),
                begin,
                prev_end,
            });
        }
        prev_end = m.data_offsets.1 as u64;
    }
    if prev_end != data_len {
        return Err(HeaderError::TrailingData {
            covered: prev_end,
            data_len,
        });
    }

    let tensors = listed.into_iter().map(|m| (m.name.clone(), m)).collect();
    Ok(ParsedHeader { tensors, metadata })
}

/// Serialize a header: `__metadata__` first, then tensors in the given
/// order, no insignificant whitespace, space-padded so the data region
/// starts on an 8-byte boundary.
pub(crate) fn serialize_header<'a>(
    tensors: impl IntoIterator<Item = &'a TensorMeta>,
    metadata: Option<&Metadata>,
) -> Vec<u8> {
    let mut out = String::from("{");
    let mut first = true;
    if let Some(md) = metadata {
        out.push_str(&json_str(METADATA_KEY));
        out.push_str(":{");
        for (i, (k, v)) in md.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&json_str(k));
            out.push(':');
            out.push_str(&json_str(v));
        }
        out.push('}');
        first = false;
    }
    for m in tensors {
        if !first {
            out.push(',');
        }
        first = false;
        let shape: Vec<String> = m.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_str(&m.name),
            m.dtype,
            shape.join(","),
            m.data_offsets.0,
            m.data_offsets.1
        ));
    }
    out.push('}');
    let mut bytes = out.into_bytes();
    let padded = bytes.len().div_ceil(8) * 8;
    bytes.resize(padded, b' ');
    bytes
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}
