//! Versioned JSON documents for named tensors.
//!
//! ```json
//! {"version":1,"kind":"prompt_set",
//!  "shapes":{"theta_txt":[4],"theta_vis":[4]},
//!  "data":{"theta_txt":["0.01", ...], "theta_vis":[...]},
//!  "meta":{...}}
//! ```
//!
//! Values are written as the shortest decimal string that parses back to the
//! identical `f64`, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::FormatError;
use crate::tensor::Tensor;

pub const PARAM_DOC_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDoc {
    pub version: u64,
    pub kind: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub data: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ParamDoc {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            version: PARAM_DOC_VERSION,
            kind: kind.into(),
            shapes: BTreeMap::new(),
            data: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.shapes.insert(name.to_owned(), shape.to_vec());
        self.data
            .insert(name.to_owned(), values.iter().map(|v| format_f64(*v)).collect());
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.put(name, t.shape(), t.data());
    }

    pub fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), FormatError> {
        let shape = self
            .shapes
            .get(name)
            .ok_or_else(|| FormatError::Missing(name.to_owned()))?;
        let raw = self
            .data
            .get(name)
            .ok_or_else(|| FormatError::Missing(name.to_owned()))?;
        let expected: usize = shape.iter().product();
        if raw.len() != expected {
            return Err(FormatError::Tensor {
                name: name.to_owned(),
                message: format!("shape {shape:?} but {} values", raw.len()),
            });
        }
        let values = raw
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|message| FormatError::Tensor {
                name: name.to_owned(),
                message,
            })?;
        Ok((shape.clone(), values))
    }

    pub fn get_vec(&self, name: &str, len: usize) -> Result<Vec<f64>, FormatError> {
        let (shape, values) = self.get(name)?;
        if shape != [len] {
            return Err(FormatError::Tensor {
                name: name.to_owned(),
                message: format!("expected shape [{len}], found {shape:?}"),
            });
        }
        Ok(values)
    }

    pub fn get_tensor(&self, name: &str) -> Result<Tensor, FormatError> {
        let (shape, values) = self.get(name)?;
        Tensor::new(shape, values).map_err(|e| FormatError::Tensor {
            name: name.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), FormatError> {
        if self.version != PARAM_DOC_VERSION {
            return Err(FormatError::Version(self.version));
        }
        if self.kind != kind {
            return Err(FormatError::Kind {
                expected: kind.to_owned(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("param doc serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        let doc: ParamDoc = serde_json::from_str(text)?;
        if doc.version != PARAM_DOC_VERSION {
            return Err(FormatError::Version(doc.version));
        }
        Ok(doc)
    }
}

/// Shortest round-trip decimal representation.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| format!("`{s}`: {e}"))
        .and_then(|v| if v.is_finite() { Ok(v) } else { Err(format!("`{s}` is not finite")) })
}

/// SHA-256 over the bit patterns of a sequence of value blocks.
pub fn digest_values<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for block in blocks {
        h.update((block.len() as u64).to_le_bytes());
        for v in block {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
