//! Typed protocol messages. Every payload is a JSON object with a top-level
//! `"type"` tag; bulk numeric data travels as base64 of little-endian
//! 64-bit values.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::frame::{encode_frame, FrameError};
use crate::flake::{Matrix, RowMeta};
use crate::inference::Subgroup;

pub const PROTOCOL_VERSION: u32 = 1;

const KNOWN_TYPES: [&str; 10] = [
    "hello",
    "round_start",
    "masked_model",
    "masked_global",
    "embeddings_upload",
    "helper_upload",
    "query",
    "query_response",
    "subgroup_notice",
    "error",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub protocol_version: u32,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silo_id: Option<usize>,
    #[serde(flatten)]
    pub body: Body,
}

impl Message {
    pub fn new(session_id: &str, silo_id: Option<usize>, body: Body) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            session_id: session_id.to_string(),
            silo_id,
            body,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self.body {
            Body::Hello { .. } => "hello",
            Body::RoundStart { .. } => "round_start",
            Body::MaskedModel { .. } => "masked_model",
            Body::MaskedGlobal { .. } => "masked_global",
            Body::EmbeddingsUpload { .. } => "embeddings_upload",
            Body::HelperUpload { .. } => "helper_upload",
            Body::Query { .. } => "query",
            Body::QueryResponse { .. } => "query_response",
            Body::SubgroupNotice { .. } => "subgroup_notice",
            Body::Error { .. } => "error",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HelloRole {
    /// Takes part in training and contributes gallery rows.
    Founding,
    /// Joined after training; holds the global model and shared seed, queries only.
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSyndrome {
    pub syndrome: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Body {
    Hello {
        role: HelloRole,
    },
    RoundStart {
        round: u64,
        rounds: u64,
    },
    MaskedModel {
        round: u64,
        scale_bits: u32,
        words: WireWords,
    },
    MaskedGlobal {
        round: u64,
        scale_bits: u32,
        words: WireWords,
    },
    EmbeddingsUpload {
        member: usize,
        rows: WireMatrix,
        meta: Vec<RowMeta>,
    },
    HelperUpload {
        member: usize,
        k: WireMatrix,
    },
    /// One masked `1 x delta` row per ensemble member.
    Query {
        query_id: u64,
        k: usize,
        rows: Vec<WireMatrix>,
    },
    QueryResponse {
        query_id: u64,
        ranked: Vec<RankedSyndrome>,
    },
    SubgroupNotice {
        groups: Vec<Subgroup>,
    },
    Error {
        code: String,
        message: String,
    },
}

/// Ring words, serialized as base64 of their little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireWords(pub Vec<u64>);

impl Serialize for WireWords {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|w| w.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for WireWords {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("word array length is not a multiple of 8"));
        }
        Ok(Self(
            bytes
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }
}

/// A matrix as `{"rows", "cols", "data"}` with `data` base64 of row-major f64.
#[derive(Clone, Debug, PartialEq)]
pub struct WireMatrix(pub Matrix);

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: String,
}

impl Serialize for WireMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        MatrixRepr {
            rows: self.0.rows,
            cols: self.0.cols,
            data: STANDARD.encode(bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WireMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        let bytes = STANDARD.decode(repr.data).map_err(D::Error::custom)?;
        let expected = repr
            .rows
            .checked_mul(repr.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| D::Error::custom("matrix size overflows"))?;
        if bytes.len() != expected {
            return Err(D::Error::custom(format!(
                "{}x{} matrix needs {expected} bytes, got {}",
                repr.rows,
                repr.cols,
                bytes.len()
            )));
        }
        Ok(Self(Matrix {
            rows: repr.rows,
            cols: repr.cols,
            data: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }))
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, FrameError> {
    let payload = serde_json::to_vec(msg).map_err(|e| FrameError::Malformed(e.to_string()))?;
    encode_frame(&payload)
}

/// Parses a frame payload. Unknown `"type"` tags are reported separately from
/// malformed JSON so the receiver can answer with an error and keep going.
pub fn decode_message(payload: &[u8]) -> Result<Message, FrameError> {
    let value: serde_json::Value =
        serde_json::from_slice(payload).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let tag = value
        .as_object()
        .ok_or_else(|| FrameError::Malformed("payload is not a JSON object".into()))?
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| FrameError::Malformed("missing \"type\" field".into()))?;
    if !KNOWN_TYPES.contains(&tag) {
        return Err(FrameError::UnknownType(tag.to_string()));
    }
    serde_json::from_value(value).map_err(|e| FrameError::Malformed(e.to_string()))
}
