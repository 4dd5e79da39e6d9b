//! Length-prefixed binary framing for the teacher service.
//!
//! ```text
//! frame   := body_len:u32 body
//! body    := version:u32 msg_type:u8 request_id:u64 payload
//!
//! QUERY      (0x01) n_items:u32 { prompt_len:u32 f64* n_tokens:u32 u32* }*
//! QUERY_OK   (0x02) calls_remaining:u64 n_items:u32 { n_logits:u32 f64* }*
//! STATUS     (0x03) (empty)
//! STATUS_OK  (0x04) calls_used:u64 budget:u64 checksum_len:u32 utf8*
//! ERROR      (0x05) code:u8 calls_used:u64 budget:u64 message_len:u32 utf8*
//! ```
//!
//! All numbers are little-endian. One QUERY is one metered call regardless of
//! how many items it carries.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const WIRE_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub const MSG_QUERY: u8 = 0x01;
pub const MSG_QUERY_OK: u8 = 0x02;
pub const MSG_STATUS: u8 = 0x03;
pub const MSG_STATUS_OK: u8 = 0x04;
pub const MSG_ERROR: u8 = 0x05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Budget = 1,
    Protocol = 2,
    Service = 3,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ErrorCode::Budget),
            2 => Ok(ErrorCode::Protocol),
            3 => Ok(ErrorCode::Service),
            other => Err(Error::Protocol(format!("unknown error code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub prompt: Vec<f64>,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub request_id: u64,
    pub items: Vec<QueryItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub request_id: u64,
    pub calls_remaining: u64,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceStatus {
    pub calls_used: u64,
    pub budget: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Query(InferenceRequest),
    QueryOk(InferenceResponse),
    Status { request_id: u64 },
    StatusOk { request_id: u64, status: ServiceStatus },
    Error { request_id: u64, code: ErrorCode, calls_used: u64, budget: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    U8,
    U32,
    U64,
    F64Array,
    U32Array,
    Utf8,
}

/// Every field of every message body, in wire order. The header fields
/// (version, msg_type, request_id) are common to all messages.
pub fn schema() -> Vec<(&'static str, Vec<(&'static str, FieldType)>)> {
    use FieldType::*;
    let header = [("version", U32), ("msg_type", U8), ("request_id", U64)];
    let with = |rest: &[(&'static str, FieldType)]| header.iter().chain(rest).copied().collect::<Vec<_>>();
    vec![
        ("QUERY", with(&[("n_items", U32), ("item.prompt", F64Array), ("item.token_ids", U32Array)])),
        ("QUERY_OK", with(&[("calls_remaining", U64), ("n_items", U32), ("item.logits", F64Array)])),
        ("STATUS", with(&[])),
        ("STATUS_OK", with(&[("calls_used", U64), ("budget", U64), ("checksum", Utf8)])),
        ("ERROR", with(&[("code", U8), ("calls_used", U64), ("budget", U64), ("message", Utf8)])),
    ]
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Message {
    pub fn request_id(&self) -> u64 {
        match self {
            Message::Query(r) => r.request_id,
            Message::QueryOk(r) => r.request_id,
            Message::Status { request_id }
            | Message::StatusOk { request_id, .. }
            | Message::Error { request_id, .. } => *request_id,
        }
    }

    /// Body bytes (without the length prefix).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        let ty = match self {
            Message::Query(_) => MSG_QUERY,
            Message::QueryOk(_) => MSG_QUERY_OK,
            Message::Status { .. } => MSG_STATUS,
            Message::StatusOk { .. } => MSG_STATUS_OK,
            Message::Error { .. } => MSG_ERROR,
        };
        out.push(ty);
        out.extend_from_slice(&self.request_id().to_le_bytes());
        match self {
            Message::Query(r) => {
                out.extend_from_slice(&(r.items.len() as u32).to_le_bytes());
                for item in &r.items {
                    put_f64s(&mut out, &item.prompt);
                    out.extend_from_slice(&(item.token_ids.len() as u32).to_le_bytes());
                    item.token_ids.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
                }
            }
            Message::QueryOk(r) => {
                out.extend_from_slice(&r.calls_remaining.to_le_bytes());
                out.extend_from_slice(&(r.logits.len() as u32).to_le_bytes());
                r.logits.iter().for_each(|l| put_f64s(&mut out, l));
            }
            Message::Status { .. } => {}
            Message::StatusOk { status, .. } => {
                out.extend_from_slice(&status.calls_used.to_le_bytes());
                out.extend_from_slice(&status.budget.to_le_bytes());
                put_str(&mut out, &status.checksum);
            }
            Message::Error { code, calls_used, budget, message, .. } => {
                out.push(*code as u8);
                out.extend_from_slice(&calls_used.to_le_bytes());
                out.extend_from_slice(&budget.to_le_bytes());
                put_str(&mut out, message);
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: body, pos: 0 };
        let version = r.u32()?;
        if version != WIRE_VERSION {
            return Err(Error::Protocol(format!("unsupported wire version {version}")));
        }
        let ty = r.u8()?;
        let request_id = r.u64()?;
        let msg = match ty {
            MSG_QUERY => {
                let n = r.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    let prompt = r.f64s()?;
                    let k = r.len_checked(4)?;
                    let token_ids = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    items.push(QueryItem { prompt, token_ids });
                }
                Message::Query(InferenceRequest { request_id, items })
            }
            MSG_QUERY_OK => {
                let calls_remaining = r.u64()?;
                let n = r.u32()? as usize;
                let mut logits = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    logits.push(r.f64s()?);
                }
                Message::QueryOk(InferenceResponse { request_id, calls_remaining, logits })
            }
            MSG_STATUS => Message::Status { request_id },
            MSG_STATUS_OK => Message::StatusOk {
                request_id,
                status: ServiceStatus { calls_used: r.u64()?, budget: r.u64()?, checksum: r.string()? },
            },
            MSG_ERROR => Message::Error {
                request_id,
                code: ErrorCode::from_u8(r.u8()?)?,
                calls_used: r.u64()?,
                budget: r.u64()?,
                message: r.string()?,
            },
            other => return Err(Error::Protocol(format!("unknown message type 0x{other:02x}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Protocol(format!("{} trailing bytes in message", body.len() - r.pos)));
        }
        Ok(msg)
    }
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    let body = msg.encode();
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a new frame.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol("message truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a count and checks that `count * elem` bytes remain.
    fn len_checked(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Protocol(format!("declared length {n} exceeds message size")));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_checked(8)?;
        (0..n).map(|_| self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len_checked(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Protocol("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let b = Message::Status { request_id: 7 }.encode();
        assert_eq!(b, [&1u32.to_le_bytes()[..], &[MSG_STATUS], &7u64.to_le_bytes()].concat());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Message::decode(&[1, 0, 0, 0, 0x09, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(Message::decode(&[2, 0, 0, 0, MSG_STATUS, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        let mut q = Message::Query(InferenceRequest { request_id: 1, items: vec![] }).encode();
        q.push(0);
        assert!(Message::decode(&q).is_err());
        // claims a million f64s in a tiny message
        let mut big = Message::Query(InferenceRequest { request_id: 1, items: vec![] }).encode();
        big.truncate(13);
        big.extend_from_slice(&1u32.to_le_bytes());
        big.extend_from_slice(&1_000_000u32.to_le_bytes());
        assert!(matches!(Message::decode(&big), Err(Error::Protocol(_))));
    }

    #[test]
    fn firewall_schema_only_carries_prompts_tokens_and_logits() {
        let mut arrays = Vec::new();
        for (msg, fields) in schema() {
            for (name, ty) in fields {
                let lower = name.to_lowercase();
                assert!(
                    !["weight", "grad", "param", "embed", "hidden", "theta"].iter().any(|w| lower.contains(w)),
                    "{msg}.{name}"
                );
                if matches!(ty, FieldType::F64Array | FieldType::U32Array) {
                    arrays.push(format!("{msg}.{name}"));
                }
            }
        }
        assert_eq!(arrays, ["QUERY.item.prompt", "QUERY.item.token_ids", "QUERY_OK.item.logits"]);
    }

    proptest! {
        #[test]
        fn query_roundtrip(id in any::<u64>(), prompt in proptest::collection::vec(any::<f64>(), 0..20),
                           tokens in proptest::collection::vec(any::<u32>(), 0..20)) {
            let m = Message::Query(InferenceRequest { request_id: id, items: vec![QueryItem { prompt, token_ids: tokens }] });
            let mut buf = Vec::new();
            write_frame(&mut buf, &m).unwrap();
            let body = read_frame(&mut buf.as_slice()).unwrap().unwrap();
            let back = Message::decode(&body).unwrap();
            prop_assert_eq!(back.encode(), m.encode());
        }
    }
}
