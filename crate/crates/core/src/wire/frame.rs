use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Largest accepted payload, excluding the length prefix.
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame error: {0}")]
    Frame(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("connect error: {0}")]
    Connect(String),
    #[error("timed out")]
    Timeout,
    #[error("channel closed")]
    ChannelClosed,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String, step: Option<usize> },
    #[error("unexpected reply {0:?}")]
    UnexpectedReply(MessageKind),
}

impl WireError {
    /// Error code of a remote ERROR reply, if this is one.
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            WireError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    RegisterInstance,
    DispatchSsp,
    KeyInit,
    RequestInstance,
    InstanceGrant,
    SubmitOp,
    Heartbeat,
    Result,
    ExposeGrant,
    TransferNotify,
    VerifyTransfer,
    VerifyGrant,
    FetchIntermediate,
    ShutdownNotice,
    Ack,
    Error,
}

impl MessageKind {
    /// Kinds that expect exactly one terminal reply with the same seq.
    pub fn is_request(self) -> bool {
        matches!(
            self,
            MessageKind::RegisterInstance
                | MessageKind::KeyInit
                | MessageKind::RequestInstance
                | MessageKind::SubmitOp
                | MessageKind::ExposeGrant
                | MessageKind::VerifyTransfer
                | MessageKind::FetchIntermediate
                | MessageKind::ShutdownNotice
        )
    }

    /// Kinds that close a request. The grant kinds are typed results.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            MessageKind::Result
                | MessageKind::Ack
                | MessageKind::Error
                | MessageKind::DispatchSsp
                | MessageKind::InstanceGrant
                | MessageKind::VerifyGrant
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub seq: u64,
    pub body: Value,
}

impl Message {
    pub fn new(kind: MessageKind, seq: u64, body: impl Serialize) -> Self {
        let body = serde_json::to_value(body).expect("message bodies serialize");
        Message { kind, seq, body }
    }

    pub fn parse_body<T: serde::de::DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| WireError::Decode(format!("{:?} body: {e}", self.kind)))
    }
}

/// Length-prefixed frame for `m`.
pub fn encode_message(m: &Message) -> Result<Vec<u8>, WireError> {
    if !m.body.is_object() {
        return Err(WireError::Decode("body must be a JSON object".into()));
    }
    let payload = serde_json::to_vec(m).map_err(|e| WireError::Decode(e.to_string()))?;
    if payload.len() > MAX_FRAME_BYTES {
        return Err(WireError::Frame(format!("payload of {} bytes exceeds the 16 MiB limit", payload.len())));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes the JSON payload of one frame.
pub fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let m: Message = serde_json::from_slice(payload).map_err(|e| WireError::Decode(e.to_string()))?;
    if !m.body.is_object() {
        return Err(WireError::Decode("body must be a JSON object".into()));
    }
    Ok(m)
}

/// Decodes exactly one complete frame.
pub fn decode_message(frame: &[u8]) -> Result<Message, WireError> {
    let (m, used) = decode_one(frame)?;
    if used != frame.len() {
        return Err(WireError::Frame(format!("{} trailing bytes after frame", frame.len() - used)));
    }
    Ok(m)
}

fn decode_one(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Frame("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::Frame(format!("declared length {len} exceeds the 16 MiB limit")));
    }
    if bytes.len() < 4 + len {
        return Err(WireError::Frame(format!("truncated frame: {} of {len} payload bytes", bytes.len() - 4)));
    }
    Ok((decode_payload(&bytes[4..4 + len])?, 4 + len))
}

/// Decodes a concatenation of frames, such as a traffic capture.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<Message>, WireError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (m, used) = decode_one(bytes)?;
        out.push(m);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Checks that every request in a connection log got exactly one terminal
/// reply with its seq and that no heartbeat follows that reply.
pub fn pairing_violations(log: &[Message]) -> Vec<String> {
    let mut requests: HashMap<u64, MessageKind> = HashMap::new();
    let mut closed: HashMap<u64, usize> = HashMap::new();
    let mut problems = Vec::new();
    for m in log {
        if m.kind.is_request() {
            if requests.insert(m.seq, m.kind).is_some() {
                problems.push(format!("seq {} reused by a second request", m.seq));
            }
        } else if m.kind.is_terminal() {
            *closed.entry(m.seq).or_default() += 1;
        } else if m.kind == MessageKind::Heartbeat && requests.contains_key(&m.seq) && closed.contains_key(&m.seq) {
            problems.push(format!("heartbeat for seq {} after its terminal reply", m.seq));
        }
    }
    for (seq, kind) in &requests {
        match closed.get(seq).copied().unwrap_or(0) {
            1 => {}
            n => problems.push(format!("{kind:?} seq {seq} has {n} terminal replies")),
        }
    }
    for seq in closed.keys() {
        if !requests.contains_key(seq) {
            problems.push(format!("terminal reply for unknown seq {seq}"));
        }
    }
    problems.sort();
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    const KINDS: [MessageKind; 16] = [
        MessageKind::RegisterInstance,
        MessageKind::DispatchSsp,
        MessageKind::KeyInit,
        MessageKind::RequestInstance,
        MessageKind::InstanceGrant,
        MessageKind::SubmitOp,
        MessageKind::Heartbeat,
        MessageKind::Result,
        MessageKind::ExposeGrant,
        MessageKind::TransferNotify,
        MessageKind::VerifyTransfer,
        MessageKind::VerifyGrant,
        MessageKind::FetchIntermediate,
        MessageKind::ShutdownNotice,
        MessageKind::Ack,
        MessageKind::Error,
    ];

    fn arb_body() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(Value::from),
            any::<u32>().prop_map(Value::from),
            ".{0,16}".prop_map(Value::from),
        ];
        prop::collection::btree_map("[a-z_]{1,8}", leaf, 0..6)
            .prop_map(|m| Value::Object(m.into_iter().collect()))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(k in 0usize..16, seq in any::<u64>(), body in arb_body()) {
            let m = Message { kind: KINDS[k], seq, body };
            let frame = encode_message(&m).unwrap();
            prop_assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
            prop_assert_eq!(decode_message(&frame).unwrap(), m);
        }

        #[test]
        fn every_truncation_is_a_frame_error(cut in 0usize..40) {
            let frame = encode_message(&Message::new(MessageKind::Ack, 3, json!({"ok": true}))).unwrap();
            let cut = cut.min(frame.len() - 1);
            prop_assert!(matches!(decode_message(&frame[..cut]), Err(WireError::Frame(_))));
        }
    }

    #[test]
    fn kind_strings_are_screaming_snake() {
        let frame = encode_message(&Message::new(MessageKind::RegisterInstance, 1, json!({}))).unwrap();
        let text = std::str::from_utf8(&frame[4..]).unwrap();
        assert!(text.contains("\"REGISTER_INSTANCE\""), "{text}");
    }

    #[test]
    fn unknown_kind_is_decode_error() {
        let payload = br#"{"kind":"FROBNICATE","seq":1,"body":{}}"#;
        assert!(matches!(decode_payload(payload), Err(WireError::Decode(_))));
        assert!(matches!(decode_payload(br#"{"kind":"ACK","seq":1,"body":[]}"#), Err(WireError::Decode(_))));
    }

    #[test]
    fn oversize_is_frame_error() {
        let big = "x".repeat(MAX_FRAME_BYTES);
        let m = Message::new(MessageKind::Result, 1, json!({ "data": big }));
        assert!(matches!(encode_message(&m), Err(WireError::Frame(_))));
        let mut forged = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes().to_vec();
        forged.extend_from_slice(b"{}");
        assert!(matches!(decode_message(&forged), Err(WireError::Frame(_))));
    }

    #[test]
    fn pairing_checker() {
        let ok = vec![
            Message::new(MessageKind::SubmitOp, 1, json!({})),
            Message::new(MessageKind::Heartbeat, 1, json!({})),
            Message::new(MessageKind::Result, 1, json!({})),
            Message::new(MessageKind::RequestInstance, 2, json!({})),
            Message::new(MessageKind::InstanceGrant, 2, json!({})),
        ];
        assert!(pairing_violations(&ok).is_empty());
        let mut bad = ok.clone();
        bad.push(Message::new(MessageKind::Ack, 2, json!({})));
        bad.push(Message::new(MessageKind::Heartbeat, 1, json!({})));
        bad.push(Message::new(MessageKind::ExposeGrant, 3, json!({})));
        assert_eq!(pairing_violations(&bad).len(), 3);
    }
}
