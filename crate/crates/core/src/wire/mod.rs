//! Typed message envelope and the framed channel carrying it among agent,
//! coordinator and worker.
//!
//! A frame is a 4-byte big-endian payload length followed by the UTF-8 JSON
//! encoding of a [`Message`]. Message bodies are documented in
//! `docs/protocol.md`.

mod bodies;
mod cert;
mod channel;
mod frame;

pub use bodies::*;
pub use ed25519_dalek::VerifyingKey;
pub use cert::{parse_public_key, public_key_hex, CertError, CertSubject, Certificate, CertificateAuthority};
pub use channel::{
    open_channel, split_stream, ByteCounters, Channel, FrameSink, FrameSource, NetOptions, SharedSink, TrafficTap,
};
pub use frame::{
    decode_message, decode_payload, decode_stream, encode_message, pairing_violations, Message, MessageKind,
    WireError, MAX_FRAME_BYTES,
};
