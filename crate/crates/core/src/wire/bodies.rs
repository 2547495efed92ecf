//! Message bodies, one struct per kind.

use serde::{Deserialize, Serialize};

use super::cert::Certificate;
use crate::domain::{CredentialSet, FileMeta, FoiSequence};
use crate::encoding::b64;
use crate::keying::{CredentialCiphertext, KeySchedule, Pid, SecretKey};

/// ERROR reply codes.
pub mod code {
    pub const ALREADY_REGISTERED: &str = "AlreadyRegistered";
    pub const REGISTRATION_ERROR: &str = "RegistrationError";
    pub const NO_INSTANCE_AVAILABLE: &str = "NoInstanceAvailable";
    pub const VERIFICATION_FAILED: &str = "VerificationFailed";
    pub const NOT_FOUND: &str = "NotFound";
    pub const CREDENTIAL_AUTH_FAILURE: &str = "CredentialAuthFailure";
    pub const PERMISSION_ERROR: &str = "PermissionError";
    pub const GONE: &str = "Gone";
    pub const QUOTA_ERROR: &str = "QuotaError";
    pub const TRANSFORM_ERROR: &str = "TransformError";
    pub const STORAGE_ERROR: &str = "StorageError";
    pub const NETWORK_ERROR: &str = "NetworkError";
    pub const SHUTDOWN: &str = "Shutdown";
    pub const INVALID_REQUEST: &str = "InvalidRequest";
    pub const CHANNEL_CLOSED: &str = "ChannelClosed";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorBody { code: code.to_string(), message: message.into(), step: None }
    }

    pub fn at_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Empty {}

/// Worker → coordinator: offer an instance for sharing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterInstance {
    pub addr: String,
    pub os_info: String,
    pub hardware_info: String,
    pub share_until: u64,
    /// Free bandwidth in scheduler units.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: u64,
}

fn default_bandwidth() -> u64 {
    100
}

/// Configuration bundle standing in for the dispatched service binary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SspPayload {
    pub pid: Pid,
    pub initial_key: SecretKey,
    pub schedule: KeySchedule,
    pub share_until: u64,
    pub coordinator: String,
    pub liveness_interval_s: u64,
}

/// Coordinator → worker reply to REGISTER_INSTANCE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchSsp {
    pub payload: SspPayload,
    pub certificate: Certificate,
}

/// Worker → coordinator acknowledgement that the key chain is installed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyInit {
    pub pid: Pid,
    /// Hex of `H(k_serv ‖ "key-init")`.
    pub proof: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestInstance {
    pub user_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub pid: Pid,
    pub addr: String,
    pub remaining_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceGrant {
    pub pid: Pid,
    pub addr: String,
    pub certificate: Certificate,
    #[serde(with = "b64::array32")]
    pub r: [u8; 32],
    pub key: SecretKey,
    pub epoch_hint: u64,
    /// Other allocatable instances, most remaining share time first.
    #[serde(default)]
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyTransfer {
    pub requester: String,
    pub sender_id: String,
    pub pid: Pid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyGrant {
    pub pid: Pid,
    pub addr: String,
    #[serde(with = "b64::array32")]
    pub r: [u8; 32],
    pub key: SecretKey,
    pub epoch_hint: u64,
}

/// How a job proves storage access: plaintext to one's own private
/// instance, sealed to a shared one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JobAuth {
    Plain { credentials: CredentialSet },
    Sealed { ciphertext: CredentialCiphertext },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitOp {
    pub auth: JobAuth,
    pub fois: FoiSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHeartbeat {
    pub job_id: String,
    pub step: usize,
    pub bytes_moved: u64,
}

/// Worker → coordinator liveness ping; one-way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivenessPing {
    pub pid: Pid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushedFile {
    pub name: String,
    #[serde(with = "b64::bytes")]
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: String,
    pub outputs: Vec<FileMeta>,
    #[serde(default)]
    pub pushed: Vec<PushedFile>,
    pub bytes_moved: u64,
}

/// Agent → worker: fetch `path` with the agent's credentials and expose
/// it for a transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposeRequest {
    pub auth: JobAuth,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exposed {
    pub uri: String,
    pub guest_token: String,
    pub expiry: u64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchIntermediate {
    pub uri: String,
    pub guest_token: String,
    pub offset: u64,
    pub max_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchChunk {
    pub offset: u64,
    pub total: u64,
    #[serde(with = "b64::bytes")]
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownNotice {
    pub pid: Pid,
    pub reason: String,
}
