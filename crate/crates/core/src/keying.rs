//! Temporal key chain shared by the coordinator and a shared worker, user
//! key derivation, and authenticated encryption of storage credentials.
//!
//! Byte encodings are fixed: the instance id is 16 raw bytes, timestamps
//! are 8-byte big-endian seconds, and inputs to the hash are concatenated
//! without separators. The hash is SHA-256.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::CredentialSet;
use crate::encoding::{b64, hex16};

pub const MIN_OFFSET_S: u64 = 1;
pub const MAX_OFFSET_S: u64 = 512;
pub const DEFAULT_INTERVAL_S: u64 = 180;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyingError {
    #[error("time offset {0}s outside [1, 512]")]
    InvalidOffset(u64),
    #[error("rotation interval must be positive")]
    InvalidInterval,
    #[error("credential authentication failed (stale epoch or forged ciphertext)")]
    CredentialAuthFailure,
    #[error("credential encoding: {0}")]
    Encoding(String),
}

/// Identifier of a dispatched service program.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pid(#[serde(with = "hex16")] pub [u8; 16]);

impl Pid {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Pid(b)
    }
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pid({self})")
    }
}

impl std::str::FromStr for Pid {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut b = [0u8; 16];
        hex::decode_to_slice(s, &mut b)?;
        Ok(Pid(b))
    }
}

/// 32-byte symmetric key. Debug output never shows the bytes.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey(#[serde(with = "b64::array32")] pub [u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        SecretKey(b)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

fn hash(parts: &[&[u8]]) -> SecretKey {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    SecretKey(h.finalize().into())
}

pub fn round_minute(t: u64) -> u64 {
    t - t % 60
}

/// `H(pid ‖ round_minute(t))`.
pub fn initial_server_key(pid: &Pid, t: u64) -> SecretKey {
    hash(&[&pid.0, &round_minute(t).to_be_bytes()])
}

fn check_offset(offset_s: u64) -> Result<(), KeyingError> {
    if (MIN_OFFSET_S..=MAX_OFFSET_S).contains(&offset_s) {
        Ok(())
    } else {
        Err(KeyingError::InvalidOffset(offset_s))
    }
}

/// `H(key ‖ round_minute(epoch_time) + offset_s)`.
pub fn rotate_key(key: &SecretKey, epoch_time: u64, offset_s: u64) -> Result<SecretKey, KeyingError> {
    check_offset(offset_s)?;
    Ok(hash(&[&key.0, &(round_minute(epoch_time) + offset_s).to_be_bytes()]))
}

/// `H(k_serv ‖ r)`.
pub fn derive_user_key(server_key: &SecretKey, r: &[u8; 32]) -> SecretKey {
    hash(&[&server_key.0, r])
}

/// Public parameters of a key chain. Both ends derive identical keys from
/// the same schedule and initial key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySchedule {
    /// Chain start, rounded down to the minute.
    pub t0: u64,
    pub offset_s: u64,
    pub interval_s: u64,
}

impl KeySchedule {
    pub fn new(t0: u64, offset_s: u64, interval_s: u64) -> Result<Self, KeyingError> {
        check_offset(offset_s)?;
        if interval_s == 0 {
            return Err(KeyingError::InvalidInterval);
        }
        Ok(KeySchedule { t0: round_minute(t0), offset_s, interval_s })
    }

    /// Scheduled time of epoch `n`.
    pub fn epoch_time(&self, epoch: u64) -> u64 {
        self.t0 + epoch * self.interval_s
    }

    /// Epoch in force at wall-clock time `now`.
    pub fn epoch_at(&self, now: u64) -> u64 {
        now.saturating_sub(self.t0) / self.interval_s
    }
}

/// Proof that a worker installed `key`: `H(key ‖ "key-init")`.
pub fn key_confirmation(key: &SecretKey) -> [u8; 32] {
    hash(&[&key.0, b"key-init"]).0
}

/// Key at `epoch`, starting from `initial` at epoch 0.
pub fn chain_key(initial: &SecretKey, schedule: &KeySchedule, epoch: u64) -> SecretKey {
    let mut key = *initial;
    for n in 1..=epoch {
        key = rotate_key(&key, schedule.epoch_time(n), schedule.offset_s).expect("schedule offset validated");
    }
    key
}

/// One party's view of the chain: the current key plus the previous one,
/// kept for a single epoch of grace.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochKeyState {
    pub pid: Pid,
    pub schedule: KeySchedule,
    pub epoch: u64,
    pub key_current: SecretKey,
    pub key_previous: Option<SecretKey>,
}

impl fmt::Debug for EpochKeyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpochKeyState")
            .field("pid", &self.pid)
            .field("schedule", &self.schedule)
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

impl EpochKeyState {
    /// Chain rooted at `initial_server_key(pid, t0)`.
    pub fn for_instance(pid: Pid, schedule: KeySchedule) -> Self {
        let k0 = initial_server_key(&pid, schedule.t0);
        Self::from_initial(pid, schedule, k0)
    }

    /// Chain rooted at a key received from the coordinator.
    pub fn from_initial(pid: Pid, schedule: KeySchedule, initial: SecretKey) -> Self {
        EpochKeyState { pid, schedule, epoch: 0, key_current: initial, key_previous: None }
    }

    pub fn rotate(&mut self) {
        let next = self.epoch + 1;
        let key = rotate_key(&self.key_current, self.schedule.epoch_time(next), self.schedule.offset_s)
            .expect("schedule offset validated");
        self.key_previous = Some(self.key_current);
        self.key_current = key;
        self.epoch = next;
    }

    /// Rotates forward until `epoch` is reached. Never moves backwards.
    pub fn advance_to(&mut self, epoch: u64) {
        while self.epoch < epoch {
            self.rotate();
        }
    }

    pub fn advance_to_time(&mut self, now: u64) {
        self.advance_to(self.schedule.epoch_at(now));
    }

    /// Key held for `epoch`, if it is the current or the previous one.
    pub fn key_for_epoch(&self, epoch: u64) -> Option<SecretKey> {
        if epoch == self.epoch {
            Some(self.key_current)
        } else if epoch + 1 == self.epoch {
            self.key_previous
        } else {
            None
        }
    }

    /// Fresh user grant bound to the current epoch.
    pub fn issue_grant<R: RngCore + CryptoRng>(&self, rng: &mut R) -> UserKeyGrant {
        let mut r = [0u8; 32];
        rng.fill_bytes(&mut r);
        UserKeyGrant { r, key: derive_user_key(&self.key_current, &r), epoch_issued: self.epoch }
    }
}

/// Per-user randomness and the key derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserKeyGrant {
    #[serde(with = "b64::array32")]
    pub r: [u8; 32],
    pub key: SecretKey,
    pub epoch_issued: u64,
}

/// Credentials sealed under a user key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialCiphertext {
    #[serde(with = "b64::array12")]
    pub nonce: [u8; 12],
    #[serde(with = "b64::bytes")]
    pub body: Vec<u8>,
    #[serde(with = "b64::array32")]
    pub r: [u8; 32],
    pub epoch_hint: u64,
}

/// AES-256-GCM under `key` with a fresh random nonce.
pub fn seal(key: &SecretKey, plaintext: &[u8]) -> ([u8; 12], Vec<u8>) {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("32-byte key");
    let mut nonce = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut nonce);
    let body = cipher.encrypt(Nonce::from_slice(&nonce), plaintext).expect("in-memory AEAD cannot fail");
    (nonce, body)
}

pub fn open(key: &SecretKey, nonce: &[u8; 12], body: &[u8]) -> Option<Vec<u8>> {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("32-byte key");
    cipher.decrypt(Nonce::from_slice(nonce), body).ok()
}

pub fn encrypt_credentials(grant: &UserKeyGrant, sc: &CredentialSet) -> CredentialCiphertext {
    let plaintext = serde_json::to_vec(sc).expect("credential set serializes");
    let (nonce, body) = seal(&grant.key, &plaintext);
    CredentialCiphertext { nonce, body, r: grant.r, epoch_hint: grant.epoch_issued }
}

/// Decrypts with an explicit user key; used by the worker path and by
/// wrong-key checks.
pub fn open_credentials(key: &SecretKey, ct: &CredentialCiphertext) -> Result<CredentialSet, KeyingError> {
    let plain = open(key, &ct.nonce, &ct.body).ok_or(KeyingError::CredentialAuthFailure)?;
    serde_json::from_slice(&plain).map_err(|e| KeyingError::Encoding(e.to_string()))
}

/// Worker-side decryption. Tries the epoch key named by the hint, then the
/// previous epoch key once.
pub fn decrypt_credentials(state: &EpochKeyState, ct: &CredentialCiphertext) -> Result<CredentialSet, KeyingError> {
    let mut tried: Option<SecretKey> = None;
    if let Some(k) = state.key_for_epoch(ct.epoch_hint) {
        match open_credentials(&derive_user_key(&k, &ct.r), ct) {
            Err(KeyingError::CredentialAuthFailure) => tried = Some(k),
            other => return other,
        }
    }
    match state.key_previous {
        Some(prev) if tried != Some(prev) && ct.epoch_hint + 1 >= state.epoch => {
            open_credentials(&derive_user_key(&prev, &ct.r), ct)
        }
        _ => Err(KeyingError::CredentialAuthFailure),
    }
}
