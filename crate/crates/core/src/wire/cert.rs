use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::b64;
use crate::keying::Pid;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CertError {
    #[error("certificate signature does not verify")]
    BadSignature,
    #[error("certificate expired at {0}")]
    Expired(u64),
    #[error("malformed public key: {0}")]
    BadKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertSubject {
    pub addr: String,
    pub pid: Pid,
}

/// Coordinator-signed statement that an instance address runs a dispatched
/// service program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject: CertSubject,
    pub issued_at: u64,
    pub expiry: u64,
    #[serde(with = "b64::array64")]
    pub signature: [u8; 64],
}

#[derive(Serialize)]
struct Signed<'a> {
    subject: &'a CertSubject,
    issued_at: u64,
    expiry: u64,
}

fn canonical(subject: &CertSubject, issued_at: u64, expiry: u64) -> Vec<u8> {
    serde_json::to_vec(&Signed { subject, issued_at, expiry }).expect("certificate fields serialize")
}

impl Certificate {
    pub fn verify(&self, key: &VerifyingKey, now: u64) -> Result<(), CertError> {
        let sig = Signature::from_bytes(&self.signature);
        key.verify(&canonical(&self.subject, self.issued_at, self.expiry), &sig)
            .map_err(|_| CertError::BadSignature)?;
        if now >= self.expiry {
            return Err(CertError::Expired(self.expiry));
        }
        Ok(())
    }
}

/// Signing keypair generated when the coordinator starts.
pub struct CertificateAuthority {
    key: SigningKey,
}

impl CertificateAuthority {
    pub fn generate() -> Self {
        CertificateAuthority { key: SigningKey::generate(&mut rand::rngs::OsRng) }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        CertificateAuthority { key: SigningKey::from_bytes(&seed) }
    }

    /// Secret seed, for persisting the authority across restarts.
    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn issue(&self, subject: CertSubject, issued_at: u64, expiry: u64) -> Certificate {
        let signature = self.key.sign(&canonical(&subject, issued_at, expiry)).to_bytes();
        Certificate { subject, issued_at, expiry, signature }
    }
}

pub fn public_key_hex(key: &VerifyingKey) -> String {
    hex::encode(key.as_bytes())
}

pub fn parse_public_key(s: &str) -> Result<VerifyingKey, CertError> {
    let mut b = [0u8; 32];
    hex::decode_to_slice(s.trim(), &mut b).map_err(|e| CertError::BadKey(e.to_string()))?;
    VerifyingKey::from_bytes(&b).map_err(|e| CertError::BadKey(e.to_string()))
}
