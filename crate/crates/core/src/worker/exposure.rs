//! Intermediate files exposed to a single guest for a transfer.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::PathBuf;
use std::sync::Mutex;

use rand::RngCore;
use thiserror::Error;

pub const URI_SCHEME: &str = "skyrelay://";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("no intermediate file at {0}")]
    NotFound(String),
    #[error("guest token rejected for {0}")]
    Permission(String),
    #[error("intermediate file {0} has expired")]
    Gone(String),
    #[error("malformed intermediate uri `{0}`")]
    BadUri(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// `skyrelay://{addr}/{job_id}/{file_id}` split into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntermediateUri {
    pub addr: String,
    pub job_id: String,
    pub file_id: String,
}

impl IntermediateUri {
    pub fn parse(s: &str) -> Result<Self, FetchError> {
        let rest = s.strip_prefix(URI_SCHEME).ok_or_else(|| FetchError::BadUri(s.into()))?;
        let parts: Vec<&str> = rest.split('/').collect();
        match parts.as_slice() {
            [addr, job, file] if !addr.is_empty() && !job.is_empty() && !file.is_empty() => Ok(IntermediateUri {
                addr: addr.to_string(),
                job_id: job.to_string(),
                file_id: file.to_string(),
            }),
            _ => Err(FetchError::BadUri(s.into())),
        }
    }
}

impl std::fmt::Display for IntermediateUri {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{URI_SCHEME}{}/{}/{}", self.addr, self.job_id, self.file_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposedFile {
    pub uri: IntermediateUri,
    pub guest_token: String,
    pub expiry: u64,
    pub path: PathBuf,
    pub size_bytes: u64,
}

#[derive(Debug)]
struct Entry {
    file: ExposedFile,
    /// Set once the file is deleted after expiry; the entry stays so late
    /// fetches answer Gone rather than NotFound.
    removed: bool,
}

#[derive(Debug)]
pub struct Exposures {
    dir: PathBuf,
    entries: Mutex<HashMap<String, Entry>>,
}

fn random_hex<R: RngCore>(rng: &mut R, bytes: usize) -> String {
    let mut b = vec![0u8; bytes];
    rng.fill_bytes(&mut b);
    hex::encode(b)
}

impl Exposures {
    pub fn new(dir: PathBuf) -> std::io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Exposures { dir, entries: Mutex::new(HashMap::new()) })
    }

    /// Stores `data` and issues a guest token valid until `now + ttl_s`.
    pub fn expose<R: RngCore>(
        &self,
        addr: &str,
        job_id: &str,
        data: &[u8],
        now: u64,
        ttl_s: u64,
        rng: &mut R,
    ) -> Result<ExposedFile, FetchError> {
        let file_id = random_hex(rng, 12);
        let path = self.dir.join(&file_id);
        fs::write(&path, data).map_err(|e| FetchError::Io(e.to_string()))?;
        let file = ExposedFile {
            uri: IntermediateUri { addr: addr.into(), job_id: job_id.into(), file_id: file_id.clone() },
            guest_token: random_hex(rng, 24),
            expiry: now + ttl_s,
            path,
            size_bytes: data.len() as u64,
        };
        self.entries.lock().unwrap().insert(file_id, Entry { file: file.clone(), removed: false });
        Ok(file)
    }

    fn check(&self, uri: &IntermediateUri, token: &str, now: u64) -> Result<ExposedFile, FetchError> {
        let entries = self.entries.lock().unwrap();
        let e = entries
            .get(&uri.file_id)
            .filter(|e| e.file.uri.job_id == uri.job_id)
            .ok_or_else(|| FetchError::NotFound(uri.to_string()))?;
        if e.file.guest_token != token {
            return Err(FetchError::Permission(uri.to_string()));
        }
        if e.removed || now >= e.file.expiry {
            return Err(FetchError::Gone(uri.to_string()));
        }
        Ok(e.file.clone())
    }

    /// Reads up to `max_len` bytes at `offset`. Returns the chunk and the
    /// file's total size.
    pub fn read(
        &self,
        uri: &IntermediateUri,
        token: &str,
        offset: u64,
        max_len: u64,
        now: u64,
    ) -> Result<(Vec<u8>, u64), FetchError> {
        let file = self.check(uri, token, now)?;
        let io = |e: std::io::Error| FetchError::Io(e.to_string());
        let mut f = fs::File::open(&file.path).map_err(io)?;
        let start = offset.min(file.size_bytes);
        let len = max_len.min(file.size_bytes - start);
        f.seek(SeekFrom::Start(start)).map_err(io)?;
        let mut buf = vec![0u8; len as usize];
        f.read_exact(&mut buf).map_err(io)?;
        Ok((buf, file.size_bytes))
    }

    pub fn read_all(&self, uri: &IntermediateUri, token: &str, now: u64) -> Result<Vec<u8>, FetchError> {
        let file = self.check(uri, token, now)?;
        fs::read(&file.path).map_err(|e| FetchError::Io(e.to_string()))
    }

    /// Deletes expired files, keeping tombstones. Returns how many were removed.
    pub fn sweep(&self, now: u64) -> usize {
        let mut n = 0;
        for e in self.entries.lock().unwrap().values_mut() {
            if !e.removed && now >= e.file.expiry {
                let _ = fs::remove_file(&e.file.path);
                e.removed = true;
                n += 1;
            }
        }
        n
    }
}
