//! Token-authenticated object store standing in for a cloud storage
//! provider, plus metadata-only shadow synchronization.
//!
//! [`LocalStore`] keeps each account under `accounts/<id>/data` and a
//! sidecar revision index at `accounts/<id>/index.json`. Bearer tokens live
//! in `tokens.json` at the store root so that several processes can share
//! one store directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::UNIX_EPOCH;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{self, SharedClock};
use crate::domain::{self, DomainError, FileKind, FileMeta};

pub const DEFAULT_QUOTA_BYTES: u64 = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail")]
pub enum StorageError {
    #[error("authentication failed")]
    AuthError,
    #[error("permission denied: {0}")]
    PermissionError(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("quota exceeded: {used} of {cap} bytes")]
    QuotaError { used: u64, cap: u64 },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("not a folder: {0}")]
    NotAFolder(String),
    #[error("is a folder: {0}")]
    IsAFolder(String),
    #[error("storage i/o: {0}")]
    Io(String),
}

impl From<DomainError> for StorageError {
    fn from(e: DomainError) -> Self {
        StorageError::InvalidPath(e.to_string())
    }
}

impl From<io::Error> for StorageError {
    fn from(e: io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, StorageError>;

/// Proof of a successful [`ObjectStore::authenticate`]. Only stores mint these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    account_id: String,
}

impl Session {
    pub fn account_id(&self) -> &str {
        &self.account_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum BasicOp {
    CreateFile {
        path: String,
        #[serde(default)]
        content: String,
    },
    CreateFolder {
        path: String,
    },
    Delete {
        path: String,
    },
    Rename {
        from: String,
        to: String,
    },
}

pub trait ObjectStore: Send + Sync {
    fn authenticate(&self, token: &str) -> Result<Session>;

    /// Authenticates `token` and checks it belongs to `account_id`.
    fn authorize(&self, token: &str, account_id: &str) -> Result<Session> {
        let session = self.authenticate(token)?;
        if session.account_id != account_id {
            return Err(StorageError::PermissionError(format!("token does not grant access to `{account_id}`")));
        }
        Ok(session)
    }

    fn basic_op(&self, session: &Session, op: &BasicOp) -> Result<Option<FileMeta>>;
    fn get_object(&self, session: &Session, path: &str) -> Result<Vec<u8>>;
    fn put_object(&self, session: &Session, path: &str, bytes: &[u8]) -> Result<FileMeta>;
    fn stat(&self, session: &Session, path: &str) -> Result<FileMeta>;
    /// Children of a folder, or the entry itself for a file.
    fn list_meta(&self, session: &Session, path: &str) -> Result<Vec<FileMeta>>;
}

pub type StoreHandle = Arc<dyn ObjectStore>;

#[derive(Debug, Default, Serialize, Deserialize)]
struct TokenFile {
    tokens: BTreeMap<String, String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct RevisionIndex {
    /// Last revision handed out per path; kept after deletion so a re-created
    /// path never reuses a revision.
    revisions: BTreeMap<String, u64>,
}

#[derive(Debug, Default)]
struct AccountState {
    index: RevisionIndex,
    index_stamp: Option<(u64, std::time::SystemTime)>,
    usage: Option<u64>,
}

/// Serializes writers of one (account, path).
type PathLock = Arc<Mutex<()>>;

pub struct LocalStore {
    root: PathBuf,
    quota_bytes: u64,
    clock: SharedClock,
    tokens: RwLock<BTreeMap<String, String>>,
    accounts: Mutex<HashMap<String, Arc<Mutex<AccountState>>>>,
    path_locks: Mutex<HashMap<(String, String), PathLock>>,
    tmp_counter: AtomicU64,
}

impl std::fmt::Debug for LocalStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalStore").field("root", &self.root).field("quota_bytes", &self.quota_bytes).finish()
    }
}

fn valid_account_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn write_atomic(target: &Path, bytes: &[u8], tmp: &Path) -> io::Result<()> {
    fs::write(tmp, bytes)?;
    fs::rename(tmp, target)
}

impl LocalStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Self::open_with(root, DEFAULT_QUOTA_BYTES, clock::system())
    }

    pub fn open_with(root: impl Into<PathBuf>, quota_bytes: u64, clock: SharedClock) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("accounts"))?;
        let store = LocalStore {
            root,
            quota_bytes,
            clock,
            tokens: RwLock::new(BTreeMap::new()),
            accounts: Mutex::new(HashMap::new()),
            path_locks: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        };
        store.reload_tokens()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn tokens_path(&self) -> PathBuf {
        self.root.join("tokens.json")
    }

    fn reload_tokens(&self) -> Result<()> {
        let file: TokenFile = match fs::read(self.tokens_path()) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| StorageError::Io(e.to_string()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => TokenFile::default(),
            Err(e) => return Err(e.into()),
        };
        *self.tokens.write().unwrap() = file.tokens;
        Ok(())
    }

    fn persist_tokens(&self, tokens: &BTreeMap<String, String>) -> Result<()> {
        let body = serde_json::to_vec_pretty(&TokenFile { tokens: tokens.clone() }).expect("token map serializes");
        write_atomic(&self.tokens_path(), &body, &self.tmp_file())?;
        Ok(())
    }

    /// Creates the account if needed and returns a fresh bearer token for it.
    pub fn create_account(&self, account_id: &str) -> Result<String> {
        let mut raw = [0u8; 24];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        self.add_token(account_id, &token)?;
        Ok(token)
    }

    pub fn add_token(&self, account_id: &str, token: &str) -> Result<()> {
        if !valid_account_id(account_id) {
            return Err(StorageError::PermissionError(format!("invalid account id `{account_id}`")));
        }
        fs::create_dir_all(self.data_root(account_id))?;
        self.reload_tokens()?;
        let mut tokens = self.tokens.write().unwrap();
        tokens.insert(token.to_string(), account_id.to_string());
        self.persist_tokens(&tokens)
    }

    pub fn revoke(&self, token: &str) -> Result<()> {
        self.reload_tokens()?;
        let mut tokens = self.tokens.write().unwrap();
        tokens.remove(token);
        self.persist_tokens(&tokens)
    }

    fn tmp_file(&self) -> PathBuf {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join("tmp");
        let _ = fs::create_dir_all(&tmp);
        tmp.join(format!("{}-{n}", std::process::id()))
    }

    fn account_root(&self, account: &str) -> PathBuf {
        self.root.join("accounts").join(account)
    }

    fn data_root(&self, account: &str) -> PathBuf {
        self.account_root(account).join("data")
    }

    /// Maps a validated storage path onto the account's data directory.
    fn resolve(&self, session: &Session, path: &str) -> Result<PathBuf> {
        domain::validate_path(path)?;
        let mut p = self.data_root(&session.account_id);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            p.push(seg);
        }
        Ok(p)
    }

    fn account_state(&self, account: &str) -> Arc<Mutex<AccountState>> {
        self.accounts.lock().unwrap().entry(account.to_string()).or_default().clone()
    }

    fn path_lock(&self, account: &str, path: &str) -> Arc<Mutex<()>> {
        self.path_locks
            .lock()
            .unwrap()
            .entry((account.to_string(), path.to_string()))
            .or_default()
            .clone()
    }

    fn index_path(&self, account: &str) -> PathBuf {
        self.account_root(account).join("index.json")
    }

    /// Reloads the index if another process rewrote it.
    fn refresh_index(&self, account: &str, st: &mut AccountState) -> Result<()> {
        let path = self.index_path(account);
        let stamp = match fs::metadata(&path) {
            Ok(m) => Some((m.len(), m.modified()?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        if stamp != st.index_stamp {
            st.index = match stamp {
                Some(_) => serde_json::from_slice(&fs::read(&path)?).map_err(|e| StorageError::Io(e.to_string()))?,
                None => RevisionIndex::default(),
            };
            st.index_stamp = stamp;
            st.usage = None;
        }
        Ok(())
    }

    fn bump_revisions<'a>(&self, account: &str, paths: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let state = self.account_state(account);
        let mut st = state.lock().unwrap();
        self.refresh_index(account, &mut st)?;
        for p in paths {
            *st.index.revisions.entry(p.to_string()).or_insert(0) += 1;
        }
        let body = serde_json::to_vec(&st.index).expect("index serializes");
        let path = self.index_path(account);
        write_atomic(&path, &body, &self.tmp_file())?;
        let m = fs::metadata(&path)?;
        st.index_stamp = Some((m.len(), m.modified()?));
        Ok(())
    }

    fn revision_of(&self, account: &str, path: &str) -> Result<String> {
        let state = self.account_state(account);
        let mut st = state.lock().unwrap();
        self.refresh_index(account, &mut st)?;
        Ok(st.index.revisions.get(path).copied().unwrap_or(0).to_string())
    }

    fn usage(&self, account: &str) -> Result<u64> {
        let state = self.account_state(account);
        let mut st = state.lock().unwrap();
        self.refresh_index(account, &mut st)?;
        if let Some(u) = st.usage {
            return Ok(u);
        }
        let u = dir_size(&self.data_root(account))?;
        st.usage = Some(u);
        Ok(u)
    }

    fn adjust_usage(&self, account: &str, add: u64, sub: u64) {
        let state = self.account_state(account);
        let mut st = state.lock().unwrap();
        if let Some(u) = st.usage.as_mut() {
            *u = (*u + add).saturating_sub(sub);
        }
    }

    fn meta_at(&self, session: &Session, path: &str, fs_path: &Path) -> Result<FileMeta> {
        let m = match fs::metadata(fs_path) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StorageError::NotFound(path.to_string())),
            Err(e) => return Err(e.into()),
        };
        let kind = if m.is_dir() { FileKind::Folder } else { FileKind::File };
        let modified_at = m.modified()?.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(FileMeta {
            path: path.to_string(),
            name: domain::basename(path).to_string(),
            kind,
            size_bytes: if kind == FileKind::Folder { 0 } else { m.len() },
            modified_at,
            revision: self.revision_of(&session.account_id, path)?,
        })
    }

    fn ensure_parent(&self, session: &Session, path: &str) -> Result<()> {
        let parent = domain::parent(path);
        let fs_parent = self.resolve(session, parent)?;
        match fs::metadata(&fs_parent) {
            Ok(m) if m.is_dir() => Ok(()),
            Ok(_) => Err(StorageError::NotAFolder(parent.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                self.ensure_parent(session, parent)?;
                fs::create_dir(&fs_parent).or_else(|e| if e.kind() == io::ErrorKind::AlreadyExists { Ok(()) } else { Err(e) })?;
                self.bump_revisions(&session.account_id, [parent])
            }
            Err(e) => Err(e.into()),
        }
    }

    fn write_file(&self, session: &Session, path: &str, bytes: &[u8], must_be_new: bool) -> Result<FileMeta> {
        if path == "/" {
            return Err(StorageError::IsAFolder(path.to_string()));
        }
        let target = self.resolve(session, path)?;
        let lock = self.path_lock(&session.account_id, path);
        let _guard = lock.lock().unwrap();
        let old_size = match fs::metadata(&target) {
            Ok(m) if m.is_dir() => return Err(StorageError::IsAFolder(path.to_string())),
            Ok(_) if must_be_new => return Err(StorageError::AlreadyExists(path.to_string())),
            Ok(m) => m.len(),
            Err(_) => 0,
        };
        let used = self.usage(&session.account_id)?;
        let after = (used + bytes.len() as u64).saturating_sub(old_size);
        if after > self.quota_bytes {
            return Err(StorageError::QuotaError { used: after, cap: self.quota_bytes });
        }
        self.ensure_parent(session, path)?;
        write_atomic(&target, bytes, &self.tmp_file())?;
        self.adjust_usage(&session.account_id, bytes.len() as u64, old_size);
        self.bump_revisions(&session.account_id, [path])?;
        self.meta_at(session, path, &target)
    }

    fn walk_paths(&self, session: &Session, path: &str, out: &mut Vec<String>) -> Result<()> {
        for child in self.list_meta(session, path)? {
            let is_folder = child.kind == FileKind::Folder;
            out.push(child.path.clone());
            if is_folder {
                self.walk_paths(session, &child.path, out)?;
            }
        }
        Ok(())
    }
}

fn dir_size(p: &Path) -> io::Result<u64> {
    let mut total = 0;
    let entries = match fs::read_dir(p) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    for entry in entries {
        let entry = entry?;
        let m = entry.metadata()?;
        total += if m.is_dir() { dir_size(&entry.path())? } else { m.len() };
    }
    Ok(total)
}

impl ObjectStore for LocalStore {
    fn authenticate(&self, token: &str) -> Result<Session> {
        let lookup = |tokens: &BTreeMap<String, String>| tokens.get(token).cloned();
        let found = lookup(&self.tokens.read().unwrap());
        let account = match found {
            Some(a) => Some(a),
            None => {
                // Another process may have issued the token since we loaded.
                self.reload_tokens()?;
                lookup(&self.tokens.read().unwrap())
            }
        };
        account.map(|account_id| Session { account_id }).ok_or(StorageError::AuthError)
    }

    fn basic_op(&self, session: &Session, op: &BasicOp) -> Result<Option<FileMeta>> {
        match op {
            BasicOp::CreateFile { path, content } => self.write_file(session, path, content.as_bytes(), true).map(Some),
            BasicOp::CreateFolder { path } => {
                let target = self.resolve(session, path)?;
                if target.exists() {
                    return Err(StorageError::AlreadyExists(path.clone()));
                }
                self.ensure_parent(session, path)?;
                fs::create_dir(&target)?;
                self.bump_revisions(&session.account_id, [path.as_str()])?;
                self.meta_at(session, path, &target).map(Some)
            }
            BasicOp::Delete { path } => {
                if path == "/" {
                    return Err(StorageError::PermissionError("cannot delete the account root".into()));
                }
                let target = self.resolve(session, path)?;
                let lock = self.path_lock(&session.account_id, path);
                let _guard = lock.lock().unwrap();
                let m = fs::metadata(&target).map_err(|_| StorageError::NotFound(path.clone()))?;
                let mut removed = vec![path.clone()];
                if m.is_dir() {
                    self.walk_paths(session, path, &mut removed)?;
                    let freed = dir_size(&target)?;
                    fs::remove_dir_all(&target)?;
                    self.adjust_usage(&session.account_id, 0, freed);
                } else {
                    fs::remove_file(&target)?;
                    self.adjust_usage(&session.account_id, 0, m.len());
                }
                self.bump_revisions(&session.account_id, removed.iter().map(String::as_str))?;
                Ok(None)
            }
            BasicOp::Rename { from, to } => {
                let src = self.resolve(session, from)?;
                let dst = self.resolve(session, to)?;
                if from == "/" || to == "/" {
                    return Err(StorageError::PermissionError("cannot rename the account root".into()));
                }
                if to.starts_with(&format!("{from}/")) {
                    return Err(StorageError::InvalidPath(format!("cannot move `{from}` into itself")));
                }
                if !src.exists() {
                    return Err(StorageError::NotFound(from.clone()));
                }
                if dst.exists() {
                    return Err(StorageError::AlreadyExists(to.clone()));
                }
                self.ensure_parent(session, to)?;
                let mut moved = vec![from.clone()];
                if src.is_dir() {
                    self.walk_paths(session, from, &mut moved)?;
                }
                fs::rename(&src, &dst)?;
                let renamed: Vec<String> = moved.iter().map(|p| format!("{to}{}", &p[from.len()..])).collect();
                self.bump_revisions(&session.account_id, moved.iter().chain(renamed.iter()).map(String::as_str))?;
                self.meta_at(session, to, &dst).map(Some)
            }
        }
    }

    fn get_object(&self, session: &Session, path: &str) -> Result<Vec<u8>> {
        let target = self.resolve(session, path)?;
        match fs::metadata(&target) {
            Ok(m) if m.is_dir() => return Err(StorageError::IsAFolder(path.to_string())),
            Ok(_) => {}
            Err(_) => return Err(StorageError::NotFound(path.to_string())),
        }
        fs::read(&target).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound(path.to_string()),
            _ => e.into(),
        })
    }

    fn put_object(&self, session: &Session, path: &str, bytes: &[u8]) -> Result<FileMeta> {
        self.write_file(session, path, bytes, false)
    }

    fn stat(&self, session: &Session, path: &str) -> Result<FileMeta> {
        let target = self.resolve(session, path)?;
        self.meta_at(session, path, &target)
    }

    fn list_meta(&self, session: &Session, path: &str) -> Result<Vec<FileMeta>> {
        let target = self.resolve(session, path)?;
        let meta = self.meta_at(session, path, &target)?;
        if meta.kind == FileKind::File {
            return Ok(vec![meta]);
        }
        let mut names: Vec<String> = fs::read_dir(&target)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let child = domain::join(path, &name);
            match self.meta_at(session, &child, &target.join(&name)) {
                Ok(m) => out.push(m),
                // Deleted between listing and stat.
                Err(StorageError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Byte counters for traffic between one principal and the store.
///
/// Sent bytes are request paths plus uploaded content; received bytes are
/// downloaded content plus the JSON encoding of returned metadata.
#[derive(Debug, Default)]
pub struct StoreTraffic {
    pub sent: AtomicU64,
    pub received: AtomicU64,
    pub content_sent: AtomicU64,
    pub content_received: AtomicU64,
}

impl StoreTraffic {
    pub fn totals(&self) -> (u64, u64) {
        (self.sent.load(Ordering::Relaxed), self.received.load(Ordering::Relaxed))
    }
}

/// Wraps a store and accounts for every byte crossing it.
pub struct CountingStore {
    inner: StoreHandle,
    traffic: Arc<StoreTraffic>,
}

impl CountingStore {
    pub fn new(inner: StoreHandle) -> Self {
        CountingStore { inner, traffic: Arc::default() }
    }

    pub fn traffic(&self) -> Arc<StoreTraffic> {
        self.traffic.clone()
    }

    fn up(&self, n: usize) {
        self.traffic.sent.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn down(&self, n: usize) {
        self.traffic.received.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn down_meta(&self, metas: &[FileMeta]) {
        self.down(serde_json::to_vec(metas).map(|v| v.len()).unwrap_or(0));
    }
}

impl ObjectStore for CountingStore {
    fn authenticate(&self, token: &str) -> Result<Session> {
        self.up(token.len());
        self.inner.authenticate(token)
    }

    fn authorize(&self, token: &str, account_id: &str) -> Result<Session> {
        self.up(token.len() + account_id.len());
        self.inner.authorize(token, account_id)
    }

    fn basic_op(&self, session: &Session, op: &BasicOp) -> Result<Option<FileMeta>> {
        self.up(serde_json::to_vec(op).map(|v| v.len()).unwrap_or(0));
        let r = self.inner.basic_op(session, op)?;
        self.down_meta(r.as_slice());
        Ok(r)
    }

    fn get_object(&self, session: &Session, path: &str) -> Result<Vec<u8>> {
        self.up(path.len());
        let data = self.inner.get_object(session, path)?;
        self.down(data.len());
        self.traffic.content_received.fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(data)
    }

    fn put_object(&self, session: &Session, path: &str, bytes: &[u8]) -> Result<FileMeta> {
        self.up(path.len() + bytes.len());
        self.traffic.content_sent.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        let meta = self.inner.put_object(session, path, bytes)?;
        self.down_meta(std::slice::from_ref(&meta));
        Ok(meta)
    }

    fn stat(&self, session: &Session, path: &str) -> Result<FileMeta> {
        self.up(path.len());
        let meta = self.inner.stat(session, path)?;
        self.down_meta(std::slice::from_ref(&meta));
        Ok(meta)
    }

    fn list_meta(&self, session: &Session, path: &str) -> Result<Vec<FileMeta>> {
        self.up(path.len());
        let metas = self.inner.list_meta(session, path)?;
        self.down_meta(&metas);
        Ok(metas)
    }
}

/// Metadata-only mirror of one account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowFs {
    pub account_id: String,
    pub entries: BTreeMap<String, FileMeta>,
    pub synced_at: u64,
}

impl ShadowFs {
    pub fn empty(account_id: impl Into<String>) -> Self {
        ShadowFs { account_id: account_id.into(), entries: BTreeMap::new(), synced_at: 0 }
    }

    pub fn get(&self, path: &str) -> Option<&FileMeta> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Direct children of `folder`, in path order.
    pub fn children<'a>(&'a self, folder: &'a str) -> impl Iterator<Item = &'a FileMeta> + 'a {
        self.entries.values().filter(move |m| domain::parent(&m.path) == folder && m.path != "/")
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("shadow serializes")
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Rebuilds the shadow from a full metadata walk. No content is read.
pub fn sync_shadow(store: &dyn ObjectStore, session: &Session, now: u64) -> Result<ShadowFs> {
    let mut entries = BTreeMap::new();
    let mut stack = vec!["/".to_string()];
    while let Some(folder) = stack.pop() {
        for meta in store.list_meta(session, &folder)? {
            if meta.kind == FileKind::Folder {
                stack.push(meta.path.clone());
            }
            entries.insert(meta.path.clone(), meta);
        }
    }
    Ok(ShadowFs { account_id: session.account_id.clone(), entries, synced_at: now })
}

impl LocalStore {
    pub fn now(&self) -> u64 {
        self.clock.now_s()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, LocalStore, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let s = LocalStore::open(dir.path()).unwrap();
        let a = s.create_account("alice").unwrap();
        let b = s.create_account("bob").unwrap();
        (dir, s, a, b)
    }

    #[test]
    fn auth_and_revocation() {
        let (_d, s, a, _b) = store();
        assert_eq!(s.authenticate(&a).unwrap().account_id(), "alice");
        assert_eq!(s.authenticate("nope"), Err(StorageError::AuthError));
        s.revoke(&a).unwrap();
        assert_eq!(s.authenticate(&a), Err(StorageError::AuthError));
    }

    #[test]
    fn cross_account_token_is_refused() {
        let (_d, s, a, _b) = store();
        assert!(matches!(s.authorize(&a, "bob"), Err(StorageError::PermissionError(_))));
        assert!(s.authorize(&a, "alice").is_ok());
    }

    #[test]
    fn escaping_paths_are_rejected() {
        let (_d, s, a, b) = store();
        let sb = s.authenticate(&b).unwrap();
        s.put_object(&sb, "/secret", b"bob-data").unwrap();
        let sa = s.authenticate(&a).unwrap();
        for p in ["/../bob/data/secret", "../bob/data/secret", "/a/../../bob", "/..", "//secret"] {
            assert!(matches!(s.get_object(&sa, p), Err(StorageError::InvalidPath(_))), "{p}");
        }
        assert_eq!(s.get_object(&sa, "/secret"), Err(StorageError::NotFound("/secret".into())));
    }

    #[test]
    fn create_then_delete_folder_restores_listing() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        let before = s.list_meta(&sa, "/").unwrap();
        s.basic_op(&sa, &BasicOp::CreateFolder { path: "/test".into() }).unwrap();
        assert_eq!(s.stat(&sa, "/test").unwrap().kind, FileKind::Folder);
        s.basic_op(&sa, &BasicOp::Delete { path: "/test".into() }).unwrap();
        assert_eq!(s.list_meta(&sa, "/").unwrap(), before);
    }

    #[test]
    fn rename_rules() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        s.put_object(&sa, "/a", b"1").unwrap();
        s.put_object(&sa, "/b", b"2").unwrap();
        let op = BasicOp::Rename { from: "/a".into(), to: "/b".into() };
        assert_eq!(s.basic_op(&sa, &op), Err(StorageError::AlreadyExists("/b".into())));
        let op = BasicOp::Rename { from: "/zz".into(), to: "/c".into() };
        assert_eq!(s.basic_op(&sa, &op), Err(StorageError::NotFound("/zz".into())));
        let op = BasicOp::Rename { from: "/a".into(), to: "/c".into() };
        let meta = s.basic_op(&sa, &op).unwrap().unwrap();
        assert_eq!(meta.path, "/c");
        assert_eq!(s.get_object(&sa, "/c").unwrap(), b"1");
    }

    #[test]
    fn delete_missing_is_not_found() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        let op = BasicOp::Delete { path: "/nope".into() };
        assert_eq!(s.basic_op(&sa, &op), Err(StorageError::NotFound("/nope".into())));
    }

    #[test]
    fn put_get_round_trip_and_revision_changes() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        let data: Vec<u8> = (0..16 << 20).map(|i: u32| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        let m1 = s.put_object(&sa, "/big/x.bin", &data).unwrap();
        assert_eq!(m1.size_bytes, data.len() as u64);
        assert_eq!(s.get_object(&sa, "/big/x.bin").unwrap(), data);
        let m2 = s.put_object(&sa, "/big/x.bin", b"small").unwrap();
        assert_ne!(m1.revision, m2.revision);
        let listing = s.list_meta(&sa, "/").unwrap();
        assert_eq!(listing.len(), 1);
        assert_eq!(listing[0].kind, FileKind::Folder);
        assert_eq!(listing[0].size_bytes, 0);
    }

    #[test]
    fn recreated_path_gets_new_revision() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        let r1 = s.put_object(&sa, "/f", b"x").unwrap().revision;
        s.basic_op(&sa, &BasicOp::Delete { path: "/f".into() }).unwrap();
        let r2 = s.put_object(&sa, "/f", b"x").unwrap().revision;
        assert_ne!(r1, r2);
    }

    #[test]
    fn quota_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let s = LocalStore::open_with(dir.path(), 1000, clock::system()).unwrap();
        let t = s.create_account("q").unwrap();
        let ss = s.authenticate(&t).unwrap();
        s.put_object(&ss, "/a", &[0; 600]).unwrap();
        assert!(matches!(s.put_object(&ss, "/b", &[0; 600]), Err(StorageError::QuotaError { .. })));
        // Overwriting in place only counts the difference.
        s.put_object(&ss, "/a", &[0; 900]).unwrap();
        s.basic_op(&ss, &BasicOp::Delete { path: "/a".into() }).unwrap();
        s.put_object(&ss, "/b", &[0; 1000]).unwrap();
    }

    #[test]
    fn folder_of_thousand_files_lists_all() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        for i in 0..1000 {
            s.put_object(&sa, &format!("/corpus/f{i:04}.txt"), b"hello").unwrap();
        }
        s.basic_op(&sa, &BasicOp::CreateFile { path: "/corpus/new.txt".into(), content: String::new() }).unwrap();
        assert_eq!(s.list_meta(&sa, "/corpus").unwrap().len(), 1001);
    }

    #[test]
    fn shadow_sync_is_metadata_only_and_idempotent() {
        let (_d, s, a, _) = store();
        let sa = s.authenticate(&a).unwrap();
        assert!(sync_shadow(&s, &sa, 0).unwrap().is_empty());
        for i in 0..3 {
            s.put_object(&sa, &format!("/docs/f{i}"), &vec![7u8; 2 << 20]).unwrap();
        }
        let counting = CountingStore::new(Arc::new(LocalStore::open(s.root()).unwrap()));
        let sh = sync_shadow(&counting, &sa, 1).unwrap();
        // Three files plus their folder.
        assert_eq!(sh.entries.values().filter(|m| m.kind == FileKind::File).count(), 3);
        assert!(sh.to_json().len() < 4096);
        let (sent, received) = counting.traffic().totals();
        assert!(sent + received < sh.len() as u64 * 512, "{sent} {received}");
        assert_eq!(counting.traffic().content_received.load(Ordering::Relaxed), 0);
        let again = sync_shadow(&s, &sa, 2).unwrap();
        assert_eq!(again.entries, sh.entries);
    }

    #[test]
    fn tokens_visible_across_store_instances() {
        let (d, s, _, _) = store();
        let other = LocalStore::open(d.path()).unwrap();
        let t = s.create_account("carol").unwrap();
        assert_eq!(other.authenticate(&t).unwrap().account_id(), "carol");
    }

    #[test]
    fn concurrent_puts_are_linearizable_per_path() {
        let (_d, s, a, _) = store();
        let s = Arc::new(s);
        let sa = s.authenticate(&a).unwrap();
        let handles: Vec<_> = (0..8u8)
            .map(|i| {
                let s = s.clone();
                let sa = sa.clone();
                std::thread::spawn(move || {
                    for _ in 0..20 {
                        s.put_object(&sa, "/hot", &vec![i; 4096]).unwrap();
                        let got = s.get_object(&sa, "/hot").unwrap();
                        assert_eq!(got.len(), 4096);
                        assert!(got.iter().all(|b| *b == got[0]), "torn read");
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(s.stat(&sa, "/hot").unwrap().revision, "160");
    }
}
