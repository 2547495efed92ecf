//! The client agent: browses a metadata-only shadow of the user's storage,
//! runs basic operations through the storage API, and delegates every
//! cloud-assisted operation to a worker.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::domain::{self, compile_op_to_fois, CredentialSet, DomainError, FileKind, FileMeta, Foi, FoiSequence, InstanceMode, OperationRequest};
use crate::keying::{self, Pid, UserKeyGrant};
use crate::storage::{self, BasicOp, CountingStore, ObjectStore, Session, ShadowFs, StorageError, StoreHandle, StoreTraffic};
use crate::wire::{
    decode_message, encode_message, open_channel, ByteCounters, CertError, Certificate, Channel, Exposed, ExposeRequest,
    InstanceGrant, JobAuth, JobResult, Message, MessageKind, NetOptions, RequestInstance, SubmitOp, VerifyGrant,
    VerifyTransfer, WireError,
};
use crate::worker::{launch_private, WorkerConfig, WorkerError, WorkerHandle};

pub const SHADOW_FILE: &str = "shadow.json";
pub const DEFAULT_TICKET_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("not logged in")]
    NotLoggedIn,
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("certificate rejected: {0}")]
    Certificate(#[from] CertError),
    #[error("ticket does not match its certificate: {0}")]
    TicketMismatch(String),
    #[error("agent configuration: {0}")]
    Config(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("local i/o: {0}")]
    Io(String),
}

impl AgentError {
    /// Remote error code when a worker or coordinator refused the request.
    pub fn remote_code(&self) -> Option<&str> {
        match self {
            AgentError::Wire(w) => w.remote_code(),
            _ => None,
        }
    }
}

impl From<std::io::Error> for AgentError {
    fn from(e: std::io::Error) -> Self {
        AgentError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// How the agent reaches its own instance in private mode.
#[derive(Clone)]
pub enum PrivateInstance {
    Addr(String),
    /// Start a local worker on first use, after a simulated boot delay.
    Launch { config: Box<WorkerConfig>, delay: Duration },
}

#[derive(Clone)]
pub struct AgentConfig {
    pub user_id: String,
    pub credentials: CredentialSet,
    /// Storage API as seen from the agent.
    pub store: StoreHandle,
    pub mode: InstanceMode,
    pub coordinator: Option<String>,
    pub coordinator_key: Option<VerifyingKey>,
    pub private: Option<PrivateInstance>,
    /// Persisted agent state (the shadow). Nothing is persisted when unset.
    pub state_dir: Option<PathBuf>,
    /// Where pushed files are saved.
    pub download_dir: PathBuf,
    pub net: NetOptions,
    pub clock: SharedClock,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub op: String,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub wall_ms: u64,
    pub heartbeats: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudOpOutcome {
    pub result: JobResult,
    /// Local copies of pushed files.
    pub saved: Vec<PathBuf>,
}

/// Everything a receiver needs to pull a file, delivered out of band.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTicket {
    pub sender_id: String,
    pub mode: InstanceMode,
    pub addr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<Pid>,
    pub uri: String,
    pub guest_token: String,
    pub expiry: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
    pub src_path: String,
    pub suggested_dst: String,
    pub size_bytes: u64,
}

impl TransferTicket {
    /// Checks the embedded certificate against the coordinator key and the
    /// ticket's own instance fields.
    pub fn verify(&self, key: &VerifyingKey, now: u64) -> Result<()> {
        let cert = self
            .certificate
            .as_ref()
            .ok_or_else(|| AgentError::TicketMismatch("shared-instance ticket carries no certificate".into()))?;
        cert.verify(key, now)?;
        if cert.subject.addr != self.addr {
            return Err(AgentError::TicketMismatch(format!("certificate names {}, ticket {}", cert.subject.addr, self.addr)));
        }
        if Some(cert.subject.pid) != self.pid {
            return Err(AgentError::TicketMismatch("certificate names another instance".into()));
        }
        if !self.uri.starts_with(&format!("skyrelay://{}/", self.addr)) {
            return Err(AgentError::TicketMismatch("intermediate file lives on another instance".into()));
        }
        Ok(())
    }
}

/// Writes the ticket where the peer polls for it, as one TRANSFER_NOTIFY
/// frame. The rename makes the file appear complete.
pub fn out_of_band_notify(ticket: &TransferTicket, path: &Path) -> Result<()> {
    let frame = encode_message(&Message::new(MessageKind::TransferNotify, 0, ticket))?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, frame)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_ticket(path: &Path) -> Result<TransferTicket> {
    let bytes = std::fs::read(path)?;
    let m = decode_message(&bytes)?;
    if m.kind != MessageKind::TransferNotify {
        return Err(AgentError::Wire(WireError::UnexpectedReply(m.kind)));
    }
    Ok(m.parse_body()?)
}

/// Polls `path` until a ticket appears.
pub async fn await_ticket(path: &Path, timeout: Duration) -> Result<TransferTicket> {
    let start = Instant::now();
    loop {
        if path.exists() {
            return read_ticket(path);
        }
        if start.elapsed() >= timeout {
            return Err(AgentError::Timeout(format!("ticket at {}", path.display())));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

struct OpMeter {
    op: String,
    start: Instant,
    sent: u64,
    received: u64,
    heartbeats: u64,
}

pub struct Agent {
    config: AgentConfig,
    store: Arc<CountingStore>,
    traffic: Arc<StoreTraffic>,
    counters: Arc<ByteCounters>,
    net: NetOptions,
    session: Option<Session>,
    shadow: ShadowFs,
    private_worker: Option<WorkerHandle>,
    metrics: Vec<OpMetrics>,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Self {
        let store = Arc::new(CountingStore::new(config.store.clone()));
        let counters = ByteCounters::new();
        let net = config.net.clone().with_counters(counters.clone());
        let shadow = config
            .state_dir
            .as_ref()
            .and_then(|d| ShadowFs::load(&d.join(SHADOW_FILE)).ok())
            .filter(|s| s.account_id == config.credentials.account_id)
            .unwrap_or_else(|| ShadowFs::empty(config.credentials.account_id.clone()));
        Agent {
            traffic: store.traffic(),
            store,
            counters,
            net,
            session: None,
            shadow,
            private_worker: None,
            metrics: Vec::new(),
            config,
        }
    }

    pub fn user_id(&self) -> &str {
        &self.config.user_id
    }

    pub fn mode(&self) -> InstanceMode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: InstanceMode) {
        self.config.mode = mode;
    }

    pub fn shadow(&self) -> &ShadowFs {
        &self.shadow
    }

    pub fn metrics(&self) -> &[OpMetrics] {
        &self.metrics
    }

    /// Frame counters over every channel this agent opened.
    pub fn counters(&self) -> Arc<ByteCounters> {
        self.counters.clone()
    }

    /// Bytes exchanged with the storage API directly.
    pub fn store_traffic(&self) -> Arc<StoreTraffic> {
        self.traffic.clone()
    }

    pub fn private_worker(&self) -> Option<&WorkerHandle> {
        self.private_worker.as_ref()
    }

    pub fn take_private_worker(&mut self) -> Option<WorkerHandle> {
        self.private_worker.take()
    }

    fn meter(&self, op: &str) -> OpMeter {
        let (ss, sr) = self.traffic.totals();
        OpMeter {
            op: op.to_string(),
            start: Instant::now(),
            sent: self.counters.bytes_sent() + ss,
            received: self.counters.bytes_received() + sr,
            heartbeats: 0,
        }
    }

    fn record(&mut self, m: OpMeter) -> OpMetrics {
        let (ss, sr) = self.traffic.totals();
        let metrics = OpMetrics {
            op: m.op,
            bytes_sent: self.counters.bytes_sent() + ss - m.sent,
            bytes_received: self.counters.bytes_received() + sr - m.received,
            wall_ms: m.start.elapsed().as_millis() as u64,
            heartbeats: m.heartbeats,
        };
        self.metrics.push(metrics.clone());
        metrics
    }

    fn persist(&self) -> Result<()> {
        if let Some(dir) = &self.config.state_dir {
            std::fs::create_dir_all(dir)?;
            self.shadow.save(&dir.join(SHADOW_FILE))?;
        }
        Ok(())
    }

    fn session(&self) -> Result<Session> {
        self.session.clone().ok_or(AgentError::NotLoggedIn)
    }

    /// Authenticates and rebuilds the shadow from a metadata walk.
    pub async fn login(&mut self) -> Result<&ShadowFs> {
        let meter = self.meter("login");
        let store = self.store.clone();
        let creds = self.config.credentials.clone();
        let now = self.config.clock.now_s();
        let (session, shadow) = tokio::task::spawn_blocking(move || -> storage::Result<_> {
            let session = store.authorize(&creds.token, &creds.account_id)?;
            let shadow = storage::sync_shadow(store.as_ref(), &session, now)?;
            Ok((session, shadow))
        })
        .await
        .map_err(|e| AgentError::Io(e.to_string()))??;
        self.session = Some(session);
        self.shadow = shadow;
        self.persist()?;
        self.record(meter);
        Ok(&self.shadow)
    }

    /// Children of `folder` from the shadow; no network traffic.
    pub fn ls(&self, folder: &str) -> Vec<FileMeta> {
        if let Some(m) = self.shadow.get(folder).filter(|m| m.kind == FileKind::File) {
            return vec![m.clone()];
        }
        self.shadow.children(folder).cloned().collect()
    }

    pub async fn cmd_basic(&mut self, op: BasicOp) -> Result<Option<FileMeta>> {
        let name = match &op {
            BasicOp::CreateFile { .. } => "create",
            BasicOp::CreateFolder { .. } => "mkdir",
            BasicOp::Delete { .. } => "rm",
            BasicOp::Rename { .. } => "mv",
        };
        let meter = self.meter(name);
        let session = self.session()?;
        let store = self.store.clone();
        let op2 = op.clone();
        let (meta, moved) = tokio::task::spawn_blocking(move || -> storage::Result<_> {
            let meta = store.basic_op(&session, &op2)?;
            // A renamed folder's children change paths; re-list that subtree.
            let mut moved = Vec::new();
            if let (BasicOp::Rename { to, .. }, Some(m)) = (&op2, &meta) {
                if m.kind == FileKind::Folder {
                    let mut stack = vec![to.clone()];
                    while let Some(f) = stack.pop() {
                        for c in store.list_meta(&session, &f)? {
                            if c.kind == FileKind::Folder {
                                stack.push(c.path.clone());
                            }
                            moved.push(c);
                        }
                    }
                }
            }
            Ok((meta, moved))
        })
        .await
        .map_err(|e| AgentError::Io(e.to_string()))??;
        let under = |p: &str, root: &str| p == root || p.starts_with(&format!("{}/", root.trim_end_matches('/')));
        match &op {
            BasicOp::Delete { path } => self.shadow.entries.retain(|p, _| !under(p, path)),
            BasicOp::Rename { from, .. } => self.shadow.entries.retain(|p, _| !under(p, from)),
            _ => {}
        }
        for m in meta.iter().chain(moved.iter()) {
            self.shadow.entries.insert(m.path.clone(), m.clone());
        }
        self.shadow.synced_at = self.config.clock.now_s();
        self.persist()?;
        self.record(meter);
        Ok(meta)
    }

    async fn private_addr(&mut self) -> Result<String> {
        if let Some(w) = &self.private_worker {
            return Ok(w.addr().to_string());
        }
        match self.config.private.clone() {
            Some(PrivateInstance::Addr(a)) => Ok(a),
            Some(PrivateInstance::Launch { config, delay }) => {
                let w = launch_private(*config, delay).await?;
                let addr = w.addr().to_string();
                self.private_worker = Some(w);
                Ok(addr)
            }
            None => Err(AgentError::Config("private mode needs a private instance".into())),
        }
    }

    fn coordinator(&self) -> Result<(&str, &VerifyingKey)> {
        match (&self.config.coordinator, &self.config.coordinator_key) {
            (Some(a), Some(k)) => Ok((a, k)),
            _ => Err(AgentError::Config("shared mode needs a coordinator address and public key".into())),
        }
    }

    async fn coordinator_call(&self, kind: MessageKind, body: impl Serialize) -> Result<Message> {
        let (addr, _) = self.coordinator()?;
        let mut ch = open_channel(addr, &self.net).await?;
        let reply = ch.call(kind, body).await;
        ch.close().await;
        Ok(reply?)
    }

    /// Requests a shared instance and checks its certificate before use.
    async fn shared_grant(&self) -> Result<InstanceGrant> {
        let (_, key) = self.coordinator()?;
        let key = *key;
        let reply = self
            .coordinator_call(MessageKind::RequestInstance, RequestInstance { user_id: self.config.user_id.clone() })
            .await?;
        let grant: InstanceGrant = reply.parse_body()?;
        grant.certificate.verify(&key, self.config.clock.now_s())?;
        if grant.certificate.subject.addr != grant.addr || grant.certificate.subject.pid != grant.pid {
            return Err(AgentError::TicketMismatch("grant certificate names another instance".into()));
        }
        Ok(grant)
    }

    fn seal(&self, r: [u8; 32], key: keying::SecretKey, epoch: u64) -> JobAuth {
        let grant = UserKeyGrant { r, key, epoch_issued: epoch };
        JobAuth::Sealed { ciphertext: keying::encrypt_credentials(&grant, &self.config.credentials) }
    }

    fn plain(&self) -> JobAuth {
        JobAuth::Plain { credentials: self.config.credentials.clone() }
    }

    /// Instance address and credential envelope for the current mode.
    async fn target(&mut self) -> Result<(String, JobAuth, Option<InstanceGrant>)> {
        match self.config.mode {
            InstanceMode::Private => {
                let addr = self.private_addr().await?;
                Ok((addr, self.plain(), None))
            }
            InstanceMode::Shared => {
                let g = self.shared_grant().await?;
                let auth = self.seal(g.r, g.key, g.epoch_hint);
                Ok((g.addr.clone(), auth, Some(g)))
            }
        }
    }

    async fn worker_request(&self, addr: &str, kind: MessageKind, body: impl Serialize, meter: &mut OpMeter) -> Result<Message> {
        let mut ch: Channel = open_channel(addr, &self.net).await?;
        let mut hbs = 0;
        let reply = ch.request(kind, body, |_| hbs += 1).await;
        meter.heartbeats += hbs;
        ch.close().await;
        Ok(reply?)
    }

    fn apply_outputs(&mut self, outputs: &[FileMeta]) -> Result<()> {
        for m in outputs {
            self.shadow.entries.insert(m.path.clone(), m.clone());
        }
        self.shadow.synced_at = self.config.clock.now_s();
        self.persist()
    }

    async fn save_pushed(&self, result: &JobResult) -> Result<Vec<PathBuf>> {
        let mut saved = Vec::new();
        for f in &result.pushed {
            let name = domain::basename(&f.name);
            if name.is_empty() || name == "." || name == ".." {
                continue;
            }
            tokio::fs::create_dir_all(&self.config.download_dir).await?;
            let p = self.config.download_dir.join(name);
            tokio::fs::write(&p, &f.data).await?;
            saved.push(p);
        }
        Ok(saved)
    }

    /// Compiles a cloud-assisted operation and runs it on a worker.
    pub async fn cmd_cloud_op(&mut self, req: &OperationRequest) -> Result<CloudOpOutcome> {
        let mut meter = self.meter(req.action.as_str());
        self.session()?;
        let fois = compile_op_to_fois(req)?;
        let (addr, auth, _) = self.target().await?;
        let reply = self.worker_request(&addr, MessageKind::SubmitOp, SubmitOp { auth, fois }, &mut meter).await?;
        let result: JobResult = reply.parse_body()?;
        self.apply_outputs(&result.outputs)?;
        let saved = self.save_pushed(&result).await?;
        self.record(meter);
        Ok(CloudOpOutcome { result, saved })
    }

    /// Convenience wrapper over [`Agent::cmd_cloud_op`].
    pub async fn cloud_op(&mut self, action: &str, args: &[(&str, &str)]) -> Result<CloudOpOutcome> {
        let req = OperationRequest::new(action, args.iter().copied(), self.config.mode)?;
        self.cmd_cloud_op(&req).await
    }

    /// Sender side of a transfer: has an instance fetch `src_path` with this
    /// user's credentials and expose it, then returns the ticket.
    pub async fn cmd_send(&mut self, dst_user: &str, src_path: &str, suggested_dst: &str) -> Result<TransferTicket> {
        let mut meter = self.meter("send");
        self.session()?;
        domain::validate_path(src_path)?;
        domain::validate_path(suggested_dst)?;
        let (addr, auth, grant) = self.target().await?;
        let reply = self
            .worker_request(&addr, MessageKind::ExposeGrant, ExposeRequest { auth, path: src_path.to_string() }, &mut meter)
            .await?;
        let exposed: Exposed = reply.parse_body()?;
        let (pid, certificate) = match (&grant, &self.private_worker) {
            (Some(g), _) => (Some(g.pid), Some(g.certificate.clone())),
            (None, Some(w)) => (w.pid(), w.certificate().cloned()),
            (None, None) => (None, None),
        };
        tracing::debug!(to = dst_user, uri = %exposed.uri, "transfer ticket issued");
        let ticket = TransferTicket {
            sender_id: self.config.user_id.clone(),
            mode: self.config.mode,
            addr,
            pid,
            uri: exposed.uri,
            guest_token: exposed.guest_token,
            expiry: exposed.expiry,
            certificate,
            src_path: src_path.to_string(),
            suggested_dst: suggested_dst.to_string(),
            size_bytes: exposed.size_bytes,
        };
        self.record(meter);
        Ok(ticket)
    }

    /// Receiver side: stores the ticket's file at `dst` (or the suggested
    /// destination) in this user's account.
    pub async fn cmd_recv(&mut self, ticket: &TransferTicket, dst: Option<&str>) -> Result<FileMeta> {
        let mut meter = self.meter("recv");
        self.session()?;
        let dst = dst.unwrap_or(&ticket.suggested_dst).to_string();
        domain::validate_path(&dst)?;
        let fetch = Foi::download(&ticket.uri).with_param("guest_token", &ticket.guest_token);
        let fois = FoiSequence(vec![fetch, Foi::put(&dst)]);
        let now = self.config.clock.now_s();
        let (addr, auth) = match ticket.mode {
            InstanceMode::Private => {
                if let (Some(_), Some(key)) = (&ticket.certificate, &self.config.coordinator_key) {
                    ticket.verify(key, now)?;
                }
                (self.private_addr().await?, self.plain())
            }
            InstanceMode::Shared => {
                let (_, key) = self.coordinator()?;
                // Nothing is contacted before the certificate checks out.
                ticket.verify(key, now)?;
                let pid = ticket.pid.expect("verified tickets name their instance");
                let claim = VerifyTransfer {
                    requester: self.config.user_id.clone(),
                    sender_id: ticket.sender_id.clone(),
                    pid,
                };
                let g: VerifyGrant = self.coordinator_call(MessageKind::VerifyTransfer, claim).await?.parse_body()?;
                if g.addr != ticket.addr || g.pid != pid {
                    return Err(AgentError::TicketMismatch("coordinator granted another instance".into()));
                }
                (g.addr.clone(), self.seal(g.r, g.key, g.epoch_hint))
            }
        };
        let reply = self.worker_request(&addr, MessageKind::SubmitOp, SubmitOp { auth, fois }, &mut meter).await?;
        let result: JobResult = reply.parse_body()?;
        self.apply_outputs(&result.outputs)?;
        self.record(meter);
        result
            .outputs
            .into_iter()
            .last()
            .ok_or_else(|| AgentError::Io("transfer produced no output".into()))
    }

    /// Writes the metrics of every op so far as a JSON array.
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.metrics).map_err(|e| AgentError::Io(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}
