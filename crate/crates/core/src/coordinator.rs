//! The trusted coordinator: dispatches service-program configuration,
//! issues key material, keeps the shared-instance pool, and verifies
//! transfer claims.
//!
//! [`Registry`] is the state machine; it takes `now` explicitly and has no
//! I/O. [`start_coordinator`] wraps it in a TCP server where every
//! connection's requests apply to the registry in arrival order.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::SharedClock;
use crate::keying::{self, EpochKeyState, KeySchedule, Pid, MAX_OFFSET_S, MIN_OFFSET_S};
use crate::scheduler::{self, Assignment, InstanceSpec, SchedError, TaskSpec};
use crate::wire::{
    code, split_stream, CertSubject, CertificateAuthority, Candidate, DispatchSsp, Empty, ErrorBody, FrameSink,
    InstanceGrant, KeyInit, LivenessPing, Message, MessageKind, NetOptions, RegisterInstance, RequestInstance,
    ShutdownNotice, SspPayload, VerifyGrant, VerifyTransfer,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordError {
    #[error("an active instance is already registered at {0}")]
    AlreadyRegistered(String),
    #[error("registration rejected: {0}")]
    Registration(String),
    #[error("no shared instance available")]
    NoInstanceAvailable,
    #[error("transfer verification failed: {0}")]
    VerificationFailed(String),
    #[error("unknown instance {0}")]
    NotFound(Pid),
    #[error("key confirmation mismatch for {0}")]
    KeyProof(Pid),
    #[error(transparent)]
    Scheduler(#[from] SchedError),
    #[error("i/o: {0}")]
    Io(String),
}

impl CoordError {
    fn to_body(&self) -> ErrorBody {
        let c = match self {
            CoordError::AlreadyRegistered(_) => code::ALREADY_REGISTERED,
            CoordError::Registration(_) | CoordError::KeyProof(_) => code::REGISTRATION_ERROR,
            CoordError::NoInstanceAvailable => code::NO_INSTANCE_AVAILABLE,
            CoordError::VerificationFailed(_) => code::VERIFICATION_FAILED,
            CoordError::NotFound(_) => code::NOT_FOUND,
            CoordError::Scheduler(_) | CoordError::Io(_) => code::INVALID_REQUEST,
        };
        ErrorBody::new(c, self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    Pending,
    Active,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub pid: Pid,
    pub addr: String,
    pub os_info: String,
    pub hardware_info: String,
    pub share_until: u64,
    pub bandwidth: u64,
    pub key_state: EpochKeyState,
    pub status: InstanceStatus,
    pub last_seen: u64,
}

impl InstanceRecord {
    fn allocatable(&self, now: u64, min_remaining: u64) -> bool {
        self.status == InstanceStatus::Active && now < self.share_until && self.share_until - now >= min_remaining
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Allocation {
    user_id: String,
    pid: Pid,
    expires_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub min_share_remaining_s: u64,
    pub alloc_ttl_s: u64,
    pub rotation_interval_s: u64,
    pub liveness_interval_s: u64,
    pub liveness_misses: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            min_share_remaining_s: 60,
            alloc_ttl_s: 600,
            rotation_interval_s: keying::DEFAULT_INTERVAL_S,
            liveness_interval_s: 30,
            liveness_misses: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    config: RegistryConfig,
    records: BTreeMap<Pid, InstanceRecord>,
    allocations: Vec<Allocation>,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Registry { config, records: BTreeMap::new(), allocations: Vec::new() }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn record(&self, pid: &Pid) -> Option<&InstanceRecord> {
        self.records.get(pid)
    }

    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.records.values()
    }

    pub fn is_allocatable(&self, pid: &Pid, now: u64) -> bool {
        self.records.get(pid).is_some_and(|r| r.allocatable(now, self.config.min_share_remaining_s))
    }

    /// Accepts an instance offer. The record stays pending until the worker
    /// confirms its key chain.
    pub fn register<R: RngCore + CryptoRng>(
        &mut self,
        req: &RegisterInstance,
        now: u64,
        rng: &mut R,
        ca: &CertificateAuthority,
        coordinator_addr: &str,
    ) -> Result<DispatchSsp, CoordError> {
        if req.share_until <= now {
            return Err(CoordError::Registration(format!("share_until {} is not in the future", req.share_until)));
        }
        if self.records.values().any(|r| r.addr == req.addr && r.status != InstanceStatus::Retired) {
            return Err(CoordError::AlreadyRegistered(req.addr.clone()));
        }
        let mut pid = Pid::random(rng);
        while self.records.contains_key(&pid) {
            pid = Pid::random(rng);
        }
        let offset = rng.gen_range(MIN_OFFSET_S..=MAX_OFFSET_S);
        let schedule = KeySchedule::new(now, offset, self.config.rotation_interval_s)
            .map_err(|e| CoordError::Registration(e.to_string()))?;
        let key_state = EpochKeyState::for_instance(pid, schedule);
        let payload = SspPayload {
            pid,
            initial_key: key_state.key_current,
            schedule,
            share_until: req.share_until,
            coordinator: coordinator_addr.to_string(),
            liveness_interval_s: self.config.liveness_interval_s,
        };
        let certificate = ca.issue(CertSubject { addr: req.addr.clone(), pid }, now, req.share_until);
        self.records.insert(
            pid,
            InstanceRecord {
                pid,
                addr: req.addr.clone(),
                os_info: req.os_info.clone(),
                hardware_info: req.hardware_info.clone(),
                share_until: req.share_until,
                bandwidth: req.bandwidth,
                key_state,
                status: InstanceStatus::Pending,
                last_seen: now,
            },
        );
        Ok(DispatchSsp { payload, certificate })
    }

    /// Activates a pending record once the worker proves it holds k_serv.
    pub fn confirm(&mut self, ack: &KeyInit, now: u64) -> Result<(), CoordError> {
        let rec = self.records.get_mut(&ack.pid).ok_or(CoordError::NotFound(ack.pid))?;
        if rec.status != InstanceStatus::Pending {
            return Err(CoordError::Registration(format!("{} is not pending", ack.pid)));
        }
        let initial = keying::initial_server_key(&rec.pid, rec.key_state.schedule.t0);
        if hex::encode(keying::key_confirmation(&initial)) != ack.proof {
            return Err(CoordError::KeyProof(ack.pid));
        }
        rec.status = InstanceStatus::Active;
        rec.last_seen = now;
        Ok(())
    }

    fn candidates(&self, now: u64) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self
            .records
            .values()
            .filter(|r| r.allocatable(now, self.config.min_share_remaining_s))
            .map(|r| Candidate { pid: r.pid, addr: r.addr.clone(), remaining_s: r.share_until - now })
            .collect();
        v.sort_by(|a, b| b.remaining_s.cmp(&a.remaining_s).then(a.pid.cmp(&b.pid)));
        v
    }

    /// Picks the active instance with the most remaining share time (ties to
    /// the lowest pid) and issues a user grant on it.
    pub fn request_shared_instance<R: RngCore + CryptoRng>(
        &mut self,
        user_id: &str,
        now: u64,
        rng: &mut R,
        ca: &CertificateAuthority,
    ) -> Result<InstanceGrant, CoordError> {
        let candidates = self.candidates(now);
        let chosen = candidates.first().ok_or(CoordError::NoInstanceAvailable)?.pid;
        let rec = self.records.get_mut(&chosen).expect("candidate exists");
        rec.key_state.advance_to_time(now);
        let grant = rec.key_state.issue_grant(rng);
        let certificate = ca.issue(CertSubject { addr: rec.addr.clone(), pid: rec.pid }, now, rec.share_until);
        let out = InstanceGrant {
            pid: rec.pid,
            addr: rec.addr.clone(),
            certificate,
            r: grant.r,
            key: grant.key,
            epoch_hint: grant.epoch_issued,
            candidates,
        };
        self.allocations.push(Allocation {
            user_id: user_id.to_string(),
            pid: chosen,
            expires_at: now + self.config.alloc_ttl_s,
        });
        Ok(out)
    }

    /// Issues receiver-side key material on the instance the sender was
    /// allocated, after checking that allocation exists.
    pub fn verify_transfer<R: RngCore + CryptoRng>(
        &mut self,
        req: &VerifyTransfer,
        now: u64,
        rng: &mut R,
    ) -> Result<VerifyGrant, CoordError> {
        let has_alloc = self
            .allocations
            .iter()
            .any(|a| a.user_id == req.sender_id && a.pid == req.pid && a.expires_at > now);
        if !has_alloc {
            return Err(CoordError::VerificationFailed(format!(
                "no live allocation of {} to {}",
                req.pid, req.sender_id
            )));
        }
        let rec = self
            .records
            .get_mut(&req.pid)
            .filter(|r| r.status == InstanceStatus::Active && now < r.share_until)
            .ok_or_else(|| CoordError::VerificationFailed(format!("{} is no longer serving", req.pid)))?;
        rec.key_state.advance_to_time(now);
        let grant = rec.key_state.issue_grant(rng);
        let out = VerifyGrant {
            pid: rec.pid,
            addr: rec.addr.clone(),
            r: grant.r,
            key: grant.key,
            epoch_hint: grant.epoch_issued,
        };
        self.allocations.push(Allocation {
            user_id: req.requester.clone(),
            pid: req.pid,
            expires_at: now + self.config.alloc_ttl_s,
        });
        Ok(out)
    }

    pub fn deregister(&mut self, pid: &Pid) -> Result<(), CoordError> {
        match self.records.get_mut(pid) {
            Some(r) if r.status != InstanceStatus::Retired => {
                r.status = InstanceStatus::Retired;
                Ok(())
            }
            _ => Err(CoordError::NotFound(*pid)),
        }
    }

    pub fn heartbeat(&mut self, pid: &Pid, now: u64) {
        if let Some(r) = self.records.get_mut(pid) {
            r.last_seen = r.last_seen.max(now);
        }
    }

    /// Retires instances past their share window or silent for too many
    /// liveness intervals, and drops expired allocations. Returns the pids
    /// retired by this call.
    pub fn sweep(&mut self, now: u64) -> Vec<Pid> {
        let silence = self.config.liveness_interval_s * self.config.liveness_misses;
        let mut retired = Vec::new();
        for r in self.records.values_mut() {
            if r.status == InstanceStatus::Retired {
                continue;
            }
            if now >= r.share_until || now.saturating_sub(r.last_seen) > silence {
                r.status = InstanceStatus::Retired;
                retired.push(r.pid);
            }
        }
        self.allocations.retain(|a| a.expires_at > now);
        retired
    }

    /// Runs the scheduler over a snapshot of the allocatable pool. Instance
    /// ids are pid hex strings; windows run from `now` to `share_until`.
    pub fn allocate_batch(&self, tasks: &[TaskSpec], now: u64) -> Result<Assignment, CoordError> {
        let instances: Vec<InstanceSpec> = self
            .records
            .values()
            .filter(|r| r.allocatable(now, self.config.min_share_remaining_s))
            .map(|r| InstanceSpec { id: r.pid.to_string(), start: now, end: r.share_until, cap: r.bandwidth })
            .collect();
        let a = if tasks.len() <= scheduler::DEFAULT_EXACT_MAX_TASKS {
            scheduler::solve_exact(tasks, &instances)?
        } else {
            scheduler::solve_greedy(tasks, &instances)?
        };
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub listen: String,
    pub registry: RegistryConfig,
    /// How often the liveness sweep runs.
    pub sweep_every: Duration,
    pub snapshot: Option<PathBuf>,
    pub net: NetOptions,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            listen: "127.0.0.1:0".into(),
            registry: RegistryConfig::default(),
            sweep_every: Duration::from_secs(1),
            snapshot: None,
            net: NetOptions::default(),
        }
    }
}

struct Shared {
    registry: Mutex<Registry>,
    ca: CertificateAuthority,
    clock: SharedClock,
    addr: String,
    snapshot: Option<PathBuf>,
}

impl Shared {
    fn with_registry<T>(&self, f: impl FnOnce(&mut Registry, u64) -> T) -> T {
        let now = self.clock.now_s();
        let mut reg = self.registry.lock().unwrap();
        let out = f(&mut reg, now);
        if let Some(path) = &self.snapshot {
            if let Ok(json) = serde_json::to_vec_pretty(&*reg) {
                if let Err(e) = std::fs::write(path, json) {
                    tracing::warn!("snapshot write failed: {e}");
                }
            }
        }
        out
    }
}

pub struct CoordinatorHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl CoordinatorHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.shared.ca.verifying_key()
    }

    pub fn is_allocatable(&self, pid: &Pid) -> bool {
        let now = self.shared.clock.now_s();
        self.shared.registry.lock().unwrap().is_allocatable(pid, now)
    }

    pub fn status(&self, pid: &Pid) -> Option<InstanceStatus> {
        self.shared.registry.lock().unwrap().record(pid).map(|r| r.status)
    }

    /// Coordinator replica of an instance's key chain.
    pub fn key_state(&self, pid: &Pid) -> Option<EpochKeyState> {
        self.shared.registry.lock().unwrap().record(pid).map(|r| r.key_state.clone())
    }

    pub fn active_pids(&self) -> Vec<Pid> {
        let now = self.shared.clock.now_s();
        let reg = self.shared.registry.lock().unwrap();
        reg.records().filter(|r| r.allocatable(now, 0)).map(|r| r.pid).collect()
    }

    pub fn allocate_batch(&self, tasks: &[TaskSpec]) -> Result<Assignment, CoordError> {
        self.shared.with_registry(|reg, now| reg.allocate_batch(tasks, now))
    }

    pub fn sweep(&self) -> Vec<Pid> {
        self.shared.with_registry(|reg, now| reg.sweep(now))
    }

    pub async fn stop(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

pub async fn start_coordinator(config: CoordinatorConfig, clock: SharedClock) -> Result<CoordinatorHandle, CoordError> {
    let registry = match &config.snapshot {
        Some(p) if p.exists() => {
            let bytes = std::fs::read(p).map_err(|e| CoordError::Io(e.to_string()))?;
            serde_json::from_slice(&bytes).map_err(|e| CoordError::Io(format!("snapshot {}: {e}", p.display())))?
        }
        _ => Registry::new(config.registry),
    };
    start_with(config, clock, registry, CertificateAuthority::generate()).await
}

pub async fn start_with(
    config: CoordinatorConfig,
    clock: SharedClock,
    registry: Registry,
    ca: CertificateAuthority,
) -> Result<CoordinatorHandle, CoordError> {
    let listener = TcpListener::bind(&config.listen).await.map_err(|e| CoordError::Io(format!("bind {}: {e}", config.listen)))?;
    let addr = listener.local_addr().map_err(|e| CoordError::Io(e.to_string()))?;
    let shared = Arc::new(Shared {
        registry: Mutex::new(registry),
        ca,
        clock,
        addr: addr.to_string(),
        snapshot: config.snapshot.clone(),
    });
    let (stop, stop_rx) = watch::channel(false);

    let accept = {
        let shared = shared.clone();
        let net = config.net.clone();
        let mut stop_rx = stop_rx.clone();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = stop_rx.changed() => break,
                    conn = listener.accept() => match conn {
                        Ok((stream, _)) => {
                            let (src, sink) = split_stream(stream, &net);
                            tokio::spawn(serve_connection(shared.clone(), src, sink, stop_rx.clone()));
                        }
                        Err(e) => tracing::warn!("accept failed: {e}"),
                    }
                }
            }
        })
    };
    let sweeper = {
        let shared = shared.clone();
        let every = config.sweep_every;
        let mut stop_rx = stop_rx.clone();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = stop_rx.changed() => break,
                    _ = tokio::time::sleep(every) => {
                        for pid in shared.with_registry(|reg, now| reg.sweep(now)) {
                            tracing::info!(%pid, "instance retired by sweep");
                        }
                    }
                }
            }
        })
    };
    Ok(CoordinatorHandle { addr, shared, stop, tasks: vec![accept, sweeper] })
}

async fn serve_connection(
    shared: Arc<Shared>,
    mut src: crate::wire::FrameSource,
    mut sink: FrameSink,
    mut stop: watch::Receiver<bool>,
) {
    loop {
        let next = tokio::select! {
            _ = stop.changed() => break,
            n = src.next() => n,
        };
        let m = match next {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!("coordinator connection dropped: {e}");
                break;
            }
        };
        if handle_message(&shared, &m, &mut sink).await.is_err() {
            break;
        }
    }
    sink.shutdown().await;
}

async fn handle_message(shared: &Shared, m: &Message, sink: &mut FrameSink) -> Result<(), crate::wire::WireError> {
    let mut rng = rand::rngs::OsRng;
    macro_rules! body {
        ($t:ty) => {
            match m.parse_body::<$t>() {
                Ok(b) => b,
                Err(e) => return sink.reply_error(m.seq, ErrorBody::new(code::INVALID_REQUEST, e.to_string())).await,
            }
        };
    }
    let reply: Result<(MessageKind, serde_json::Value), CoordError> = match m.kind {
        MessageKind::RegisterInstance => {
            let req = body!(RegisterInstance);
            shared
                .with_registry(|reg, now| reg.register(&req, now, &mut rng, &shared.ca, &shared.addr))
                .map(|d| {
                    tracing::info!(pid = %d.payload.pid, addr = %req.addr, "instance registered");
                    (MessageKind::DispatchSsp, serde_json::to_value(d).unwrap())
                })
        }
        MessageKind::KeyInit => {
            let req = body!(KeyInit);
            shared
                .with_registry(|reg, now| reg.confirm(&req, now))
                .map(|_| (MessageKind::Ack, serde_json::to_value(Empty {}).unwrap()))
        }
        MessageKind::Heartbeat => {
            if let Ok(ping) = m.parse_body::<LivenessPing>() {
                shared.with_registry(|reg, now| reg.heartbeat(&ping.pid, now));
            }
            return Ok(());
        }
        MessageKind::RequestInstance => {
            let req = body!(RequestInstance);
            shared
                .with_registry(|reg, now| reg.request_shared_instance(&req.user_id, now, &mut rng, &shared.ca))
                .map(|g| (MessageKind::InstanceGrant, serde_json::to_value(g).unwrap()))
        }
        MessageKind::VerifyTransfer => {
            let req = body!(VerifyTransfer);
            shared
                .with_registry(|reg, now| reg.verify_transfer(&req, now, &mut rng))
                .map(|g| (MessageKind::VerifyGrant, serde_json::to_value(g).unwrap()))
        }
        MessageKind::ShutdownNotice => {
            let req = body!(ShutdownNotice);
            tracing::info!(pid = %req.pid, reason = %req.reason, "shutdown notice");
            shared
                .with_registry(|reg, _| reg.deregister(&req.pid))
                .map(|_| (MessageKind::Ack, serde_json::to_value(Empty {}).unwrap()))
        }
        k if k.is_request() => {
            return sink
                .reply_error(m.seq, ErrorBody::new(code::INVALID_REQUEST, format!("coordinator does not serve {k:?}")))
                .await
        }
        _ => return Ok(()),
    };
    match reply {
        Ok((kind, body)) => sink.send(&Message { kind, seq: m.seq, body }).await,
        Err(e) => sink.reply_error(m.seq, e.to_body()).await,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const T0: u64 = 1_700_000_000;

    fn offer(addr: &str, share_until: u64) -> RegisterInstance {
        RegisterInstance {
            addr: addr.into(),
            os_info: "linux".into(),
            hardware_info: "micro".into(),
            share_until,
            bandwidth: 10,
        }
    }

    fn setup() -> (Registry, ChaCha20Rng, CertificateAuthority) {
        (Registry::new(RegistryConfig::default()), ChaCha20Rng::seed_from_u64(1), CertificateAuthority::from_seed([1; 32]))
    }

    fn activate(reg: &mut Registry, d: &DispatchSsp, now: u64) {
        let proof = hex::encode(keying::key_confirmation(&d.payload.initial_key));
        reg.confirm(&KeyInit { pid: d.payload.pid, proof }, now).unwrap();
    }

    #[test]
    fn registration_needs_ack_before_allocation() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        assert!(!reg.is_allocatable(&d.payload.pid, T0));
        assert_eq!(reg.request_shared_instance("u", T0, &mut rng, &ca), Err(CoordError::NoInstanceAvailable));
        activate(&mut reg, &d, T0);
        assert!(reg.is_allocatable(&d.payload.pid, T0));
        assert!((1..=512).contains(&d.payload.schedule.offset_s));
        assert!(d.certificate.verify(&ca.verifying_key(), T0).is_ok());
    }

    #[test]
    fn wrong_key_proof_is_rejected() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        let bad = KeyInit { pid: d.payload.pid, proof: "00".repeat(32) };
        assert_eq!(reg.confirm(&bad, T0), Err(CoordError::KeyProof(d.payload.pid)));
    }

    #[test]
    fn registrations_are_independent() {
        let (mut reg, mut rng, ca) = setup();
        let a = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        let b = reg.register(&offer("h:2", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        assert_ne!(a.payload.pid, b.payload.pid);
        assert_ne!(a.payload.initial_key, b.payload.initial_key);
    }

    #[test]
    fn past_share_window_and_duplicates_rejected() {
        let (mut reg, mut rng, ca) = setup();
        assert!(matches!(reg.register(&offer("h:1", T0 - 1), T0, &mut rng, &ca, "c"), Err(CoordError::Registration(_))));
        reg.register(&offer("h:1", T0 + 100), T0, &mut rng, &ca, "c").unwrap();
        assert_eq!(
            reg.register(&offer("h:1", T0 + 100), T0, &mut rng, &ca, "c"),
            Err(CoordError::AlreadyRegistered("h:1".into()))
        );
    }

    #[test]
    fn grants_match_worker_derivation() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 7200), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &d, T0);
        let now = T0 + 1000;
        let g1 = reg.request_shared_instance("alice", now, &mut rng, &ca).unwrap();
        let g2 = reg.request_shared_instance("bob", now, &mut rng, &ca).unwrap();
        assert_ne!((g1.r, g1.key), (g2.r, g2.key));
        // Worker side: the same chain from the dispatched payload.
        let mut worker = EpochKeyState::from_initial(d.payload.pid, d.payload.schedule, d.payload.initial_key);
        worker.advance_to_time(now);
        assert_eq!(worker.epoch, g1.epoch_hint);
        assert_eq!(keying::derive_user_key(&worker.key_current, &g1.r), g1.key);
    }

    #[test]
    fn allocation_prefers_most_remaining_time() {
        let (mut reg, mut rng, ca) = setup();
        let short = reg.register(&offer("h:1", T0 + 600), T0, &mut rng, &ca, "c").unwrap();
        let long = reg.register(&offer("h:2", T0 + 6000), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &short, T0);
        activate(&mut reg, &long, T0);
        let g = reg.request_shared_instance("u", T0, &mut rng, &ca).unwrap();
        assert_eq!(g.pid, long.payload.pid);
        assert_eq!(g.candidates.len(), 2);
        // Below the minimum remaining share time the short one is skipped.
        reg.deregister(&long.payload.pid).unwrap();
        assert_eq!(reg.request_shared_instance("u", T0 + 550, &mut rng, &ca), Err(CoordError::NoInstanceAvailable));
    }

    #[test]
    fn verify_transfer_paths() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        let other = reg.register(&offer("h:2", T0 + 3000), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &d, T0);
        activate(&mut reg, &other, T0);
        let g = reg.request_shared_instance("alice", T0, &mut rng, &ca).unwrap();
        let claim = VerifyTransfer { requester: "bob".into(), sender_id: "alice".into(), pid: g.pid };
        let vg = reg.verify_transfer(&claim, T0 + 5, &mut rng).unwrap();
        assert_eq!(vg.pid, g.pid);
        assert_ne!(vg.key, g.key);

        let wrong = VerifyTransfer { pid: other.payload.pid, ..claim.clone() };
        assert!(matches!(reg.verify_transfer(&wrong, T0 + 5, &mut rng), Err(CoordError::VerificationFailed(_))));

        let expired_at = T0 + reg.config().alloc_ttl_s + 1;
        let mut late = reg.clone();
        late.heartbeat(&g.pid, expired_at);
        assert!(matches!(late.verify_transfer(&claim, expired_at, &mut rng), Err(CoordError::VerificationFailed(_))));

        reg.deregister(&g.pid).unwrap();
        assert!(matches!(reg.verify_transfer(&claim, T0 + 6, &mut rng), Err(CoordError::VerificationFailed(_))));
    }

    #[test]
    fn double_deregister_is_not_found() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &d, T0);
        reg.deregister(&d.payload.pid).unwrap();
        assert!(!reg.is_allocatable(&d.payload.pid, T0));
        assert_eq!(reg.deregister(&d.payload.pid), Err(CoordError::NotFound(d.payload.pid)));
        assert_eq!(reg.deregister(&Pid([9; 16])), Err(CoordError::NotFound(Pid([9; 16]))));
        // A retired address can register again.
        reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
    }

    #[test]
    fn sweep_retires_silent_and_expired() {
        let (mut reg, mut rng, ca) = setup();
        let a = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        let b = reg.register(&offer("h:2", T0 + 50), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &a, T0);
        activate(&mut reg, &b, T0);
        assert!(reg.sweep(T0 + 30).is_empty());
        assert_eq!(reg.sweep(T0 + 60), vec![b.payload.pid]);
        reg.heartbeat(&a.payload.pid, T0 + 60);
        assert!(reg.sweep(T0 + 150).is_empty());
        assert_eq!(reg.sweep(T0 + 151), vec![a.payload.pid]);
    }

    #[test]
    fn allocate_batch_uses_active_pool() {
        let (mut reg, mut rng, ca) = setup();
        for i in 0..2 {
            let d = reg.register(&offer(&format!("h:{i}"), T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
            activate(&mut reg, &d, T0);
        }
        let tasks: Vec<TaskSpec> = (0..4)
            .map(|i| TaskSpec { id: format!("k{i}"), start: T0 + 10, end: T0 + 20, bw: 5 })
            .collect();
        let a = reg.allocate_batch(&tasks, T0).unwrap();
        assert_eq!(a.used_count, 2);
        let too_much: Vec<TaskSpec> = (0..5)
            .map(|i| TaskSpec { id: format!("k{i}"), start: T0 + 10, end: T0 + 20, bw: 5 })
            .collect();
        assert!(matches!(reg.allocate_batch(&too_much, T0), Err(CoordError::Scheduler(SchedError::Infeasible { .. }))));
    }

    #[test]
    fn registry_snapshot_round_trips() {
        let (mut reg, mut rng, ca) = setup();
        let d = reg.register(&offer("h:1", T0 + 3600), T0, &mut rng, &ca, "c").unwrap();
        activate(&mut reg, &d, T0);
        let json = serde_json::to_string(&reg).unwrap();
        let back: Registry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, reg);
    }
}
