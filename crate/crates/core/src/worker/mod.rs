//! The service program run on an instance: executes FOI sequences with
//! heartbeats, exposes intermediate files for transfers, follows its key
//! chain, and shuts itself down ahead of the billing boundary.

pub mod exposure;
pub mod transform;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{watch, Semaphore};
use tokio::task::{AbortHandle, JoinHandle};

use crate::clock::SharedClock;
use crate::domain::{self, validate_foi_sequence, CredentialSet, FileMeta, Foi, FoiSequence, FoiVerb, InstanceMode, OpKind};
use crate::keying::{self, EpochKeyState, Pid};
use crate::storage::{Session, StorageError, StoreHandle};
use crate::wire::{
    code, open_channel, split_stream, ByteCounters, Certificate, Channel, DispatchSsp, ErrorBody, ExposeRequest,
    Exposed, FetchChunk, FetchIntermediate, FrameSource, JobAuth, JobHeartbeat, JobResult, KeyInit, LivenessPing,
    Message, MessageKind, NetOptions, PushedFile, RegisterInstance, SharedSink, ShutdownNotice, SubmitOp, WireError,
    MAX_FRAME_BYTES,
};

use exposure::{Exposures, FetchError, IntermediateUri};

/// Chunk size for remote intermediate fetches.
pub const FETCH_CHUNK_BYTES: u64 = 4 << 20;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("invalid worker configuration: {0}")]
    Config(String),
    #[error("worker failed to start: {0}")]
    Start(String),
    #[error("registration with the coordinator failed: {0}")]
    Registration(WireError),
}

#[derive(Clone)]
pub struct WorkerConfig {
    pub listen: String,
    /// Register with this coordinator as a shared instance.
    pub coordinator: Option<String>,
    pub store: StoreHandle,
    /// Holds per-job workspaces, exposed files and the owner log.
    pub workdir: PathBuf,
    pub billing_period: Duration,
    pub safety_margin: Duration,
    pub max_jobs: usize,
    pub heartbeat_every: Duration,
    /// Overrides the liveness interval dispatched by the coordinator.
    pub liveness_every: Option<Duration>,
    pub expose_ttl_s: u64,
    /// End of the share window; defaults to start plus one billing period.
    pub share_until: Option<u64>,
    pub bandwidth: u64,
    pub mode: InstanceMode,
    /// Lets `download` read `file://` URLs from the worker's filesystem.
    pub allow_file_urls: bool,
    /// Simulated WAN shaping: caps the rate at which a job moves data.
    pub throttle_bytes_per_s: Option<u64>,
    pub net: NetOptions,
    pub clock: SharedClock,
}

impl WorkerConfig {
    pub fn new(store: StoreHandle, workdir: impl Into<PathBuf>, clock: SharedClock) -> Self {
        WorkerConfig {
            listen: "127.0.0.1:0".into(),
            coordinator: None,
            store,
            workdir: workdir.into(),
            billing_period: Duration::from_secs(3600),
            safety_margin: Duration::from_secs(60),
            max_jobs: 4,
            heartbeat_every: Duration::from_secs(1),
            liveness_every: None,
            expose_ttl_s: 900,
            share_until: None,
            bandwidth: 100,
            mode: InstanceMode::Private,
            allow_file_urls: false,
            throttle_bytes_per_s: None,
            net: NetOptions::default(),
            clock,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: String,
    pub fois: FoiSequence,
    pub step: usize,
    pub bytes_moved: u64,
    pub status: JobStatus,
    /// Present only while the job runs.
    pub workspace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShutdownEvent {
    pub reason: String,
    /// Time from worker start to the shutdown notice.
    pub after_start: Duration,
    pub notified_coordinator: bool,
    pub aborted_jobs: usize,
}

/// Append-only log visible to the instance owner.
#[derive(Debug)]
pub struct OwnerLog {
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl OwnerLog {
    fn open(path: PathBuf) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(OwnerLog { path, file: Mutex::new(file) })
    }

    fn line(&self, msg: impl AsRef<str>) {
        tracing::info!(target: "skyrelay::worker", "{}", msg.as_ref());
        let mut f = self.file.lock().unwrap();
        let _ = writeln!(f, "{}", msg.as_ref());
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

struct Shared {
    addr: String,
    store: StoreHandle,
    jobs_dir: PathBuf,
    mode: InstanceMode,
    allow_file_urls: bool,
    throttle: Option<u64>,
    heartbeat_every: Duration,
    expose_ttl_s: u64,
    net: NetOptions,
    clock: SharedClock,
    key: Mutex<Option<EpochKeyState>>,
    exposures: Exposures,
    jobs: Mutex<BTreeMap<String, JobState>>,
    slots: Semaphore,
    bytes_moved: AtomicU64,
    counters: Arc<ByteCounters>,
    log: OwnerLog,
    accepting: AtomicBool,
    active: AtomicUsize,
    abort: watch::Sender<bool>,
    conns: Mutex<Vec<AbortHandle>>,
}

impl Shared {
    fn new_id(&self) -> String {
        format!("{:016x}", rand::thread_rng().gen::<u64>())
    }

    fn set_job(&self, id: &str, f: impl FnOnce(&mut JobState)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(id) {
            f(j);
        }
    }
}

pub struct WorkerHandle {
    addr: SocketAddr,
    dispatch: Option<DispatchSsp>,
    shared: Arc<Shared>,
    done: watch::Receiver<Option<ShutdownEvent>>,
    stop: watch::Sender<Option<String>>,
    tasks: Vec<JoinHandle<()>>,
}

impl WorkerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn pid(&self) -> Option<Pid> {
        self.dispatch.as_ref().map(|d| d.payload.pid)
    }

    pub fn certificate(&self) -> Option<&Certificate> {
        self.dispatch.as_ref().map(|d| &d.certificate)
    }

    pub fn key_state(&self) -> Option<EpochKeyState> {
        self.shared.key.lock().unwrap().clone()
    }

    /// Bytes fetched from or written to storage, downloaded, or served to
    /// guests.
    pub fn bytes_moved(&self) -> u64 {
        self.shared.bytes_moved.load(Ordering::SeqCst)
    }

    /// Frame counters over every connection this worker served or opened.
    pub fn counters(&self) -> Arc<ByteCounters> {
        self.shared.counters.clone()
    }

    pub fn owner_log(&self) -> &Path {
        self.shared.log.path()
    }

    pub fn jobs(&self) -> Vec<JobState> {
        self.shared.jobs.lock().unwrap().values().cloned().collect()
    }

    pub fn is_shut_down(&self) -> bool {
        self.done.borrow().is_some()
    }

    pub async fn wait_shutdown(&self) -> ShutdownEvent {
        let mut rx = self.done.clone();
        loop {
            if let Some(e) = rx.borrow_and_update().clone() {
                return e;
            }
            if rx.changed().await.is_err() {
                return ShutdownEvent {
                    reason: "killed".into(),
                    after_start: Duration::ZERO,
                    notified_coordinator: false,
                    aborted_jobs: 0,
                };
            }
        }
    }

    /// Runs the shutdown path now, as the timer would.
    pub async fn shutdown(&self, reason: &str) -> ShutdownEvent {
        let _ = self.stop.send(Some(reason.to_string()));
        self.wait_shutdown().await
    }

    /// Stops every task without notifying anyone, like `kill -9`.
    pub fn kill(self) {
        for t in &self.tasks {
            t.abort();
        }
        for c in self.shared.conns.lock().unwrap().drain(..) {
            c.abort();
        }
    }
}

/// Starts a worker after `delay`, standing in for instance boot time.
pub async fn launch_private(config: WorkerConfig, delay: Duration) -> Result<WorkerHandle, WorkerError> {
    tokio::time::sleep(delay).await;
    start_worker(config).await
}

pub async fn start_worker(config: WorkerConfig) -> Result<WorkerHandle, WorkerError> {
    let started = Instant::now();
    if config.safety_margin >= config.billing_period {
        return Err(WorkerError::Config(format!(
            "safety margin {:?} must be shorter than the billing period {:?}",
            config.safety_margin, config.billing_period
        )));
    }
    if config.max_jobs == 0 {
        return Err(WorkerError::Config("max_jobs must be positive".into()));
    }
    let now = config.clock.now_s();
    let share_until = config.share_until.unwrap_or(now + config.billing_period.as_secs().max(1));

    let start_err = |what: &str, e: std::io::Error| WorkerError::Start(format!("{what}: {e}"));
    std::fs::create_dir_all(&config.workdir).map_err(|e| start_err("workdir", e))?;
    let jobs_dir = config.workdir.join("jobs");
    std::fs::create_dir_all(&jobs_dir).map_err(|e| start_err("jobs dir", e))?;
    let exposures = Exposures::new(config.workdir.join("exposed")).map_err(|e| start_err("exposure dir", e))?;
    let log = OwnerLog::open(config.workdir.join("owner.log")).map_err(|e| start_err("owner log", e))?;
    let listener = TcpListener::bind(&config.listen).await.map_err(|e| start_err(&format!("bind {}", config.listen), e))?;
    let addr = listener.local_addr().map_err(|e| start_err("local addr", e))?;

    let counters = ByteCounters::new();
    let net = config.net.clone().with_counters(counters.clone());
    let (abort, _) = watch::channel(false);
    let shared = Arc::new(Shared {
        addr: addr.to_string(),
        store: config.store.clone(),
        jobs_dir,
        mode: config.mode,
        allow_file_urls: config.allow_file_urls,
        throttle: config.throttle_bytes_per_s.filter(|r| *r > 0),
        heartbeat_every: config.heartbeat_every,
        expose_ttl_s: config.expose_ttl_s,
        net: net.clone(),
        clock: config.clock.clone(),
        key: Mutex::new(None),
        exposures,
        jobs: Mutex::new(BTreeMap::new()),
        slots: Semaphore::new(config.max_jobs),
        bytes_moved: AtomicU64::new(0),
        counters,
        log,
        accepting: AtomicBool::new(true),
        active: AtomicUsize::new(0),
        abort,
        conns: Mutex::new(Vec::new()),
    });
    shared.log.line(format!("worker listening on {addr}, share window ends at {share_until}"));

    let (done_tx, done) = watch::channel(None);
    let (stop, stop_rx) = watch::channel(None::<String>);
    let mut tasks = Vec::new();

    if share_until <= now {
        shared.log.line("share window already over; shutting down");
        shared.accepting.store(false, Ordering::SeqCst);
        let _ = done_tx.send(Some(ShutdownEvent {
            reason: "share window already over".into(),
            after_start: started.elapsed(),
            notified_coordinator: false,
            aborted_jobs: 0,
        }));
        return Ok(WorkerHandle { addr, dispatch: None, shared, done, stop, tasks });
    }

    let mut coordinator: Option<Channel> = None;
    let mut dispatch = None;
    if let Some(caddr) = &config.coordinator {
        let mut ch = open_channel(caddr, &net).await.map_err(WorkerError::Registration)?;
        let offer = RegisterInstance {
            addr: addr.to_string(),
            os_info: std::env::consts::OS.to_string(),
            hardware_info: format!(
                "{} cpus",
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            ),
            share_until,
            bandwidth: config.bandwidth,
        };
        let reply = ch.call(MessageKind::RegisterInstance, &offer).await.map_err(WorkerError::Registration)?;
        let d: DispatchSsp = reply.parse_body().map_err(WorkerError::Registration)?;
        let state = EpochKeyState::from_initial(d.payload.pid, d.payload.schedule, d.payload.initial_key);
        *shared.key.lock().unwrap() = Some(state);
        shared.log.line(format!("registered as {}", d.payload.pid));
        dispatch = Some(d);
        coordinator = Some(ch);
    }

    tasks.push(tokio::spawn(accept_loop(shared.clone(), listener)));

    if let (Some(ch), Some(d)) = (coordinator.as_mut(), dispatch.as_ref()) {
        let proof = hex::encode(keying::key_confirmation(&d.payload.initial_key));
        ch.call(MessageKind::KeyInit, KeyInit { pid: d.payload.pid, proof })
            .await
            .map_err(WorkerError::Registration)?;
    }

    // Rotation driver.
    if shared.key.lock().unwrap().is_some() {
        let shared = shared.clone();
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(1));
            loop {
                tick.tick().await;
                let now = shared.clock.now_s();
                if let Some(k) = shared.key.lock().unwrap().as_mut() {
                    k.advance_to_time(now);
                }
                shared.exposures.sweep(now);
            }
        }));
    }

    let coordinator = Arc::new(tokio::sync::Mutex::new(coordinator));
    if let Some(d) = &dispatch {
        let every = config.liveness_every.unwrap_or(Duration::from_secs(d.payload.liveness_interval_s.max(1)));
        let pid = d.payload.pid;
        let coordinator = coordinator.clone();
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                if let Some(ch) = coordinator.lock().await.as_mut() {
                    if let Err(e) = ch.send(MessageKind::Heartbeat, LivenessPing { pid }).await {
                        tracing::warn!("liveness ping failed: {e}");
                    }
                }
            }
        }));
    }

    let remaining_share = Duration::from_secs(share_until.saturating_sub(config.clock.now_s()));
    let deadline = remaining_share.min(config.billing_period).saturating_sub(config.safety_margin);
    let pid = dispatch.as_ref().map(|d| d.payload.pid);
    let timer = {
        let shared = shared.clone();
        let mut stop_rx = stop_rx;
        let others: Vec<AbortHandle> = tasks.iter().map(|t| t.abort_handle()).collect();
        tokio::spawn(async move {
            let deadline_at = tokio::time::Instant::from_std(started) + deadline;
            let reason = tokio::select! {
                _ = tokio::time::sleep_until(deadline_at) => "billing boundary approaching".to_string(),
                r = stop_rx.wait_for(Option::is_some) => match r {
                    Ok(r) => r.clone().unwrap_or_default(),
                    Err(_) => return,
                },
            };
            let event = run_shutdown(&shared, &coordinator, pid, &reason, started).await;
            for t in others {
                t.abort();
            }
            for c in shared.conns.lock().unwrap().drain(..) {
                c.abort();
            }
            let _ = done_tx.send(Some(event));
        })
    };
    tasks.push(timer);

    Ok(WorkerHandle { addr, dispatch, shared, done, stop, tasks })
}

async fn run_shutdown(
    shared: &Shared,
    coordinator: &tokio::sync::Mutex<Option<Channel>>,
    pid: Option<Pid>,
    reason: &str,
    started: Instant,
) -> ShutdownEvent {
    shared.accepting.store(false, Ordering::SeqCst);
    let aborted = shared.active.load(Ordering::SeqCst);
    let _ = shared.abort.send(true);
    // Give aborted jobs a moment to send their ERROR replies.
    let grace = Instant::now();
    while shared.active.load(Ordering::SeqCst) > 0 && grace.elapsed() < Duration::from_millis(300) {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut notified = false;
    let after_start;
    match (coordinator.lock().await.take(), pid) {
        (Some(mut ch), Some(pid)) => {
            after_start = started.elapsed();
            let notice = ShutdownNotice { pid, reason: reason.to_string() };
            match tokio::time::timeout(Duration::from_secs(2), ch.call(MessageKind::ShutdownNotice, notice)).await {
                Ok(Ok(_)) => notified = true,
                Ok(Err(e)) => tracing::warn!("shutdown notice rejected: {e}"),
                Err(_) => tracing::warn!("shutdown notice timed out"),
            }
            ch.close().await;
        }
        _ => after_start = started.elapsed(),
    }
    shared.log.line(format!("shut down: {reason}; {aborted} job(s) aborted"));
    ShutdownEvent { reason: reason.to_string(), after_start, notified_coordinator: notified, aborted_jobs: aborted }
}

async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    loop {
        let (stream, _) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("accept failed: {e}");
                continue;
            }
        };
        let (src, sink) = split_stream(stream, &shared.net);
        let task = tokio::spawn(serve_connection(shared.clone(), src, Arc::new(tokio::sync::Mutex::new(sink))));
        let mut conns = shared.conns.lock().unwrap();
        conns.retain(|c| !c.is_finished());
        conns.push(task.abort_handle());
    }
}

async fn serve_connection(shared: Arc<Shared>, mut src: FrameSource, sink: SharedSink) {
    loop {
        let m = match src.next().await {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!("worker connection dropped: {e}");
                break;
            }
        };
        let res = match m.kind {
            MessageKind::SubmitOp => handle_submit(&shared, &m, &sink).await,
            MessageKind::ExposeGrant => handle_expose(&shared, &m, &sink).await,
            MessageKind::FetchIntermediate => handle_fetch(&shared, &m, &sink).await,
            k if k.is_request() => {
                let e = ErrorBody::new(code::INVALID_REQUEST, format!("worker does not serve {k:?}"));
                sink.lock().await.reply_error(m.seq, e).await
            }
            _ => Ok(()),
        };
        if res.is_err() {
            break;
        }
    }
    sink.lock().await.shutdown().await;
}

/// Heartbeats for one request until stopped. Stopping waits for any
/// heartbeat in flight so the terminal reply is never interleaved mid-frame.
struct Heartbeat {
    stop: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl Heartbeat {
    fn start(shared: &Shared, sink: SharedSink, seq: u64, job_id: String, progress: Arc<Progress>) -> Self {
        let (stop, mut stop_rx) = watch::channel(false);
        let every = shared.heartbeat_every;
        let task = tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tokio::select! {
                    _ = stop_rx.changed() => break,
                    _ = tick.tick() => {
                        let hb = JobHeartbeat {
                            job_id: job_id.clone(),
                            step: progress.step.load(Ordering::SeqCst),
                            bytes_moved: progress.bytes.load(Ordering::SeqCst),
                        };
                        if sink.lock().await.reply(MessageKind::Heartbeat, seq, hb).await.is_err() {
                            break;
                        }
                    }
                }
            }
        });
        Heartbeat { stop, task }
    }

    async fn finish(self) {
        let _ = self.stop.send(true);
        let _ = self.task.await;
    }
}

#[derive(Debug, Default)]
struct Progress {
    step: AtomicUsize,
    bytes: AtomicU64,
}

/// Failure of one request, with the FOI step it happened at.
#[derive(Debug)]
struct StepError {
    body: ErrorBody,
}

impl StepError {
    fn new(code: &str, msg: impl Into<String>) -> Self {
        StepError { body: ErrorBody::new(code, msg) }
    }

    fn at(mut self, step: usize) -> Self {
        self.body.step = Some(step);
        self
    }
}

impl From<StorageError> for StepError {
    fn from(e: StorageError) -> Self {
        let c = match e {
            StorageError::NotFound(_) => code::NOT_FOUND,
            StorageError::QuotaError { .. } => code::QUOTA_ERROR,
            StorageError::PermissionError(_) => code::PERMISSION_ERROR,
            _ => code::STORAGE_ERROR,
        };
        StepError::new(c, e.to_string())
    }
}

impl From<FetchError> for StepError {
    fn from(e: FetchError) -> Self {
        let c = match e {
            FetchError::NotFound(_) => code::NOT_FOUND,
            FetchError::Permission(_) => code::PERMISSION_ERROR,
            FetchError::Gone(_) => code::GONE,
            FetchError::BadUri(_) => code::INVALID_REQUEST,
            FetchError::Io(_) => code::STORAGE_ERROR,
        };
        StepError::new(c, e.to_string())
    }
}

impl From<WireError> for StepError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Remote { code, message, .. } => StepError { body: ErrorBody { code, message, step: None } },
            other => StepError::new(code::NETWORK_ERROR, other.to_string()),
        }
    }
}

fn open_auth(shared: &Shared, auth: &JobAuth) -> Result<CredentialSet, StepError> {
    match auth {
        JobAuth::Plain { credentials } => {
            if shared.mode == InstanceMode::Shared {
                return Err(StepError::new(code::INVALID_REQUEST, "a shared instance accepts sealed credentials only"));
            }
            Ok(credentials.clone())
        }
        JobAuth::Sealed { ciphertext } => {
            let mut key = shared.key.lock().unwrap();
            let state = key
                .as_mut()
                .ok_or_else(|| StepError::new(code::CREDENTIAL_AUTH_FAILURE, "instance holds no key chain"))?;
            state.advance_to_time(shared.clock.now_s());
            keying::decrypt_credentials(state, ciphertext)
                .map_err(|e| StepError::new(code::CREDENTIAL_AUTH_FAILURE, e.to_string()))
        }
    }
}

/// Runs `work` with a job slot, heartbeats and shutdown abort, then sends
/// exactly one terminal reply.
async fn run_request<F, T>(
    shared: &Shared,
    m: &Message,
    sink: &SharedSink,
    job_id: String,
    progress: Arc<Progress>,
    work: F,
) -> Result<(), WireError>
where
    F: std::future::Future<Output = Result<T, StepError>>,
    T: Serialize,
{
    if !shared.accepting.load(Ordering::SeqCst) {
        return sink.lock().await.reply_error(m.seq, ErrorBody::new(code::SHUTDOWN, "instance is shutting down")).await;
    }
    shared.active.fetch_add(1, Ordering::SeqCst);
    let hb = Heartbeat::start(shared, sink.clone(), m.seq, job_id, progress);
    let mut abort = shared.abort.subscribe();
    let outcome = tokio::select! {
        r = async {
            let _permit = shared.slots.acquire().await.expect("semaphore never closes");
            work.await
        } => r,
        _ = abort.wait_for(|a| *a) => Err(StepError::new(code::SHUTDOWN, "instance shut down before the job finished")),
    };
    hb.finish().await;
    let reply = match outcome {
        Ok(body) => sink.lock().await.reply(MessageKind::Result, m.seq, body).await,
        Err(e) => sink.lock().await.reply_error(m.seq, e.body).await,
    };
    shared.active.fetch_sub(1, Ordering::SeqCst);
    reply
}

async fn handle_submit(shared: &Arc<Shared>, m: &Message, sink: &SharedSink) -> Result<(), WireError> {
    let req: SubmitOp = match m.parse_body() {
        Ok(r) => r,
        Err(e) => return sink.lock().await.reply_error(m.seq, ErrorBody::new(code::INVALID_REQUEST, e.to_string())).await,
    };
    if let Err(v) = validate_foi_sequence(&req.fois) {
        let first = &v[0];
        let e = ErrorBody::new(code::INVALID_REQUEST, first.to_string()).at_step(first.step);
        return sink.lock().await.reply_error(m.seq, e).await;
    }
    let job_id = shared.new_id();
    let progress = Arc::new(Progress::default());
    shared.jobs.lock().unwrap().insert(
        job_id.clone(),
        JobState {
            job_id: job_id.clone(),
            fois: req.fois.clone(),
            step: 0,
            bytes_moved: 0,
            status: JobStatus::Queued,
            workspace: None,
        },
    );
    let summary: Vec<String> = req.fois.iter().map(describe_foi).collect();
    shared.log.line(format!("job {job_id} received: {}", summary.join("; ")));
    let work = execute_job(shared.clone(), job_id.clone(), req, progress.clone());
    let jid = job_id.clone();
    let res = run_request(shared, m, sink, job_id.clone(), progress.clone(), async move {
        let r = work.await;
        match &r {
            Ok(res) => shared.log.line(format!("job {jid} done, {} bytes moved", res.bytes_moved)),
            Err(e) => shared.log.line(format!("job {jid} failed: {} {}", e.body.code, e.body.message)),
        }
        r
    })
    .await;
    let failed = shared.jobs.lock().unwrap().get(&job_id).is_some_and(|j| j.status != JobStatus::Done);
    shared.set_job(&job_id, |j| {
        if failed {
            j.status = JobStatus::Failed;
        }
        j.workspace = None;
        j.step = progress.step.load(Ordering::SeqCst);
        j.bytes_moved = progress.bytes.load(Ordering::SeqCst);
    });
    res
}

fn describe_foi(f: &Foi) -> String {
    match (f.verb, f.op_kind) {
        (FoiVerb::Op, Some(k)) => format!("op {k:?} {}", f.target).to_lowercase(),
        (FoiVerb::Download, _) => {
            // URLs can carry query secrets; only the scheme and host are logged.
            let host = f.target.split('/').take(3).collect::<Vec<_>>().join("/");
            format!("download {host}/…")
        }
        (v, _) => format!("{v:?} {}", f.target).to_lowercase(),
    }
}

/// Per-job state passed between steps.
struct JobCtx {
    shared: Arc<Shared>,
    workspace: PathBuf,
    creds: CredentialSet,
    session: Option<Session>,
    /// File produced by the previous step.
    current: Option<PathBuf>,
    outputs: Vec<FileMeta>,
    pushed: Vec<PushedFile>,
    progress: Arc<Progress>,
}

impl JobCtx {
    async fn moved(&self, n: usize) {
        self.progress.bytes.fetch_add(n as u64, Ordering::SeqCst);
        self.shared.bytes_moved.fetch_add(n as u64, Ordering::SeqCst);
        if let Some(rate) = self.shared.throttle {
            tokio::time::sleep(Duration::from_secs_f64(n as f64 / rate as f64)).await;
        }
    }

    async fn session(&mut self) -> Result<Session, StepError> {
        if let Some(s) = &self.session {
            return Ok(s.clone());
        }
        let store = self.shared.store.clone();
        let creds = self.creds.clone();
        let s = blocking(move || store.authorize(&creds.token, &creds.account_id)).await??;
        self.session = Some(s.clone());
        Ok(s)
    }

    fn current(&self) -> Result<PathBuf, StepError> {
        self.current.clone().ok_or_else(|| StepError::new(code::INVALID_REQUEST, "no input file for this step"))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, StepError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StepError::new(code::STORAGE_ERROR, format!("worker task failed: {e}")))
}

async fn read_file(p: PathBuf) -> Result<Vec<u8>, StepError> {
    tokio::fs::read(&p).await.map_err(|e| StepError::new(code::STORAGE_ERROR, format!("workspace read: {e}")))
}

async fn write_file(p: &Path, data: &[u8]) -> Result<(), StepError> {
    tokio::fs::write(p, data).await.map_err(|e| StepError::new(code::STORAGE_ERROR, format!("workspace write: {e}")))
}

async fn execute_job(
    shared: Arc<Shared>,
    job_id: String,
    req: SubmitOp,
    progress: Arc<Progress>,
) -> Result<JobResult, StepError> {
    // Credentials are opened before any storage access.
    let creds = open_auth(&shared, &req.auth)?;
    let ws = tempfile::Builder::new()
        .prefix(&format!("{job_id}-"))
        .tempdir_in(&shared.jobs_dir)
        .map_err(|e| StepError::new(code::STORAGE_ERROR, format!("workspace: {e}")))?;
    shared.set_job(&job_id, |j| {
        j.status = JobStatus::Running;
        j.workspace = Some(ws.path().to_path_buf());
    });
    let mut ctx = JobCtx {
        shared: shared.clone(),
        workspace: ws.path().to_path_buf(),
        creds,
        session: None,
        current: None,
        outputs: Vec::new(),
        pushed: Vec::new(),
        progress: progress.clone(),
    };
    for (i, foi) in req.fois.iter().enumerate() {
        progress.step.store(i, Ordering::SeqCst);
        shared.set_job(&job_id, |j| j.step = i);
        execute_foi(&mut ctx, i, foi).await.map_err(|e| e.at(i))?;
    }
    let bytes_moved = progress.bytes.load(Ordering::SeqCst);
    shared.set_job(&job_id, |j| {
        j.status = JobStatus::Done;
        j.bytes_moved = bytes_moved;
    });
    let JobCtx { outputs, pushed, .. } = ctx;
    drop(ws);
    Ok(JobResult { job_id, outputs, pushed, bytes_moved })
}

async fn execute_foi(ctx: &mut JobCtx, i: usize, foi: &Foi) -> Result<(), StepError> {
    match foi.verb {
        FoiVerb::Download => {
            let data = download(ctx, foi).await?;
            ctx.moved(data.len()).await;
            let p = ctx.workspace.join(format!("{i}-download"));
            write_file(&p, &data).await?;
            ctx.current = Some(p);
        }
        FoiVerb::Get => {
            let session = ctx.session().await?;
            let store = ctx.shared.store.clone();
            let path = foi.target.clone();
            let data = blocking(move || store.get_object(&session, &path)).await??;
            ctx.moved(data.len()).await;
            let p = ctx.workspace.join(format!("{i}-{}", domain::basename(&foi.target)));
            write_file(&p, &data).await?;
            ctx.current = Some(p);
        }
        FoiVerb::Put => {
            let data = read_file(ctx.current()?).await?;
            let session = ctx.session().await?;
            let store = ctx.shared.store.clone();
            let path = foi.target.clone();
            let n = data.len();
            let meta = blocking(move || store.put_object(&session, &path, &data)).await??;
            ctx.moved(n).await;
            ctx.outputs.push(meta);
        }
        FoiVerb::Op => {
            let kind = foi.op_kind.expect("validated: op carries a kind");
            let input = read_file(ctx.current()?).await?;
            let out_name = domain::basename(foi.output().unwrap_or(&foi.target)).to_string();
            let max = foi.op_params.get("max_resolution").and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
            let (out, key) = blocking(move || -> Result<(Vec<u8>, Option<Vec<u8>>), transform::TransformError> {
                match kind {
                    OpKind::Compress => Ok((transform::gzip(&input), None)),
                    OpKind::Encrypt => {
                        let (ct, key) = transform::encrypt_file(&input, &mut rand::rngs::OsRng);
                        Ok((ct, Some(key.as_bytes().to_vec())))
                    }
                    OpKind::Convert => Ok((transform::convert_ppm(&input, max)?, None)),
                }
            })
            .await?
            .map_err(|e| StepError::new(code::TRANSFORM_ERROR, e.0))?;
            let p = ctx.workspace.join(format!("{i}-{out_name}"));
            write_file(&p, &out).await?;
            ctx.current = Some(p);
            if let Some(key) = key {
                // The key file goes back to the requester, never to storage.
                ctx.pushed.push(PushedFile { name: format!("{out_name}.key"), data: key });
            }
        }
        FoiVerb::Push => {
            let data = read_file(ctx.current()?).await?;
            // Base64 in a JSON frame grows by a third.
            if data.len() / 3 * 4 + 4096 > MAX_FRAME_BYTES {
                return Err(StepError::new(code::TRANSFORM_ERROR, "pushed file exceeds the frame size limit"));
            }
            ctx.pushed.push(PushedFile { name: domain::basename(&foi.target).to_string(), data });
        }
    }
    Ok(())
}

async fn download(ctx: &JobCtx, foi: &Foi) -> Result<Vec<u8>, StepError> {
    let url = foi.target.as_str();
    if url.starts_with(exposure::URI_SCHEME) {
        let uri = IntermediateUri::parse(url)?;
        let token = foi.op_params.get("guest_token").map(String::as_str).unwrap_or("");
        let shared = &ctx.shared;
        if uri.addr == shared.addr {
            return Ok(shared.exposures.read_all(&uri, token, shared.clock.now_s())?);
        }
        return fetch_remote(&shared.net, &uri, token).await;
    }
    if let Some(path) = url.strip_prefix("file://") {
        if !ctx.shared.allow_file_urls {
            return Err(StepError::new(code::PERMISSION_ERROR, "file URLs are disabled on this instance"));
        }
        return tokio::fs::read(path)
            .await
            .map_err(|e| StepError::new(code::NETWORK_ERROR, format!("download {url}: {e}")));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        let net = |e: reqwest::Error| StepError::new(code::NETWORK_ERROR, format!("download: {e}"));
        let resp = reqwest::get(url).await.map_err(net)?;
        if !resp.status().is_success() {
            return Err(StepError::new(code::NETWORK_ERROR, format!("download: HTTP {}", resp.status())));
        }
        return Ok(resp.bytes().await.map_err(net)?.to_vec());
    }
    Err(StepError::new(code::INVALID_REQUEST, "unsupported download URL scheme"))
}

/// Pulls an intermediate file from another worker in chunks.
async fn fetch_remote(net: &NetOptions, uri: &IntermediateUri, token: &str) -> Result<Vec<u8>, StepError> {
    let mut ch = open_channel(&uri.addr, net).await?;
    let mut data = Vec::new();
    let mut total = None;
    while total.is_none_or(|t| (data.len() as u64) < t) {
        let req = FetchIntermediate {
            uri: uri.to_string(),
            guest_token: token.to_string(),
            offset: data.len() as u64,
            max_len: FETCH_CHUNK_BYTES,
        };
        let chunk: FetchChunk = ch.call(MessageKind::FetchIntermediate, req).await?.parse_body()?;
        if chunk.offset != data.len() as u64 || (chunk.data.is_empty() && chunk.total > data.len() as u64) {
            return Err(StepError::new(code::NETWORK_ERROR, "intermediate fetch made no progress"));
        }
        data.extend_from_slice(&chunk.data);
        total = Some(chunk.total);
    }
    ch.close().await;
    Ok(data)
}

async fn handle_expose(shared: &Arc<Shared>, m: &Message, sink: &SharedSink) -> Result<(), WireError> {
    let req: ExposeRequest = match m.parse_body() {
        Ok(r) => r,
        Err(e) => return sink.lock().await.reply_error(m.seq, ErrorBody::new(code::INVALID_REQUEST, e.to_string())).await,
    };
    let job_id = shared.new_id();
    shared.log.line(format!("job {job_id} exposes {}", req.path));
    let progress = Arc::new(Progress::default());
    let s = shared.clone();
    let jid = job_id.clone();
    let p = progress.clone();
    let work = async move {
        domain::validate_path(&req.path).map_err(|e| StepError::new(code::INVALID_REQUEST, e.to_string()))?;
        let creds = open_auth(&s, &req.auth)?;
        let store = s.store.clone();
        let path = req.path.clone();
        let data = blocking(move || -> Result<Vec<u8>, StorageError> {
            let session = store.authorize(&creds.token, &creds.account_id)?;
            store.get_object(&session, &path)
        })
        .await??;
        p.bytes.fetch_add(data.len() as u64, Ordering::SeqCst);
        s.bytes_moved.fetch_add(data.len() as u64, Ordering::SeqCst);
        let now = s.clock.now_s();
        let f = s.exposures.expose(&s.addr, &jid, &data, now, s.expose_ttl_s, &mut rand::rngs::OsRng)?;
        s.log.line(format!("job {jid} exposed {} bytes as {}", f.size_bytes, f.uri));
        Ok(Exposed { uri: f.uri.to_string(), guest_token: f.guest_token, expiry: f.expiry, size_bytes: f.size_bytes })
    };
    run_request(shared, m, sink, job_id, progress, work).await
}

async fn handle_fetch(shared: &Arc<Shared>, m: &Message, sink: &SharedSink) -> Result<(), WireError> {
    let reply: Result<FetchChunk, StepError> = (|| {
        let req: FetchIntermediate = m.parse_body().map_err(|e| StepError::new(code::INVALID_REQUEST, e.to_string()))?;
        let uri = IntermediateUri::parse(&req.uri)?;
        let max_len = req.max_len.min(FETCH_CHUNK_BYTES);
        let (data, total) = shared.exposures.read(&uri, &req.guest_token, req.offset, max_len, shared.clock.now_s())?;
        shared.bytes_moved.fetch_add(data.len() as u64, Ordering::SeqCst);
        Ok(FetchChunk { offset: req.offset, total, data })
    })();
    let mut sink = sink.lock().await;
    match reply {
        Ok(c) => sink.reply(MessageKind::Result, m.seq, c).await,
        Err(e) => {
            shared.log.line(format!("fetch refused: {}", e.body.code));
            sink.reply_error(m.seq, e.body).await
        }
    }
}
