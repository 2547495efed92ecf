//! Local scenario runner: boots a coordinator, workers, a storage backend
//! and agents in-process, runs a seeded workload, and reports bytes per
//! principal and per-op timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use crate::agent::{Agent, AgentConfig, PrivateInstance};
use crate::clock::{self, SharedClock};
use crate::coordinator::{start_coordinator, CoordinatorConfig, CoordinatorHandle, RegistryConfig};
use crate::domain::{CredentialSet, InstanceMode};
use crate::scheduler::{self, InstanceSpec, TaskSpec};
use crate::storage::{LocalStore, ObjectStore, StoreHandle, DEFAULT_QUOTA_BYTES};
use crate::wire::{ByteCounters, NetOptions};
use crate::worker::transform::{encode_ppm, Rgb};
use crate::worker::{start_worker, ShutdownEvent, WorkerConfig, WorkerHandle};

/// Scratch deployment: one storage backend, an optional coordinator, and
/// helpers to create accounts, workers and agents against them.
pub struct Testbed {
    dir: TempDir,
    pub store: Arc<LocalStore>,
    pub clock: SharedClock,
    pub net: NetOptions,
    pub coordinator: Option<CoordinatorHandle>,
    pub coordinator_counters: Arc<ByteCounters>,
}

impl Testbed {
    pub fn new() -> std::io::Result<Self> {
        Self::with_net(NetOptions::default())
    }

    /// `net` applies to every channel opened by components of this testbed.
    pub fn with_net(net: NetOptions) -> std::io::Result<Self> {
        let dir = tempfile::tempdir()?;
        let clock = clock::system();
        // Large quota: scenarios move several 64 MiB files per account.
        let store = LocalStore::open_with(dir.path().join("storage"), DEFAULT_QUOTA_BYTES * 4, clock.clone())
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(Testbed {
            dir,
            store: Arc::new(store),
            clock,
            net,
            coordinator: None,
            coordinator_counters: ByteCounters::new(),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn store_handle(&self) -> StoreHandle {
        self.store.clone()
    }

    pub async fn start_coordinator(&mut self, registry: RegistryConfig) -> &CoordinatorHandle {
        let config = CoordinatorConfig {
            registry,
            net: self.net.clone().with_counters(self.coordinator_counters.clone()),
            ..CoordinatorConfig::default()
        };
        let h = start_coordinator(config, self.clock.clone()).await.expect("coordinator starts");
        self.coordinator.insert(h)
    }

    pub fn coordinator_addr(&self) -> Option<String> {
        self.coordinator.as_ref().map(|c| c.addr().to_string())
    }

    pub fn account(&self, id: &str) -> CredentialSet {
        let token = self.store.create_account(id).expect("account creation");
        CredentialSet { account_id: id.to_string(), token }
    }

    pub fn worker_config(&self, name: &str, mode: InstanceMode) -> WorkerConfig {
        let mut c = WorkerConfig::new(self.store_handle(), self.dir.path().join("workers").join(name), self.clock.clone());
        c.mode = mode;
        c.allow_file_urls = true;
        c.net = self.net.clone();
        if mode == InstanceMode::Shared {
            c.coordinator = self.coordinator_addr();
        }
        c
    }

    pub async fn shared_worker(&self, name: &str) -> WorkerHandle {
        start_worker(self.worker_config(name, InstanceMode::Shared)).await.expect("shared worker starts")
    }

    pub fn agent_config(&self, user: &str, creds: CredentialSet, mode: InstanceMode) -> AgentConfig {
        AgentConfig {
            user_id: user.to_string(),
            credentials: creds,
            store: self.store_handle(),
            mode,
            coordinator: self.coordinator_addr(),
            coordinator_key: self.coordinator.as_ref().map(|c| c.public_key()),
            private: None,
            state_dir: Some(self.dir.path().join("agents").join(user)),
            download_dir: self.dir.path().join("downloads").join(user),
            net: self.net.clone(),
            clock: self.clock.clone(),
        }
    }

    /// Agent with its own private worker, launched after `delay` on first use.
    pub fn private_agent(&self, user: &str, creds: CredentialSet, delay: Duration) -> Agent {
        let mut c = self.agent_config(user, creds, InstanceMode::Private);
        let wc = self.worker_config(&format!("private-{user}"), InstanceMode::Private);
        c.private = Some(PrivateInstance::Launch { config: Box::new(wc), delay });
        Agent::new(c)
    }

    /// Writes `data` straight into an account, bypassing every agent.
    pub fn stage(&self, creds: &CredentialSet, path: &str, data: &[u8]) {
        let s = self.store.authorize(&creds.token, &creds.account_id).expect("staging credentials");
        self.store.put_object(&s, path, data).expect("staging write");
    }

    pub fn read(&self, creds: &CredentialSet, path: &str) -> Vec<u8> {
        let s = self.store.authorize(&creds.token, &creds.account_id).expect("credentials");
        self.store.get_object(&s, path).expect("read back")
    }
}

/// Compressible pseudo-text of exactly `len` bytes.
pub fn text_payload(rng: &mut impl RngCore, len: usize) -> Vec<u8> {
    const WORDS: [&[u8]; 16] = [
        b"cloud ", b"file ", b"agent ", b"worker ", b"relay ", b"shadow ", b"key ", b"epoch ", b"share ", b"bandwidth ",
        b"instance ", b"storage ", b"token ", b"frame ", b"grant ", b"sky\n",
    ];
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        out.extend_from_slice(WORDS[(rng.next_u32() % 16) as usize]);
    }
    out.truncate(len);
    out
}

/// Incompressible bytes.
pub fn random_payload(rng: &mut impl RngCore, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

/// Square PPM of roughly `approx_bytes` bytes.
pub fn image_payload(rng: &mut impl RngCore, approx_bytes: usize) -> Vec<u8> {
    let side = ((approx_bytes / 3) as f64).sqrt().max(1.0) as usize;
    let mut px = Vec::with_capacity(side * side * 3);
    let tint = rng.next_u32();
    for y in 0..side {
        for x in 0..side {
            px.extend([(x as u32 ^ tint) as u8, (y as u32 ^ (tint >> 8)) as u8, ((x + y) as u32 ^ (tint >> 16)) as u8]);
        }
    }
    encode_ppm(&Rgb::new(side, side, px))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadOp {
    Compress,
    Encrypt,
    Download,
    Convert,
    /// Agent 0 sends a file to agent 1.
    Transfer,
    /// Basic create of an empty file.
    Create,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadItem {
    pub op: WorkloadOp,
    #[serde(default)]
    pub size_bytes: u64,
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "one")]
    pub agents: usize,
    #[serde(default = "default_mode")]
    pub mode: InstanceMode,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
    #[serde(default = "default_period")]
    pub billing_period_s: f64,
    #[serde(default = "default_margin")]
    pub safety_margin_s: f64,
    #[serde(default = "default_interval")]
    pub rotation_interval_s: u64,
    #[serde(default)]
    pub private_startup_delay_s: f64,
    /// Worker WAN shaping; off when absent.
    #[serde(default)]
    pub throttle_bytes_per_s: Option<u64>,
    /// Random scheduler problems to solve with every method.
    #[serde(default)]
    pub scheduler_cases: usize,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> InstanceMode {
    InstanceMode::Shared
}

fn default_period() -> f64 {
    3600.0
}

fn default_margin() -> f64 {
    60.0
}

fn default_interval() -> u64 {
    crate::keying::DEFAULT_INTERVAL_S
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipalBytes {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Heartbeat share of the totals above.
    pub heartbeat_sent: u64,
    pub heartbeat_received: u64,
}

impl PrincipalBytes {
    fn of(c: &ByteCounters) -> Self {
        let (hs, hr) = c.heartbeat_bytes();
        PrincipalBytes { bytes_sent: c.bytes_sent(), bytes_received: c.bytes_received(), heartbeat_sent: hs, heartbeat_received: hr }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub op: WorkloadOp,
    pub size_bytes: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Agent frame bytes, both directions, heartbeats included.
    pub agent_bytes: u64,
    /// Agent frame bytes without heartbeats; reproducible across runs.
    pub agent_bytes_excl_heartbeats: u64,
    pub agent_storage_bytes: u64,
    pub heartbeats: u64,
    pub worker_bytes: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSummary {
    pub op: WorkloadOp,
    pub size_bytes: u64,
    pub samples: usize,
    pub failures: usize,
    pub mean_wall_ms: f64,
    pub mean_agent_bytes: f64,
    pub max_agent_bytes: u64,
    pub mean_worker_bytes: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub cases: usize,
    pub feasible: usize,
    pub exact_matches_oracle: usize,
    pub greedy_feasible_when_exact: usize,
    pub greedy_extra_instances: usize,
    pub exact_ms: f64,
    pub greedy_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownRecord {
    pub worker: String,
    pub reason: String,
    pub after_start_ms: u64,
    pub aborted_jobs: usize,
    pub notified_coordinator: bool,
}

impl ShutdownRecord {
    fn new(worker: &str, e: &ShutdownEvent) -> Self {
        ShutdownRecord {
            worker: worker.to_string(),
            reason: e.reason.clone(),
            after_start_ms: e.after_start.as_millis() as u64,
            aborted_jobs: e.aborted_jobs,
            notified_coordinator: e.notified_coordinator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub mode: InstanceMode,
    pub principals: BTreeMap<String, PrincipalBytes>,
    pub ops: Vec<OpSummary>,
    pub samples: Vec<Sample>,
    pub scheduler: SchedulerStats,
    pub shutdowns: Vec<ShutdownRecord>,
    pub assertions: Vec<Assertion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl MetricsReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.assertions.iter().all(|a| a.pass)
    }

    /// Bytes per principal with heartbeats removed.
    pub fn deterministic_bytes(&self) -> BTreeMap<String, (u64, u64)> {
        self.principals
            .iter()
            .map(|(k, p)| (k.clone(), (p.bytes_sent - p.heartbeat_sent, p.bytes_received - p.heartbeat_received)))
            .collect()
    }

    /// Plain-text table: one row per op and size with time and bytes.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>12} {:>4} {:>12} {:>14} {:>14} {:>16}\n",
            "op", "size", "n", "time ms", "agent bytes", "agent max", "worker bytes"
        );
        for o in &self.ops {
            out.push_str(&format!(
                "{:<10} {:>12} {:>4} {:>12.1} {:>14.0} {:>14} {:>16.0}\n",
                format!("{:?}", o.op).to_lowercase(),
                o.size_bytes,
                o.samples,
                o.mean_wall_ms,
                o.mean_agent_bytes,
                o.max_agent_bytes,
                o.mean_worker_bytes
            ));
        }
        if self.ops.is_empty() {
            out.push_str("(no operations)\n");
        }
        out.push('\n');
        for (name, p) in &self.principals {
            out.push_str(&format!("{name:<14} sent {:>12}  received {:>12}\n", p.bytes_sent, p.bytes_received));
        }
        for s in &self.shutdowns {
            out.push_str(&format!(
                "shutdown {} after {} ms: {} ({} aborted)\n",
                s.worker, s.after_start_ms, s.reason, s.aborted_jobs
            ));
        }
        for a in &self.assertions {
            out.push_str(&format!("[{}] {} {}\n", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail));
        }
        out
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

struct Deployment {
    bed: Testbed,
    workers: Vec<(String, WorkerHandle)>,
    agents: Vec<Agent>,
    creds: Vec<CredentialSet>,
}

async fn deploy(spec: &ScenarioSpec) -> Result<Deployment, String> {
    let mut bed = Testbed::new().map_err(|e| format!("testbed: {e}"))?;
    let registry = RegistryConfig { rotation_interval_s: spec.rotation_interval_s, ..RegistryConfig::default() };
    let mut workers = Vec::new();
    if spec.mode == InstanceMode::Shared {
        bed.start_coordinator(registry).await;
        for i in 0..spec.workers.max(1) {
            let name = format!("worker-{i}");
            let mut c = bed.worker_config(&name, InstanceMode::Shared);
            c.billing_period = secs(spec.billing_period_s);
            c.safety_margin = secs(spec.safety_margin_s);
            c.throttle_bytes_per_s = spec.throttle_bytes_per_s;
            let w = start_worker(c).await.map_err(|e| format!("{name}: {e}"))?;
            workers.push((name, w));
        }
    }
    let mut agents = Vec::new();
    let mut creds = Vec::new();
    let n_agents = if spec.workload.iter().any(|w| w.op == WorkloadOp::Transfer) { spec.agents.max(2) } else { spec.agents.max(1) };
    for i in 0..n_agents {
        let user = format!("user{i}");
        let c = bed.account(&user);
        let agent = match spec.mode {
            InstanceMode::Shared => Agent::new(bed.agent_config(&user, c.clone(), InstanceMode::Shared)),
            InstanceMode::Private => {
                let mut ac = bed.agent_config(&user, c.clone(), InstanceMode::Private);
                let mut wc = bed.worker_config(&format!("private-{user}"), InstanceMode::Private);
                wc.billing_period = secs(spec.billing_period_s);
                wc.safety_margin = secs(spec.safety_margin_s);
                wc.throttle_bytes_per_s = spec.throttle_bytes_per_s;
                ac.private = Some(PrivateInstance::Launch { config: Box::new(wc), delay: secs(spec.private_startup_delay_s) });
                Agent::new(ac)
            }
        };
        agents.push(agent);
        creds.push(c);
    }
    Ok(Deployment { bed, workers, agents, creds })
}

fn worker_bytes(d: &Deployment) -> u64 {
    d.workers.iter().map(|(_, w)| w.bytes_moved()).sum::<u64>()
        + d.agents.iter().filter_map(|a| a.private_worker()).map(|w| w.bytes_moved()).sum::<u64>()
}

fn agent_frames(a: &Agent) -> (u64, u64) {
    let c = a.counters();
    let (hs, hr) = c.heartbeat_bytes();
    (c.bytes_sent() + c.bytes_received(), c.bytes_sent() + c.bytes_received() - hs - hr)
}

async fn run_one(d: &mut Deployment, rng: &mut ChaCha20Rng, op: WorkloadOp, size: u64, n: usize) -> Sample {
    let size_usize = size as usize;
    let path = format!("/bench/{:?}-{size}-{n}", op).to_lowercase();
    let a0_frames = agent_frames(&d.agents[0]);
    let a0_store = d.agents[0].store_traffic().totals();
    let a1_frames = d.agents.get(1).map(agent_frames).unwrap_or_default();
    let hb0 = d.agents[0].metrics().len();
    let wb0 = worker_bytes(d);
    let start = Instant::now();
    let res: Result<(), String> = async {
        match op {
            WorkloadOp::Compress | WorkloadOp::Encrypt => {
                d.bed.stage(&d.creds[0], &path, &text_payload(rng, size_usize));
                let action = if op == WorkloadOp::Compress { "compress" } else { "encrypt" };
                d.agents[0].cloud_op(action, &[("path", &path)]).await.map(|_| ()).map_err(|e| e.to_string())
            }
            WorkloadOp::Convert => {
                d.bed.stage(&d.creds[0], &path, &image_payload(rng, size_usize));
                d.agents[0].cloud_op("convert", &[("path", &path), ("max_resolution", "128")]).await.map(|_| ()).map_err(|e| e.to_string())
            }
            WorkloadOp::Download => {
                let src = d.bed.path().join("web").join(format!("{n}-{size}.bin"));
                std::fs::create_dir_all(src.parent().unwrap()).map_err(|e| e.to_string())?;
                std::fs::write(&src, random_payload(rng, size_usize)).map_err(|e| e.to_string())?;
                let url = format!("file://{}", src.display());
                d.agents[0].cloud_op("download", &[("url", &url), ("dest", &path)]).await.map(|_| ()).map_err(|e| e.to_string())
            }
            WorkloadOp::Transfer => {
                d.bed.stage(&d.creds[0], &path, &random_payload(rng, size_usize));
                let dst = format!("{path}.recv");
                let t = d.agents[0].cmd_send("user1", &path, &dst).await.map_err(|e| e.to_string())?;
                d.agents[1].cmd_recv(&t, None).await.map(|_| ()).map_err(|e| e.to_string())
            }
            WorkloadOp::Create => d.agents[0]
                .cmd_basic(crate::storage::BasicOp::CreateFile { path: path.clone(), content: String::new() })
                .await
                .map(|_| ())
                .map_err(|e| e.to_string()),
        }
    }
    .await;
    let wall_ms = start.elapsed().as_millis() as u64;
    let a0 = agent_frames(&d.agents[0]);
    let a1 = d.agents.get(1).map(agent_frames).unwrap_or_default();
    let store = d.agents[0].store_traffic().totals();
    let heartbeats = d.agents[0].metrics()[hb0..].iter().map(|m| m.heartbeats).sum::<u64>()
        + d.agents.get(1).and_then(|a| a.metrics().last()).filter(|_| op == WorkloadOp::Transfer).map(|m| m.heartbeats).unwrap_or(0);
    Sample {
        op,
        size_bytes: size,
        ok: res.is_ok(),
        error: res.err(),
        agent_bytes: (a0.0 - a0_frames.0) + (a1.0 - a1_frames.0),
        agent_bytes_excl_heartbeats: (a0.1 - a0_frames.1) + (a1.1 - a1_frames.1),
        agent_storage_bytes: (store.0 + store.1) - (a0_store.0 + a0_store.1),
        heartbeats,
        worker_bytes: worker_bytes(d) - wb0,
        wall_ms,
    }
}

fn summarize(samples: &[Sample]) -> Vec<OpSummary> {
    let mut groups: BTreeMap<(String, u64), Vec<&Sample>> = BTreeMap::new();
    let mut order = Vec::new();
    for s in samples {
        let key = (format!("{:?}", s.op), s.size_bytes);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(s);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let n = g.len() as f64;
            OpSummary {
                op: g[0].op,
                size_bytes: g[0].size_bytes,
                samples: g.len(),
                failures: g.iter().filter(|s| !s.ok).count(),
                mean_wall_ms: g.iter().map(|s| s.wall_ms as f64).sum::<f64>() / n,
                mean_agent_bytes: g.iter().map(|s| s.agent_bytes as f64).sum::<f64>() / n,
                max_agent_bytes: g.iter().map(|s| s.agent_bytes).max().unwrap_or(0),
                mean_worker_bytes: g.iter().map(|s| s.worker_bytes as f64).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Random scheduler problems within the oracle's size limits.
pub fn random_problem(rng: &mut impl Rng) -> (Vec<TaskSpec>, Vec<InstanceSpec>) {
    let nk = rng.gen_range(0..=scheduler::ORACLE_MAX_TASKS);
    let nc = rng.gen_range(1..=scheduler::ORACLE_MAX_INSTANCES);
    let tasks = (0..nk)
        .map(|i| {
            let start = rng.gen_range(0..50);
            TaskSpec { id: format!("k{i}"), start, end: start + rng.gen_range(1..=50), bw: rng.gen_range(1..=10) }
        })
        .collect();
    let instances = (0..nc)
        .map(|i| {
            let start = rng.gen_range(0..20);
            InstanceSpec { id: format!("c{i}"), start, end: start + rng.gen_range(40..=100), cap: rng.gen_range(1..=20) }
        })
        .collect();
    (tasks, instances)
}

pub fn scheduler_stats(cases: usize, rng: &mut impl Rng) -> SchedulerStats {
    let mut st = SchedulerStats { cases, ..Default::default() };
    let (mut exact_t, mut greedy_t) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..cases {
        let (k, c) = random_problem(rng);
        let oracle = scheduler::brute_force_optimum(&k, &c).ok();
        let t = Instant::now();
        let exact = scheduler::solve_exact(&k, &c).ok();
        exact_t += t.elapsed();
        let t = Instant::now();
        let greedy = scheduler::solve_greedy(&k, &c).ok();
        greedy_t += t.elapsed();
        if exact.as_ref().map(|a| a.used_count) == oracle {
            st.exact_matches_oracle += 1;
        }
        if let Some(e) = &exact {
            st.feasible += 1;
            if let Some(g) = &greedy {
                st.greedy_feasible_when_exact += 1;
                st.greedy_extra_instances += g.used_count - e.used_count.min(g.used_count);
            }
        }
    }
    st.exact_ms = exact_t.as_secs_f64() * 1e3;
    st.greedy_ms = greedy_t.as_secs_f64() * 1e3;
    st
}

/// Runs a scenario end to end. Component failures land in `failure`
/// rather than aborting the report.
pub async fn run_scenario(spec: &ScenarioSpec) -> MetricsReport {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut report = MetricsReport {
        seed: spec.seed,
        mode: spec.mode,
        principals: BTreeMap::new(),
        ops: Vec::new(),
        samples: Vec::new(),
        scheduler: scheduler_stats(spec.scheduler_cases, &mut ChaCha20Rng::seed_from_u64(spec.seed ^ 0x5c4e_d01e)),
        shutdowns: Vec::new(),
        assertions: Vec::new(),
        failure: None,
    };
    let mut d = match deploy(spec).await {
        Ok(d) => d,
        Err(e) => {
            report.failure = Some(e);
            return report;
        }
    };
    for a in d.agents.iter_mut() {
        if let Err(e) = a.login().await {
            report.failure = Some(format!("login: {e}"));
            return report;
        }
    }
    for item in &spec.workload {
        for n in 0..item.repeat {
            let s = run_one(&mut d, &mut rng, item.op, item.size_bytes, n).await;
            report.samples.push(s);
        }
    }
    report.ops = summarize(&report.samples);

    // Stop everything so every frame in flight is counted on both ends.
    for (name, w) in &d.workers {
        let e = if w.is_shut_down() { w.wait_shutdown().await } else { w.shutdown("scenario finished").await };
        report.shutdowns.push(ShutdownRecord::new(name, &e));
    }
    for (i, a) in d.agents.iter_mut().enumerate() {
        if let Some(w) = a.take_private_worker() {
            let e = if w.is_shut_down() { w.wait_shutdown().await } else { w.shutdown("scenario finished").await };
            report.shutdowns.push(ShutdownRecord::new(&format!("private-user{i}"), &e));
            report.principals.insert(format!("private-user{i}"), PrincipalBytes::of(&w.counters()));
        }
    }
    // Let the coordinator's connection tasks observe the closes.
    tokio::time::sleep(Duration::from_millis(100)).await;
    for (name, w) in &d.workers {
        report.principals.insert(name.clone(), PrincipalBytes::of(&w.counters()));
    }
    for (i, a) in d.agents.iter().enumerate() {
        report.principals.insert(format!("agent-{i}"), PrincipalBytes::of(&a.counters()));
    }
    if d.bed.coordinator.is_some() {
        report.principals.insert("coordinator".into(), PrincipalBytes::of(&d.bed.coordinator_counters));
    }

    let sent: u64 = report.principals.values().map(|p| p.bytes_sent).sum();
    let received: u64 = report.principals.values().map(|p| p.bytes_received).sum();
    report.assertions.push(Assertion {
        name: "bytes reconcile".into(),
        pass: sent == received,
        detail: format!("sent {sent}, received {received}"),
    });
    let failures = report.samples.iter().filter(|s| !s.ok).count();
    report.assertions.push(Assertion {
        name: "operations succeed".into(),
        pass: failures == 0,
        detail: format!("{failures} of {} failed", report.samples.len()),
    });
    let cloud: Vec<&Sample> = report
        .samples
        .iter()
        .filter(|s| s.ok && matches!(s.op, WorkloadOp::Compress | WorkloadOp::Encrypt | WorkloadOp::Download))
        .collect();
    if !cloud.is_empty() {
        let worst = cloud.iter().map(|s| s.agent_bytes).max().unwrap_or(0);
        report.assertions.push(Assertion {
            name: "agent bytes under 64 KiB".into(),
            pass: worst < 64 * 1024,
            detail: format!("max {worst}"),
        });
        let short = cloud.iter().filter(|s| s.worker_bytes < s.size_bytes).count();
        report.assertions.push(Assertion {
            name: "worker bytes at least file size".into(),
            pass: short == 0,
            detail: format!("{short} sample(s) below file size"),
        });
    }
    if let Some(c) = d.bed.coordinator.take() {
        c.stop().await;
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub startup_delay_ms: u64,
    pub private_ms: Vec<u64>,
    pub shared_ms: Vec<u64>,
    pub delta_ms: Vec<i64>,
    pub mean_delta_ms: f64,
    pub delta_variance: f64,
}

impl ModeComparison {
    pub fn render_table(&self) -> String {
        let mut out = format!("{:>5} {:>12} {:>12} {:>12}\n", "trial", "private ms", "shared ms", "delta ms");
        for i in 0..self.delta_ms.len() {
            out.push_str(&format!("{:>5} {:>12} {:>12} {:>12}\n", i, self.private_ms[i], self.shared_ms[i], self.delta_ms[i]));
        }
        out.push_str(&format!("mean delta {:.1} ms, variance {:.1} ms^2\n", self.mean_delta_ms, self.delta_variance));
        out
    }
}

/// First-op latency of a private instance that must boot against an
/// already running shared instance, over `spec.trials` concurrent trials.
pub async fn compare_modes(spec: &ScenarioSpec) -> Result<ModeComparison, String> {
    let trials = spec.trials.unwrap_or(5).max(1);
    let delay = secs(spec.private_startup_delay_s);
    let size = spec.workload.first().map(|w| w.size_bytes).unwrap_or(64 * 1024) as usize;
    let mut bed = Testbed::new().map_err(|e| e.to_string())?;
    bed.start_coordinator(RegistryConfig::default()).await;
    let shared = bed.shared_worker("shared").await;
    let bed = Arc::new(bed);

    let runs = (0..trials).map(|t| {
        let bed = bed.clone();
        let seed = spec.seed.wrapping_add(t as u64);
        async move {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data = text_payload(&mut rng, size);
            let (pu, su) = (format!("p{t}"), format!("s{t}"));
            let (pc, sc) = (bed.account(&pu), bed.account(&su));
            bed.stage(&pc, "/first.txt", &data);
            bed.stage(&sc, "/first.txt", &data);
            let mut private = bed.private_agent(&pu, pc, delay);
            let mut shared = Agent::new(bed.agent_config(&su, sc, InstanceMode::Shared));
            private.login().await.map_err(|e| e.to_string())?;
            shared.login().await.map_err(|e| e.to_string())?;
            let (p, s) = tokio::join!(
                async {
                    let t = Instant::now();
                    private.cloud_op("compress", &[("path", "/first.txt")]).await.map(|_| t.elapsed())
                },
                async {
                    let t = Instant::now();
                    shared.cloud_op("compress", &[("path", "/first.txt")]).await.map(|_| t.elapsed())
                }
            );
            let p = p.map_err(|e| format!("private: {e}"))?;
            let s = s.map_err(|e| format!("shared: {e}"))?;
            if let Some(w) = private.take_private_worker() {
                w.kill();
            }
            Ok::<_, String>((p.as_millis() as u64, s.as_millis() as u64))
        }
    });
    let results = futures::future::join_all(runs).await;
    shared.kill();
    let mut cmp = ModeComparison {
        startup_delay_ms: delay.as_millis() as u64,
        private_ms: Vec::new(),
        shared_ms: Vec::new(),
        delta_ms: Vec::new(),
        mean_delta_ms: 0.0,
        delta_variance: 0.0,
    };
    for r in results {
        let (p, s) = r?;
        cmp.private_ms.push(p);
        cmp.shared_ms.push(s);
        cmp.delta_ms.push(p as i64 - s as i64);
    }
    let n = cmp.delta_ms.len() as f64;
    cmp.mean_delta_ms = cmp.delta_ms.iter().map(|&d| d as f64).sum::<f64>() / n;
    cmp.delta_variance = cmp.delta_ms.iter().map(|&d| (d as f64 - cmp.mean_delta_ms).powi(2)).sum::<f64>() / n;
    Ok(cmp)
}

pub fn write_report(report: &MetricsReport, json_path: &Path) -> std::io::Result<PathBuf> {
    std::fs::write(json_path, serde_json::to_vec_pretty(report).map_err(std::io::Error::other)?)?;
    let table = json_path.with_extension("txt");
    std::fs::write(&table, report.render_table())?;
    Ok(table)
}
