use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::filter::LevelFilter;

use skyrelay_core::agent::{await_ticket, out_of_band_notify, Agent, AgentConfig, PrivateInstance};
use skyrelay_core::clock;
use skyrelay_core::coordinator::{start_with, CoordinatorConfig, Registry, RegistryConfig};
use skyrelay_core::harness::{compare_modes, run_scenario, write_report, ScenarioSpec};
use skyrelay_core::scheduler::{self, Method, Problem};
use skyrelay_core::storage::{BasicOp, LocalStore, DEFAULT_QUOTA_BYTES};
use skyrelay_core::wire::{parse_public_key, public_key_hex, CertificateAuthority, NetOptions};
use skyrelay_core::worker::{start_worker, WorkerConfig};
use skyrelay_core::{CredentialSet, InstanceMode};

#[derive(Parser)]
#[command(name = "skyrelay", version, about = "Delegate file operations to worker instances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trusted coordinator.
    Coordinator(CoordinatorArgs),
    /// Run a worker instance.
    Worker(WorkerArgs),
    /// Agent commands against one storage account.
    Agent(AgentArgs),
    /// Scheduler tools.
    Sched {
        #[command(subcommand)]
        command: SchedCommand,
    },
    /// Scenario runner.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Administer the local storage backend.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
}

#[derive(Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:7400")]
    listen: String,
    /// Seconds of share time an instance needs left to be handed out.
    #[arg(long, default_value_t = 60)]
    min_share_remaining: u64,
    /// Seconds an allocation stays reserved.
    #[arg(long, default_value_t = 600)]
    alloc_ttl: u64,
    #[arg(long, default_value_t = skyrelay_core::keying::DEFAULT_INTERVAL_S)]
    rotation_interval: u64,
    /// Registry snapshot, loaded at start and rewritten on change.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// 32-byte signing seed; created when missing.
    #[arg(long)]
    ca_seed: Option<PathBuf>,
    /// Where to write the hex public key agents verify against.
    #[arg(long)]
    key_out: Option<PathBuf>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Register with this coordinator and serve in shared mode.
    #[arg(long)]
    coordinator: Option<String>,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "skyrelay-worker")]
    workdir: PathBuf,
    /// Billing unit in seconds.
    #[arg(long, default_value_t = 3600.0)]
    billing_period: f64,
    /// Seconds before the billing boundary at which the worker stops.
    #[arg(long, default_value_t = 60.0)]
    safety_margin: f64,
    #[arg(long, default_value_t = 4)]
    max_jobs: usize,
    /// Share window length in seconds; one billing period when absent.
    #[arg(long)]
    share_for: Option<u64>,
    #[arg(long, default_value_t = 100)]
    bandwidth: u64,
    #[arg(long)]
    allow_file_urls: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Private,
    Shared,
}

impl From<Mode> for InstanceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Private => InstanceMode::Private,
            Mode::Shared => InstanceMode::Shared,
        }
    }
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, value_enum, default_value = "private")]
    mode: Mode,
    #[arg(long)]
    coordinator: Option<String>,
    /// Hex public key of the coordinator, or a file holding it.
    #[arg(long)]
    coordinator_key: Option<String>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    account: String,
    #[arg(long, env = "SKYRELAY_TOKEN", hide_env_values = true)]
    token: String,
    /// Persisted agent state; defaults to .skyrelay/<account>.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Where pushed files are saved.
    #[arg(long, default_value = ".")]
    download_dir: PathBuf,
    /// Address of an already running private instance. Without it a
    /// private instance runs inside this process.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long)]
    allow_file_urls: bool,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[command(subcommand)]
    command: AgentCommand,
}

#[derive(Subcommand)]
enum AgentCommand {
    Login,
    Ls {
        #[arg(default_value = "/")]
        path: String,
    },
    Mkdir {
        path: String,
    },
    Rm {
        path: String,
    },
    Mv {
        from: String,
        to: String,
    },
    Download {
        url: String,
        dest: String,
    },
    Compress {
        path: String,
    },
    Encrypt {
        path: String,
    },
    Convert {
        path: String,
        #[arg(long, default_value_t = 256)]
        max_resolution: u32,
    },
    /// Expose a file for another user and write the ticket.
    Send {
        #[arg(long)]
        to: String,
        path: String,
        dest: String,
        #[arg(long)]
        ticket_out: PathBuf,
    },
    /// Store the file named by a ticket in this account.
    Recv {
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long)]
        dest: Option<String>,
        /// Seconds to wait for the ticket to appear.
        #[arg(long, default_value_t = 60)]
        wait: u64,
    },
}

#[derive(Subcommand)]
enum SchedCommand {
    Solve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "exact")]
        method: Method,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a scenario and write its metrics report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// First-op latency of private against shared instances.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Create an account and print its token.
    CreateAccount {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        account: String,
        #[arg(long, default_value_t = DEFAULT_QUOTA_BYTES)]
        quota: u64,
    },
}

fn open_store(root: &Path, quota: u64) -> Result<Arc<LocalStore>> {
    let store = LocalStore::open_with(root, quota, clock::system()).with_context(|| format!("storage at {}", root.display()))?;
    Ok(Arc::new(store))
}

fn secs(s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).with_context(|| format!("invalid duration {s}"))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_ca(path: Option<&Path>) -> Result<CertificateAuthority> {
    let Some(path) = path else {
        return Ok(CertificateAuthority::generate());
    };
    if !path.exists() {
        let ca = CertificateAuthority::generate();
        std::fs::write(path, ca.seed()).with_context(|| format!("writing {}", path.display()))?;
        return Ok(ca);
    }
    let bytes = std::fs::read(path)?;
    let seed: [u8; 32] = bytes.try_into().map_err(|_| anyhow::anyhow!("{} is not a 32-byte seed", path.display()))?;
    Ok(CertificateAuthority::from_seed(seed))
}

async fn run_coordinator(a: CoordinatorArgs) -> Result<()> {
    let registry_config = RegistryConfig {
        min_share_remaining_s: a.min_share_remaining,
        alloc_ttl_s: a.alloc_ttl,
        rotation_interval_s: a.rotation_interval,
        ..RegistryConfig::default()
    };
    let registry = match &a.snapshot {
        Some(p) if p.exists() => read_json::<Registry>(p)?,
        _ => Registry::new(registry_config),
    };
    let ca = load_ca(a.ca_seed.as_deref())?;
    let config = CoordinatorConfig { listen: a.listen, registry: registry_config, snapshot: a.snapshot, ..CoordinatorConfig::default() };
    let h = start_with(config, clock::system(), registry, ca).await?;
    let key = public_key_hex(&h.public_key());
    if let Some(p) = &a.key_out {
        std::fs::write(p, &key)?;
    }
    println!("coordinator listening on {} key {key}", h.addr());
    tokio::signal::ctrl_c().await?;
    h.stop().await;
    Ok(())
}

async fn run_worker(a: WorkerArgs) -> Result<()> {
    let clock = clock::system();
    let mut c = WorkerConfig::new(open_store(&a.store, DEFAULT_QUOTA_BYTES)?, a.workdir, clock.clone());
    c.listen = a.listen;
    c.mode = if a.coordinator.is_some() { InstanceMode::Shared } else { InstanceMode::Private };
    c.coordinator = a.coordinator;
    c.billing_period = secs(a.billing_period)?;
    c.safety_margin = secs(a.safety_margin)?;
    c.max_jobs = a.max_jobs;
    c.share_until = a.share_for.map(|s| clock.now_s() + s);
    c.bandwidth = a.bandwidth;
    c.allow_file_urls = a.allow_file_urls;
    let w = start_worker(c).await?;
    match w.pid() {
        Some(pid) => println!("worker listening on {} pid {pid}", w.addr()),
        None => println!("worker listening on {}", w.addr()),
    }
    let event = tokio::select! {
        e = w.wait_shutdown() => e,
        _ = tokio::signal::ctrl_c() => w.shutdown("interrupted").await,
    };
    println!(
        "worker stopped after {:.1} s: {} ({} job(s) aborted)",
        event.after_start.as_secs_f64(),
        event.reason,
        event.aborted_jobs
    );
    Ok(())
}

fn coordinator_key(arg: &str) -> Result<skyrelay_core::wire::VerifyingKey> {
    let text = match std::fs::read_to_string(arg) {
        Ok(s) => s,
        Err(_) => arg.to_string(),
    };
    Ok(parse_public_key(text.trim())?)
}

async fn run_agent(a: AgentArgs) -> Result<()> {
    let clock = clock::system();
    let store = open_store(&a.store, DEFAULT_QUOTA_BYTES)?;
    let state_dir = a.state_dir.unwrap_or_else(|| PathBuf::from(".skyrelay").join(&a.account));
    let private = match a.instance {
        Some(addr) => Some(PrivateInstance::Addr(addr)),
        None => {
            let mut wc = WorkerConfig::new(store.clone(), state_dir.join("instance"), clock.clone());
            wc.allow_file_urls = a.allow_file_urls;
            Some(PrivateInstance::Launch { config: Box::new(wc), delay: Duration::ZERO })
        }
    };
    let config = AgentConfig {
        user_id: a.account.clone(),
        credentials: CredentialSet { account_id: a.account, token: a.token },
        store,
        mode: a.mode.into(),
        coordinator: a.coordinator,
        coordinator_key: a.coordinator_key.as_deref().map(coordinator_key).transpose()?,
        private,
        state_dir: Some(state_dir),
        download_dir: a.download_dir,
        net: NetOptions::default(),
        clock,
    };
    let mut agent = Agent::new(config);
    if let AgentCommand::Ls { path } = &a.command {
        // Served from the persisted shadow alone.
        return print_json(&agent.ls(path));
    }
    agent.login().await?;
    match a.command {
        AgentCommand::Login => println!("{} entries", agent.shadow().len()),
        AgentCommand::Ls { .. } => unreachable!(),
        AgentCommand::Mkdir { path } => print_json(&agent.cmd_basic(BasicOp::CreateFolder { path }).await?)?,
        AgentCommand::Rm { path } => print_json(&agent.cmd_basic(BasicOp::Delete { path }).await?)?,
        AgentCommand::Mv { from, to } => print_json(&agent.cmd_basic(BasicOp::Rename { from, to }).await?)?,
        AgentCommand::Download { url, dest } => {
            print_json(&agent.cloud_op("download", &[("url", &url), ("dest", &dest)]).await?.result)?
        }
        AgentCommand::Compress { path } => print_json(&agent.cloud_op("compress", &[("path", &path)]).await?.result.outputs)?,
        AgentCommand::Encrypt { path } => {
            let out = agent.cloud_op("encrypt", &[("path", &path)]).await?;
            print_json(&out.result.outputs)?;
            for p in out.saved {
                println!("key saved to {}", p.display());
            }
        }
        AgentCommand::Convert { path, max_resolution } => {
            let max = max_resolution.to_string();
            for p in agent.cloud_op("convert", &[("path", &path), ("max_resolution", &max)]).await?.saved {
                println!("saved {}", p.display());
            }
        }
        AgentCommand::Send { to, path, dest, ticket_out } => {
            let ticket = agent.cmd_send(&to, &path, &dest).await?;
            out_of_band_notify(&ticket, &ticket_out)?;
            println!("ticket for {to} written to {}", ticket_out.display());
            if let Some(w) = agent.take_private_worker() {
                // The exposed file lives on this process's instance.
                println!("serving {} until the exposure expires; interrupt to stop", ticket.uri);
                tokio::select! {
                    _ = tokio::time::sleep(Duration::from_secs(ticket.expiry.saturating_sub(clock::system().now_s()))) => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
                w.shutdown("transfer window over").await;
            }
        }
        AgentCommand::Recv { ticket, dest, wait } => {
            let t = await_ticket(&ticket, Duration::from_secs(wait)).await?;
            print_json(&agent.cmd_recv(&t, dest.as_deref()).await?)?;
        }
    }
    if let Some(p) = &a.metrics_out {
        agent.write_metrics(p)?;
    }
    if let Some(w) = agent.take_private_worker() {
        w.shutdown("agent exiting").await;
    }
    Ok(())
}

async fn run_bench(cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Run { scenario, out } => {
            let spec: ScenarioSpec = read_json(&scenario)?;
            let report = run_scenario(&spec).await;
            let table = write_report(&report, &out)?;
            print!("{}", report.render_table());
            println!("report {} table {}", out.display(), table.display());
            if !report.passed() {
                bail!("scenario assertions failed");
            }
        }
        BenchCommand::Compare { scenario, out } => {
            let spec: ScenarioSpec = read_json(&scenario)?;
            let cmp = compare_modes(&spec).await.map_err(anyhow::Error::msg)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&cmp)?)?;
            print!("{}", cmp.render_table());
        }
    }
    Ok(())
}

fn run_sched(cmd: SchedCommand) -> Result<()> {
    match cmd {
        SchedCommand::Solve { input, method } => {
            let problem: Problem = read_json(&input)?;
            print_json(&scheduler::solve(&problem, method)?)
        }
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let level = std::env::var("RUST_LOG").ok().and_then(|v| v.parse().ok()).unwrap_or(LevelFilter::WARN);
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Command::Coordinator(a) => run_coordinator(a).await,
        Command::Worker(a) => run_worker(a).await,
        Command::Agent(a) => run_agent(a).await,
        Command::Sched { command } => run_sched(command),
        Command::Bench { command } => run_bench(command).await,
        Command::Store { command: StoreCommand::CreateAccount { store, account, quota } } => {
            println!("{}", open_store(&store, quota)?.create_account(&account)?);
            Ok(())
        }
    }
}
