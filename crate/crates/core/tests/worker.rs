use std::sync::Arc;
use std::time::Duration;

use skyrelay_core::clock::{ManualClock, SharedClock};
use skyrelay_core::coordinator::{start_coordinator, CoordinatorConfig, InstanceStatus};
use skyrelay_core::domain::{FileKind, Foi, FoiSequence, InstanceMode, OpKind};
use skyrelay_core::harness::{image_payload, text_payload, Testbed};
use skyrelay_core::keying::{self, UserKeyGrant};
use skyrelay_core::storage::{CountingStore, LocalStore, ObjectStore};
use skyrelay_core::wire::{
    code, open_channel, ExposeRequest, Exposed, FetchChunk, FetchIntermediate, InstanceGrant, JobAuth, JobResult,
    MessageKind, NetOptions, RequestInstance, SubmitOp, WireError,
};
use skyrelay_core::worker::transform::{decrypt_file, gunzip, parse_ppm};
use skyrelay_core::worker::{start_worker, WorkerError};
use skyrelay_core::CredentialSet;
use rand::SeedableRng;

fn rng(seed: u64) -> rand_chacha::ChaCha20Rng {
    rand_chacha::ChaCha20Rng::seed_from_u64(seed)
}

fn compress_seq(path: &str) -> FoiSequence {
    let out = format!("{path}.gz");
    FoiSequence(vec![Foi::get(path), Foi::op(OpKind::Compress, path, out.clone()), Foi::put(out)])
}

async fn submit(addr: &str, auth: JobAuth, fois: FoiSequence) -> (Result<JobResult, WireError>, usize) {
    let mut ch = open_channel(addr, &NetOptions::default()).await.unwrap();
    let mut hbs = 0;
    let r = ch
        .request(MessageKind::SubmitOp, SubmitOp { auth, fois }, |_| hbs += 1)
        .await
        .and_then(|m| m.parse_body::<JobResult>());
    ch.close().await;
    (r, hbs)
}

fn plain(c: &CredentialSet) -> JobAuth {
    JobAuth::Plain { credentials: c.clone() }
}

#[tokio::test]
async fn compress_job_round_trips_and_cleans_workspace() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let data = text_payload(&mut rng(1), 1 << 20);
    bed.stage(&alice, "/doc.txt", &data);
    let w = start_worker(bed.worker_config("w", InstanceMode::Private)).await.unwrap();
    let (r, _) = submit(&w.addr().to_string(), plain(&alice), compress_seq("/doc.txt")).await;
    let r = r.unwrap();
    assert_eq!(r.outputs.len(), 1);
    assert_eq!(r.outputs[0].path, "/doc.txt.gz");
    let gz = bed.read(&alice, "/doc.txt.gz");
    assert!(gz.len() < data.len());
    assert_eq!(gunzip(&gz).unwrap(), data);
    // Original stays.
    assert_eq!(bed.read(&alice, "/doc.txt"), data);
    assert!(w.bytes_moved() >= data.len() as u64);
    let jobs_dir = bed.path().join("workers/w/jobs");
    assert_eq!(std::fs::read_dir(jobs_dir).unwrap().count(), 0, "workspace removed");
    assert!(w.jobs().iter().all(|j| j.workspace.is_none()));
}

#[tokio::test]
async fn slow_job_heartbeats_before_result() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    bed.stage(&alice, "/a.bin", &vec![7u8; 200_000]);
    let mut c = bed.worker_config("w", InstanceMode::Private);
    c.heartbeat_every = Duration::from_millis(200);
    // Two storage transfers at 200 kB/s keep the job busy for about 1.2 s.
    c.throttle_bytes_per_s = Some(200_000);
    let w = start_worker(c).await.unwrap();
    let (r, hbs) = submit(&w.addr().to_string(), plain(&alice), compress_seq("/a.bin")).await;
    r.unwrap();
    assert!(hbs >= 2, "got {hbs} heartbeats");
}

#[tokio::test]
async fn missing_input_fails_at_step_zero_without_put() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let w = start_worker(bed.worker_config("w", InstanceMode::Private)).await.unwrap();
    let (r, _) = submit(&w.addr().to_string(), plain(&alice), compress_seq("/nope")).await;
    match r.unwrap_err() {
        WireError::Remote { code: c, step, .. } => {
            assert_eq!(c, code::NOT_FOUND);
            assert_eq!(step, Some(0));
        }
        e => panic!("{e:?}"),
    }
    let s = bed.store.authorize(&alice.token, "alice").unwrap();
    assert!(bed.store.stat(&s, "/nope.gz").is_err());
}

#[tokio::test]
async fn invalid_sequence_is_rejected_before_running() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let w = start_worker(bed.worker_config("w", InstanceMode::Private)).await.unwrap();
    let bad = FoiSequence(vec![Foi::put("/x")]);
    let (r, _) = submit(&w.addr().to_string(), plain(&alice), bad).await;
    assert_eq!(r.unwrap_err().remote_code(), Some(code::INVALID_REQUEST));
}

#[tokio::test]
async fn encrypt_uploads_ciphertext_and_pushes_key() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let data = b"the quick brown fox".repeat(1000);
    bed.stage(&alice, "/f.txt", &data);
    let w = start_worker(bed.worker_config("w", InstanceMode::Private)).await.unwrap();
    let fois = FoiSequence(vec![Foi::get("/f.txt"), Foi::op(OpKind::Encrypt, "/f.txt", "/f.txt.enc"), Foi::put("/f.txt.enc")]);
    let r = submit(&w.addr().to_string(), plain(&alice), fois).await.0.unwrap();
    assert_eq!(r.pushed.len(), 1);
    assert_eq!(r.pushed[0].name, "f.txt.enc.key");
    let key = keying::SecretKey(r.pushed[0].data.clone().try_into().unwrap());
    let ct = bed.read(&alice, "/f.txt.enc");
    assert_ne!(ct, data);
    assert_eq!(decrypt_file(&ct, &key).unwrap(), data);
}

#[tokio::test]
async fn convert_pushes_small_image_and_uploads_nothing() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let img = image_payload(&mut rng(3), 1024 * 1024 * 3);
    bed.stage(&alice, "/p.ppm", &img);
    let w = start_worker(bed.worker_config("w", InstanceMode::Private)).await.unwrap();
    let fois = FoiSequence(vec![
        Foi::get("/p.ppm"),
        Foi::op(OpKind::Convert, "/p.ppm", "/p.ppm.small").with_param("max_resolution", "128"),
        Foi::push("/p.ppm.small"),
    ]);
    let r = submit(&w.addr().to_string(), plain(&alice), fois).await.0.unwrap();
    assert!(r.outputs.is_empty());
    let small = parse_ppm(&r.pushed[0].data).unwrap();
    assert!(small.width <= 128 && small.height <= 128);
    assert!(r.pushed[0].data.len() < img.len());
    let s = bed.store.authorize(&alice.token, "alice").unwrap();
    let names: Vec<_> = bed.store.list_meta(&s, "/").unwrap().into_iter().map(|m| m.path).collect();
    assert_eq!(names, vec!["/p.ppm"]);

    let bad = FoiSequence(vec![
        Foi::get("/p.ppm.txt"),
        Foi::op(OpKind::Convert, "/p.ppm.txt", "/o").with_param("max_resolution", "128"),
        Foi::push("/o"),
    ]);
    bed.stage(&alice, "/p.ppm.txt", b"not an image");
    let e = submit(&w.addr().to_string(), plain(&alice), bad).await.0.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::TRANSFORM_ERROR));
}

#[tokio::test]
async fn safety_margin_must_be_shorter_than_period() {
    let bed = Testbed::new().unwrap();
    let mut c = bed.worker_config("w", InstanceMode::Private);
    c.billing_period = Duration::from_secs(10);
    c.safety_margin = Duration::from_secs(10);
    assert!(matches!(start_worker(c).await, Err(WorkerError::Config(_))));
}

#[tokio::test]
async fn past_share_window_shuts_down_immediately() {
    let bed = Testbed::new().unwrap();
    let mut c = bed.worker_config("w", InstanceMode::Private);
    c.share_until = Some(1);
    let w = start_worker(c).await.unwrap();
    assert!(w.is_shut_down());
    let e = w.wait_shutdown().await;
    assert!(e.after_start < Duration::from_secs(1));
}

#[tokio::test]
async fn running_job_is_aborted_at_shutdown() {
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    bed.stage(&alice, "/big.bin", &vec![1u8; 1_000_000]);
    let mut c = bed.worker_config("w", InstanceMode::Private);
    c.billing_period = Duration::from_secs(2);
    c.safety_margin = Duration::from_secs(1);
    c.throttle_bytes_per_s = Some(50_000);
    let w = start_worker(c).await.unwrap();
    let (r, _) = submit(&w.addr().to_string(), plain(&alice), compress_seq("/big.bin")).await;
    assert_eq!(r.unwrap_err().remote_code(), Some(code::SHUTDOWN));
    let e = w.wait_shutdown().await;
    assert_eq!(e.aborted_jobs, 1);
    // No new work after shutdown.
    assert!(open_channel(&w.addr().to_string(), &NetOptions::default()).await.is_err());
}

async fn shared_setup(clock: SharedClock) -> (tempfile::TempDir, Arc<LocalStore>, skyrelay_core::coordinator::CoordinatorHandle) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(LocalStore::open_with(dir.path().join("s"), 1 << 30, clock.clone()).unwrap());
    let coord = start_coordinator(CoordinatorConfig::default(), clock).await.unwrap();
    (dir, store, coord)
}

#[tokio::test]
async fn shared_worker_registers_and_chains_agree() {
    let clock = ManualClock::new(1_700_000_000);
    let (dir, store, coord) = shared_setup(clock.clone()).await;
    let mut c = skyrelay_core::worker::WorkerConfig::new(store.clone(), dir.path().join("w"), clock.clone());
    c.mode = InstanceMode::Shared;
    c.coordinator = Some(coord.addr().to_string());
    let w = start_worker(c).await.unwrap();
    let pid = w.pid().unwrap();
    assert_eq!(coord.status(&pid), Some(InstanceStatus::Active));
    clock.advance(3 * 180 + 500);
    let mut ws = w.key_state().unwrap();
    let mut cs = coord.key_state(&pid).unwrap();
    let now = 1_700_000_000 + 3 * 180 + 500;
    ws.advance_to_time(now);
    cs.advance_to_time(now);
    assert_eq!(ws, cs);
    assert!(ws.epoch >= 2);
}

#[tokio::test]
async fn sealed_credentials_accepted_tampered_rejected_plain_refused() {
    let clock = ManualClock::new(1_700_000_000);
    let (dir, store, coord) = shared_setup(clock.clone()).await;
    let token = store.create_account("alice").unwrap();
    let alice = CredentialSet { account_id: "alice".into(), token };
    let s = store.authorize(&alice.token, "alice").unwrap();
    store.put_object(&s, "/a.txt", &b"abc".repeat(1000)).unwrap();
    let counting = Arc::new(CountingStore::new(store.clone()));
    let mut c = skyrelay_core::worker::WorkerConfig::new(counting.clone(), dir.path().join("w"), clock.clone());
    c.mode = InstanceMode::Shared;
    c.coordinator = Some(coord.addr().to_string());
    let w = start_worker(c).await.unwrap();
    let addr = w.addr().to_string();

    let mut ch = open_channel(&coord.addr().to_string(), &NetOptions::default()).await.unwrap();
    let g: InstanceGrant = ch
        .call(MessageKind::RequestInstance, RequestInstance { user_id: "alice".into() })
        .await
        .unwrap()
        .parse_body()
        .unwrap();
    ch.close().await;
    assert_eq!(g.addr, addr);
    let grant = UserKeyGrant { r: g.r, key: g.key, epoch_issued: g.epoch_hint };
    let ct = keying::encrypt_credentials(&grant, &alice);

    let mut tampered = ct.clone();
    tampered.body[0] ^= 1;
    let before = counting.traffic().totals();
    let e = submit(&addr, JobAuth::Sealed { ciphertext: tampered }, compress_seq("/a.txt")).await.0.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::CREDENTIAL_AUTH_FAILURE));
    assert_eq!(counting.traffic().totals(), before, "no storage access on auth failure");

    let e = submit(&addr, plain(&alice), compress_seq("/a.txt")).await.0.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::INVALID_REQUEST));

    // Still valid one epoch later, rejected two epochs later.
    clock.advance(180);
    submit(&addr, JobAuth::Sealed { ciphertext: ct.clone() }, compress_seq("/a.txt")).await.0.unwrap();
    clock.advance(360);
    let e = submit(&addr, JobAuth::Sealed { ciphertext: ct }, compress_seq("/a.txt")).await.0.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::CREDENTIAL_AUTH_FAILURE));
}

#[tokio::test]
async fn killed_worker_is_retired_by_liveness_sweep() {
    let clock = ManualClock::new(1_700_000_000);
    let (dir, store, coord) = shared_setup(clock.clone()).await;
    let mut c = skyrelay_core::worker::WorkerConfig::new(store, dir.path().join("w"), clock.clone());
    c.mode = InstanceMode::Shared;
    c.coordinator = Some(coord.addr().to_string());
    let w = start_worker(c).await.unwrap();
    let pid = w.pid().unwrap();
    w.kill();
    clock.advance(60);
    assert!(coord.sweep().is_empty());
    assert!(coord.is_allocatable(&pid));
    clock.advance(31);
    assert_eq!(coord.sweep(), vec![pid]);
    assert!(!coord.is_allocatable(&pid));
}

#[tokio::test]
async fn exposure_token_and_expiry() {
    let clock = ManualClock::new(1_700_000_000);
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(LocalStore::open_with(dir.path().join("s"), 1 << 30, clock.clone()).unwrap());
    let token = store.create_account("alice").unwrap();
    let alice = CredentialSet { account_id: "alice".into(), token };
    let s = store.authorize(&alice.token, "alice").unwrap();
    let data = text_payload(&mut rng(9), 5 << 20);
    store.put_object(&s, "/big.txt", &data).unwrap();
    let w = start_worker(skyrelay_core::worker::WorkerConfig::new(store, dir.path().join("w"), clock.clone()))
        .await
        .unwrap();
    let addr = w.addr().to_string();
    let mut ch = open_channel(&addr, &NetOptions::default()).await.unwrap();
    let ex: Exposed = ch
        .call(MessageKind::ExposeGrant, ExposeRequest { auth: plain(&alice), path: "/big.txt".into() })
        .await
        .unwrap()
        .parse_body()
        .unwrap();
    assert!(ex.uri.starts_with(&format!("skyrelay://{addr}/")));
    assert_eq!(ex.size_bytes, data.len() as u64);

    let mut got = Vec::new();
    while (got.len() as u64) < ex.size_bytes {
        let req = FetchIntermediate { uri: ex.uri.clone(), guest_token: ex.guest_token.clone(), offset: got.len() as u64, max_len: 1 << 22 };
        let c: FetchChunk = ch.call(MessageKind::FetchIntermediate, req).await.unwrap().parse_body().unwrap();
        got.extend(c.data);
    }
    assert_eq!(got, data);

    let wrong = FetchIntermediate { uri: ex.uri.clone(), guest_token: "guess".into(), offset: 0, max_len: 10 };
    assert_eq!(ch.call(MessageKind::FetchIntermediate, wrong).await.unwrap_err().remote_code(), Some(code::PERMISSION_ERROR));
    clock.advance(901);
    let late = FetchIntermediate { uri: ex.uri.clone(), guest_token: ex.guest_token.clone(), offset: 0, max_len: 10 };
    assert_eq!(ch.call(MessageKind::FetchIntermediate, late).await.unwrap_err().remote_code(), Some(code::GONE));
    ch.close().await;
}

#[tokio::test]
async fn download_over_http_and_file_url_policy() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let body = text_payload(&mut rng(5), 300_000);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let http_addr = listener.local_addr().unwrap();
    let served = body.clone();
    tokio::spawn(async move {
        let (mut s, _) = listener.accept().await.unwrap();
        let mut buf = [0u8; 4096];
        let _ = s.read(&mut buf).await.unwrap();
        let head = format!("HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", served.len());
        s.write_all(head.as_bytes()).await.unwrap();
        s.write_all(&served).await.unwrap();
    });
    let bed = Testbed::new().unwrap();
    let alice = bed.account("alice");
    let mut c = bed.worker_config("w", InstanceMode::Private);
    c.allow_file_urls = false;
    let w = start_worker(c).await.unwrap();
    let addr = w.addr().to_string();
    let fois = FoiSequence(vec![Foi::download(format!("http://{http_addr}/f")), Foi::put("/web.txt")]);
    let r = submit(&addr, plain(&alice), fois).await.0.unwrap();
    assert_eq!(r.outputs[0].kind, FileKind::File);
    assert_eq!(bed.read(&alice, "/web.txt"), body);

    let f = bed.path().join("local.bin");
    std::fs::write(&f, b"x").unwrap();
    let fois = FoiSequence(vec![Foi::download(format!("file://{}", f.display())), Foi::put("/l")]);
    let e = submit(&addr, plain(&alice), fois).await.0.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::PERMISSION_ERROR));
}
