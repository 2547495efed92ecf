use std::time::Duration;

use skyrelay_core::agent::{await_ticket, out_of_band_notify, read_ticket, Agent, AgentError, SHADOW_FILE};
use skyrelay_core::coordinator::RegistryConfig;
use skyrelay_core::domain::{FileKind, InstanceMode};
use skyrelay_core::harness::{random_payload, text_payload, Testbed};
use skyrelay_core::storage::BasicOp;
use skyrelay_core::wire::{code, CertificateAuthority};
use rand::SeedableRng;
use sha2::{Digest, Sha256};

fn rng(seed: u64) -> rand_chacha::ChaCha20Rng {
    rand_chacha::ChaCha20Rng::seed_from_u64(seed)
}

async fn shared_bed() -> (Testbed, skyrelay_core::worker::WorkerHandle) {
    let mut bed = Testbed::new().unwrap();
    bed.start_coordinator(RegistryConfig::default()).await;
    let w = bed.shared_worker("w0").await;
    (bed, w)
}

#[tokio::test]
async fn commands_need_login() {
    let bed = Testbed::new().unwrap();
    let c = bed.account("alice");
    let mut a = Agent::new(bed.agent_config("alice", c, InstanceMode::Private));
    assert!(matches!(a.cmd_basic(BasicOp::CreateFolder { path: "/x".into() }).await, Err(AgentError::NotLoggedIn)));
}

#[tokio::test]
async fn basic_ops_keep_shadow_in_step_and_persisted() {
    let bed = Testbed::new().unwrap();
    let c = bed.account("alice");
    bed.stage(&c, "/docs/a.txt", b"hello");
    let mut a = Agent::new(bed.agent_config("alice", c.clone(), InstanceMode::Private));
    a.login().await.unwrap();
    assert_eq!(a.ls("/docs").len(), 1);
    a.cmd_basic(BasicOp::CreateFolder { path: "/docs/sub".into() }).await.unwrap();
    a.cmd_basic(BasicOp::CreateFile { path: "/docs/sub/b.txt".into(), content: "bee".into() }).await.unwrap();
    a.cmd_basic(BasicOp::Rename { from: "/docs".into(), to: "/papers".into() }).await.unwrap();
    assert!(a.ls("/docs").is_empty());
    let names: Vec<_> = a.ls("/papers/sub").into_iter().map(|m| m.path).collect();
    assert_eq!(names, vec!["/papers/sub/b.txt"]);
    a.cmd_basic(BasicOp::Delete { path: "/papers/a.txt".into() }).await.unwrap();
    assert_eq!(bed.read(&c, "/papers/sub/b.txt"), b"bee");

    // The shadow equals a fresh metadata walk, and survives a restart.
    let mut fresh = Agent::new(bed.agent_config("alice", c.clone(), InstanceMode::Private));
    let persisted = fresh.shadow().entries.clone();
    assert_eq!(&persisted, &a.shadow().entries);
    fresh.login().await.unwrap();
    assert_eq!(fresh.shadow().entries, a.shadow().entries);

    let e = a.cmd_basic(BasicOp::Delete { path: "/nothing".into() }).await.unwrap_err();
    assert!(matches!(e, AgentError::Storage(_)), "{e:?}");
}

#[tokio::test]
async fn shared_compress_uses_sealed_credentials_and_saves_key() {
    let (bed, _w) = shared_bed().await;
    let c = bed.account("alice");
    let data = text_payload(&mut rng(2), 2 << 20);
    bed.stage(&c, "/big.txt", &data);
    let mut a = Agent::new(bed.agent_config("alice", c.clone(), InstanceMode::Shared));
    a.login().await.unwrap();
    let out = a.cloud_op("compress", &[("path", "/big.txt")]).await.unwrap();
    assert_eq!(out.result.outputs[0].path, "/big.txt.gz");
    assert!(a.shadow().get("/big.txt.gz").is_some());
    let m = a.metrics().last().unwrap();
    assert!(m.bytes_sent + m.bytes_received < 64 * 1024, "{m:?}");

    let out = a.cloud_op("encrypt", &[("path", "/big.txt")]).await.unwrap();
    assert_eq!(out.saved.len(), 1);
    assert!(out.saved[0].ends_with("big.txt.enc.key"));
    assert_eq!(std::fs::read(&out.saved[0]).unwrap().len(), 32);

    let e = a.cloud_op("compress", &[("path", "/missing")]).await.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::NOT_FOUND));
}

#[tokio::test]
async fn shared_transfer_preserves_hash() {
    let (bed, _w) = shared_bed().await;
    let (ca, cb) = (bed.account("alice"), bed.account("bob"));
    let data = random_payload(&mut rng(4), 3 << 20);
    bed.stage(&ca, "/out/report.bin", &data);
    let mut alice = Agent::new(bed.agent_config("alice", ca, InstanceMode::Shared));
    let mut bob = Agent::new(bed.agent_config("bob", cb.clone(), InstanceMode::Shared));
    alice.login().await.unwrap();
    bob.login().await.unwrap();
    let t = alice.cmd_send("bob", "/out/report.bin", "/in/report.bin").await.unwrap();
    assert_eq!(t.size_bytes, data.len() as u64);
    let path = bed.path().join("ticket.frame");
    out_of_band_notify(&t, &path).unwrap();
    let got = await_ticket(&path, Duration::from_secs(1)).await.unwrap();
    assert_eq!(got, t);
    let meta = bob.cmd_recv(&got, None).await.unwrap();
    assert_eq!(meta.path, "/in/report.bin");
    assert_eq!(Sha256::digest(bed.read(&cb, "/in/report.bin")), Sha256::digest(&data));
    assert!(bob.shadow().get("/in/report.bin").is_some());
}

#[tokio::test]
async fn tampered_certificate_is_rejected_before_any_contact() {
    let (bed, _w) = shared_bed().await;
    let (ca, cb) = (bed.account("alice"), bed.account("bob"));
    bed.stage(&ca, "/f", b"payload");
    let mut alice = Agent::new(bed.agent_config("alice", ca, InstanceMode::Shared));
    let mut bob = Agent::new(bed.agent_config("bob", cb, InstanceMode::Shared));
    alice.login().await.unwrap();
    bob.login().await.unwrap();
    let t = alice.cmd_send("bob", "/f", "/g").await.unwrap();

    let mut forged = t.clone();
    let cert = forged.certificate.as_mut().unwrap();
    cert.subject.addr = "127.0.0.1:9".into();
    forged.addr = "127.0.0.1:9".into();
    forged.uri = forged.uri.replace(&t.addr, "127.0.0.1:9");
    let before = bob.counters().bytes_sent();
    assert!(matches!(bob.cmd_recv(&forged, None).await, Err(AgentError::Certificate(_))));

    // A validly signed certificate from another authority fails too.
    let mut foreign = t.clone();
    let subject = foreign.certificate.as_ref().unwrap().subject.clone();
    foreign.certificate = Some(CertificateAuthority::generate().issue(subject, 0, u64::MAX));
    assert!(matches!(bob.cmd_recv(&foreign, None).await, Err(AgentError::Certificate(_))));

    // Ticket fields disagreeing with a genuine certificate.
    let mut moved = t.clone();
    moved.uri = moved.uri.replace(&t.addr, "10.0.0.1:1");
    assert!(matches!(bob.cmd_recv(&moved, None).await, Err(AgentError::TicketMismatch(_))));
    assert_eq!(bob.counters().bytes_sent(), before, "nothing sent for rejected tickets");
    bob.cmd_recv(&t, None).await.unwrap();
}

#[tokio::test]
async fn wrong_guest_token_cannot_fetch() {
    let (bed, _w) = shared_bed().await;
    let (ca, cb) = (bed.account("alice"), bed.account("bob"));
    bed.stage(&ca, "/f", b"payload");
    let mut alice = Agent::new(bed.agent_config("alice", ca, InstanceMode::Shared));
    let mut bob = Agent::new(bed.agent_config("bob", cb, InstanceMode::Shared));
    alice.login().await.unwrap();
    bob.login().await.unwrap();
    let mut t = alice.cmd_send("bob", "/f", "/g").await.unwrap();
    t.guest_token = "0".repeat(t.guest_token.len());
    let e = bob.cmd_recv(&t, None).await.unwrap_err();
    assert_eq!(e.remote_code(), Some(code::PERMISSION_ERROR));
}

#[tokio::test]
async fn private_transfer_between_private_instances() {
    let bed = Testbed::new().unwrap();
    let (ca, cb) = (bed.account("alice"), bed.account("bob"));
    let data = random_payload(&mut rng(6), 5 << 20);
    bed.stage(&ca, "/x.bin", &data);
    let mut alice = bed.private_agent("alice", ca, Duration::ZERO);
    let mut bob = bed.private_agent("bob", cb.clone(), Duration::ZERO);
    alice.login().await.unwrap();
    bob.login().await.unwrap();
    let t = alice.cmd_send("bob", "/x.bin", "/y.bin").await.unwrap();
    assert_eq!(t.mode, InstanceMode::Private);
    bob.cmd_recv(&t, None).await.unwrap();
    assert_eq!(bed.read(&cb, "/y.bin"), data);
    // Cross-instance fetch: bob's worker pulled the bytes from alice's.
    assert!(alice.private_worker().unwrap().bytes_moved() >= data.len() as u64);
    assert!(bob.private_worker().unwrap().bytes_moved() >= data.len() as u64);
}

#[tokio::test]
async fn ticket_wait_times_out_and_garbage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("never");
    assert!(matches!(await_ticket(&p, Duration::from_millis(150)).await, Err(AgentError::Timeout(_))));
    std::fs::write(&p, b"\x00\x00\x00\x02{}").unwrap();
    assert!(read_ticket(&p).is_err());
}

#[tokio::test]
async fn shadow_of_a_thousand_files_is_compact() {
    let bed = Testbed::new().unwrap();
    let c = bed.account("alice");
    let mut a = Agent::new(bed.agent_config("alice", c.clone(), InstanceMode::Private));
    a.login().await.unwrap();
    let marker = "CONTENT-MARKER-7f3a";
    for i in 0..1000 {
        let folder = format!("/d{}", i % 10);
        if i < 10 {
            a.cmd_basic(BasicOp::CreateFolder { path: folder.clone() }).await.unwrap();
        }
        a.cmd_basic(BasicOp::CreateFile { path: format!("{folder}/f{i}.txt"), content: format!("{marker} {i}") })
            .await
            .unwrap();
    }
    let state = bed.path().join("agents/alice").join(SHADOW_FILE);
    let bytes = std::fs::read(state).unwrap();
    let files = a.shadow().entries.values().filter(|m| m.kind == FileKind::File).count();
    assert_eq!(files, 1000);
    assert!(bytes.len() / a.shadow().entries.len() < 512, "{} bytes", bytes.len());
    assert!(!String::from_utf8_lossy(&bytes).contains(marker));
}
