use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use skyrelay_core::keying::{chain_key, encrypt_credentials, initial_server_key, open_credentials, EpochKeyState, KeySchedule, Pid};
use skyrelay_core::CredentialSet;

fn bench_chain(c: &mut Criterion) {
    let pid = Pid([7; 16]);
    let schedule = KeySchedule::new(1_700_000_000, 11, 180).unwrap();
    let k0 = initial_server_key(&pid, schedule.t0);
    let mut group = c.benchmark_group("chain_key");
    for epochs in [1u64, 100, 10_000] {
        group.bench_with_input(BenchmarkId::from_parameter(epochs), &epochs, |b, &e| {
            b.iter(|| chain_key(black_box(&k0), &schedule, e))
        });
    }
    group.finish();
}

fn bench_credentials(c: &mut Criterion) {
    let state = EpochKeyState::for_instance(Pid([1; 16]), KeySchedule::new(0, 5, 180).unwrap());
    let grant = state.issue_grant(&mut rand::rngs::OsRng);
    let creds = CredentialSet { account_id: "alice".into(), token: "f".repeat(48) };
    c.bench_function("encrypt_credentials", |b| b.iter(|| encrypt_credentials(black_box(&grant), black_box(&creds))));
    let ct = encrypt_credentials(&grant, &creds);
    c.bench_function("open_credentials", |b| b.iter(|| open_credentials(black_box(&grant.key), black_box(&ct))));
}

criterion_group!(benches, bench_chain, bench_credentials);
criterion_main!(benches);
