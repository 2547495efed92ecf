//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use skyrelay_core::scheduler::{InstanceSpec, TaskSpec};

/// Seeded problem with `tasks` tasks over `instances` instances. Every
/// window sits inside [0, 100] and instance capacity exceeds any single
/// task, so most problems are feasible.
pub fn problem(tasks: usize, instances: usize, seed: u64) -> (Vec<TaskSpec>, Vec<InstanceSpec>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = (0..tasks)
        .map(|i| {
            let start = rng.gen_range(0..60);
            TaskSpec { id: format!("k{i}"), start, end: start + rng.gen_range(1..=40), bw: rng.gen_range(1..=10) }
        })
        .collect();
    let c = (0..instances)
        .map(|i| InstanceSpec { id: format!("c{i}"), start: 0, end: 100, cap: rng.gen_range(10..=30) })
        .collect();
    (k, c)
}
