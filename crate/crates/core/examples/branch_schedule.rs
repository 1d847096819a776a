//! Samples branches under the default stage schedule and prints the
//! empirical frequency of each branch per stage.
//!
//! cargo run --example branch_schedule

use std::collections::BTreeMap;

use mvfuse::branch::{sample_branch, StageSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mvfuse::Result<()> {
    let schedule = StageSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    const DRAWS: usize = 20_000;
    for stage in schedule.stages() {
        let t = schedule.stage_for_epoch(stage.lo);
        let mut counts = BTreeMap::new();
        for _ in 0..DRAWS {
            *counts
                .entry(sample_branch(rng.random(), t)?.as_str())
                .or_insert(0usize) += 1;
        }
        let range = match stage.hi {
            Some(hi) => format!("epochs {}..{hi}", stage.lo),
            None => format!("epochs {}..", stage.lo),
        };
        let freq: Vec<String> = counts
            .iter()
            .map(|(b, n)| format!("{b} {:.3}", *n as f64 / DRAWS as f64))
            .collect();
        println!(
            "{range:<14} thresholds ({}, {}): {}",
            t.fbank,
            t.unit,
            freq.join(", ")
        );
    }
    Ok(())
}
