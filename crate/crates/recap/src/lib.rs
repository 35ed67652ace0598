//! Experiment harness around `recap-core`: run configs, checkpoints,
//! metrics files, benchmarks and plots. The `recap` binary is a thin CLI
//! over these modules.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod verify;

use std::time::Instant;

use recap_core::adapt::Clock;

/// Monotonic nanoseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock {
    start: Instant,
}

impl StdClock {
    pub fn new() -> Self {
        StdClock { start: Instant::now() }
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ns(&mut self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }
}
