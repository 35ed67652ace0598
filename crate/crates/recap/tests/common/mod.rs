#![allow(dead_code)]

use recap::config::RunConfig;

/// Small enough to pretrain and stream in well under a second.
pub const TINY: &str = r#"
schema_version = 1
seeds = [0, 1, 2, 3, 4]

[task]
source_samples = 1500

[model]
epochs = 1

[region]
samples = 200

[probe]
neighbors = 16
tail = 50

[[scenarios]]
name = "tiny"
batch_size = 8
length = 160
labels = "iid"
domains = [{ kind = "add_noise", severity = 5, weight = 1.0 }]
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

pub fn tiny_with_seeds(seeds: &[u64]) -> RunConfig {
    let mut cfg = tiny();
    cfg.seeds = seeds.to_vec();
    cfg
}
