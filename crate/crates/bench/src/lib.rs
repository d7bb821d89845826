//! Shared fixtures for the engine benchmarks.

use std::sync::Arc;

use arena_core::domain::build_groups;
use arena_core::sim::{synthetic_videos, GroundTruth};
use arena_core::{build_plan, SchedulePlan, SchedulerConfig};

pub fn models(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("model-{i}")).collect()
}

/// `n` models with log-strengths spaced 0.4 apart and a common theta of 1.3.
pub fn truth(n: usize) -> GroundTruth {
    let ids = models(n);
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let logs: Vec<f64> = (0..n).map(|i| 0.4 * i as f64).collect();
    GroundTruth::uniform(&refs, &logs, 1.3)
}

pub fn plan(truth: &GroundTruth, prompts: usize, seed: u64) -> Arc<SchedulePlan> {
    let videos = synthetic_videos(truth, &models(truth.models().len()), prompts, 0.5, seed).expect("videos");
    let config = SchedulerConfig {
        seed,
        ..SchedulerConfig::default()
    };
    Arc::new(build_plan(build_groups(&videos).expect("groups"), &config).expect("plan"))
}
