//! Pairwise human evaluation of generative models: tie-aware strength
//! estimation, an active pair scheduler, bootstrap intervals, simulated
//! annotators and the session engine behind the HTTP service.

pub mod agreement;
pub mod bootstrap;
pub mod domain;
pub mod error;
pub mod features;
pub mod optimize;
pub mod rank;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod service;
pub mod sim;

pub use domain::{
    ComparisonTally, Group, JudgmentRecord, MetricId, MetricKind, Outcome, PairCounts, PairId,
    Phase, Prompt, Verdicts, Video, VideoPair,
};
pub use error::{Error, ErrorKind, Result};
pub use rank::{fit_mle, FitOptions, MetricEstimate, StrengthEstimate};
pub use scheduler::{build_plan, SchedulePlan, SchedulerConfig};
