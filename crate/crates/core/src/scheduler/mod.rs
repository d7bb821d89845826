//! Active pair scheduling.
//!
//! Prompt groups are pre-sorted so that groups whose videos are hard to tell
//! apart by automatic metrics come first. The leading groups form the static
//! phase and are always annotated. The rest is cut into batches; within a
//! batch each pair is dropped with a probability that grows with the current
//! strength gap between its two models, and strengths are refit on a fixed
//! batch cadence until the rankings stop changing.

mod engine;
mod sweep;

pub use engine::{
    judgment_records, run_dynamic, run_dynamic_seeded, Cursor, Disposition, DispositionEntry, DynamicRun, Engine,
    EngineState, JudgmentSource, RunStatus, SchedEvent, StopState, UpdateKind,
};
pub use sweep::{subset_sweep, SweepReport, SweepRow};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::{Group, MetricId, Phase, VideoPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DrivingScore {
    /// Mean absolute log-strength gap over all fitted metrics.
    PerMetricMean,
    SingleMetric(MetricId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Decay rate shared by pair scoring and discarding.
    pub alpha: f64,
    /// Static-phase size in pairs, rounded up to whole groups.
    pub n0_pairs: usize,
    pub batch_groups: usize,
    pub update_every_batches: usize,
    /// Number of identical consecutive ranking snapshots that ends a run.
    pub stability_window: usize,
    pub seed: u64,
    pub driving_score: DrivingScore,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            alpha: 1.0,
            n0_pairs: 200,
            batch_groups: 8,
            update_every_batches: 5,
            stability_window: 5,
            seed: 0,
            driving_score: DrivingScore::PerMetricMean,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, v) in [
            ("n0_pairs", self.n0_pairs),
            ("batch_groups", self.batch_groups),
            ("update_every_batches", self.update_every_batches),
            ("stability_window", self.stability_window),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Proximity score `exp(-alpha * delta)` of two videos whose feature scores
/// differ by `delta`.
pub fn pair_score(delta_s: f64, alpha: f64) -> Result<f64> {
    if !(delta_s >= 0.0) {
        return Err(Error::domain(format!("score difference must be >= 0, got {delta_s}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok((-alpha * delta_s).exp())
}

/// Probability `1 - exp(-alpha * gap)` of dropping a pair whose models are
/// `gap` apart on the log-strength scale.
pub fn discard_probability(strength_gap: f64, alpha: f64) -> Result<f64> {
    if !(strength_gap >= 0.0) {
        return Err(Error::domain(format!("strength gap must be >= 0, got {strength_gap}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    // Past a gap of ~37 the result would round to exactly 1.
    Ok((-(-alpha * strength_gap).exp_m1()).min(1.0 - f64::EPSILON / 2.0))
}

/// Group order and phase layout for one study; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub config: SchedulerConfig,
    /// Descending `group_score`, ties by prompt id.
    pub sorted_groups: Vec<Group>,
    /// Leading groups annotated unconditionally.
    pub static_group_count: usize,
    /// Indices into `sorted_groups`, consecutive and in order.
    pub dynamic_batches: Vec<Vec<usize>>,
    pub total_pairs: usize,
    pub pairs_per_group: usize,
}

impl SchedulePlan {
    /// Pairs in serving order; a pair's position is its ordinal.
    pub fn pairs(&self) -> impl Iterator<Item = &VideoPair> {
        self.sorted_groups.iter().flat_map(|g| g.pairs.iter())
    }

    pub fn static_pair_count(&self) -> usize {
        self.sorted_groups[..self.static_group_count]
            .iter()
            .map(|g| g.pairs.len())
            .sum()
    }

    pub fn static_pairs(&self) -> impl Iterator<Item = &VideoPair> {
        self.sorted_groups[..self.static_group_count]
            .iter()
            .flat_map(|g| g.pairs.iter())
    }

    /// Ordinal range of each dynamic batch.
    pub fn batch_ranges(&self) -> Vec<Range<usize>> {
        let mut start = self.static_pair_count();
        self.dynamic_batches
            .iter()
            .map(|groups| {
                let len: usize = groups.iter().map(|&g| self.sorted_groups[g].pairs.len()).sum();
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Sorted model ids appearing anywhere in the plan.
    pub fn model_ids(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self
            .pairs()
            .flat_map(|p| [p.model_a(), p.model_b()])
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Phase and batch index (0 for static, 1-based for dynamic batches).
    pub fn phase_of(&self, ordinal: usize) -> (Phase, u32) {
        if ordinal < self.static_pair_count() {
            return (Phase::Static, 0);
        }
        let b = self
            .batch_ranges()
            .iter()
            .position(|r| r.contains(&ordinal))
            .unwrap_or(self.dynamic_batches.len());
        (Phase::Dynamic, b as u32 + 1)
    }
}

/// Scores, sorts and partitions prompt groups. All videos need a feature score.
pub fn build_plan(groups: Vec<Group>, config: &SchedulerConfig) -> Result<SchedulePlan> {
    config.validate()?;
    let mut missing: Vec<String> = groups
        .iter()
        .flat_map(|g| g.pairs.iter())
        .flat_map(|p| [&p.video_a, &p.video_b])
        .filter(|v| v.feature_score.is_none())
        .map(|v| v.id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingFeature(missing));
    }

    let mut groups = groups;
    for g in &mut groups {
        g.pair_scores = g
            .pairs
            .iter()
            .map(|p| {
                let delta = (p.video_a.feature_score.unwrap() - p.video_b.feature_score.unwrap()).abs();
                pair_score(delta, config.alpha)
            })
            .collect::<Result<_>>()?;
        g.group_score = g.pair_scores.iter().sum();
    }
    groups.sort_by(|a, b| {
        b.group_score
            .total_cmp(&a.group_score)
            .then_with(|| a.prompt_id.cmp(&b.prompt_id))
    });

    let mut static_group_count = 0;
    let mut static_pairs = 0;
    while static_group_count < groups.len() && static_pairs < config.n0_pairs {
        static_pairs += groups[static_group_count].pairs.len();
        static_group_count += 1;
    }
    let dynamic_batches = (static_group_count..groups.len())
        .collect::<Vec<_>>()
        .chunks(config.batch_groups)
        .map(<[usize]>::to_vec)
        .collect();
    let total_pairs = groups.iter().map(|g| g.pairs.len()).sum();
    let pairs_per_group = groups.iter().map(|g| g.pairs.len()).max().unwrap_or(0);
    Ok(SchedulePlan {
        config: config.clone(),
        sorted_groups: groups,
        static_group_count,
        dynamic_batches,
        total_pairs,
        pairs_per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_groups, Video};

    fn video(prompt: &str, model: &str, score: Option<f64>) -> Video {
        Video {
            id: format!("{prompt}/{model}"),
            prompt_id: prompt.into(),
            model_id: model.into(),
            uri: String::new(),
            feature_score: score,
        }
    }

    #[test]
    fn pair_score_examples() {
        assert_eq!(pair_score(0.0, 3.7).unwrap(), 1.0);
        assert!((pair_score(2f64.ln(), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(pair_score(0.3, 2.0).unwrap() > pair_score(0.7, 2.0).unwrap());
        assert!(pair_score(-0.1, 1.0).is_err());
    }

    #[test]
    fn discard_probability_examples() {
        assert_eq!(discard_probability(0.0, 1.0).unwrap(), 0.0);
        assert!((discard_probability(2f64.ln(), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(discard_probability(50.0, 1.0).unwrap() > 1.0 - 1e-12);
        assert!(discard_probability(50.0, 1.0).unwrap() < 1.0);
        assert!(discard_probability(-1.0, 1.0).is_err());
    }

    #[test]
    fn closer_groups_sort_first() {
        // Group A: three models with equal scores (deltas 0,0,0);
        // group B: scores 0,1,2 (deltas 1,1,2).
        let mut vids = Vec::new();
        for m in ["x", "y", "z"] {
            vids.push(video("B", m, Some(0.0)));
        }
        vids.push(video("A", "x", Some(0.0)));
        vids.push(video("A", "y", Some(1.0)));
        vids.push(video("A", "z", Some(2.0)));
        let plan = build_plan(build_groups(&vids).unwrap(), &SchedulerConfig::default()).unwrap();
        assert_eq!(plan.sorted_groups[0].prompt_id, "B");
        assert_eq!(plan.sorted_groups[0].group_score, 3.0);
    }

    #[test]
    fn two_pair_groups_substitution() {
        // Group a: deltas (0, 0) -> 2; group b: deltas (1, 1) -> 2/e.
        let vids = vec![
            video("b", "m1", Some(0.0)),
            video("b", "m2", Some(1.0)),
            video("b2", "m1", Some(5.0)),
            video("b2", "m2", Some(6.0)),
            video("a", "m1", Some(3.0)),
            video("a", "m2", Some(3.0)),
            video("a2", "m1", Some(4.0)),
            video("a2", "m2", Some(4.0)),
        ];
        let mut groups = build_groups(&vids).unwrap();
        // merge into two-pair groups by prompt prefix
        let merge = |groups: &mut Vec<Group>, keep: &str, extra: &str| {
            let e = groups.iter().position(|g| g.prompt_id == extra).unwrap();
            let extra = groups.remove(e);
            let k = groups.iter().position(|g| g.prompt_id == keep).unwrap();
            groups[k].pairs.extend(extra.pairs);
        };
        merge(&mut groups, "a", "a2");
        merge(&mut groups, "b", "b2");
        let plan = build_plan(groups, &SchedulerConfig::default()).unwrap();
        assert_eq!(plan.sorted_groups[0].prompt_id, "a");
        assert_eq!(plan.sorted_groups[0].group_score, 2.0);
        assert!((plan.sorted_groups[1].group_score - 2.0 * (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_break_ties_by_prompt() {
        let vids: Vec<Video> = ["p3", "p1", "p2"]
            .iter()
            .flat_map(|p| [video(p, "a", Some(1.0)), video(p, "b", Some(2.0))])
            .collect();
        let plan = build_plan(build_groups(&vids).unwrap(), &SchedulerConfig::default()).unwrap();
        let order: Vec<&str> = plan.sorted_groups.iter().map(|g| g.prompt_id.as_str()).collect();
        assert_eq!(order, vec!["p1", "p2", "p3"]);
    }

    #[test]
    fn default_study_static_phase_is_twenty_groups() {
        let mut vids = Vec::new();
        for p in 0..200 {
            for (k, m) in ["a", "b", "c", "d", "e"].iter().enumerate() {
                let s = ((p * 7 + k * 3) % 11) as f64 / 3.0;
                vids.push(video(&format!("p{p:03}"), m, Some(s)));
            }
        }
        let plan = build_plan(build_groups(&vids).unwrap(), &SchedulerConfig::default()).unwrap();
        assert_eq!(plan.total_pairs, 2000);
        assert_eq!(plan.static_group_count, 20);
        assert_eq!(plan.static_pair_count(), 200);
        assert_eq!(plan.pairs_per_group, 10);
        // 180 remaining groups in batches of 8: 22 full batches and one of 4
        assert_eq!(plan.dynamic_batches.len(), 23);
        assert_eq!(plan.dynamic_batches.last().unwrap().len(), 4);
        assert_eq!(plan.batch_ranges()[0], 200..280);
        let min_static = plan.sorted_groups[..20].iter().map(|g| g.group_score).fold(f64::INFINITY, f64::min);
        let max_dynamic = plan.sorted_groups[20..].iter().map(|g| g.group_score).fold(0.0, f64::max);
        assert!(min_static >= max_dynamic);
        assert_eq!(plan.phase_of(0), (Phase::Static, 0));
        assert_eq!(plan.phase_of(200), (Phase::Dynamic, 1));
        assert_eq!(plan.phase_of(1999), (Phase::Dynamic, 23));
    }

    #[test]
    fn static_phase_rounds_up_to_whole_groups() {
        let vids: Vec<Video> = (0..10)
            .flat_map(|p| ["a", "b", "c"].map(|m| video(&format!("p{p}"), m, Some(0.5))))
            .collect();
        let config = SchedulerConfig {
            n0_pairs: 7,
            batch_groups: 3,
            ..Default::default()
        };
        let plan = build_plan(build_groups(&vids).unwrap(), &config).unwrap();
        assert_eq!(plan.static_group_count, 3);
        assert_eq!(plan.static_pair_count(), 9);
        assert_eq!(plan.dynamic_batches, vec![vec![3, 4, 5], vec![6, 7, 8], vec![9]]);
    }

    #[test]
    fn missing_feature_names_video() {
        let vids = vec![video("p", "a", Some(1.0)), video("p", "b", None)];
        match build_plan(build_groups(&vids).unwrap(), &SchedulerConfig::default()) {
            Err(Error::MissingFeature(v)) => assert_eq!(v, vec!["p/b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = SchedulerConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SchedulerConfig {
            batch_groups: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
