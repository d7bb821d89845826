//! Model-subset sweeps: how annotation demand grows with the number of models.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::sync::Arc;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::engine::{run_dynamic, JudgmentSource, RunStatus};
use super::{build_plan, SchedulerConfig};
use crate::domain::{build_groups, Video};
use crate::error::{Error, Result};
use crate::rank::FitOptions;
use crate::rng::{mix, stable_hash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub models: Vec<String>,
    pub size: usize,
    pub seed: u64,
    pub total_pairs: usize,
    pub annotations: usize,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub mean_by_size: BTreeMap<usize, f64>,
    pub served_fraction_by_size: BTreeMap<usize, f64>,
    /// Mean annotations at the largest size over the smallest.
    pub growth_ratio: Option<f64>,
    /// Ratio exhaustive annotation would show, `C(max,2) / C(min,2)`.
    pub quadratic_ratio: Option<f64>,
    pub sub_quadratic: Option<bool>,
    pub fraction_decreasing: bool,
}

fn pairs_of(t: usize) -> f64 {
    (t * t.saturating_sub(1) / 2) as f64
}

impl SweepReport {
    /// Aggregates rows, possibly pooled from several seeds.
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut by_size: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in &rows {
            let e = by_size.entry(r.size).or_default();
            e.0 += r.annotations as f64;
            e.1 += r.total_pairs as f64;
            e.2 += 1;
        }
        let mean_by_size: BTreeMap<usize, f64> = by_size
            .iter()
            .map(|(&t, &(a, _, n))| (t, a / n as f64))
            .collect();
        let served_fraction_by_size: BTreeMap<usize, f64> = by_size
            .iter()
            .map(|(&t, &(a, total, _))| (t, if total > 0.0 { a / total } else { 0.0 }))
            .collect();
        let ends = mean_by_size
            .first_key_value()
            .zip(mean_by_size.last_key_value())
            .filter(|((lo, _), (hi, _))| lo < hi && **lo >= 2);
        let (growth_ratio, quadratic_ratio) = match ends {
            Some(((&lo, &m_lo), (&hi, &m_hi))) if m_lo > 0.0 => {
                (Some(m_hi / m_lo), Some(pairs_of(hi) / pairs_of(lo)))
            }
            _ => (None, None),
        };
        let sub_quadratic = growth_ratio.zip(quadratic_ratio).map(|(g, q)| g < q);
        let fractions: Vec<f64> = served_fraction_by_size.values().copied().collect();
        let fraction_decreasing = fractions.windows(2).all(|w| w[1] < w[0]);
        SweepReport {
            rows,
            mean_by_size,
            served_fraction_by_size,
            growth_ratio,
            quadratic_ratio,
            sub_quadratic,
            fraction_decreasing,
        }
    }
}

/// Runs the dynamic scheduler on every subset of models whose size lies in
/// `sizes`, restricting the study to that subset's videos. `make_source`
/// builds a judgment source for each subset.
pub fn subset_sweep<F, S>(
    videos: &[Video],
    sizes: RangeInclusive<usize>,
    config: &SchedulerConfig,
    fit: &FitOptions,
    mut make_source: F,
) -> Result<SweepReport>
where
    F: FnMut(&[String]) -> S,
    S: JudgmentSource,
{
    if *sizes.start() < 2 {
        return Err(Error::invalid("subset sizes start at 2"));
    }
    let models: Vec<String> = videos
        .iter()
        .map(|v| v.model_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows = Vec::new();
    for size in sizes {
        if size > models.len() {
            return Err(Error::invalid(format!(
                "subset size {size} exceeds the {} available models",
                models.len()
            )));
        }
        for subset in models.iter().cloned().combinations(size) {
            let keep: BTreeSet<&str> = subset.iter().map(String::as_str).collect();
            let sub_videos: Vec<Video> = videos
                .iter()
                .filter(|v| keep.contains(v.model_id.as_str()))
                .cloned()
                .collect();
            let seed = mix(config.seed, stable_hash(subset.join("\u{1f}").as_bytes()));
            let sub_config = SchedulerConfig {
                seed,
                ..config.clone()
            };
            let plan = Arc::new(build_plan(build_groups(&sub_videos)?, &sub_config)?);
            let mut source = make_source(&subset);
            let run = run_dynamic(plan, &mut source, fit)?;
            rows.push(SweepRow {
                models: subset,
                size,
                seed,
                total_pairs: run.total_pairs,
                annotations: run.annotation_count,
                status: run.status,
            });
        }
    }
    Ok(SweepReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{MetricId, Outcome, Phase, VideoPair, Verdicts};

    fn row(size: usize, annotations: usize) -> SweepRow {
        SweepRow {
            models: vec![],
            size,
            seed: 0,
            total_pairs: 100 * size * (size - 1) / 2,
            annotations,
            status: RunStatus::Complete,
        }
    }

    #[test]
    fn aggregation_by_size() {
        let r = SweepReport::from_rows(vec![row(2, 100), row(2, 80), row(4, 300)]);
        assert_eq!(r.mean_by_size[&2], 90.0);
        assert_eq!(r.growth_ratio, Some(300.0 / 90.0));
        assert_eq!(r.quadratic_ratio, Some(6.0));
        assert_eq!(r.sub_quadratic, Some(true));
        assert!(r.fraction_decreasing);
    }

    #[test]
    fn one_prompt_two_models_is_one_pair() {
        let videos: Vec<Video> = ["a", "b", "c"]
            .iter()
            .map(|m| Video {
                id: format!("p-{m}"),
                prompt_id: "p".into(),
                model_id: m.to_string(),
                uri: String::new(),
                feature_score: Some(0.0),
            })
            .collect();
        let tie = |_: &[String]| {
            |_: &VideoPair, _: Phase| -> Result<Option<Verdicts>> {
                Ok(Some(MetricId::ALL.iter().map(|m| (*m, Outcome::Tie)).collect()))
            }
        };
        let report = subset_sweep(&videos, 2..=3, &SchedulerConfig::default(), &FitOptions::default(), tie).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert!(r.annotations <= r.total_pairs);
            if r.size == 2 {
                assert_eq!(r.total_pairs, 1);
            }
        }
    }
}
