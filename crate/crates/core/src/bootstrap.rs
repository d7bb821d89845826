//! Percentile bootstrap intervals for strengths, resampling each annotator's
//! judgments separately.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{models_in_records, tally_from_judgments, ComparisonTally, JudgmentRecord, MetricId, PairId, Phase, Verdicts, VideoPair};
use crate::error::{Error, Result};
use crate::rank::{fit_mle_or_smooth, FitOptions, StrengthEstimate};
use crate::rng::{keyed_rng, mix, session_seed, STREAM_BOOTSTRAP};
use crate::scheduler::{run_dynamic_seeded, SchedulePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RerunMode {
    /// Refit strengths on the resampled records.
    EstimateOnly,
    /// Replay each annotator's scheduler on the resampled judgments.
    FullDynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub ci_lower_pct: f64,
    pub ci_upper_pct: f64,
    pub seed: u64,
    pub rerun_mode: RerunMode,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            ci_lower_pct: 2.5,
            ci_upper_pct: 97.5,
            seed: 0,
            rerun_mode: RerunMode::EstimateOnly,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 {
            return Err(Error::invalid("n_resamples must be at least 1"));
        }
        if !(0.0 < self.ci_lower_pct && self.ci_lower_pct < self.ci_upper_pct && self.ci_upper_pct < 100.0) {
            return Err(Error::invalid(format!(
                "need 0 < lower < upper < 100, got {} and {}",
                self.ci_lower_pct, self.ci_upper_pct
            )));
        }
        Ok(())
    }
}

/// Percentile with linear interpolation between order statistics at rank
/// `q / 100 * (n - 1)`. `sorted` must be ascending.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile must be in [0, 100], got {q}")));
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInterval {
    pub model_id: String,
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Same interval on the log-strength scale.
    pub log_ci_low: f64,
    pub log_ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub n_resamples: usize,
    pub ci_lower_pct: f64,
    pub ci_upper_pct: f64,
    pub rerun_mode: RerunMode,
    pub seed: u64,
    pub metrics: BTreeMap<MetricId, Vec<ModelInterval>>,
    /// Resamples whose comparison graph needed smoothing.
    pub smoothed_resamples: Vec<usize>,
    /// Resamples that could not be fitted at all; excluded from percentiles.
    pub failed_resamples: Vec<usize>,
}

impl ConfidenceReport {
    pub fn interval(&self, metric: MetricId, model: &str) -> Option<&ModelInterval> {
        self.metrics.get(&metric)?.iter().find(|m| m.model_id == model)
    }
}

/// Records split by annotator, each list in a canonical order so results do
/// not depend on input order.
pub fn group_by_annotator(records: &[JudgmentRecord]) -> BTreeMap<String, Vec<JudgmentRecord>> {
    let mut groups: BTreeMap<String, Vec<JudgmentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.annotator_id.clone()).or_default().push(r.clone());
    }
    for list in groups.values_mut() {
        list.sort_by(|a, b| {
            (&a.pair_id, a.metric, &a.session_id, a.timestamp, a.outcome as u8, a.batch_index)
                .cmp(&(&b.pair_id, b.metric, &b.session_id, b.timestamp, b.outcome as u8, b.batch_index))
        });
    }
    groups
}

/// One annotator's records resampled with replacement, same count.
pub fn stratified_resample<R: Rng + ?Sized>(
    groups: &BTreeMap<String, Vec<JudgmentRecord>>,
    rng: &mut R,
) -> BTreeMap<String, Vec<JudgmentRecord>> {
    groups
        .iter()
        .map(|(a, list)| {
            let picked = resample_indices(list.len(), rng).into_iter().map(|i| list[i].clone()).collect();
            (a.clone(), picked)
        })
        .collect()
}

/// Everything a resample needs to rerun the pipeline.
pub enum Pipeline<'a> {
    EstimateOnly { models: &'a [String] },
    FullDynamic { plan: Arc<SchedulePlan> },
}

/// Judgments of one pair by one annotator in one session.
type Unit = (PairId, Verdicts);

fn units_of(records: &[JudgmentRecord]) -> Vec<Unit> {
    let mut map: BTreeMap<(&PairId, &str), Verdicts> = BTreeMap::new();
    for r in records {
        map.entry((&r.pair_id, &r.session_id)).or_default().insert(r.metric, r.outcome);
    }
    map.into_iter().map(|((p, _), v)| (p.clone(), v)).collect()
}

fn replay_tally(
    plan: &Arc<SchedulePlan>,
    per_annotator: &BTreeMap<String, Vec<Unit>>,
    fit: &FitOptions,
) -> Result<ComparisonTally> {
    let mut pooled = ComparisonTally::new(&plan.model_ids())?;
    for (annotator, units) in per_annotator {
        // First drawn copy of a pair wins; a pair never drawn is unavailable.
        let mut lookup: BTreeMap<&PairId, &Verdicts> = BTreeMap::new();
        for (p, v) in units {
            lookup.entry(p).or_insert(v);
        }
        let mut source = |pair: &VideoPair, _: Phase| -> Result<Option<Verdicts>> {
            Ok(lookup
                .get(&pair.pair_id)
                .filter(|v| v.len() == MetricId::ALL.len())
                .map(|v| (*v).clone()))
        };
        let seed = session_seed(plan.config.seed, annotator);
        let run = run_dynamic_seeded(plan.clone(), seed, &mut source, fit)?;
        pooled.merge(&run.tally)?;
    }
    Ok(pooled)
}

fn estimate_once(
    groups: &BTreeMap<String, Vec<JudgmentRecord>>,
    pipeline: &Pipeline<'_>,
    fit: &FitOptions,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(StrengthEstimate, bool)> {
    match pipeline {
        Pipeline::EstimateOnly { models } => {
            let resampled;
            let groups = match rng {
                Some(rng) => {
                    resampled = stratified_resample(groups, rng);
                    &resampled
                }
                None => groups,
            };
            let all: Vec<JudgmentRecord> = groups.values().flatten().cloned().collect();
            fit_mle_or_smooth(&tally_from_judgments(&all, models)?, fit)
        }
        Pipeline::FullDynamic { plan } => {
            let mut per_annotator: BTreeMap<String, Vec<Unit>> = BTreeMap::new();
            let mut rng = rng;
            for (a, list) in groups {
                let units = units_of(list);
                let units = match rng.as_deref_mut() {
                    Some(rng) => resample_indices(units.len(), rng)
                        .into_iter()
                        .map(|i| units[i].clone())
                        .collect(),
                    None => units,
                };
                per_annotator.insert(a.clone(), units);
            }
            fit_mle_or_smooth(&replay_tally(plan, &per_annotator, fit)?, fit)
        }
    }
}

/// Bootstrap intervals over the records of several annotators.
pub fn bootstrap_ci(
    records: &[JudgmentRecord],
    config: &BootstrapConfig,
    fit: &FitOptions,
    plan: Option<Arc<SchedulePlan>>,
) -> Result<ConfidenceReport> {
    if records.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one record"));
    }
    bootstrap_ci_grouped(&group_by_annotator(records), config, fit, plan)
}

/// Like [`bootstrap_ci`] with records already grouped by annotator.
pub fn bootstrap_ci_grouped(
    groups: &BTreeMap<String, Vec<JudgmentRecord>>,
    config: &BootstrapConfig,
    fit: &FitOptions,
    plan: Option<Arc<SchedulePlan>>,
) -> Result<ConfidenceReport> {
    config.validate()?;
    if groups.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one annotator"));
    }
    if let Some((a, _)) = groups.iter().find(|(_, l)| l.is_empty()) {
        return Err(Error::invalid(format!("annotator `{a}` has no records")));
    }
    let all: Vec<JudgmentRecord> = groups.values().flatten().cloned().collect();
    let models = models_in_records(&all);
    let pipeline = match config.rerun_mode {
        RerunMode::EstimateOnly => Pipeline::EstimateOnly { models: &models },
        RerunMode::FullDynamic => Pipeline::FullDynamic {
            plan: plan.ok_or_else(|| Error::invalid("FULL_DYNAMIC resampling needs the study plan"))?,
        },
    };

    let (point, _) = estimate_once(groups, &pipeline, fit, None)?;
    let outcomes: Vec<Result<(StrengthEstimate, bool)>> = (0..config.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = keyed_rng(mix(config.seed, r as u64), STREAM_BOOTSTRAP);
            estimate_once(groups, &pipeline, fit, Some(&mut rng))
        })
        .collect();

    let mut smoothed_resamples = Vec::new();
    let mut failed_resamples = Vec::new();
    let mut samples: BTreeMap<MetricId, Vec<Vec<f64>>> = BTreeMap::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((est, smoothed)) => {
                if smoothed {
                    smoothed_resamples.push(r);
                }
                for (metric, e) in &est.metrics {
                    let per_model = samples
                        .entry(*metric)
                        .or_insert_with(|| vec![Vec::new(); point.model_ids.len()]);
                    for (k, model) in point.model_ids.iter().enumerate() {
                        if let Some(idx) = est.model_ids.iter().position(|m| m == model) {
                            per_model[k].push(e.p[idx]);
                        }
                    }
                }
            }
            Err(e) if e.kind() == crate::error::ErrorKind::Numeric => failed_resamples.push(r),
            Err(e) => return Err(e),
        }
    }

    let mut metrics = BTreeMap::new();
    for (metric, e) in &point.metrics {
        let Some(per_model) = samples.get_mut(metric) else {
            continue;
        };
        let mut rows = Vec::with_capacity(point.model_ids.len());
        for (k, model) in point.model_ids.iter().enumerate() {
            let values = &mut per_model[k];
            if values.is_empty() {
                continue;
            }
            values.sort_by(f64::total_cmp);
            let logs: Vec<f64> = values.iter().map(|p| p.ln()).collect();
            rows.push(ModelInterval {
                model_id: model.clone(),
                point_estimate: e.p[k],
                ci_low: percentile(values, config.ci_lower_pct)?,
                ci_high: percentile(values, config.ci_upper_pct)?,
                log_ci_low: percentile(&logs, config.ci_lower_pct)?,
                log_ci_high: percentile(&logs, config.ci_upper_pct)?,
            });
        }
        metrics.insert(*metric, rows);
    }
    Ok(ConfidenceReport {
        n_resamples: config.n_resamples,
        ci_lower_pct: config.ci_lower_pct,
        ci_upper_pct: config.ci_upper_pct,
        rerun_mode: config.rerun_mode,
        seed: config.seed,
        metrics,
        smoothed_resamples,
        failed_resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Outcome;
    use crate::sim::{simulate_records, GroundTruth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentile_of_one_to_thousand() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert!((percentile(&v, 2.5).unwrap() - 25.975).abs() < 1e-9);
        assert!((percentile(&v, 97.5).unwrap() - 975.025).abs() < 1e-9);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 1000.0);
        assert_eq!(percentile(&[4.2], 2.5).unwrap(), 4.2);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn stratification_preserves_counts() {
        let truth = GroundTruth::uniform(&["a", "b", "c"], &[0.0, 0.5, 1.0], 1.3);
        let models: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let annotators: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let mut records = simulate_records(&truth, &models, &[MetricId::VideoQuality], 10, &annotators, 3).unwrap();
        records.truncate(records.len() - 7);
        let groups = group_by_annotator(&records);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let resampled = stratified_resample(&groups, &mut rng);
        for (a, list) in &groups {
            assert_eq!(resampled[a].len(), list.len());
            assert!(resampled[a].iter().all(|r| &r.annotator_id == a));
        }
    }

    #[test]
    fn single_resample_collapses_interval() {
        let truth = GroundTruth::uniform(&["a", "b"], &[0.0, 0.5], 1.3);
        let models: Vec<String> = ["a", "b"].map(String::from).to_vec();
        let records = simulate_records(&truth, &models, &[MetricId::VideoQuality], 50, &["x".into()], 3).unwrap();
        let config = BootstrapConfig {
            n_resamples: 1,
            seed: 9,
            ..Default::default()
        };
        let rep = bootstrap_ci(&records, &config, &FitOptions::default(), None).unwrap();
        for iv in &rep.metrics[&MetricId::VideoQuality] {
            assert_eq!(iv.ci_low, iv.ci_high);
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let truth = GroundTruth::uniform(&["a", "b", "c"], &[0.0, 0.4, 0.8], 1.3);
        let models: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let records = simulate_records(&truth, &models, &[MetricId::HumanPreference], 30, &["x".into(), "y".into()], 8).unwrap();
        let config = BootstrapConfig {
            n_resamples: 40,
            seed: 1,
            ..Default::default()
        };
        let a = bootstrap_ci(&records, &config, &FitOptions::default(), None).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        let b = bootstrap_ci(&reversed, &config, &FitOptions::default(), None).unwrap();
        assert_eq!(a, b);
        for iv in &a.metrics[&MetricId::HumanPreference] {
            assert!(iv.ci_low <= iv.ci_high);
        }
    }

    #[test]
    fn disconnected_resample_is_smoothed() {
        // a-b and c-d never meet: every fit needs smoothing.
        let rec = |pair: (&str, &str), o| JudgmentRecord {
            annotator_id: "x".into(),
            pair_id: PairId::new("p", pair.0, pair.1).unwrap().0,
            metric: MetricId::VideoQuality,
            outcome: o,
            phase: Phase::Static,
            batch_index: 0,
            timestamp: chrono::DateTime::UNIX_EPOCH,
            session_id: "s".into(),
        };
        let records = vec![rec(("a", "b"), Outcome::AWins), rec(("c", "d"), Outcome::Tie)];
        let config = BootstrapConfig {
            n_resamples: 5,
            ..Default::default()
        };
        let rep = bootstrap_ci(&records, &config, &FitOptions::default(), None).unwrap();
        assert_eq!(rep.smoothed_resamples, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_bounds() {
        let bad = BootstrapConfig {
            ci_lower_pct: 60.0,
            ci_upper_pct: 40.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(BootstrapConfig::default().validate().is_ok());
    }
}
