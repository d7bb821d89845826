//! Simulated annotators that sample verdicts from known strengths, plus the
//! desk-scale experiments built on them.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::DateTime;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    build_groups, ComparisonTally, JudgmentRecord, MetricId, Outcome, PairId,
    Phase, Verdicts, Video, VideoPair,
};
use crate::error::{Error, Result};
use crate::rank::{fit_mle, prob_tie, prob_win, FitOptions};
use crate::rng::{keyed_rng, keyed_uniform, mix, session_seed, stable_hash, STREAM_FEATURES, STREAM_JUDGMENT};
use crate::scheduler::{
    build_plan, judgment_records, run_dynamic, run_dynamic_seeded, subset_sweep, Disposition, DynamicRun, JudgmentSource,
    RunStatus, SchedulerConfig, SweepReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTruth {
    pub strengths: BTreeMap<String, f64>,
    pub theta: f64,
}

/// True strengths per metric. `default` covers metrics not listed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MetricTruth>,
    #[serde(default)]
    pub metrics: BTreeMap<MetricId, MetricTruth>,
    /// Per-annotator exponent on theta; values above 1 mean more ties.
    #[serde(default)]
    pub annotator_noise: BTreeMap<String, f64>,
}

impl GroundTruth {
    /// Same strengths (given as log-strengths) and theta for every metric.
    pub fn uniform(models: &[&str], log_strengths: &[f64], theta: f64) -> Self {
        let strengths = models
            .iter()
            .zip(log_strengths)
            .map(|(m, v)| (m.to_string(), v.exp()))
            .collect();
        GroundTruth {
            default: Some(MetricTruth { strengths, theta }),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let truth: GroundTruth = serde_json::from_str(text)?;
        truth.validate()?;
        Ok(truth)
    }

    pub fn validate(&self) -> Result<()> {
        for m in MetricId::ALL {
            let t = self
                .metric(m)
                .ok_or_else(|| Error::invalid(format!("truth has no entry for {m}")))?;
            if !(t.theta >= 1.0 && t.theta.is_finite()) {
                return Err(Error::invalid(format!("{m}: theta must be >= 1, got {}", t.theta)));
            }
            if let Some((model, p)) = t.strengths.iter().find(|(_, p)| !(**p > 0.0 && p.is_finite())) {
                return Err(Error::invalid(format!("{m}: strength of `{model}` must be positive, got {p}")));
            }
        }
        if let Some((a, l)) = self.annotator_noise.iter().find(|(_, l)| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("noise multiplier of `{a}` must be positive, got {l}")));
        }
        Ok(())
    }

    pub fn metric(&self, metric: MetricId) -> Option<&MetricTruth> {
        self.metrics.get(&metric).or(self.default.as_ref())
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = MetricId::ALL
            .iter()
            .filter_map(|m| self.metric(*m))
            .flat_map(|t| t.strengths.keys().cloned())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// `(p_a, p_b, theta_annotator)` for a comparison.
    fn params(&self, metric: MetricId, a: &str, b: &str, annotator: &str) -> Result<(f64, f64, f64)> {
        let t = self
            .metric(metric)
            .ok_or_else(|| Error::invalid(format!("truth has no entry for {metric}")))?;
        let get = |m: &str| {
            t.strengths
                .get(m)
                .copied()
                .ok_or_else(|| Error::invalid(format!("model `{m}` is not in the truth")))
        };
        let lambda = self.annotator_noise.get(annotator).copied().unwrap_or(1.0);
        Ok((get(a)?, get(b)?, t.theta.powf(lambda)))
    }

    /// True log-strengths per model for `metric`, centred to mean zero.
    pub fn centred_log_strengths(&self, metric: MetricId, models: &[String]) -> Option<Vec<f64>> {
        let t = self.metric(metric)?;
        let v: Vec<f64> = models
            .iter()
            .map(|m| t.strengths.get(m).map(|p| p.ln()))
            .collect::<Option<_>>()?;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Some(v.into_iter().map(|x| x - mean).collect())
    }

    pub fn ranking(&self, metric: MetricId, models: &[String]) -> Option<Vec<String>> {
        let t = self.metric(metric)?;
        let p: Vec<f64> = models.iter().map(|m| t.strengths.get(m).copied()).collect::<Option<_>>()?;
        Some(crate::rank::ranking_from_strengths(models, &p))
    }
}

/// Maps a uniform draw to an outcome: win, then tie, then loss.
pub fn outcome_from_uniform(p_a: f64, p_b: f64, theta: f64, u: f64) -> Result<Outcome> {
    let win = prob_win(p_a, p_b, theta)?;
    let tie = prob_tie(p_a, p_b, theta)?;
    Ok(if u < win {
        Outcome::AWins
    } else if u < win + tie {
        Outcome::Tie
    } else {
        Outcome::BWins
    })
}

/// One categorical draw for `pair` on `metric`.
pub fn sample_judgment<R: Rng + ?Sized>(
    pair: &PairId,
    metric: MetricId,
    truth: &GroundTruth,
    annotator: &str,
    rng: &mut R,
) -> Result<Outcome> {
    let (p_a, p_b, theta) = truth.params(metric, pair.model_a(), pair.model_b(), annotator)?;
    outcome_from_uniform(p_a, p_b, theta, rng.gen::<f64>())
}

/// Deterministic annotator: the verdict for a given (pair, metric) depends
/// only on the seed and annotator id, never on serving order.
#[derive(Debug, Clone)]
pub struct SimulatedAnnotator {
    truth: Arc<GroundTruth>,
    annotator_id: String,
    key: u64,
}

impl SimulatedAnnotator {
    pub fn new(truth: Arc<GroundTruth>, annotator_id: &str, seed: u64) -> Self {
        SimulatedAnnotator {
            truth,
            annotator_id: annotator_id.to_owned(),
            key: mix(seed, stable_hash(annotator_id.as_bytes())),
        }
    }

    pub fn annotator_id(&self) -> &str {
        &self.annotator_id
    }

    pub fn verdicts(&self, pair: &PairId) -> Result<Verdicts> {
        MetricId::ALL
            .iter()
            .map(|&metric| {
                let index = stable_hash(format!("{pair}#{metric}").as_bytes());
                let u = keyed_uniform(self.key, STREAM_JUDGMENT, index);
                let (p_a, p_b, theta) =
                    self.truth
                        .params(metric, pair.model_a(), pair.model_b(), &self.annotator_id)?;
                Ok((metric, outcome_from_uniform(p_a, p_b, theta, u)?))
            })
            .collect()
    }
}

impl JudgmentSource for SimulatedAnnotator {
    fn judge(&mut self, pair: &VideoPair, _phase: Phase) -> Result<Option<Verdicts>> {
        self.verdicts(&pair.pair_id).map(Some)
    }
}

/// Records for `repeats` independent judgments of every model pair by each
/// annotator. Repetition `k` is filed under prompt `r{k}`.
pub fn simulate_records(
    truth: &GroundTruth,
    models: &[String],
    metrics: &[MetricId],
    repeats: usize,
    annotators: &[String],
    seed: u64,
) -> Result<Vec<JudgmentRecord>> {
    let mut out = Vec::with_capacity(annotators.len() * repeats * models.len() * models.len() / 2);
    for annotator in annotators {
        let mut rng = keyed_rng(mix(seed, stable_hash(annotator.as_bytes())), STREAM_JUDGMENT);
        for k in 0..repeats {
            let prompt = format!("r{k}");
            for i in 0..models.len() {
                for j in i + 1..models.len() {
                    let (pair_id, _) = PairId::new(&prompt, &models[i], &models[j])?;
                    for &metric in metrics {
                        out.push(JudgmentRecord {
                            annotator_id: annotator.clone(),
                            outcome: sample_judgment(&pair_id, metric, truth, annotator, &mut rng)?,
                            pair_id: pair_id.clone(),
                            metric,
                            phase: Phase::Static,
                            batch_index: 0,
                            timestamp: DateTime::UNIX_EPOCH,
                            session_id: format!("sim-{annotator}"),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Videos for `prompts` prompts x `models`, with feature scores equal to the
/// model's mean true log-strength plus uniform noise of half-width
/// `feature_noise`.
pub fn synthetic_videos(truth: &GroundTruth, models: &[String], prompts: usize, feature_noise: f64, seed: u64) -> Result<Vec<Video>> {
    let mut rng = keyed_rng(seed, STREAM_FEATURES);
    let mut out = Vec::with_capacity(prompts * models.len());
    for p in 0..prompts {
        let prompt_id = format!("prompt-{p:04}");
        for model in models {
            let mut quality = 0.0;
            for m in MetricId::ALL {
                let t = truth
                    .metric(m)
                    .ok_or_else(|| Error::invalid(format!("truth has no entry for {m}")))?;
                let s = t
                    .strengths
                    .get(model)
                    .ok_or_else(|| Error::invalid(format!("model `{model}` is not in the truth")))?;
                quality += s.ln() / MetricId::ALL.len() as f64;
            }
            let noise = if feature_noise > 0.0 {
                rng.gen_range(-feature_noise..feature_noise)
            } else {
                0.0
            };
            out.push(Video {
                id: format!("{prompt_id}/{model}"),
                prompt_id: prompt_id.clone(),
                model_id: model.clone(),
                uri: format!("media/{prompt_id}/{model}.mp4"),
                feature_score: Some(quality + noise),
            });
        }
    }
    Ok(out)
}

/// Per-metric records for every judged pair of a finished run, re-queried
/// from the (deterministic) annotator.
pub fn records_from_run(run: &DynamicRun, annotator: &SimulatedAnnotator) -> Result<Vec<JudgmentRecord>> {
    let session = format!("sim-{}", annotator.annotator_id());
    let mut out = Vec::new();
    for d in &run.dispositions {
        if d.disposition == Disposition::Judged {
            let v = annotator.verdicts(&d.pair_id)?;
            out.extend(judgment_records(
                &d.pair_id,
                &v,
                d.phase,
                d.batch_index,
                annotator.annotator_id(),
                &session,
                DateTime::UNIX_EPOCH,
            ));
        }
    }
    Ok(out)
}

/// Kendall's tau-a between two orderings of the same items.
pub fn kendall_tau(a: &[String], b: &[String]) -> f64 {
    let pos: BTreeMap<&str, usize> = b.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            match (pos.get(a[i].as_str()), pos.get(a[j].as_str())) {
                (Some(x), Some(y)) if x < y => score += 1,
                (Some(_), Some(_)) => score -= 1,
                _ => {}
            }
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub prompts: usize,
    pub feature_noise: f64,
    pub scheduler: SchedulerConfig,
    pub fit: FitOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            prompts: 200,
            feature_noise: 0.5,
            scheduler: SchedulerConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub seed: u64,
    pub served: usize,
    pub total: usize,
    pub served_fraction: f64,
    pub status: RunStatus,
    pub updates: usize,
    pub full_rankings: BTreeMap<MetricId, Vec<String>>,
    pub dynamic_rankings: BTreeMap<MetricId, Vec<String>>,
    /// Metrics whose dynamic ranking equals the full-annotation ranking.
    pub matching_metrics: usize,
    pub all_match: bool,
    pub min_kendall_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub mean_served_fraction: f64,
    /// Seeds where every metric's ranking matched.
    pub seeds_all_match: usize,
    pub per_metric_matches: BTreeMap<MetricId, usize>,
}

fn cost_row(truth: &Arc<GroundTruth>, models: &[String], study: &StudyConfig, seed: u64) -> Result<CostRow> {
    let videos = synthetic_videos(truth, models, study.prompts, study.feature_noise, seed)?;
    let config = SchedulerConfig {
        seed,
        ..study.scheduler.clone()
    };
    let plan = Arc::new(build_plan(build_groups(&videos)?, &config)?);
    let annotator = SimulatedAnnotator::new(truth.clone(), "sim-0", seed);

    let mut full = ComparisonTally::new(models)?;
    for pair in plan.pairs() {
        for (metric, outcome) in annotator.verdicts(&pair.pair_id)? {
            full.record(&pair.pair_id, metric, outcome)?;
        }
    }
    let full_rankings = fit_mle(&full, &study.fit)?.rankings();

    let run = run_dynamic(plan, &mut annotator.clone(), &study.fit)?;
    let dynamic_rankings = run.estimates.as_ref().map(|e| e.rankings()).unwrap_or_default();
    let mut matching_metrics = 0;
    let mut min_kendall_tau: f64 = 1.0;
    for (metric, full_r) in &full_rankings {
        match dynamic_rankings.get(metric) {
            Some(dyn_r) => {
                matching_metrics += usize::from(dyn_r == full_r);
                min_kendall_tau = min_kendall_tau.min(kendall_tau(full_r, dyn_r));
            }
            None => min_kendall_tau = min_kendall_tau.min(-1.0),
        }
    }
    Ok(CostRow {
        seed,
        served: run.annotation_count,
        total: run.total_pairs,
        served_fraction: run.served_fraction(),
        status: run.status,
        updates: run.updates,
        all_match: matching_metrics == full_rankings.len(),
        full_rankings,
        dynamic_rankings,
        matching_metrics,
        min_kendall_tau,
    })
}

/// Full versus dynamic annotation on the same simulated verdict streams, one
/// synthetic study per seed.
pub fn experiment_cost_reduction(truth: &GroundTruth, study: &StudyConfig, seeds: &[u64]) -> Result<CostReport> {
    truth.validate()?;
    let truth = Arc::new(truth.clone());
    let models = truth.models();
    let rows: Vec<CostRow> = seeds
        .par_iter()
        .map(|&seed| cost_row(&truth, &models, study, seed))
        .collect::<Result<_>>()?;
    let mean_served_fraction = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.served_fraction).sum::<f64>() / rows.len() as f64
    };
    let mut per_metric_matches: BTreeMap<MetricId, usize> = MetricId::ALL.iter().map(|m| (*m, 0)).collect();
    for r in &rows {
        for (m, full_r) in &r.full_rankings {
            if r.dynamic_rankings.get(m) == Some(full_r) {
                *per_metric_matches.get_mut(m).expect("all metrics seeded") += 1;
            }
        }
    }
    Ok(CostReport {
        seeds_all_match: rows.iter().filter(|r| r.all_match).count(),
        mean_served_fraction,
        per_metric_matches,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedStudy {
    pub videos: Vec<Video>,
    pub runs: BTreeMap<String, DynamicRun>,
    pub records: Vec<JudgmentRecord>,
}

/// One synthetic study worked through by several simulated annotators, each
/// in their own dynamic session. Session seeds follow the live service, so a
/// full-dynamic bootstrap over the records replays the same sessions.
pub fn simulate_study(truth: &GroundTruth, study: &StudyConfig, annotators: &[String], seed: u64) -> Result<SimulatedStudy> {
    truth.validate()?;
    if annotators.is_empty() {
        return Err(Error::invalid("at least one annotator is needed"));
    }
    let truth = Arc::new(truth.clone());
    let videos = synthetic_videos(&truth, &truth.models(), study.prompts, study.feature_noise, seed)?;
    let config = SchedulerConfig {
        seed,
        ..study.scheduler.clone()
    };
    let plan = Arc::new(build_plan(build_groups(&videos)?, &config)?);
    let sessions: Vec<(String, DynamicRun, Vec<JudgmentRecord>)> = annotators
        .par_iter()
        .map(|id| {
            let s = session_seed(seed, id);
            let annotator = SimulatedAnnotator::new(truth.clone(), id, s);
            let run = run_dynamic_seeded(plan.clone(), s, &mut annotator.clone(), &study.fit)?;
            let records = records_from_run(&run, &annotator)?;
            Ok((id.clone(), run, records))
        })
        .collect::<Result<_>>()?;
    let mut out = SimulatedStudy {
        videos,
        runs: BTreeMap::new(),
        records: Vec::new(),
    };
    for (id, run, records) in sessions {
        out.records.extend(records);
        out.runs.insert(id, run);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub per_seed: Vec<SweepReport>,
    /// All seeds' rows aggregated together.
    pub pooled: SweepReport,
}

/// Subset sweep over sizes 2..=4 of the truth's models, one synthetic study
/// per seed.
pub fn experiment_growth(truth: &GroundTruth, study: &StudyConfig, seeds: &[u64]) -> Result<GrowthReport> {
    truth.validate()?;
    let truth = Arc::new(truth.clone());
    let models = truth.models();
    let max = models.len().min(4);
    let per_seed: Vec<SweepReport> = seeds
        .par_iter()
        .map(|&seed| {
            let videos = synthetic_videos(&truth, &models, study.prompts, study.feature_noise, seed)?;
            let config = SchedulerConfig {
                seed,
                ..study.scheduler.clone()
            };
            subset_sweep(&videos, 2..=max, &config, &study.fit, |_| {
                SimulatedAnnotator::new(truth.clone(), "sim-0", seed)
            })
        })
        .collect::<Result<_>>()?;
    let pooled = SweepReport::from_rows(per_seed.iter().flat_map(|r| r.rows.iter().cloned()).collect());
    Ok(GrowthReport { per_seed, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn models(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overwhelming_strength_always_wins() {
        let truth = GroundTruth::uniform(&["a", "b"], &[1e6f64.ln(), 0.0], 0.01f64.exp());
        let pair = PairId::new("p", "a", "b").unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wins = (0..10_000)
            .filter(|_| {
                sample_judgment(&pair, MetricId::VideoQuality, &truth, "x", &mut rng).unwrap() == Outcome::AWins
            })
            .count();
        assert!(wins as f64 / 1e4 > 0.999);
    }

    #[test]
    fn equal_strengths_theta_two_tie_a_third() {
        let truth = GroundTruth::uniform(&["a", "b"], &[0.0, 0.0], 2.0);
        let pair = PairId::new("p", "a", "b").unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ties = (0..10_000)
            .filter(|_| sample_judgment(&pair, MetricId::TextAlignment, &truth, "x", &mut rng).unwrap() == Outcome::Tie)
            .count();
        assert!((ties as f64 / 1e4 - 1.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn unknown_model_is_an_error() {
        let truth = GroundTruth::uniform(&["a", "b"], &[0.0, 0.0], 2.0);
        let pair = PairId::new("p", "a", "zzz").unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_judgment(&pair, MetricId::TextAlignment, &truth, "x", &mut rng).is_err());
    }

    #[test]
    fn annotator_noise_inflates_ties() {
        let mut truth = GroundTruth::uniform(&["a", "b"], &[0.0, 0.5], 1.5);
        truth.annotator_noise.insert("noisy".into(), 3.0);
        let ms = models(&["a", "b"]);
        let count_ties = |who: &str| {
            simulate_records(&truth, &ms, &[MetricId::HumanPreference], 4000, &[who.to_string()], 5)
                .unwrap()
                .iter()
                .filter(|r| r.outcome == Outcome::Tie)
                .count()
        };
        assert!(count_ties("noisy") > count_ties("calm"));
    }

    #[test]
    fn simulated_annotator_is_order_independent() {
        let truth = Arc::new(GroundTruth::uniform(&["a", "b", "c"], &[0.0, 0.3, 0.6], 1.4));
        let ann = SimulatedAnnotator::new(truth, "u1", 77);
        let p1 = PairId::new("x", "a", "b").unwrap().0;
        let p2 = PairId::new("y", "b", "c").unwrap().0;
        let first = (ann.verdicts(&p1).unwrap(), ann.verdicts(&p2).unwrap());
        let second = (ann.verdicts(&p1).unwrap(), ann.verdicts(&p2).unwrap());
        assert_eq!(first, second);
        assert_eq!(first.0.len(), 6);
    }

    #[test]
    fn kendall_tau_examples() {
        let a = models(&["x", "y", "z"]);
        assert_eq!(kendall_tau(&a, &a), 1.0);
        assert_eq!(kendall_tau(&a, &models(&["z", "y", "x"])), -1.0);
        assert!((kendall_tau(&a, &models(&["y", "x", "z"])) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn truth_json_with_default_block() {
        let json = r#"{"default": {"strengths": {"a": 1.0, "b": 2.0}, "theta": 1.2},
                       "metrics": {"human_preference": {"strengths": {"a": 3.0, "b": 1.0}, "theta": 1.1}}}"#;
        let t = GroundTruth::from_json(json).unwrap();
        assert_eq!(t.metric(MetricId::HumanPreference).unwrap().theta, 1.1);
        assert_eq!(t.metric(MetricId::VideoQuality).unwrap().theta, 1.2);
        assert_eq!(t.models(), models(&["a", "b"]));
        assert!(GroundTruth::from_json(r#"{"default": {"strengths": {"a": -1.0}, "theta": 1.2}}"#).is_err());
        assert!(GroundTruth::from_json(r#"{"default": {"strengths": {"a": 1.0}, "theta": 0.5}}"#).is_err());
    }

    #[test]
    fn small_cost_experiment_is_deterministic() {
        let truth = GroundTruth::uniform(&["a", "b", "c"], &[0.0, 0.8, 1.6], 1.3);
        let study = StudyConfig {
            prompts: 40,
            scheduler: SchedulerConfig {
                n0_pairs: 30,
                batch_groups: 4,
                update_every_batches: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = experiment_cost_reduction(&truth, &study, &[1, 2]).unwrap();
        let b = experiment_cost_reduction(&truth, &study, &[1, 2]).unwrap();
        assert_eq!(a, b);
        for r in &a.rows {
            assert!(r.served <= r.total);
            assert_eq!(r.total, 120);
        }
    }

    #[test]
    fn simulated_sessions_match_their_records() {
        let truth = GroundTruth::uniform(&["a", "b", "c"], &[0.0, 0.8, 1.6], 1.3);
        let study = StudyConfig {
            prompts: 20,
            scheduler: SchedulerConfig {
                n0_pairs: 12,
                batch_groups: 2,
                update_every_batches: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let annotators: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let sim = simulate_study(&truth, &study, &annotators, 5).unwrap();
        assert_eq!(sim.videos.len(), 60);
        for (id, run) in &sim.runs {
            let mine: Vec<JudgmentRecord> = sim.records.iter().filter(|r| &r.annotator_id == id).cloned().collect();
            assert_eq!(mine.len(), run.annotation_count * MetricId::ALL.len());
            let tally = crate::domain::tally_from_judgments(&mine, &truth.models()).unwrap();
            assert_eq!(tally, run.tally);
        }
        assert_eq!(sim, simulate_study(&truth, &study, &annotators, 5).unwrap());
    }
}
