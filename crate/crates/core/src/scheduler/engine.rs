//! Event-sourced scheduler state machine.
//!
//! Commands (`pump`, `record`, `mark_unavailable`) never mutate state
//! directly: they emit [`SchedEvent`]s and apply them. Replaying the emitted
//! events through [`Engine::apply`] on a fresh engine rebuilds the same state.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{discard_probability, DrivingScore, SchedulePlan};
use crate::domain::{ComparisonTally, JudgmentRecord, MetricId, Phase, PairId, VideoPair, Verdicts};
use crate::error::{Error, Result};
use crate::rank::{fit_mle, FitOptions, StrengthEstimate};
use crate::rng::{keyed_uniform, STREAM_DISCARD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Disposition {
    Pending,
    Served,
    Judged,
    Discarded { probability: f64, draw: f64 },
    /// The source had no judgment for this pair.
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "batch", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cursor {
    Static,
    Batch(usize),
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Active,
    Complete,
    StoppedEarly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StopState {
    pub consecutive_stable_updates: usize,
    pub last_rankings: Option<BTreeMap<MetricId, Vec<String>>>,
    pub stopped: bool,
}

impl StopState {
    /// Counts a new ranking snapshot.
    pub fn observe(&mut self, rankings: BTreeMap<MetricId, Vec<String>>, window: usize) {
        if self.last_rankings.as_ref() == Some(&rankings) {
            self.consecutive_stable_updates += 1;
        } else {
            self.consecutive_stable_updates = 1;
            self.last_rankings = Some(rankings);
        }
        self.stopped = self.consecutive_stable_updates >= window;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateKind {
    /// Fit at the end of the static phase.
    Initial,
    Cadence,
    /// Fit at plan exhaustion; does not feed the stopping rule.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedEvent {
    PairServed {
        ordinal: usize,
    },
    /// Verdicts in canonical orientation (A = `pair_id.model_a`).
    JudgmentRecorded {
        ordinal: usize,
        verdicts: Verdicts,
    },
    PairUnavailable {
        ordinal: usize,
    },
    BatchStarted {
        batch: usize,
    },
    PairDiscarded {
        ordinal: usize,
        probability: f64,
        draw: f64,
    },
    BatchCompleted {
        batch: usize,
    },
    /// `estimates` is the state after the update; a failed refit carries the
    /// previous estimates and an unchanged stop state.
    EstimatesUpdated {
        kind: UpdateKind,
        refit_ok: bool,
        estimates: Option<StrengthEstimate>,
        stop: StopState,
    },
    SessionStopped {
        status: RunStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub cursor: Cursor,
    /// Ordinal served and awaiting a judgment.
    pub pending: Option<usize>,
    pub dispositions: Vec<Disposition>,
    pub tally: ComparisonTally,
    pub estimates: Option<StrengthEstimate>,
    pub stop: StopState,
    pub batches_completed: usize,
    pub judgments_since_fit: usize,
    pub annotated: usize,
    pub updates: usize,
    pub status: RunStatus,
}

pub struct Engine {
    plan: Arc<SchedulePlan>,
    seed: u64,
    fit: FitOptions,
    index: Vec<(usize, usize)>,
    static_range: Range<usize>,
    batch_ranges: Vec<Range<usize>>,
    state: EngineState,
}

impl Engine {
    /// `seed` keys the discard draws; the plan's own seed is not consulted so
    /// that several sessions can share one plan with independent streams.
    pub fn new(plan: Arc<SchedulePlan>, seed: u64, fit: FitOptions) -> Result<Self> {
        let index: Vec<(usize, usize)> = plan
            .sorted_groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| (0..group.pairs.len()).map(move |k| (g, k)))
            .collect();
        let static_range = 0..plan.static_pair_count();
        let batch_ranges = plan.batch_ranges();
        let state = EngineState {
            cursor: Cursor::Static,
            pending: None,
            dispositions: vec![Disposition::Pending; index.len()],
            tally: ComparisonTally::new(&plan.model_ids())?,
            estimates: None,
            stop: StopState::default(),
            batches_completed: 0,
            judgments_since_fit: 0,
            annotated: 0,
            updates: 0,
            status: RunStatus::Active,
        };
        Ok(Engine {
            plan,
            seed,
            fit,
            index,
            static_range,
            batch_ranges,
            state,
        })
    }

    pub fn plan(&self) -> &Arc<SchedulePlan> {
        &self.plan
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn pair(&self, ordinal: usize) -> Option<&VideoPair> {
        let &(g, k) = self.index.get(ordinal)?;
        Some(&self.plan.sorted_groups[g].pairs[k])
    }

    pub fn pending(&self) -> Option<usize> {
        self.state.pending
    }

    pub fn is_finished(&self) -> bool {
        self.state.status != RunStatus::Active
    }

    pub fn phase_of(&self, ordinal: usize) -> (Phase, u32) {
        if self.static_range.contains(&ordinal) {
            return (Phase::Static, 0);
        }
        let b = self
            .batch_ranges
            .iter()
            .position(|r| r.contains(&ordinal))
            .unwrap_or(self.batch_ranges.len());
        (Phase::Dynamic, b as u32 + 1)
    }

    pub fn disposition_log(&self) -> Vec<DispositionEntry> {
        self.state
            .dispositions
            .iter()
            .enumerate()
            .map(|(ordinal, d)| {
                let (phase, batch_index) = self.phase_of(ordinal);
                DispositionEntry {
                    ordinal,
                    pair_id: self.pair(ordinal).expect("in range").pair_id.clone(),
                    phase,
                    batch_index,
                    disposition: *d,
                }
            })
            .collect()
    }

    /// Ordinal of the first still-pending pair of `range`.
    fn next_pending(&self, range: Range<usize>) -> Option<usize> {
        range.into_iter().find(|&o| self.state.dispositions[o] == Disposition::Pending)
    }

    fn check_ordinal(&self, ordinal: usize) -> Result<()> {
        if ordinal >= self.index.len() {
            return Err(Error::invalid(format!("pair ordinal {ordinal} is out of range")));
        }
        Ok(())
    }

    /// Log-strength gap between the pair's models under the driving score.
    pub fn strength_gap(&self, ordinal: usize) -> f64 {
        let (Some(est), Some(pair)) = (&self.state.estimates, self.pair(ordinal)) else {
            return 0.0;
        };
        let gap_for = |m: MetricId| -> Option<f64> {
            let a = est.strength(m, pair.model_a())?;
            let b = est.strength(m, pair.model_b())?;
            Some((a.ln() - b.ln()).abs())
        };
        match self.plan.config.driving_score {
            DrivingScore::SingleMetric(m) => gap_for(m).unwrap_or(0.0),
            DrivingScore::PerMetricMean => {
                let gaps: Vec<f64> = est.metrics.keys().filter_map(|&m| gap_for(m)).collect();
                if gaps.is_empty() {
                    0.0
                } else {
                    gaps.iter().sum::<f64>() / gaps.len() as f64
                }
            }
        }
    }

    /// Applies one event. Inconsistent events are rejected without changing
    /// state, so a corrupt log cannot produce a half-applied engine.
    pub fn apply(&mut self, event: &SchedEvent) -> Result<()> {
        let st = &mut self.state;
        if st.status != RunStatus::Active {
            return Err(Error::Conflict(format!("event after the session stopped: {event:?}")));
        }
        match event {
            SchedEvent::PairServed { ordinal } => {
                let o = *ordinal;
                if o >= st.dispositions.len() {
                    return Err(Error::invalid(format!("pair ordinal {o} is out of range")));
                }
                if st.pending.is_some() || st.dispositions[o] != Disposition::Pending {
                    return Err(Error::Conflict(format!("pair {o} cannot be served now")));
                }
                st.dispositions[o] = Disposition::Served;
                st.pending = Some(o);
            }
            SchedEvent::JudgmentRecorded { ordinal, verdicts } => {
                let o = *ordinal;
                if st.pending != Some(o) {
                    return Err(Error::Conflict(format!("pair {o} is not the served pair")));
                }
                if verdicts.len() != MetricId::ALL.len() {
                    return Err(Error::invalid(format!(
                        "expected verdicts for all {} metrics, got {}",
                        MetricId::ALL.len(),
                        verdicts.len()
                    )));
                }
                let &(g, k) = &self.index[o];
                let pair_id = &self.plan.sorted_groups[g].pairs[k].pair_id;
                let mut tally = st.tally.clone();
                for (metric, outcome) in verdicts {
                    tally.record(pair_id, *metric, *outcome)?;
                }
                st.tally = tally;
                st.dispositions[o] = Disposition::Judged;
                st.pending = None;
                st.annotated += 1;
                st.judgments_since_fit += 1;
            }
            SchedEvent::PairUnavailable { ordinal } => {
                if st.pending != Some(*ordinal) {
                    return Err(Error::Conflict(format!("pair {ordinal} is not the served pair")));
                }
                st.dispositions[*ordinal] = Disposition::Unavailable;
                st.pending = None;
            }
            SchedEvent::BatchStarted { batch } => {
                let expected = match st.cursor {
                    Cursor::Static => 0,
                    Cursor::Batch(b) => b + 1,
                    Cursor::Finished => usize::MAX,
                };
                if *batch != expected || *batch >= self.batch_ranges.len() || st.pending.is_some() {
                    return Err(Error::Conflict(format!("batch {batch} cannot start now")));
                }
                st.cursor = Cursor::Batch(*batch);
            }
            SchedEvent::PairDiscarded {
                ordinal,
                probability,
                draw,
            } => {
                let o = *ordinal;
                let in_batch = matches!(st.cursor, Cursor::Batch(b) if self.batch_ranges[b].contains(&o));
                if !in_batch || st.dispositions[o] != Disposition::Pending {
                    return Err(Error::Conflict(format!("pair {o} cannot be discarded now")));
                }
                st.dispositions[o] = Disposition::Discarded {
                    probability: *probability,
                    draw: *draw,
                };
            }
            SchedEvent::BatchCompleted { batch } => {
                if st.cursor != Cursor::Batch(*batch) || st.pending.is_some() {
                    return Err(Error::Conflict(format!("batch {batch} cannot complete now")));
                }
                st.batches_completed += 1;
            }
            SchedEvent::EstimatesUpdated { estimates, stop, .. } => {
                st.estimates = estimates.clone();
                st.stop = stop.clone();
                st.judgments_since_fit = 0;
                st.updates += 1;
            }
            SchedEvent::SessionStopped { status } => {
                if *status == RunStatus::Active {
                    return Err(Error::invalid("a session cannot stop into ACTIVE"));
                }
                st.status = *status;
                st.cursor = Cursor::Finished;
            }
        }
        Ok(())
    }

    fn emit(&mut self, event: SchedEvent, out: &mut Vec<SchedEvent>) -> Result<()> {
        self.apply(&event)?;
        out.push(event);
        Ok(())
    }

    fn refit_event(&self, kind: UpdateKind) -> SchedEvent {
        let window = self.plan.config.stability_window;
        let mut stop = self.state.stop.clone();
        match fit_mle(&self.state.tally, &self.fit) {
            Ok(est) => {
                if kind != UpdateKind::Final && !est.metrics.is_empty() {
                    stop.observe(est.rankings(), window);
                }
                SchedEvent::EstimatesUpdated {
                    kind,
                    refit_ok: true,
                    estimates: Some(est),
                    stop,
                }
            }
            Err(_) => SchedEvent::EstimatesUpdated {
                kind,
                refit_ok: false,
                estimates: self.state.estimates.clone(),
                stop,
            },
        }
    }

    fn finish(&mut self, out: &mut Vec<SchedEvent>) -> Result<()> {
        if self.state.judgments_since_fit > 0 {
            let ev = self.refit_event(UpdateKind::Final);
            self.emit(ev, out)?;
        }
        self.emit(
            SchedEvent::SessionStopped {
                status: RunStatus::Complete,
            },
            out,
        )
    }

    fn start_batch(&mut self, batch: usize, out: &mut Vec<SchedEvent>) -> Result<()> {
        self.emit(SchedEvent::BatchStarted { batch }, out)?;
        self.scan_discards(batch, out)
    }

    /// Strengths are fixed for the whole batch, so every discard decision is
    /// taken up front. Rescanning is a no-op once the scan has run, which
    /// lets a replayed log finish a scan cut short.
    fn scan_discards(&mut self, batch: usize, out: &mut Vec<SchedEvent>) -> Result<()> {
        let alpha = self.plan.config.alpha;
        for o in self.batch_ranges[batch].clone() {
            if self.state.dispositions[o] != Disposition::Pending {
                continue;
            }
            let probability = discard_probability(self.strength_gap(o), alpha)?;
            let draw = keyed_uniform(self.seed, STREAM_DISCARD, o as u64);
            if draw < probability {
                self.emit(
                    SchedEvent::PairDiscarded {
                        ordinal: o,
                        probability,
                        draw,
                    },
                    out,
                )?;
            }
        }
        Ok(())
    }

    /// Whether the update due after the last completed batch (or after the
    /// static phase) has been applied.
    fn boundary_fitted(&self) -> bool {
        let every = self.plan.config.update_every_batches;
        self.state.updates > self.state.batches_completed / every
    }

    /// Advances until a pair is awaiting a judgment or the run has ended.
    pub fn pump(&mut self) -> Result<Vec<SchedEvent>> {
        // Every step checks the state for its own effect first, so pumping a
        // state rebuilt from a truncated log emits exactly the missing events.
        let mut out = Vec::new();
        while self.state.status == RunStatus::Active && self.state.pending.is_none() {
            let batch = match self.state.cursor {
                Cursor::Static => {
                    if let Some(o) = self.next_pending(self.static_range.clone()) {
                        self.emit(SchedEvent::PairServed { ordinal: o }, &mut out)?;
                        continue;
                    }
                    None
                }
                Cursor::Batch(b) => {
                    if self.state.batches_completed <= b {
                        self.scan_discards(b, &mut out)?;
                        if let Some(o) = self.next_pending(self.batch_ranges[b].clone()) {
                            self.emit(SchedEvent::PairServed { ordinal: o }, &mut out)?;
                            continue;
                        }
                        self.emit(SchedEvent::BatchCompleted { batch: b }, &mut out)?;
                    }
                    Some(b)
                }
                Cursor::Finished => break,
            };
            let every = self.plan.config.update_every_batches;
            if !self.boundary_fitted() && self.state.batches_completed.is_multiple_of(every) {
                let kind = if batch.is_some() { UpdateKind::Cadence } else { UpdateKind::Initial };
                let ev = self.refit_event(kind);
                self.emit(ev, &mut out)?;
            }
            if self.state.stop.stopped {
                self.emit(
                    SchedEvent::SessionStopped {
                        status: RunStatus::StoppedEarly,
                    },
                    &mut out,
                )?;
                continue;
            }
            let next = batch.map_or(0, |b| b + 1);
            if next < self.batch_ranges.len() {
                self.start_batch(next, &mut out)?;
            } else {
                self.finish(&mut out)?;
            }
        }
        Ok(out)
    }

    /// Records canonical-orientation verdicts for the served pair and pumps.
    pub fn record(&mut self, ordinal: usize, verdicts: Verdicts) -> Result<Vec<SchedEvent>> {
        self.check_ordinal(ordinal)?;
        let mut out = Vec::new();
        self.emit(SchedEvent::JudgmentRecorded { ordinal, verdicts }, &mut out)?;
        out.extend(self.pump()?);
        Ok(out)
    }

    /// Skips the served pair without a judgment and pumps.
    pub fn mark_unavailable(&mut self, ordinal: usize) -> Result<Vec<SchedEvent>> {
        self.check_ordinal(ordinal)?;
        let mut out = Vec::new();
        self.emit(SchedEvent::PairUnavailable { ordinal }, &mut out)?;
        out.extend(self.pump()?);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispositionEntry {
    pub ordinal: usize,
    pub pair_id: PairId,
    pub phase: Phase,
    pub batch_index: u32,
    pub disposition: Disposition,
}

/// Supplies verdicts for served pairs; `Ok(None)` means no judgment exists.
pub trait JudgmentSource {
    fn judge(&mut self, pair: &VideoPair, phase: Phase) -> Result<Option<Verdicts>>;
}

impl<F> JudgmentSource for F
where
    F: FnMut(&VideoPair, Phase) -> Result<Option<Verdicts>>,
{
    fn judge(&mut self, pair: &VideoPair, phase: Phase) -> Result<Option<Verdicts>> {
        self(pair, phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicRun {
    pub estimates: Option<StrengthEstimate>,
    pub dispositions: Vec<DispositionEntry>,
    /// Pairs judged by the source.
    pub annotation_count: usize,
    pub total_pairs: usize,
    pub stop: StopState,
    pub status: RunStatus,
    pub updates: usize,
    pub tally: ComparisonTally,
}

impl DynamicRun {
    pub fn served_fraction(&self) -> f64 {
        if self.total_pairs == 0 {
            0.0
        } else {
            self.annotation_count as f64 / self.total_pairs as f64
        }
    }

    pub fn discarded(&self) -> usize {
        self.dispositions
            .iter()
            .filter(|d| matches!(d.disposition, Disposition::Discarded { .. }))
            .count()
    }
}

/// Drives the plan to completion against `source`, keyed by the plan's seed.
pub fn run_dynamic<S: JudgmentSource + ?Sized>(
    plan: Arc<SchedulePlan>,
    source: &mut S,
    fit: &FitOptions,
) -> Result<DynamicRun> {
    let seed = plan.config.seed;
    run_dynamic_seeded(plan, seed, source, fit)
}

/// [`run_dynamic`] with an explicit discard seed.
pub fn run_dynamic_seeded<S: JudgmentSource + ?Sized>(
    plan: Arc<SchedulePlan>,
    seed: u64,
    source: &mut S,
    fit: &FitOptions,
) -> Result<DynamicRun> {
    let mut engine = Engine::new(plan, seed, fit.clone())?;
    engine.pump()?;
    while let Some(o) = engine.pending() {
        let (phase, _) = engine.phase_of(o);
        let pair = engine.pair(o).expect("pending ordinal is valid");
        match source.judge(pair, phase)? {
            Some(v) => engine.record(o, v)?,
            None => engine.mark_unavailable(o)?,
        };
    }
    let dispositions = engine.disposition_log();
    let st = engine.state;
    Ok(DynamicRun {
        estimates: st.estimates,
        dispositions,
        annotation_count: st.annotated,
        total_pairs: st.dispositions.len(),
        stop: st.stop,
        status: st.status,
        updates: st.updates,
        tally: st.tally,
    })
}

/// Expands one pair's verdicts into per-metric records.
pub fn judgment_records(
    pair_id: &PairId,
    verdicts: &Verdicts,
    phase: Phase,
    batch_index: u32,
    annotator_id: &str,
    session_id: &str,
    timestamp: DateTime<Utc>,
) -> Vec<JudgmentRecord> {
    verdicts
        .iter()
        .map(|(metric, outcome)| JudgmentRecord {
            annotator_id: annotator_id.to_owned(),
            pair_id: pair_id.clone(),
            metric: *metric,
            outcome: *outcome,
            phase,
            batch_index,
            timestamp,
            session_id: session_id.to_owned(),
        })
        .collect()
}
