//! Live annotation studies: one scheduler per (study, annotator), an
//! append-only event log per study, and pooled rankings.
//!
//! Everything that changes a study goes through the log. A study rebuilt by
//! [`Study::replay`] from its log is indistinguishable from the original,
//! and [`Study::resume`] finishes any command that was cut short by a crash.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    build_groups, tally_from_judgments, JudgmentRecord, MetricId, MetricKind, Outcome, PairId, Phase,
    Prompt, Verdicts, Video,
};
use crate::error::{Error, Result};
use crate::features::{normalize_and_sum, AutoMetricTable};
use crate::rank::{fit_mle_or_smooth, FitOptions, StrengthEstimate};
use crate::rng::{keyed_uniform, session_seed, STREAM_ORIENTATION};
use crate::scheduler::{
    build_plan, judgment_records, Engine, EngineState, RunStatus, SchedEvent, SchedulePlan, SchedulerConfig,
    StopState, UpdateKind,
};

/// Body of a create-study request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub videos: Vec<Video>,
    #[serde(default)]
    pub prompts: Vec<Prompt>,
    /// Raw automatic-metric scores `{video_id: {metric: value}}`. When absent,
    /// every video must carry its own `feature_score`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    #[serde(default)]
    pub allow_partial_features: bool,
    #[serde(default)]
    pub config: SchedulerConfig,
    #[serde(default)]
    pub fit: FitOptions,
}

impl StudySpec {
    /// Fills in feature scores and checks cross references.
    pub fn resolve(mut self) -> Result<Self> {
        if self.videos.is_empty() {
            return Err(Error::invalid("videos: a study needs at least one video"));
        }
        if !self.prompts.is_empty() {
            let known: std::collections::BTreeSet<&str> = self.prompts.iter().map(|p| p.id.as_str()).collect();
            if let Some(v) = self.videos.iter().find(|v| !known.contains(v.prompt_id.as_str())) {
                return Err(Error::invalid(format!(
                    "videos[{}].prompt_id: unknown prompt `{}`",
                    v.id, v.prompt_id
                )));
            }
        }
        if let Some(raw) = self.features.take() {
            let table = AutoMetricTable::from_map(raw).restrict_to(self.videos.iter().map(|v| v.id.as_str()))?;
            let scores = normalize_and_sum(&table, self.allow_partial_features)?;
            for v in &mut self.videos {
                v.feature_score = scores.get(&v.id).copied();
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StudyEvent {
    StudyCreated {
        study_id: String,
        /// Resolved spec: feature scores filled in, raw features dropped.
        spec: StudySpec,
    },
    SessionCreated {
        session_id: String,
        annotator_id: String,
        seed: u64,
    },
    PairServed {
        session_id: String,
        ordinal: usize,
        pair_id: PairId,
        /// The left video shows `model_b`.
        swapped: bool,
    },
    JudgmentRecorded {
        session_id: String,
        ordinal: usize,
        records: Vec<JudgmentRecord>,
    },
    PairUnavailable {
        session_id: String,
        ordinal: usize,
    },
    BatchStarted {
        session_id: String,
        batch: usize,
    },
    PairDiscarded {
        session_id: String,
        ordinal: usize,
        pair_id: PairId,
        probability: f64,
        draw: f64,
    },
    BatchCompleted {
        session_id: String,
        batch: usize,
    },
    EstimatesUpdated {
        session_id: String,
        kind: UpdateKind,
        refit_ok: bool,
        estimates: Option<StrengthEstimate>,
        stop: StopState,
    },
    SessionStopped {
        session_id: String,
        status: RunStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: StudyEvent,
}

impl StudyEvent {
    fn session_id(&self) -> Option<&str> {
        match self {
            StudyEvent::StudyCreated { .. } | StudyEvent::SessionCreated { .. } => None,
            StudyEvent::PairServed { session_id, .. }
            | StudyEvent::JudgmentRecorded { session_id, .. }
            | StudyEvent::PairUnavailable { session_id, .. }
            | StudyEvent::BatchStarted { session_id, .. }
            | StudyEvent::PairDiscarded { session_id, .. }
            | StudyEvent::BatchCompleted { session_id, .. }
            | StudyEvent::EstimatesUpdated { session_id, .. }
            | StudyEvent::SessionStopped { session_id, .. } => Some(session_id),
        }
    }

    fn to_sched(&self) -> Option<SchedEvent> {
        Some(match self.clone() {
            StudyEvent::StudyCreated { .. } | StudyEvent::SessionCreated { .. } => return None,
            StudyEvent::PairServed { ordinal, .. } => SchedEvent::PairServed { ordinal },
            StudyEvent::JudgmentRecorded { ordinal, records, .. } => SchedEvent::JudgmentRecorded {
                ordinal,
                verdicts: records.iter().map(|r| (r.metric, r.outcome)).collect(),
            },
            StudyEvent::PairUnavailable { ordinal, .. } => SchedEvent::PairUnavailable { ordinal },
            StudyEvent::BatchStarted { batch, .. } => SchedEvent::BatchStarted { batch },
            StudyEvent::PairDiscarded {
                ordinal,
                probability,
                draw,
                ..
            } => SchedEvent::PairDiscarded {
                ordinal,
                probability,
                draw,
            },
            StudyEvent::BatchCompleted { batch, .. } => SchedEvent::BatchCompleted { batch },
            StudyEvent::EstimatesUpdated {
                kind,
                refit_ok,
                estimates,
                stop,
                ..
            } => SchedEvent::EstimatesUpdated {
                kind,
                refit_ok,
                estimates,
                stop,
            },
            StudyEvent::SessionStopped { status, .. } => SchedEvent::SessionStopped { status },
        })
    }
}

/// Whether the left video shows `model_b` at this serving.
pub fn orientation(seed: u64, ordinal: usize) -> bool {
    keyed_uniform(seed, STREAM_ORIENTATION, ordinal as u64) < 0.5
}

pub struct Session {
    pub id: String,
    pub annotator_id: String,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    engine: Engine,
    swapped: BTreeMap<usize, bool>,
    records: Vec<JudgmentRecord>,
}

impl Session {
    pub fn state(&self) -> &EngineState {
        self.engine.state()
    }

    pub fn status(&self) -> RunStatus {
        self.engine.state().status
    }

    pub fn records(&self) -> &[JudgmentRecord] {
        &self.records
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub study_id: String,
    pub annotator_id: String,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub judged: usize,
    pub total_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaView {
    pub video_id: String,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPanel {
    pub metric: MetricId,
    pub kind: MetricKind,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPayload {
    pub pair_id: PairId,
    pub prompt_id: String,
    pub prompt_text: Option<String>,
    pub left: MediaView,
    pub right: MediaView,
    pub phase: Phase,
    pub batch_index: u32,
    pub metrics: Vec<MetricPanel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextPair {
    pub session_id: String,
    pub status: RunStatus,
    pub pair: Option<PairPayload>,
    pub judged: usize,
    pub total_pairs: usize,
}

/// Verdicts as seen on screen: `A_WINS` means the left video won.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentRequest {
    pub pair_id: PairId,
    pub verdicts: BTreeMap<MetricId, Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentAck {
    pub records_appended: usize,
    /// A strength update ran as a consequence of this judgment.
    pub updated: bool,
    pub rankings_changed: bool,
    pub current_rankings: Option<BTreeMap<MetricId, Vec<String>>>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RankingsStatus {
    StaticPhaseInProgress,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanking {
    pub ranking: Vec<String>,
    pub strengths: BTreeMap<String, f64>,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingsView {
    pub study_id: String,
    pub status: RankingsStatus,
    /// Judged pairs across all sessions.
    pub annotation_count: usize,
    pub as_of_seq: u64,
    pub smoothed: bool,
    pub metrics: BTreeMap<MetricId, MetricRanking>,
}

#[derive(Debug, Clone)]
pub struct RankingsInput {
    pub study_id: String,
    pub any_update: bool,
    pub annotation_count: usize,
    pub as_of_seq: u64,
    pub model_ids: Vec<String>,
    pub records: Vec<JudgmentRecord>,
    pub fit: FitOptions,
}

impl RankingsInput {
    pub fn compute(&self) -> Result<RankingsView> {
        let mut view = RankingsView {
            study_id: self.study_id.clone(),
            status: RankingsStatus::StaticPhaseInProgress,
            annotation_count: self.annotation_count,
            as_of_seq: self.as_of_seq,
            smoothed: false,
            metrics: BTreeMap::new(),
        };
        if !self.any_update {
            return Ok(view);
        }
        let tally = tally_from_judgments(&self.records, &self.model_ids)?;
        let (est, smoothed) = fit_mle_or_smooth(&tally, &self.fit)?;
        view.status = RankingsStatus::Ready;
        view.smoothed = smoothed;
        view.metrics = est
            .metrics
            .iter()
            .map(|(m, e)| {
                let strengths = est.model_ids.iter().cloned().zip(e.p.iter().copied()).collect();
                (
                    *m,
                    MetricRanking {
                        ranking: e.ranking.clone(),
                        strengths,
                        theta: e.theta,
                    },
                )
            })
            .collect();
        Ok(view)
    }
}

pub struct Study {
    pub id: String,
    pub created_at: DateTime<Utc>,
    spec: StudySpec,
    plan: Arc<SchedulePlan>,
    prompts: BTreeMap<String, Prompt>,
    sessions: BTreeMap<String, Session>,
    log: Vec<LogEntry>,
    rankings_cache: Option<RankingsView>,
}

impl Study {
    pub fn create(study_id: &str, spec: StudySpec, now: DateTime<Utc>) -> Result<Self> {
        let spec = spec.resolve()?;
        let mut study = Self::from_resolved(study_id, spec.clone(), now)?;
        study.log.push(LogEntry {
            seq: 1,
            at: now,
            event: StudyEvent::StudyCreated {
                study_id: study_id.to_owned(),
                spec,
            },
        });
        Ok(study)
    }

    fn from_resolved(study_id: &str, spec: StudySpec, now: DateTime<Utc>) -> Result<Self> {
        let plan = Arc::new(build_plan(build_groups(&spec.videos)?, &spec.config)?);
        let prompts = spec.prompts.iter().map(|p| (p.id.clone(), p.clone())).collect();
        Ok(Study {
            id: study_id.to_owned(),
            created_at: now,
            spec,
            plan,
            prompts,
            sessions: BTreeMap::new(),
            log: Vec::new(),
            rankings_cache: None,
        })
    }

    pub fn plan(&self) -> &Arc<SchedulePlan> {
        &self.plan
    }

    pub fn spec(&self) -> &StudySpec {
        &self.spec
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn records(&self) -> Vec<JudgmentRecord> {
        self.sessions.values().flat_map(|s| s.records.iter().cloned()).collect()
    }

    fn next_seq(&self) -> u64 {
        self.log.last().map_or(1, |e| e.seq + 1)
    }

    /// Applies an event to in-memory state; the caller appends it to the log.
    fn apply(&mut self, event: &StudyEvent, at: DateTime<Utc>) -> Result<()> {
        match event {
            StudyEvent::StudyCreated { .. } => {
                return Err(Error::Conflict("study already created".into()));
            }
            StudyEvent::SessionCreated {
                session_id,
                annotator_id,
                seed,
            } => {
                if self.sessions.contains_key(session_id) {
                    return Err(Error::Conflict(format!("session `{session_id}` already exists")));
                }
                let engine = Engine::new(self.plan.clone(), *seed, self.spec.fit.clone())?;
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        id: session_id.clone(),
                        annotator_id: annotator_id.clone(),
                        seed: *seed,
                        created_at: at,
                        updated_at: at,
                        engine,
                        swapped: BTreeMap::new(),
                        records: Vec::new(),
                    },
                );
            }
            other => {
                let sid = other.session_id().expect("session event");
                let session = self
                    .sessions
                    .get_mut(sid)
                    .ok_or_else(|| Error::NotFound(format!("session `{sid}`")))?;
                let sched = other.to_sched().expect("session event");
                session.engine.apply(&sched)?;
                match other {
                    StudyEvent::PairServed { ordinal, swapped, .. } => {
                        session.swapped.insert(*ordinal, *swapped);
                    }
                    StudyEvent::JudgmentRecorded { records, .. } => {
                        session.records.extend(records.iter().cloned());
                    }
                    _ => {}
                }
                session.updated_at = at;
            }
        }
        self.rankings_cache = None;
        Ok(())
    }

    fn push(&mut self, event: StudyEvent, at: DateTime<Utc>) -> Result<()> {
        self.apply(&event, at)?;
        let seq = self.next_seq();
        self.log.push(LogEntry { seq, at, event });
        Ok(())
    }

    /// Logs scheduler events emitted by a session's engine. The engine has
    /// already applied them, so only session-side bookkeeping happens here.
    fn log_sched(&mut self, session_id: &str, events: Vec<SchedEvent>, at: DateTime<Utc>, judge: Option<(&str, DateTime<Utc>)>) -> Result<()> {
        for ev in events {
            let session = self.sessions.get_mut(session_id).expect("caller checked");
            let study_event = match ev {
                SchedEvent::PairServed { ordinal } => {
                    let swapped = orientation(session.seed, ordinal);
                    session.swapped.insert(ordinal, swapped);
                    StudyEvent::PairServed {
                        session_id: session_id.to_owned(),
                        ordinal,
                        pair_id: session.engine.pair(ordinal).expect("valid").pair_id.clone(),
                        swapped,
                    }
                }
                SchedEvent::JudgmentRecorded { ordinal, verdicts } => {
                    let (annotator, ts) = judge.expect("judgments come from record_judgment");
                    let (phase, batch_index) = session.engine.phase_of(ordinal);
                    let pair_id = session.engine.pair(ordinal).expect("valid").pair_id.clone();
                    let records = judgment_records(&pair_id, &verdicts, phase, batch_index, annotator, session_id, ts);
                    session.records.extend(records.iter().cloned());
                    StudyEvent::JudgmentRecorded {
                        session_id: session_id.to_owned(),
                        ordinal,
                        records,
                    }
                }
                SchedEvent::PairUnavailable { ordinal } => StudyEvent::PairUnavailable {
                    session_id: session_id.to_owned(),
                    ordinal,
                },
                SchedEvent::BatchStarted { batch } => StudyEvent::BatchStarted {
                    session_id: session_id.to_owned(),
                    batch,
                },
                SchedEvent::PairDiscarded {
                    ordinal,
                    probability,
                    draw,
                } => StudyEvent::PairDiscarded {
                    session_id: session_id.to_owned(),
                    ordinal,
                    pair_id: session.engine.pair(ordinal).expect("valid").pair_id.clone(),
                    probability,
                    draw,
                },
                SchedEvent::BatchCompleted { batch } => StudyEvent::BatchCompleted {
                    session_id: session_id.to_owned(),
                    batch,
                },
                SchedEvent::EstimatesUpdated {
                    kind,
                    refit_ok,
                    estimates,
                    stop,
                } => StudyEvent::EstimatesUpdated {
                    session_id: session_id.to_owned(),
                    kind,
                    refit_ok,
                    estimates,
                    stop,
                },
                SchedEvent::SessionStopped { status } => StudyEvent::SessionStopped {
                    session_id: session_id.to_owned(),
                    status,
                },
            };
            session.updated_at = at;
            let seq = self.next_seq();
            self.log.push(LogEntry {
                seq,
                at,
                event: study_event,
            });
        }
        self.rankings_cache = None;
        Ok(())
    }

    fn info(&self, session: &Session) -> SessionInfo {
        SessionInfo {
            session_id: session.id.clone(),
            study_id: self.id.clone(),
            annotator_id: session.annotator_id.clone(),
            status: session.status(),
            created_at: session.created_at,
            updated_at: session.updated_at,
            judged: session.state().annotated,
            total_pairs: self.plan.total_pairs,
        }
    }

    /// Opens the annotator's session, or returns the one they already have.
    pub fn create_session(&mut self, annotator_id: &str, now: DateTime<Utc>) -> Result<SessionInfo> {
        if annotator_id.trim().is_empty() {
            return Err(Error::invalid("annotator_id: must not be empty"));
        }
        if let Some(s) = self.sessions.values().find(|s| s.annotator_id == annotator_id) {
            return Ok(self.info(s));
        }
        let session_id = format!("{}-s{:04}", self.id, self.sessions.len() + 1);
        self.push(
            StudyEvent::SessionCreated {
                session_id: session_id.clone(),
                annotator_id: annotator_id.to_owned(),
                seed: session_seed(self.plan.config.seed, annotator_id),
            },
            now,
        )?;
        let events = self.sessions.get_mut(&session_id).expect("just created").engine.pump()?;
        self.log_sched(&session_id, events, now, None)?;
        Ok(self.info(&self.sessions[&session_id]))
    }

    pub fn session_info(&self, session_id: &str) -> Result<SessionInfo> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))?;
        Ok(self.info(s))
    }

    /// The served pair, oriented as logged at first serving.
    pub fn next_pair(&self, session_id: &str) -> Result<NextPair> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))?;
        let pair = s.engine.pending().map(|o| {
            let pair = s.engine.pair(o).expect("valid");
            let swapped = s.swapped.get(&o).copied().unwrap_or_else(|| orientation(s.seed, o));
            let (left, right) = if swapped {
                (&pair.video_b, &pair.video_a)
            } else {
                (&pair.video_a, &pair.video_b)
            };
            let (phase, batch_index) = s.engine.phase_of(o);
            PairPayload {
                pair_id: pair.pair_id.clone(),
                prompt_id: pair.prompt_id.clone(),
                prompt_text: self.prompts.get(&pair.prompt_id).map(|p| p.text.clone()),
                left: MediaView {
                    video_id: left.id.clone(),
                    uri: left.uri.clone(),
                },
                right: MediaView {
                    video_id: right.id.clone(),
                    uri: right.uri.clone(),
                },
                phase,
                batch_index,
                metrics: MetricId::ALL
                    .iter()
                    .map(|m| MetricPanel {
                        metric: *m,
                        kind: m.kind(),
                        instruction: m.instruction().to_owned(),
                    })
                    .collect(),
            }
        });
        Ok(NextPair {
            session_id: s.id.clone(),
            status: s.status(),
            pair,
            judged: s.state().annotated,
            total_pairs: self.plan.total_pairs,
        })
    }

    pub fn record_judgment(&mut self, session_id: &str, request: &JudgmentRequest, now: DateTime<Utc>) -> Result<JudgmentAck> {
        let session = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session `{session_id}`")))?;
        if session.status() != RunStatus::Active {
            return Err(Error::Conflict(format!("session `{session_id}` is {:?}", session.status())));
        }
        let Some(ordinal) = session.engine.pending() else {
            return Err(Error::Conflict("no pair is awaiting a judgment".into()));
        };
        let pair_id = &session.engine.pair(ordinal).expect("valid").pair_id;
        if pair_id != &request.pair_id {
            return Err(Error::Conflict(format!(
                "pair `{}` is not the served pair (`{pair_id}`)",
                request.pair_id
            )));
        }
        let missing: Vec<&str> = MetricId::ALL
            .iter()
            .filter(|m| !request.verdicts.contains_key(m))
            .map(|m| m.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("verdicts: missing {}", missing.join(", "))));
        }
        let swapped = session.swapped.get(&ordinal).copied().unwrap_or(false);
        let verdicts: Verdicts = request
            .verdicts
            .iter()
            .map(|(m, o)| (*m, o.canonical(swapped)))
            .collect();
        let before = session.state().estimates.as_ref().map(StrengthEstimate::rankings);
        let annotator = session.annotator_id.clone();
        let events = session.engine.record(ordinal, verdicts)?;
        let updated = events.iter().any(|e| matches!(e, SchedEvent::EstimatesUpdated { .. }));
        let after = session.state().estimates.as_ref().map(StrengthEstimate::rankings);
        let status = session.status();
        self.log_sched(session_id, events, now, Some((&annotator, now)))?;
        Ok(JudgmentAck {
            records_appended: MetricId::ALL.len(),
            updated,
            rankings_changed: updated && before != after,
            current_rankings: if updated { after } else { None },
            status,
        })
    }

    /// Pooled strengths over every session's judgments.
    pub fn rankings(&mut self) -> Result<RankingsView> {
        if let Some(cached) = &self.rankings_cache {
            return Ok(cached.clone());
        }
        let view = self.rankings_input().compute()?;
        self.rankings_cache = Some(view.clone());
        Ok(view)
    }

    /// Everything [`RankingsInput::compute`] needs, so the fit can run
    /// without holding the study.
    pub fn rankings_input(&self) -> RankingsInput {
        RankingsInput {
            study_id: self.id.clone(),
            any_update: self.sessions.values().any(|s| s.state().updates > 0),
            annotation_count: self.sessions.values().map(|s| s.state().annotated).sum(),
            as_of_seq: self.log.last().map_or(0, |e| e.seq),
            model_ids: self.plan.model_ids(),
            records: self.records(),
            fit: self.spec.fit.clone(),
        }
    }

    pub fn write_log<W: Write>(&self, mut writer: W) -> Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn export_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_log(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Rebuilds a study from its log entries.
    pub fn from_entries(entries: Vec<LogEntry>) -> Result<Self> {
        let corrupt = |line: usize, last: Option<u64>, reason: String| Error::CorruptLog {
            line,
            last_valid_seq: last,
            reason,
        };
        let mut iter = entries.into_iter();
        let first = iter.next().ok_or_else(|| corrupt(1, None, "empty log".into()))?;
        let mut study = match first.event.clone() {
            StudyEvent::StudyCreated { study_id, spec } if first.seq == 1 => {
                Self::from_resolved(&study_id, spec, first.at).map_err(|e| corrupt(1, None, e.to_string()))?
            }
            _ => return Err(corrupt(1, None, "log must start with STUDY_CREATED at seq 1".into())),
        };
        study.log.push(first);
        for (i, entry) in iter.enumerate() {
            let line = i + 2;
            let last = study.log.last().map(|e| e.seq);
            if Some(entry.seq) != last.map(|s| s + 1) {
                return Err(corrupt(line, last, format!("sequence number {} out of order", entry.seq)));
            }
            study
                .apply(&entry.event, entry.at)
                .map_err(|e| corrupt(line, last, e.to_string()))?;
            study.log.push(entry);
        }
        Ok(study)
    }

    /// Parses and replays a JSONL log. Errors name the first bad line.
    pub fn replay<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(&line).map_err(|e| Error::CorruptLog {
                line: i + 1,
                last_valid_seq: entries.last().map(|e: &LogEntry| e.seq),
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    /// Finishes work a crash may have cut short: sessions with no served pair
    /// are pumped again. Returns the number of entries appended.
    pub fn resume(&mut self, now: DateTime<Utc>) -> Result<usize> {
        let before = self.log.len();
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        for id in ids {
            let events = self.sessions.get_mut(&id).expect("listed").engine.pump()?;
            self.log_sched(&id, events, now, None)?;
        }
        Ok(self.log.len() - before)
    }
}

/// Appends entries to a JSONL log file, syncing before returning.
pub fn append_entries(path: &Path, entries: &[LogEntry]) -> Result<()> {
    if entries.is_empty() {
        return Ok(());
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.sync_data()?;
    Ok(())
}

pub fn load_study(path: &Path) -> Result<Study> {
    let file = std::fs::File::open(path)?;
    Study::replay(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Outcome;

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    fn spec(models: &[&str], prompts: usize) -> StudySpec {
        let mut videos = Vec::new();
        let mut features = BTreeMap::new();
        for p in 0..prompts {
            for (k, m) in models.iter().enumerate() {
                let id = format!("p{p}-{m}");
                features.insert(
                    id.clone(),
                    [("aesthetic_quality".to_string(), ((p * 3 + k) % 7) as f64)].into(),
                );
                videos.push(Video {
                    id,
                    prompt_id: format!("p{p}"),
                    model_id: m.to_string(),
                    uri: format!("/media/p{p}/{m}.mp4"),
                    feature_score: None,
                });
            }
        }
        StudySpec {
            videos,
            prompts: (0..prompts)
                .map(|p| Prompt {
                    id: format!("p{p}"),
                    text: format!("prompt number {p}"),
                    category: "test".into(),
                })
                .collect(),
            features: Some(features),
            allow_partial_features: false,
            config: SchedulerConfig {
                n0_pairs: 3,
                batch_groups: 2,
                update_every_batches: 1,
                ..Default::default()
            },
            fit: FitOptions::default(),
        }
    }

    fn left_wins() -> BTreeMap<MetricId, Outcome> {
        MetricId::ALL.iter().map(|m| (*m, Outcome::AWins)).collect()
    }

    #[test]
    fn five_models_two_hundred_prompts_is_two_thousand_pairs() {
        let study = Study::create("s1", spec(&["a", "b", "c", "d", "e"], 200), t0()).unwrap();
        assert_eq!(study.plan().total_pairs, 2000);
    }

    #[test]
    fn two_models_one_prompt_is_one_pair() {
        let study = Study::create("s1", spec(&["a", "b"], 1), t0()).unwrap();
        assert_eq!(study.plan().total_pairs, 1);
    }

    #[test]
    fn missing_features_name_the_video() {
        let mut sp = spec(&["a", "b"], 2);
        sp.features.as_mut().unwrap().remove("p1-b");
        match Study::create("s1", sp, t0()) {
            Err(Error::MissingFeature(v)) => assert_eq!(v, vec!["p1-b".to_string()]),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn next_is_idempotent_and_judging_advances() {
        let mut study = Study::create("s1", spec(&["a", "b", "c"], 6), t0()).unwrap();
        let info = study.create_session("ann", t0()).unwrap();
        let first = study.next_pair(&info.session_id).unwrap();
        assert_eq!(first, study.next_pair(&info.session_id).unwrap());
        let pair = first.pair.unwrap();
        assert_eq!(pair.pair_id, study.plan().sorted_groups[0].pairs[0].pair_id);
        let ack = study
            .record_judgment(
                &info.session_id,
                &JudgmentRequest {
                    pair_id: pair.pair_id.clone(),
                    verdicts: left_wins(),
                },
                t0(),
            )
            .unwrap();
        assert_eq!(ack.records_appended, 6);
        assert_eq!(study.records().len(), 6);
        // left won, so the canonical outcome depends on the orientation
        let left_model = study
            .spec()
            .videos
            .iter()
            .find(|v| v.id == pair.left.video_id)
            .unwrap()
            .model_id
            .clone();
        let rec = &study.records()[0];
        let expected = if left_model.as_str() == rec.pair_id.model_a() {
            Outcome::AWins
        } else {
            Outcome::BWins
        };
        assert_eq!(rec.outcome, expected);
        // the same pair cannot be judged twice
        let again = study.record_judgment(
            &info.session_id,
            &JudgmentRequest {
                pair_id: pair.pair_id,
                verdicts: left_wins(),
            },
            t0(),
        );
        assert!(matches!(again, Err(Error::Conflict(_))));
    }

    #[test]
    fn partial_verdicts_are_rejected() {
        let mut study = Study::create("s1", spec(&["a", "b"], 3), t0()).unwrap();
        let info = study.create_session("ann", t0()).unwrap();
        let pair = study.next_pair(&info.session_id).unwrap().pair.unwrap();
        let mut v = left_wins();
        v.remove(&MetricId::HumanPreference);
        let err = study
            .record_judgment(&info.session_id, &JudgmentRequest { pair_id: pair.pair_id, verdicts: v }, t0())
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("human_preference"));
    }

    #[test]
    fn same_annotator_gets_same_session() {
        let mut study = Study::create("s1", spec(&["a", "b"], 3), t0()).unwrap();
        let a = study.create_session("ann", t0()).unwrap();
        let b = study.create_session("ann", t0()).unwrap();
        assert_eq!(a.session_id, b.session_id);
        let c = study.create_session("other", t0()).unwrap();
        assert_ne!(a.session_id, c.session_id);
    }

    #[test]
    fn rankings_before_and_after_static_phase() {
        let mut study = Study::create("s1", spec(&["a", "b", "c"], 4), t0()).unwrap();
        assert_eq!(study.rankings().unwrap().status, RankingsStatus::StaticPhaseInProgress);
        let info = study.create_session("ann", t0()).unwrap();
        let mut updated = false;
        while let Some(p) = study.next_pair(&info.session_id).unwrap().pair {
            let ack = study
                .record_judgment(&info.session_id, &JudgmentRequest { pair_id: p.pair_id, verdicts: left_wins() }, t0())
                .unwrap();
            updated |= ack.updated;
        }
        assert!(updated);
        let view = study.rankings().unwrap();
        assert_eq!(view.status, RankingsStatus::Ready);
        assert_eq!(view.metrics.len(), 6);
        assert_eq!(view, study.rankings().unwrap());
        assert_ne!(study.next_pair(&info.session_id).unwrap().status, RunStatus::Active);
    }

    #[test]
    fn log_replay_round_trip() {
        let mut study = Study::create("s1", spec(&["a", "b", "c"], 6), t0()).unwrap();
        for who in ["x", "y"] {
            let info = study.create_session(who, t0()).unwrap();
            for _ in 0..5 {
                let Some(p) = study.next_pair(&info.session_id).unwrap().pair else { break };
                study
                    .record_judgment(&info.session_id, &JudgmentRequest { pair_id: p.pair_id, verdicts: left_wins() }, t0())
                    .unwrap();
            }
        }
        let text = study.export_jsonl();
        let back = Study::replay(text.as_bytes()).unwrap();
        assert_eq!(back.export_jsonl(), text);
        for s in study.sessions() {
            assert_eq!(back.session(&s.id).unwrap().state(), s.state());
        }
    }

    #[test]
    fn corrupt_log_reports_last_valid_seq() {
        let mut study = Study::create("s1", spec(&["a", "b"], 3), t0()).unwrap();
        study.create_session("x", t0()).unwrap();
        let mut text = study.export_jsonl();
        let n = study.log().len() as u64;
        text.push_str("{\"seq\": 99, \"at\": \"garbage\"\n");
        match Study::replay(text.as_bytes()) {
            Err(Error::CorruptLog { line, last_valid_seq, .. }) => {
                assert_eq!(line as u64, n + 1);
                assert_eq!(last_valid_seq, Some(n));
            }
            other => panic!("{:?}", other.err()),
        }
    }
}
