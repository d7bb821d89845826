//! Study reports: strengths next to the win-ratio baseline, agreement, and a
//! summary of scheduler dispositions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agreement::{inter_annotator_agreement, AgreementReport};
use crate::bootstrap::ConfidenceReport;
use crate::domain::{models_in_records, read_records_jsonl, tally_from_judgments, JudgmentRecord, MetricId};
use crate::error::{Error, Result};
use crate::rank::{fit_mle_or_smooth, win_ratio, FitOptions};
use crate::scheduler::{Disposition, RunStatus};
use crate::service::Study;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ranking: Vec<String>,
    pub strengths: BTreeMap<String, f64>,
    pub theta: f64,
    pub win_ratio: BTreeMap<String, Option<f64>>,
    pub judgments: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispositionSummary {
    pub sessions: usize,
    pub total_pairs_per_session: usize,
    pub judged: usize,
    pub discarded: usize,
    pub unavailable: usize,
    /// Never reached because the session stopped or is still running.
    pub pending: usize,
    pub complete_sessions: usize,
    pub stopped_early_sessions: usize,
    pub active_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub models: Vec<String>,
    pub annotators: Vec<String>,
    pub judgments: usize,
    /// Distinct (session, pair) judgments.
    pub annotation_count: usize,
    pub smoothed: bool,
    pub metrics: BTreeMap<MetricId, MetricReport>,
    pub agreement: Option<AgreementReport>,
    pub confidence: Option<ConfidenceReport>,
    pub dispositions: Option<DispositionSummary>,
    pub last_seq: Option<u64>,
}

pub fn build_report(records: &[JudgmentRecord], fit: &FitOptions) -> Result<ReportBundle> {
    let models = models_in_records(records);
    let annotators: Vec<String> = records
        .iter()
        .map(|r| r.annotator_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let annotation_count = records
        .iter()
        .map(|r| (&r.session_id, &r.pair_id))
        .collect::<BTreeSet<_>>()
        .len();
    let mut bundle = ReportBundle {
        models: models.clone(),
        annotators,
        judgments: records.len(),
        annotation_count,
        smoothed: false,
        metrics: BTreeMap::new(),
        agreement: None,
        confidence: None,
        dispositions: None,
        last_seq: None,
    };
    if records.is_empty() {
        return Ok(bundle);
    }
    let tally = tally_from_judgments(records, &models)?;
    let (est, smoothed) = fit_mle_or_smooth(&tally, fit)?;
    let ratios = win_ratio(&tally);
    bundle.smoothed = smoothed;
    for (metric, e) in &est.metrics {
        let wr = &ratios.metrics[metric];
        bundle.metrics.insert(
            *metric,
            MetricReport {
                ranking: e.ranking.clone(),
                strengths: models.iter().cloned().zip(e.p.iter().copied()).collect(),
                theta: e.theta,
                win_ratio: models.iter().cloned().zip(wr.iter().copied()).collect(),
                judgments: tally.total(*metric),
            },
        );
    }
    if bundle.annotators.len() >= 2 {
        bundle.agreement = inter_annotator_agreement(records).ok();
    }
    Ok(bundle)
}

pub fn summarize_dispositions(study: &Study) -> DispositionSummary {
    let mut s = DispositionSummary {
        total_pairs_per_session: study.plan().total_pairs,
        ..Default::default()
    };
    for session in study.sessions() {
        s.sessions += 1;
        match session.status() {
            RunStatus::Active => s.active_sessions += 1,
            RunStatus::Complete => s.complete_sessions += 1,
            RunStatus::StoppedEarly => s.stopped_early_sessions += 1,
        }
        for d in &session.state().dispositions {
            match d {
                Disposition::Judged => s.judged += 1,
                Disposition::Discarded { .. } => s.discarded += 1,
                Disposition::Unavailable => s.unavailable += 1,
                Disposition::Pending | Disposition::Served => s.pending += 1,
            }
        }
    }
    s
}

pub fn report_from_study(study: &Study, fit: &FitOptions) -> Result<ReportBundle> {
    let mut bundle = build_report(&study.records(), fit)?;
    bundle.dispositions = Some(summarize_dispositions(study));
    bundle.last_seq = study.log().last().map(|e| e.seq);
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Records,
    StudyLog,
    Empty,
}

/// Study logs carry `seq` and `type` on every line; record files do not.
pub fn detect_input(text: &str) -> Result<InputKind> {
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(InputKind::Empty);
    };
    let value: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::CorruptLog {
        line: 1,
        last_valid_seq: None,
        reason: e.to_string(),
    })?;
    Ok(if value.get("seq").is_some() && value.get("type").is_some() {
        InputKind::StudyLog
    } else {
        InputKind::Records
    })
}

/// Report over either a judgment-record JSONL file or a study log export.
pub fn report_from_jsonl(text: &str, fit: &FitOptions) -> Result<ReportBundle> {
    match detect_input(text)? {
        InputKind::Empty => build_report(&[], fit),
        InputKind::Records => build_report(&read_records_jsonl(text.as_bytes())?, fit),
        InputKind::StudyLog => report_from_study(&Study::replay(text.as_bytes())?, fit),
    }
}

/// Records from either input kind.
pub fn records_from_jsonl(text: &str) -> Result<Vec<JudgmentRecord>> {
    match detect_input(text)? {
        InputKind::Empty => Ok(Vec::new()),
        InputKind::Records => read_records_jsonl(text.as_bytes()),
        InputKind::StudyLog => Ok(Study::replay(text.as_bytes())?.records()),
    }
}

/// Plain-text rendering of a report.
pub fn render_table(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "models: {}  annotators: {}  annotated pairs: {}  judgments: {}",
        bundle.models.len(),
        bundle.annotators.len(),
        bundle.annotation_count,
        bundle.judgments
    );
    if bundle.smoothed {
        let _ = writeln!(out, "note: comparison graph was disconnected; smoothed estimates");
    }
    for (metric, m) in &bundle.metrics {
        let _ = writeln!(out, "\n{metric} (theta {:.4}, {} judgments)", m.theta, m.judgments);
        let _ = writeln!(out, "  {:<4} {:<24} {:>10} {:>10} {:>21}", "rank", "model", "strength", "win ratio", "95% CI");
        for (k, model) in m.ranking.iter().enumerate() {
            let ci = bundle
                .confidence
                .as_ref()
                .and_then(|c| c.interval(*metric, model))
                .map(|iv| format!("[{:.4}, {:.4}]", iv.ci_low, iv.ci_high))
                .unwrap_or_else(|| "-".into());
            let wr = m.win_ratio[model].map_or_else(|| "-".into(), |w| format!("{w:.4}"));
            let _ = writeln!(out, "  {:<4} {:<24} {:>10.4} {:>10} {:>21}", k + 1, model, m.strengths[model], wr, ci);
        }
    }
    if let Some(a) = &bundle.agreement {
        let _ = writeln!(out, "\nagreement ({}): {:.4} over {} items", a.statistic_name, a.value, a.n_items);
    }
    if let Some(d) = &bundle.dispositions {
        let _ = writeln!(
            out,
            "\nsessions: {} ({} complete, {} stopped early, {} active)\npairs: {} judged, {} discarded, {} unavailable, {} not reached",
            d.sessions,
            d.complete_sessions,
            d.stopped_early_sessions,
            d.active_sessions,
            d.judged,
            d.discarded,
            d.unavailable,
            d.pending
        );
    }
    out
}
