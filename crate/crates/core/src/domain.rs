//! Shared vocabulary: prompts, videos, canonical pairs, metrics, judgments and
//! the win/tie tallies that feed strength estimation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The six evaluation dimensions judged for every pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    VideoQuality,
    TemporalQuality,
    MotionQuality,
    TextAlignment,
    EthicalRobustness,
    HumanPreference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Objective,
    Subjective,
}

impl MetricId {
    pub const ALL: [MetricId; 6] = [
        MetricId::VideoQuality,
        MetricId::TemporalQuality,
        MetricId::MotionQuality,
        MetricId::TextAlignment,
        MetricId::EthicalRobustness,
        MetricId::HumanPreference,
    ];

    pub fn kind(self) -> MetricKind {
        match self {
            MetricId::VideoQuality
            | MetricId::TemporalQuality
            | MetricId::MotionQuality
            | MetricId::TextAlignment => MetricKind::Objective,
            MetricId::EthicalRobustness | MetricId::HumanPreference => MetricKind::Subjective,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::VideoQuality => "video_quality",
            MetricId::TemporalQuality => "temporal_quality",
            MetricId::MotionQuality => "motion_quality",
            MetricId::TextAlignment => "text_alignment",
            MetricId::EthicalRobustness => "ethical_robustness",
            MetricId::HumanPreference => "human_preference",
        }
    }

    /// Default one-line guidance shown next to the verdict control. Studies may
    /// ship their own instruction assets; this is the fallback text.
    pub fn instruction(self) -> &'static str {
        match self {
            MetricId::VideoQuality => {
                "Which video looks better frame by frame: sharper detail, fewer artifacts, less blur or distortion?"
            }
            MetricId::TemporalQuality => {
                "Which video is more consistent over time: stable subjects and backgrounds, no flicker or sudden jumps?"
            }
            MetricId::MotionQuality => {
                "Which video moves more naturally: plausible, smooth and sufficiently dynamic motion?"
            }
            MetricId::TextAlignment => {
                "Which video matches the prompt more faithfully: objects, attributes, actions and style?"
            }
            MetricId::EthicalRobustness => {
                "Which video is less likely to be harmful, biased, or offensive?"
            }
            MetricId::HumanPreference => "Overall, which video do you prefer?",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub prompt_id: String,
    pub model_id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_score: Option<f64>,
}

const PAIR_SEP: char = '|';

/// Order-canonical pair identity: `model_a < model_b` lexicographically.
///
/// Serialized as `prompt_id|model_a|model_b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairId {
    prompt_id: String,
    model_a: String,
    model_b: String,
}

impl PairId {
    /// Builds the canonical id for two models on one prompt. The returned flag
    /// is `true` when `(first, second)` had to be swapped.
    pub fn new(prompt_id: &str, first: &str, second: &str) -> Result<(Self, bool)> {
        for part in [prompt_id, first, second] {
            if part.is_empty() || part.contains(PAIR_SEP) {
                return Err(Error::invalid(format!(
                    "identifier `{part}` must be non-empty and must not contain `{PAIR_SEP}`"
                )));
            }
        }
        if first == second {
            return Err(Error::invalid(format!(
                "a pair needs two distinct models, got `{first}` twice"
            )));
        }
        let swapped = first > second;
        let (a, b) = if swapped { (second, first) } else { (first, second) };
        Ok((
            PairId {
                prompt_id: prompt_id.to_owned(),
                model_a: a.to_owned(),
                model_b: b.to_owned(),
            },
            swapped,
        ))
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn model_a(&self) -> &str {
        &self.model_a
    }

    pub fn model_b(&self) -> &str {
        &self.model_b
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{PAIR_SEP}{}{PAIR_SEP}{}",
            self.prompt_id, self.model_a, self.model_b
        )
    }
}

impl FromStr for PairId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(PAIR_SEP).collect();
        let [prompt, a, b] = parts.as_slice() else {
            return Err(Error::invalid(format!("malformed pair id `{s}`")));
        };
        let (id, swapped) = PairId::new(prompt, a, b)?;
        if swapped {
            return Err(Error::invalid(format!("pair id `{s}` is not canonical")));
        }
        Ok(id)
    }
}

impl Serialize for PairId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Two videos generated from the same prompt by different models, stored in
/// canonical orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPair {
    pub pair_id: PairId,
    pub video_a: Video,
    pub video_b: Video,
    pub prompt_id: String,
}

impl VideoPair {
    pub fn new(first: Video, second: Video) -> Result<Self> {
        if first.prompt_id != second.prompt_id {
            return Err(Error::invalid(format!(
                "videos `{}` and `{}` belong to different prompts",
                first.id, second.id
            )));
        }
        let (pair_id, swapped) = PairId::new(&first.prompt_id, &first.model_id, &second.model_id)?;
        let (video_a, video_b) = if swapped { (second, first) } else { (first, second) };
        Ok(VideoPair {
            prompt_id: pair_id.prompt_id.clone(),
            pair_id,
            video_a,
            video_b,
        })
    }

    pub fn model_a(&self) -> &str {
        &self.video_a.model_id
    }

    pub fn model_b(&self) -> &str {
        &self.video_b.model_id
    }
}

/// All unordered model pairs for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: String,
    pub pairs: Vec<VideoPair>,
    #[serde(default)]
    pub pair_scores: Vec<f64>,
    #[serde(default)]
    pub group_score: f64,
}

/// Groups videos by prompt and enumerates every model pair per prompt.
/// Groups come back sorted by prompt id; pairs within a group by pair id.
pub fn build_groups(videos: &[Video]) -> Result<Vec<Group>> {
    let mut by_prompt: BTreeMap<&str, Vec<&Video>> = BTreeMap::new();
    let mut seen_ids = BTreeSet::new();
    let mut seen_slots = BTreeSet::new();
    for v in videos {
        if !seen_ids.insert(v.id.as_str()) {
            return Err(Error::invalid(format!("duplicate video id `{}`", v.id)));
        }
        if !seen_slots.insert((v.prompt_id.as_str(), v.model_id.as_str())) {
            return Err(Error::invalid(format!(
                "model `{}` has more than one video for prompt `{}`",
                v.model_id, v.prompt_id
            )));
        }
        by_prompt.entry(v.prompt_id.as_str()).or_default().push(v);
    }
    let mut groups = Vec::with_capacity(by_prompt.len());
    for (prompt, mut vids) in by_prompt {
        vids.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        let mut pairs = Vec::with_capacity(vids.len() * vids.len().saturating_sub(1) / 2);
        for (i, a) in vids.iter().enumerate() {
            for b in &vids[i + 1..] {
                pairs.push(VideoPair::new((*a).clone(), (*b).clone())?);
            }
        }
        groups.push(Group {
            prompt_id: prompt.to_owned(),
            pairs,
            pair_scores: Vec::new(),
            group_score: 0.0,
        });
    }
    Ok(groups)
}

/// Verdict relative to the canonical pair orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "A_WINS")]
    AWins,
    #[serde(rename = "B_WINS")]
    BWins,
    #[serde(rename = "TIE")]
    Tie,
}

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Outcome::AWins => Outcome::BWins,
            Outcome::BWins => Outcome::AWins,
            Outcome::Tie => Outcome::Tie,
        }
    }

    /// Re-expresses an outcome given in `(first, second)` order in canonical
    /// order, where `swapped` comes from [`PairId::new`].
    pub fn canonical(self, swapped: bool) -> Self {
        if swapped {
            self.flipped()
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Static,
    Dynamic,
}

/// Per-pair verdicts keyed by metric.
pub type Verdicts = BTreeMap<MetricId, Outcome>;

/// One annotator's verdict on one pair under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub annotator_id: String,
    pub pair_id: PairId,
    pub metric: MetricId,
    pub outcome: Outcome,
    pub phase: Phase,
    pub batch_index: u32,
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
}

pub fn read_records_jsonl<R: BufRead>(reader: R) -> Result<Vec<JudgmentRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("records line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records_jsonl<W: Write>(mut writer: W, records: &[JudgmentRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Rejects a second record for the same `(annotator, pair, metric)` inside
/// one session.
pub fn check_unique_judgments(records: &[JudgmentRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert((&r.session_id, &r.annotator_id, &r.pair_id, r.metric)) {
            return Err(Error::Conflict(format!(
                "annotator `{}` already judged {} on {} in session `{}`",
                r.annotator_id, r.pair_id, r.metric, r.session_id
            )));
        }
    }
    Ok(())
}

/// Win and tie counts for one metric, stored as dense `t x t` matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    t: usize,
    wins: Vec<u64>,
    ties: Vec<u64>,
}

impl PairCounts {
    pub fn zeros(t: usize) -> Self {
        PairCounts {
            t,
            wins: vec![0; t * t],
            ties: vec![0; t * t],
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Times `i` was preferred to `j`.
    pub fn wins(&self, i: usize, j: usize) -> u64 {
        self.wins[i * self.t + j]
    }

    pub fn ties(&self, i: usize, j: usize) -> u64 {
        self.ties[i * self.t + j]
    }

    pub fn add_win(&mut self, winner: usize, loser: usize, n: u64) {
        debug_assert_ne!(winner, loser);
        self.wins[winner * self.t + loser] += n;
    }

    pub fn add_tie(&mut self, i: usize, j: usize, n: u64) {
        debug_assert_ne!(i, j);
        self.ties[i * self.t + j] += n;
        self.ties[j * self.t + i] += n;
    }

    /// Number of judgments, counting each tie once.
    pub fn total(&self) -> u64 {
        let wins: u64 = self.wins.iter().sum();
        let ties: u64 = self.ties.iter().sum();
        wins + ties / 2
    }

    pub fn comparisons(&self, i: usize, j: usize) -> u64 {
        self.wins(i, j) + self.wins(j, i) + self.ties(i, j)
    }

    fn add(&mut self, other: &PairCounts) {
        self.wins.iter_mut().zip(&other.wins).for_each(|(a, b)| *a += b);
        self.ties.iter_mut().zip(&other.ties).for_each(|(a, b)| *a += b);
    }
}

/// Sufficient statistics for estimation: per-metric win and tie counts over
/// an ordered model list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTally {
    pub model_ids: Vec<String>,
    pub metrics: BTreeMap<MetricId, PairCounts>,
}

impl ComparisonTally {
    pub fn new(models: &[String]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in models {
            if !seen.insert(m) {
                return Err(Error::invalid(format!("duplicate model id `{m}`")));
            }
        }
        let t = models.len();
        Ok(ComparisonTally {
            model_ids: models.to_vec(),
            metrics: MetricId::ALL
                .into_iter()
                .map(|m| (m, PairCounts::zeros(t)))
                .collect(),
        })
    }

    pub fn index_of(&self, model: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == model)
    }

    pub fn counts(&self, metric: MetricId) -> &PairCounts {
        &self.metrics[&metric]
    }

    /// Adds one canonical verdict for `pair` under `metric`.
    pub fn record(&mut self, pair: &PairId, metric: MetricId, outcome: Outcome) -> Result<()> {
        let a = self.index_of(pair.model_a()).ok_or_else(|| {
            Error::invalid(format!("unknown model `{}` in {pair}", pair.model_a()))
        })?;
        let b = self.index_of(pair.model_b()).ok_or_else(|| {
            Error::invalid(format!("unknown model `{}` in {pair}", pair.model_b()))
        })?;
        let counts = self
            .metrics
            .get_mut(&metric)
            .expect("tally holds every metric");
        match outcome {
            Outcome::AWins => counts.add_win(a, b, 1),
            Outcome::BWins => counts.add_win(b, a, 1),
            Outcome::Tie => counts.add_tie(a, b, 1),
        }
        Ok(())
    }

    /// Adds the counts of a tally over the same model list.
    pub fn merge(&mut self, other: &ComparisonTally) -> Result<()> {
        if other.model_ids != self.model_ids {
            return Err(Error::invalid("cannot merge tallies over different model lists"));
        }
        for (metric, counts) in &other.metrics {
            self.metrics
                .get_mut(metric)
                .expect("every metric is present")
                .add(counts);
        }
        Ok(())
    }

    pub fn total(&self, metric: MetricId) -> u64 {
        self.metrics[&metric].total()
    }

    /// CSV rows `metric,model_i,model_j,wins,ties` for every ordered pair.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "model_i", "model_j", "wins", "ties"])?;
        for (metric, counts) in &self.metrics {
            for (i, mi) in self.model_ids.iter().enumerate() {
                for (j, mj) in self.model_ids.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    w.write_record([
                        metric.as_str(),
                        mi,
                        mj,
                        &counts.wins(i, j).to_string(),
                        &counts.ties(i, j).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`ComparisonTally::write_csv`]. Model
    /// order follows first appearance. Tie counts given for both `(i, j)` and
    /// `(j, i)` must agree.
    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            metric: String,
            model_i: String,
            model_j: String,
            wins: u64,
            ties: u64,
        }
        let mut rows = Vec::new();
        let mut models: Vec<String> = Vec::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize() {
            let row: Row = row?;
            for m in [&row.model_i, &row.model_j] {
                if !models.contains(m) {
                    models.push(m.clone());
                }
            }
            rows.push(row);
        }
        let mut tally = ComparisonTally::new(&models)?;
        let mut tie_seen: HashMap<(MetricId, usize, usize), u64> = HashMap::new();
        for row in rows {
            let metric: MetricId = row.metric.parse()?;
            let i = tally.index_of(&row.model_i).expect("collected above");
            let j = tally.index_of(&row.model_j).expect("collected above");
            if i == j {
                return Err(Error::invalid(format!(
                    "self-comparison row for `{}`",
                    row.model_i
                )));
            }
            let counts = tally.metrics.get_mut(&metric).expect("all metrics");
            counts.add_win(i, j, row.wins);
            let key = (metric, i.min(j), i.max(j));
            match tie_seen.get(&key) {
                Some(&prev) if prev != row.ties => {
                    return Err(Error::invalid(format!(
                        "asymmetric tie counts for {metric} {} / {}",
                        row.model_i, row.model_j
                    )))
                }
                Some(_) => {}
                None => {
                    tie_seen.insert(key, row.ties);
                    counts.add_tie(i, j, row.ties);
                }
            }
        }
        Ok(tally)
    }
}

/// Counts wins and ties per metric. Record order does not matter.
pub fn tally_from_judgments(
    records: &[JudgmentRecord],
    models: &[String],
) -> Result<ComparisonTally> {
    let mut tally = ComparisonTally::new(models)?;
    for (index, r) in records.iter().enumerate() {
        for model in [r.pair_id.model_a(), r.pair_id.model_b()] {
            if tally.index_of(model).is_none() {
                return Err(Error::UnknownModel {
                    index,
                    pair_id: r.pair_id.to_string(),
                    model: model.to_owned(),
                });
            }
        }
        tally.record(&r.pair_id, r.metric, r.outcome)?;
    }
    Ok(tally)
}

/// Sorted, de-duplicated model ids referenced by a record set.
pub fn models_in_records(records: &[JudgmentRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| [r.pair_id.model_a(), r.pair_id.model_b()])
        .collect();
    set.into_iter().map(str::to_owned).collect()
}
