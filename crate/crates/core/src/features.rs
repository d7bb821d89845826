//! Automatic-metric ingestion and the per-video feature score used to
//! pre-sort prompt groups.
//!
//! Input CSV layout: header `video_id,<metric>,...`, one row per video. The
//! standard columns are listed in [`STANDARD_METRICS`]; an empty cell marks a
//! missing value. The JSON form is `{video_id: {metric: value}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STANDARD_METRICS: [&str; 7] = [
    "subject_consistency",
    "temporal_flickering",
    "motion_smoothness",
    "dynamic_degree",
    "aesthetic_quality",
    "imaging_quality",
    "overall_consistency",
];

/// Contribution of a constant column, or of a missing value when partial
/// vectors are allowed.
pub const NEUTRAL_SCORE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoMetricTable {
    pub metric_names: Vec<String>,
    /// Raw scorer outputs aligned with `metric_names`; `None` = missing.
    pub scores: BTreeMap<String, Vec<Option<f64>>>,
}

impl AutoMetricTable {
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("video_id") {
            return Err(Error::invalid("first CSV column must be `video_id`"));
        }
        let metric_names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        check_metric_names(&metric_names)?;
        let mut scores = BTreeMap::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let video = row.get(0).unwrap_or_default().to_owned();
            if video.is_empty() {
                return Err(Error::invalid(format!("row {} has an empty video_id", line + 2)));
            }
            let values = metric_names
                .iter()
                .enumerate()
                .map(|(k, name)| match row.get(k + 1).unwrap_or("") {
                    "" => Ok(None),
                    cell => cell.parse::<f64>().map(Some).map_err(|_| {
                        Error::invalid(format!("video `{video}` metric `{name}`: `{cell}` is not a number"))
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            if scores.insert(video.clone(), values).is_some() {
                return Err(Error::invalid(format!("duplicate row for video `{video}`")));
            }
        }
        Ok(AutoMetricTable { metric_names, scores })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(text)?;
        Ok(Self::from_map(raw))
    }

    /// `{video_id: {metric: value}}`; absent metrics become missing values.
    pub fn from_map(raw: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        let names: BTreeSet<&String> = raw.values().flat_map(|m| m.keys()).collect();
        // Standard metrics first in their canonical order, then any extras.
        let mut metric_names: Vec<String> = STANDARD_METRICS
            .iter()
            .filter(|s| names.iter().any(|n| n.as_str() == **s))
            .map(|s| s.to_string())
            .collect();
        for n in names {
            if !metric_names.contains(n) {
                metric_names.push(n.clone());
            }
        }
        let scores = raw
            .into_iter()
            .map(|(video, m)| {
                let values = metric_names.iter().map(|n| m.get(n).copied()).collect();
                (video, values)
            })
            .collect();
        AutoMetricTable { metric_names, scores }
    }

    /// Inverse of [`AutoMetricTable::from_map`]; missing values are left out.
    pub fn to_map(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.scores
            .iter()
            .map(|(video, values)| {
                let m = self
                    .metric_names
                    .iter()
                    .zip(values)
                    .filter_map(|(n, v)| v.map(|v| (n.clone(), v)))
                    .collect();
                (video.clone(), m)
            })
            .collect()
    }

    /// Keeps only the listed videos.
    pub fn restrict_to<'a>(&self, videos: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut scores = BTreeMap::new();
        let mut missing = Vec::new();
        for v in videos {
            match self.scores.get(v) {
                Some(row) => {
                    scores.insert(v.to_owned(), row.clone());
                }
                None => missing.push(v.to_owned()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingFeature(missing));
        }
        Ok(AutoMetricTable {
            metric_names: self.metric_names.clone(),
            scores,
        })
    }

    pub fn incomplete_videos(&self) -> Vec<&str> {
        self.scores
            .iter()
            .filter(|(_, row)| row.iter().any(Option::is_none))
            .map(|(v, _)| v.as_str())
            .collect()
    }
}

fn check_metric_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::invalid("score table has no metric columns"));
    }
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() || !seen.insert(n) {
            return Err(Error::invalid(format!("bad or duplicate metric column `{n}`")));
        }
    }
    Ok(())
}

/// Min-max normalizes each metric column over all videos and sums the
/// normalized values per video.
pub fn normalize_and_sum(table: &AutoMetricTable, allow_partial: bool) -> Result<BTreeMap<String, f64>> {
    if table.scores.len() < 2 {
        return Err(Error::invalid("normalization needs at least two videos"));
    }
    for (video, row) in &table.scores {
        if row.len() != table.metric_names.len() {
            return Err(Error::invalid(format!("video `{video}` has a malformed score vector")));
        }
        for (name, value) in table.metric_names.iter().zip(row) {
            if let Some(x) = value {
                if !x.is_finite() {
                    return Err(Error::invalid(format!(
                        "video `{video}` metric `{name}` is not finite ({x})"
                    )));
                }
            }
        }
    }
    let incomplete = table.incomplete_videos();
    if !allow_partial && !incomplete.is_empty() {
        return Err(Error::invalid(format!(
            "incomplete metric vectors for: {}",
            incomplete.join(", ")
        )));
    }

    let mut out: BTreeMap<String, f64> = table.scores.keys().map(|v| (v.clone(), 0.0)).collect();
    for k in 0..table.metric_names.len() {
        let present = table.scores.values().filter_map(|row| row[k]);
        let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
        let range = hi - lo;
        for (video, row) in &table.scores {
            let normalized = match row[k] {
                Some(x) if range > 0.0 => (x - lo) / range,
                _ => NEUTRAL_SCORE,
            };
            *out.get_mut(video).expect("seeded above") += normalized;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(names: &[&str], rows: &[(&str, &[Option<f64>])]) -> AutoMetricTable {
        AutoMetricTable {
            metric_names: names.iter().map(|s| s.to_string()).collect(),
            scores: rows.iter().map(|(v, r)| (v.to_string(), r.to_vec())).collect(),
        }
    }

    #[test]
    fn single_metric_min_max() {
        let t = table(
            &["m"],
            &[("v1", &[Some(2.0)]), ("v2", &[Some(4.0)]), ("v3", &[Some(6.0)])],
        );
        let s = normalize_and_sum(&t, false).unwrap();
        assert_eq!(s["v1"], 0.0);
        assert_eq!(s["v2"], 0.5);
        assert_eq!(s["v3"], 1.0);
    }

    #[test]
    fn constant_column_is_neutral() {
        let t = table(&["m"], &[("v1", &[Some(3.0)]), ("v2", &[Some(3.0)])]);
        let s = normalize_and_sum(&t, false).unwrap();
        assert_eq!(s["v1"], 0.5);
        assert_eq!(s["v2"], 0.5);
    }

    #[test]
    fn two_metrics_sum() {
        let t = table(
            &["m1", "m2"],
            &[("v1", &[Some(0.0), Some(1.0)]), ("v2", &[Some(1.0), Some(0.0)])],
        );
        let s = normalize_and_sum(&t, false).unwrap();
        assert_eq!(s["v1"], 1.0);
        assert_eq!(s["v2"], 1.0);
    }

    #[test]
    fn non_finite_input_names_video_and_metric() {
        let t = table(&["m1"], &[("v1", &[Some(f64::NAN)]), ("v2", &[Some(1.0)])]);
        let err = normalize_and_sum(&t, false).unwrap_err().to_string();
        assert!(err.contains("v1") && err.contains("m1"), "{err}");
    }

    #[test]
    fn partial_vectors_need_opt_in() {
        let t = table(
            &["m1", "m2"],
            &[("v1", &[Some(0.0), None]), ("v2", &[Some(1.0), Some(5.0)]), ("v3", &[Some(0.5), Some(7.0)])],
        );
        assert!(normalize_and_sum(&t, false).is_err());
        let s = normalize_and_sum(&t, true).unwrap();
        assert_eq!(s["v1"], 0.5);
        assert_eq!(s["v2"], 1.0);
        assert_eq!(s["v3"], 1.5);
    }

    #[test]
    fn needs_two_videos() {
        let t = table(&["m"], &[("v1", &[Some(1.0)])]);
        assert!(normalize_and_sum(&t, false).is_err());
    }

    #[test]
    fn csv_and_json_loaders_agree() {
        let csv = "video_id,subject_consistency,dynamic_degree\nv1,0.9,0.1\nv2,0.8,\n";
        let a = AutoMetricTable::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(a.scores["v2"], vec![Some(0.8), None]);
        let json = r#"{"v1": {"subject_consistency": 0.9, "dynamic_degree": 0.1},
                       "v2": {"subject_consistency": 0.8}}"#;
        let b = AutoMetricTable::from_json(json).unwrap();
        assert_eq!(a, b);
        // loading twice is idempotent
        assert_eq!(AutoMetricTable::from_csv(csv.as_bytes()).unwrap(), a);
    }

    #[test]
    fn csv_rejects_bad_cells() {
        assert!(AutoMetricTable::from_csv("video_id,m\nv1,abc\n".as_bytes()).is_err());
        assert!(AutoMetricTable::from_csv("id,m\nv1,1\n".as_bytes()).is_err());
        assert!(AutoMetricTable::from_csv("video_id,m\nv1,1\nv1,2\n".as_bytes()).is_err());
    }
}
