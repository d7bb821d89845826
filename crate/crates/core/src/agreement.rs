//! Inter-annotator agreement as Krippendorff's alpha over nominal verdicts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{JudgmentRecord, MetricId, Outcome, PairId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub statistic_name: String,
    pub value: f64,
    /// Items (pair, metric) with at least two verdicts.
    pub n_items: usize,
    pub n_annotators: usize,
}

fn label(o: Outcome) -> usize {
    match o {
        Outcome::AWins => 0,
        Outcome::BWins => 1,
        Outcome::Tie => 2,
    }
}

/// Nominal alpha from per-item label lists. Items with fewer than two values
/// are not pairable and are ignored. Returns `None` when nothing is pairable.
pub fn nominal_alpha(units: &[Vec<usize>], n_labels: usize) -> Option<f64> {
    let mut coincidence = vec![vec![0.0_f64; n_labels]; n_labels];
    let mut pairable = 0;
    for values in units {
        let m = values.len();
        if m < 2 {
            continue;
        }
        pairable += 1;
        let mut counts = vec![0.0; n_labels];
        for &v in values {
            counts[v] += 1.0;
        }
        let w = 1.0 / (m as f64 - 1.0);
        for c in 0..n_labels {
            for k in 0..n_labels {
                let pairs = if c == k {
                    counts[c] * (counts[c] - 1.0)
                } else {
                    counts[c] * counts[k]
                };
                coincidence[c][k] += pairs * w;
            }
        }
    }
    if pairable == 0 {
        return None;
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..n_labels {
        for k in 0..n_labels {
            if c != k {
                observed += coincidence[c][k];
                expected += marginals[c] * marginals[k];
            }
        }
    }
    if expected == 0.0 {
        // Every pairable value carries the same label.
        return Some(1.0);
    }
    Some(1.0 - (n - 1.0) * observed / expected)
}

/// Krippendorff's alpha over all `(pair, metric)` items in `records`.
pub fn inter_annotator_agreement(records: &[JudgmentRecord]) -> Result<AgreementReport> {
    let annotators: BTreeSet<&str> = records.iter().map(|r| r.annotator_id.as_str()).collect();
    if annotators.len() < 2 {
        return Err(Error::invalid(format!(
            "agreement needs at least two annotators, found {}",
            annotators.len()
        )));
    }
    let mut items: BTreeMap<(&PairId, MetricId), Vec<usize>> = BTreeMap::new();
    for r in records {
        items.entry((&r.pair_id, r.metric)).or_default().push(label(r.outcome));
    }
    let units: Vec<Vec<usize>> = items.into_values().collect();
    let n_items = units.iter().filter(|u| u.len() >= 2).count();
    let value = nominal_alpha(&units, 3)
        .ok_or_else(|| Error::invalid("no item was judged by two or more annotators"))?;
    Ok(AgreementReport {
        statistic_name: "krippendorff_alpha_nominal".into(),
        value,
        n_items,
        n_annotators: annotators.len(),
    })
}

/// Agreement restricted to one metric's records.
pub fn agreement_for_metric(records: &[JudgmentRecord], metric: MetricId) -> Result<AgreementReport> {
    let subset: Vec<JudgmentRecord> = records.iter().filter(|r| r.metric == metric).cloned().collect();
    inter_annotator_agreement(&subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Phase;
    use chrono::DateTime;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(annotator: &str, prompt: &str, outcome: Outcome) -> JudgmentRecord {
        JudgmentRecord {
            annotator_id: annotator.into(),
            pair_id: PairId::new(prompt, "a", "b").unwrap().0,
            metric: MetricId::HumanPreference,
            outcome,
            phase: Phase::Static,
            batch_index: 0,
            timestamp: DateTime::UNIX_EPOCH,
            session_id: format!("s-{annotator}"),
        }
    }

    #[test]
    fn perfect_agreement_is_one() {
        let outcomes = [Outcome::AWins, Outcome::BWins, Outcome::Tie];
        let mut records = Vec::new();
        for item in 0..20 {
            for a in 0..5 {
                records.push(rec(&format!("a{a}"), &format!("p{item}"), outcomes[item % 3]));
            }
        }
        let r = inter_annotator_agreement(&records).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.n_items, 20);
        assert_eq!(r.n_annotators, 5);
    }

    #[test]
    fn two_by_two_disagreement_matches_hand_computation() {
        // Coincidences: o_AB = o_BA = 2, n_A = n_B = 2, n = 4.
        // alpha = 1 - (n - 1) * sum_{c!=k} o_ck / sum_{c!=k} n_c n_k = 1 - 3 * 4 / 8
        let records = vec![
            rec("x", "p1", Outcome::AWins),
            rec("x", "p2", Outcome::BWins),
            rec("y", "p1", Outcome::BWins),
            rec("y", "p2", Outcome::AWins),
        ];
        let r = inter_annotator_agreement(&records).unwrap();
        assert!((r.value - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_annotator_is_rejected() {
        let records = vec![rec("x", "p1", Outcome::AWins), rec("x", "p2", Outcome::Tie)];
        assert!(inter_annotator_agreement(&records).is_err());
    }

    #[test]
    fn random_labels_hover_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let outcomes = [Outcome::AWins, Outcome::BWins, Outcome::Tie];
        let mut records = Vec::new();
        for item in 0..2000 {
            for a in 0..3 {
                let o = outcomes[rng.gen_range(0..3)];
                records.push(rec(&format!("a{a}"), &format!("p{item}"), o));
            }
        }
        let r = inter_annotator_agreement(&records).unwrap();
        assert!(r.value.abs() < 0.03, "{}", r.value);
    }

    #[test]
    fn partially_overlapping_units() {
        // Only p1 is pairable; p2 has one verdict.
        let records = vec![
            rec("x", "p1", Outcome::Tie),
            rec("y", "p1", Outcome::Tie),
            rec("x", "p2", Outcome::AWins),
        ];
        let r = inter_annotator_agreement(&records).unwrap();
        assert_eq!(r.n_items, 1);
        assert_eq!(r.value, 1.0);
    }
}
