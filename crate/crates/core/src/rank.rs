//! Strength estimation under the Rao-Kupper ties model, the win-ratio
//! baseline, and helpers shared by every consumer of fitted strengths.
//!
//! Model strengths `p_i > 0` and the tie tolerance `theta >= 1` give
//!
//! ```text
//! P(i beats j) = p_i / (p_i + theta p_j)
//! P(i ties j)  = p_i p_j (theta^2 - 1) / ((p_i + theta p_j)(theta p_i + p_j))
//! ```
//!
//! Internally everything is evaluated on the merit scale `v = ln p`,
//! `tau = ln theta`, where the win probability is a logistic function of
//! `v_i - v_j - tau`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ComparisonTally, MetricId, PairCounts};
use crate::error::{Error, Result};
use crate::optimize::{self, Bounds, LbfgsbOptions};

/// Smallest admissible strength.
pub const MIN_STRENGTH: f64 = 0.01;
/// Admissible range of `ln theta`.
pub const MIN_LOG_THETA: f64 = 0.01;
pub const MAX_LOG_THETA: f64 = 10.0;
/// Starting point of every fit.
pub const INITIAL_THETA: f64 = 1.5;
/// Pseudo-count added in both directions on every pair when smoothing.
pub const DEFAULT_SMOOTHING: f64 = 0.1;

pub fn min_theta() -> f64 {
    MIN_LOG_THETA.exp()
}

pub fn max_theta() -> f64 {
    MAX_LOG_THETA.exp()
}

fn check_probability_args(p_i: f64, p_j: f64, theta: f64) -> Result<()> {
    if !(p_i > 0.0 && p_i.is_finite() && p_j > 0.0 && p_j.is_finite()) {
        return Err(Error::domain(format!(
            "strengths must be positive and finite, got {p_i} and {p_j}"
        )));
    }
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(Error::domain(format!("theta must be >= 1, got {theta}")));
    }
    Ok(())
}

/// Probability that `i` is preferred to `j`.
pub fn prob_win(p_i: f64, p_j: f64, theta: f64) -> Result<f64> {
    check_probability_args(p_i, p_j, theta)?;
    Ok(p_i / (p_i + theta * p_j))
}

/// Probability that `i` and `j` are judged equal.
pub fn prob_tie(p_i: f64, p_j: f64, theta: f64) -> Result<f64> {
    check_probability_args(p_i, p_j, theta)?;
    Ok(p_i * p_j * (theta * theta - 1.0) / ((p_i + theta * p_j) * (theta * p_i + p_j)))
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(theta^2 - 1)` as a function of `tau = ln theta`.
fn log_tie_scale(tau: f64) -> f64 {
    2.0 * tau + (-(-2.0 * tau).exp_m1()).ln()
}

/// Real-valued counts for one metric; smoothing may add fractional
/// pseudo-observations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCounts {
    t: usize,
    wins: Vec<f64>,
    ties: Vec<f64>,
}

impl MetricCounts {
    pub fn from_pair_counts(counts: &PairCounts, smoothing: Option<f64>) -> Self {
        let t = counts.len();
        let eps = smoothing.unwrap_or(0.0);
        let mut wins = vec![0.0; t * t];
        let mut ties = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                if i != j {
                    wins[i * t + j] = counts.wins(i, j) as f64 + eps;
                    ties[i * t + j] = counts.ties(i, j) as f64;
                }
            }
        }
        MetricCounts { t, wins, ties }
    }

    /// Dense constructor, mostly for tests: `wins[i][j]`, symmetric `ties`.
    pub fn from_matrices(wins: &[Vec<f64>], ties: &[Vec<f64>]) -> Result<Self> {
        let t = wins.len();
        if ties.len() != t || wins.iter().chain(ties).any(|row| row.len() != t) {
            return Err(Error::invalid("count matrices must be square and equal-sized"));
        }
        for i in 0..t {
            for j in 0..t {
                let (w, tij) = (wins[i][j], ties[i][j]);
                if !(w >= 0.0 && tij >= 0.0 && w.is_finite() && tij.is_finite()) {
                    return Err(Error::invalid("counts must be finite and non-negative"));
                }
                if i == j && (w != 0.0 || tij != 0.0) {
                    return Err(Error::invalid("diagonal counts must be zero"));
                }
                if tij != ties[j][i] {
                    return Err(Error::invalid("tie counts must be symmetric"));
                }
            }
        }
        Ok(MetricCounts {
            t,
            wins: wins.iter().flatten().copied().collect(),
            ties: ties.iter().flatten().copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn wins(&self, i: usize, j: usize) -> f64 {
        self.wins[i * self.t + j]
    }

    pub fn ties(&self, i: usize, j: usize) -> f64 {
        self.ties[i * self.t + j]
    }

    fn has_ties(&self) -> bool {
        self.ties.iter().any(|&x| x > 0.0)
    }

    pub fn total(&self) -> f64 {
        self.wins.iter().sum::<f64>() + self.ties.iter().sum::<f64>() / 2.0
    }

    /// Connected components of the comparison graph, each sorted by index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.t];
        let mut comps = Vec::new();
        for start in 0..self.t {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(i) = stack.pop() {
                members.push(i);
                for j in 0..self.t {
                    let linked = self.wins(i, j) + self.wins(j, i) + self.ties(i, j) > 0.0;
                    if i != j && linked && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }
}

/// Log-likelihood and its gradient with respect to `(v_1..v_t, tau)`.
fn merit_objective(counts: &MetricCounts, v: &[f64], tau: f64, grad: Option<&mut [f64]>) -> f64 {
    let t = counts.t;
    let tie_scale = log_tie_scale(tau);
    // d/dtau of ln(theta^2 - 1) = 2 / (1 - e^{-2 tau})
    let tie_scale_grad = -2.0 / (-2.0 * tau).exp_m1();
    let mut ll = 0.0;
    let mut g_tau = 0.0;
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    for i in 0..t {
        for j in (i + 1)..t {
            let n_ij = counts.wins(i, j);
            let n_ji = counts.wins(j, i);
            let n_tie = counts.ties(i, j);
            if n_ij == 0.0 && n_ji == 0.0 && n_tie == 0.0 {
                continue;
            }
            let d = v[i] - v[j];
            let lo = tau - d;
            let hi = tau + d;
            // ln P(i>j) = -softplus(tau - d), ln P(j>i) = -softplus(tau + d)
            let sp_lo = softplus(lo);
            let sp_hi = softplus(hi);
            ll -= n_ij * sp_lo + n_ji * sp_hi;
            if n_tie > 0.0 {
                ll += n_tie * (tie_scale - sp_lo - sp_hi);
            }
            if g.is_some() {
                let s_lo = sigmoid(lo);
                let s_hi = sigmoid(hi);
                let dd = n_ij * s_lo - n_ji * s_hi + n_tie * (s_lo - s_hi);
                let dt = -n_ij * s_lo - n_ji * s_hi + n_tie * (tie_scale_grad - s_lo - s_hi);
                let g = g.as_deref_mut().unwrap();
                g[i] += dd;
                g[j] -= dd;
                g_tau += dt;
            }
        }
    }
    if let Some(g) = g {
        g[t] = g_tau;
    }
    ll
}

fn check_point(counts: &MetricCounts, p: &[f64], theta: f64) -> Result<()> {
    if p.len() != counts.t {
        return Err(Error::domain(format!(
            "expected {} strengths, got {}",
            counts.t,
            p.len()
        )));
    }
    if let Some(bad) = p.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
        return Err(Error::domain(format!("strength {bad} is not positive")));
    }
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(Error::domain(format!("theta must be >= 1, got {theta}")));
    }
    if theta == 1.0 && counts.has_ties() {
        return Err(Error::domain(
            "theta = 1 assigns zero probability to the observed ties",
        ));
    }
    Ok(())
}

/// Log-likelihood of the observed counts at `(p, theta)`.
pub fn log_likelihood(counts: &MetricCounts, p: &[f64], theta: f64) -> Result<f64> {
    check_point(counts, p, theta)?;
    let v: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    Ok(merit_objective(counts, &v, theta.ln(), None))
}

/// Partial derivatives of the log-likelihood with respect to each `p_i`, then
/// `theta`.
pub fn likelihood_gradient(counts: &MetricCounts, p: &[f64], theta: f64) -> Result<Vec<f64>> {
    check_point(counts, p, theta)?;
    let t = counts.t;
    let v: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let mut g = vec![0.0; t + 1];
    merit_objective(counts, &v, theta.ln(), Some(&mut g));
    for i in 0..t {
        g[i] /= p[i];
    }
    g[t] /= theta;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Projected-gradient sup-norm at which the optimizer stops.
    pub tolerance: f64,
    /// Relative log-likelihood change at which the optimizer stops.
    pub rel_tolerance: f64,
    pub max_iterations: usize,
    /// Pseudo-wins added both ways on every pair. `None` makes a disconnected
    /// comparison graph a hard error.
    pub smoothing: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-7,
            rel_tolerance: 1e-10,
            max_iterations: 1000,
            smoothing: None,
        }
    }
}

/// Fitted parameters for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    /// Strengths aligned with `StrengthEstimate::model_ids`.
    pub p: Vec<f64>,
    pub theta: f64,
    pub log_likelihood: f64,
    /// Model ids by descending strength; equal strengths by ascending id.
    pub ranking: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthEstimate {
    pub model_ids: Vec<String>,
    pub metrics: BTreeMap<MetricId, MetricEstimate>,
}

impl StrengthEstimate {
    pub fn converged(&self) -> bool {
        self.metrics.values().all(|m| m.converged)
    }

    pub fn rankings(&self) -> BTreeMap<MetricId, Vec<String>> {
        self.metrics
            .iter()
            .map(|(m, e)| (*m, e.ranking.clone()))
            .collect()
    }

    pub fn strength(&self, metric: MetricId, model: &str) -> Option<f64> {
        let idx = self.model_ids.iter().position(|m| m == model)?;
        self.metrics.get(&metric).map(|e| e.p[idx])
    }

    /// `{metric: {strengths: {model: p}, theta, log_likelihood, ranking, converged}}`
    pub fn to_export(&self) -> serde_json::Value {
        let metrics: serde_json::Map<String, serde_json::Value> = self
            .metrics
            .iter()
            .map(|(metric, e)| {
                let strengths: serde_json::Map<String, serde_json::Value> = self
                    .model_ids
                    .iter()
                    .zip(&e.p)
                    .map(|(m, p)| (m.clone(), serde_json::json!(p)))
                    .collect();
                (
                    metric.as_str().to_owned(),
                    serde_json::json!({
                        "strengths": strengths,
                        "theta": e.theta,
                        "log_likelihood": e.log_likelihood,
                        "ranking": e.ranking,
                        "converged": e.converged,
                    }),
                )
            })
            .collect();
        serde_json::json!({ "model_ids": self.model_ids, "metrics": metrics })
    }
}

/// Orders models by descending strength, breaking exact ties by id.
pub fn ranking_from_strengths(model_ids: &[String], p: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..model_ids.len()).collect();
    idx.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| model_ids[a].cmp(&model_ids[b]))
    });
    idx.into_iter().map(|i| model_ids[i].clone()).collect()
}

/// Rescales strengths to geometric mean 1, unless that would push one below
/// [`MIN_STRENGTH`]; then the smallest strength is pinned at the floor.
pub fn normalize_strengths(p: &mut [f64]) {
    if p.is_empty() {
        return;
    }
    let mean_log = p.iter().map(|x| x.ln()).sum::<f64>() / p.len() as f64;
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let log_scale = (-mean_log).max(MIN_STRENGTH.ln() - min.ln());
    let scale = log_scale.exp();
    // The clamp only absorbs rounding in `min * scale`.
    p.iter_mut().for_each(|x| *x = (*x * scale).max(MIN_STRENGTH));
}

/// Maximum-likelihood fit of one metric's counts.
pub fn fit_counts(
    counts: &MetricCounts,
    model_ids: &[String],
    options: &FitOptions,
) -> Result<MetricEstimate> {
    let t = counts.len();
    if t != model_ids.len() {
        return Err(Error::invalid("counts and model list disagree in size"));
    }
    if t == 0 {
        return Err(Error::invalid("cannot fit an empty model list"));
    }
    let mut x0 = vec![0.0; t + 1];
    x0[t] = INITIAL_THETA.ln();
    let mut lower = vec![MIN_STRENGTH.ln(); t + 1];
    let mut upper = vec![f64::INFINITY; t + 1];
    lower[t] = MIN_LOG_THETA;
    upper[t] = MAX_LOG_THETA;
    let bounds = Bounds::new(lower, upper);
    let opts = LbfgsbOptions {
        max_iterations: options.max_iterations,
        pg_tolerance: options.tolerance,
        f_rel_tolerance: options.rel_tolerance,
        ..LbfgsbOptions::default()
    };
    let min = optimize::minimize(
        |x, g| {
            let ll = merit_objective(counts, &x[..t], x[t], Some(g));
            g.iter_mut().for_each(|gi| *gi = -*gi);
            -ll
        },
        &x0,
        &bounds,
        &opts,
    );
    let mut p: Vec<f64> = min.x[..t].iter().map(|v| v.exp()).collect();
    normalize_strengths(&mut p);
    let theta = min.x[t].exp().clamp(min_theta(), max_theta());
    Ok(MetricEstimate {
        ranking: ranking_from_strengths(model_ids, &p),
        p,
        theta,
        log_likelihood: -min.f,
        converged: min.converged,
        iterations: min.iterations,
    })
}

/// Fits every metric that has at least one judgment. Metrics without data
/// are left out of the estimate.
pub fn fit_mle(tally: &ComparisonTally, options: &FitOptions) -> Result<StrengthEstimate> {
    let mut metrics = BTreeMap::new();
    for (metric, pair_counts) in &tally.metrics {
        if pair_counts.total() == 0 {
            continue;
        }
        let counts = MetricCounts::from_pair_counts(pair_counts, options.smoothing);
        let comps = counts.components();
        if comps.len() > 1 {
            return Err(Error::Disconnected {
                metric: *metric,
                components: comps
                    .into_iter()
                    .map(|c| c.into_iter().map(|i| tally.model_ids[i].clone()).collect())
                    .collect(),
            });
        }
        metrics.insert(*metric, fit_counts(&counts, &tally.model_ids, options)?);
    }
    Ok(StrengthEstimate {
        model_ids: tally.model_ids.clone(),
        metrics,
    })
}

/// Fits with the configured options, retrying with smoothing when the
/// comparison graph is disconnected. The flag reports whether smoothing was
/// needed.
pub fn fit_mle_or_smooth(
    tally: &ComparisonTally,
    options: &FitOptions,
) -> Result<(StrengthEstimate, bool)> {
    match fit_mle(tally, options) {
        Err(Error::Disconnected { .. }) if options.smoothing.is_none() => {
            let smoothed = FitOptions {
                smoothing: Some(DEFAULT_SMOOTHING),
                ..options.clone()
            };
            Ok((fit_mle(tally, &smoothed)?, true))
        }
        other => other.map(|e| (e, false)),
    }
}

/// Per-metric win ratios; `None` for models without comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRatios {
    pub model_ids: Vec<String>,
    pub metrics: BTreeMap<MetricId, Vec<Option<f64>>>,
}

/// `(wins + ties / 2) / comparisons` for every model and metric.
pub fn win_ratio(tally: &ComparisonTally) -> WinRatios {
    let t = tally.model_ids.len();
    let metrics = tally
        .metrics
        .iter()
        .map(|(metric, c)| {
            let ratios = (0..t)
                .map(|i| {
                    let (mut score, mut n) = (0.0, 0u64);
                    for j in (0..t).filter(|&j| j != i) {
                        score += c.wins(i, j) as f64 + 0.5 * c.ties(i, j) as f64;
                        n += c.comparisons(i, j);
                    }
                    (n > 0).then(|| score / n as f64)
                })
                .collect();
            (*metric, ratios)
        })
        .collect();
    WinRatios {
        model_ids: tally.model_ids.clone(),
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Outcome, PairId};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    fn counts2(w12: f64, w21: f64, ties: f64) -> MetricCounts {
        MetricCounts::from_matrices(
            &[vec![0.0, w12], vec![w21, 0.0]],
            &[vec![0.0, ties], vec![ties, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn prob_win_examples() {
        assert_eq!(prob_win(1.0, 1.0, 1.0).unwrap(), 0.5);
        assert!((prob_win(3.0, 1.0, 2.0).unwrap() - 0.6).abs() < 1e-15);
        assert!(prob_win(0.0, 1.0, 1.5).is_err());
        assert!(prob_win(1.0, -1.0, 1.5).is_err());
        assert!(prob_win(1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn prob_tie_examples() {
        assert_eq!(prob_tie(2.0, 5.0, 1.0).unwrap(), 0.0);
        assert!((prob_tie(1.0, 1.0, 2.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let th = 0.01_f64.exp();
        assert_eq!(prob_tie(2.0, 1.0, th).unwrap(), prob_tie(1.0, 2.0, th).unwrap());
    }

    #[test]
    fn logistic_form_matches_ratio_form() {
        for &(pi, pj, th) in &[(3.0, 1.0, 2.0), (0.2, 7.0, 1.01), (1.0, 1.0, 20.0)] {
            let (vi, vj, tau) = (f64::ln(pi), f64::ln(pj), f64::ln(th));
            let logistic = 1.0 / (1.0 + (tau - (vi - vj)).exp());
            assert!((prob_win(pi, pj, th).unwrap() - logistic).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tally_likelihood_and_gradient() {
        let c = MetricCounts::from_pair_counts(&PairCounts::zeros(3), None);
        assert_eq!(log_likelihood(&c, &[1.0, 2.0, 3.0], 1.7).unwrap(), 0.0);
        let g = likelihood_gradient(&c, &[1.0, 2.0, 3.0], 1.7).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_win_near_unit_theta() {
        let c = counts2(1.0, 0.0, 0.0);
        let ll = log_likelihood(&c, &[1.0, 1.0], 1.0 + 1e-9).unwrap();
        assert!((ll - 0.5_f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn ties_at_unit_theta_are_a_domain_error() {
        let c = counts2(1.0, 0.0, 2.0);
        assert!(log_likelihood(&c, &[1.0, 1.0], 1.0).is_err());
        assert!(log_likelihood(&counts2(1.0, 0.0, 0.0), &[1.0, 1.0], 1.0).is_ok());
    }

    #[test]
    fn likelihood_matches_term_by_term_sum() {
        // n12 = 3, n21 = 1 at p = (3, 1), theta = e^0.01
        let c = counts2(3.0, 1.0, 0.0);
        let th = 0.01_f64.exp();
        let direct = 3.0 * (3.0 / (3.0 + th)).ln() + (1.0 / (3.0 * th + 1.0)).ln();
        assert!((log_likelihood(&c, &[3.0, 1.0], th).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn symmetric_gradient_at_symmetric_point() {
        let t = 4;
        let ones = vec![vec![2.0; t]; t];
        let mut w = ones.clone();
        let mut ti = ones;
        for i in 0..t {
            w[i][i] = 0.0;
            ti[i][i] = 0.0;
        }
        let c = MetricCounts::from_matrices(&w, &ti).unwrap();
        let g = likelihood_gradient(&c, &[1.0; 4], 1.3).unwrap();
        for i in 1..t {
            assert!((g[i] - g[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_model_closed_form() {
        let c = counts2(3.0, 1.0, 0.0);
        let est = fit_counts(&c, &ids(2), &FitOptions::default()).unwrap();
        let th = min_theta();
        assert!((est.theta - th).abs() < 1e-9, "theta {}", est.theta);
        let expected = th + (th * th + 3.0).sqrt();
        assert!((est.p[0] / est.p[1] - expected).abs() < 1e-4);
        assert!(est.converged);
    }

    #[test]
    fn symmetric_tally_gives_equal_strengths() {
        let t = 4;
        let mut w = vec![vec![5.0; t]; t];
        let mut ti = vec![vec![5.0; t]; t];
        for i in 0..t {
            w[i][i] = 0.0;
            ti[i][i] = 0.0;
        }
        let c = MetricCounts::from_matrices(&w, &ti).unwrap();
        let est = fit_counts(&c, &ids(t), &FitOptions::default()).unwrap();
        for p in &est.p {
            assert!((p - 1.0).abs() < 1e-6, "{:?}", est.p);
        }
    }

    #[test]
    fn disconnected_graph_errors_and_smoothing_recovers() {
        let models = ids(4);
        let mut tally = ComparisonTally::new(&models).unwrap();
        let (ab, _) = PairId::new("p", "m0", "m1").unwrap();
        let (cd, _) = PairId::new("p", "m2", "m3").unwrap();
        tally.record(&ab, MetricId::VideoQuality, Outcome::AWins).unwrap();
        tally.record(&cd, MetricId::VideoQuality, Outcome::Tie).unwrap();
        match fit_mle(&tally, &FitOptions::default()) {
            Err(Error::Disconnected { metric, components }) => {
                assert_eq!(metric, MetricId::VideoQuality);
                assert_eq!(components.len(), 2);
                assert_eq!(components[0], vec!["m0".to_string(), "m1".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let (est, smoothed) = fit_mle_or_smooth(&tally, &FitOptions::default()).unwrap();
        assert!(smoothed);
        assert!(est.metrics.contains_key(&MetricId::VideoQuality));
        // metrics without data are skipped
        assert_eq!(est.metrics.len(), 1);
    }

    #[test]
    fn adversarial_tally_respects_bounds() {
        // m0 loses every comparison.
        let t = 3;
        let mut w = vec![vec![0.0; t]; t];
        w[1][0] = 20.0;
        w[2][0] = 20.0;
        w[1][2] = 3.0;
        w[2][1] = 3.0;
        let c = MetricCounts::from_matrices(&w, &vec![vec![0.0; t]; t]).unwrap();
        let est = fit_counts(&c, &ids(t), &FitOptions::default()).unwrap();
        assert!(est.p.iter().all(|p| *p >= MIN_STRENGTH), "{:?}", est.p);
        assert!(est.theta >= min_theta() && est.theta <= max_theta());
        assert_eq!(est.ranking.last().unwrap(), "m0");
    }

    #[test]
    fn normalization_keeps_floor() {
        let mut p = vec![1.0, 4.0];
        normalize_strengths(&mut p);
        assert!((p[0] * p[1] - 1.0).abs() < 1e-12);
        let mut q = vec![0.01, 1e6, 1e6];
        normalize_strengths(&mut q);
        assert!((q[0] - MIN_STRENGTH).abs() < 1e-15);
    }

    #[test]
    fn ranking_tie_break_is_lexicographic() {
        let models = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        assert_eq!(
            ranking_from_strengths(&models, &[1.0, 1.0, 2.0]),
            vec!["c", "a", "b"]
        );
    }

    fn tally_from(models: &[&str], rows: &[(&str, &str, Outcome, usize)]) -> ComparisonTally {
        let models: Vec<String> = models.iter().map(|s| s.to_string()).collect();
        let mut tally = ComparisonTally::new(&models).unwrap();
        for (a, b, o, n) in rows {
            let (pair, swapped) = PairId::new("p", a, b).unwrap();
            for _ in 0..*n {
                tally
                    .record(&pair, MetricId::VideoQuality, o.canonical(swapped))
                    .unwrap();
            }
        }
        tally
    }

    #[test]
    fn win_ratio_examples() {
        let t = tally_from(&["A", "B"], &[("A", "B", Outcome::AWins, 3), ("A", "B", Outcome::BWins, 1)]);
        let r = &win_ratio(&t).metrics[&MetricId::VideoQuality];
        assert_eq!(r, &vec![Some(0.75), Some(0.25)]);

        let t = tally_from(&["A", "B", "C"], &[("A", "B", Outcome::Tie, 2), ("B", "C", Outcome::Tie, 3)]);
        let r = &win_ratio(&t).metrics[&MetricId::VideoQuality];
        assert!(r.iter().all(|x| *x == Some(0.5)));

        let t = tally_from(
            &["A", "B", "C"],
            &[("A", "B", Outcome::AWins, 2), ("B", "C", Outcome::AWins, 2)],
        );
        let r = &win_ratio(&t).metrics[&MetricId::VideoQuality];
        assert_eq!(r, &vec![Some(1.0), Some(0.5), Some(0.0)]);

        // metrics without any comparisons report absent ratios
        assert!(win_ratio(&t).metrics[&MetricId::HumanPreference]
            .iter()
            .all(Option::is_none));
    }
}
