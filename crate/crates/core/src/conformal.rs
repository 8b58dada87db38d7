//! Split conformalized quantile calibration and the horizon-stratified
//! variant: nonconformity scores, order-statistic offsets, calibrated
//! intervals, empirical coverage, the finite-sample coverage bound with
//! its kernel-density Lipschitz estimate, and the leave-one-cohort-out /
//! bootstrap sensitivity studies.

use crate::error::{Error, Result};
use crate::forecaster::{central_quantile_pair, QuantileForecast};
use crate::math;
use crate::rng::{tag, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

/// One nonconformity score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: u64,
    pub horizon: u32,
    pub score: f64,
}

/// Horizon-tagged score pool with at most one score per
/// (individual, horizon).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new() -> Self {
        ScoreSet { entries: Vec::new() }
    }

    /// Insert a score; a second score for the same (individual, horizon)
    /// is a parameter error.
    pub fn push(&mut self, entry: ScoreEntry) -> Result<()> {
        if self
            .entries
            .iter()
            .any(|e| e.id == entry.id && e.horizon == entry.horizon)
        {
            return Err(Error::Parameter(format!(
                "duplicate score for individual {} at horizon {}",
                entry.id, entry.horizon
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Bulk constructor; enforces the uniqueness invariant.
    pub fn from_entries(entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.id, e.horizon)) {
                return Err(Error::Parameter(format!(
                    "duplicate score for individual {} at horizon {}",
                    e.id, e.horizon
                )));
            }
        }
        Ok(ScoreSet { entries })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scores per horizon, ordered by horizon.
    pub fn by_horizon(&self) -> BTreeMap<u32, Vec<f64>> {
        let mut out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.horizon).or_default().push(e.score);
        }
        out
    }
}

/// Nonconformity score: the signed distance of the truth outside the raw
/// central quantile pair at miscoverage `alpha`; negative strictly inside.
pub fn nonconformity_score(qf: &QuantileForecast, log_y: f64, alpha: f64) -> Result<f64> {
    let (lo, hi, _) = central_quantile_pair(qf, alpha)?;
    Ok((lo - log_y).max(log_y - hi))
}

/// Calibration rank: `ceil((n+1)(1-alpha))`, computed with a relative
/// epsilon so that products like 20 * 0.9 land on the integer they
/// represent.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9 * x.abs().max(1.0)).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationMode {
    Pooled,
    Stratified,
}

/// One calibrated stratum; `horizon` is `None` in pooled mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub horizon: Option<u32>,
    pub n: usize,
    pub offset: f64,
}

/// Per-horizon (or pooled) inflation offsets at a target miscoverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub alpha: f64,
    pub mode: CalibrationMode,
    pub strata: Vec<Stratum>,
}

fn stratum_offset(scores: &[f64], alpha: f64, label: &str) -> Result<(usize, f64)> {
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k > n || n == 0 {
        return Err(Error::CalibrationInfeasible {
            stratum: label.to_string(),
            needed: k.max(1),
            have: n,
        });
    }
    // k-th smallest via selection; the tests cross-check with a full sort.
    let mut work = scores.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, |a, b| {
        a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
    });
    let offset = *kth;
    if !offset.is_finite() {
        return Err(Error::Parameter(format!("non-finite offset in stratum {label}")));
    }
    Ok((n, offset))
}

/// Build a calibration table from a score set at level `alpha`.
pub fn build_calibration(
    scores: &ScoreSet,
    alpha: f64,
    mode: CalibrationMode,
) -> Result<CalibrationTable> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0,1), got {alpha}")));
    }
    let strata = match mode {
        CalibrationMode::Pooled => {
            let pool: Vec<f64> = scores.entries().iter().map(|e| e.score).collect();
            let (n, offset) = stratum_offset(&pool, alpha, "pooled")?;
            vec![Stratum { horizon: None, n, offset }]
        }
        CalibrationMode::Stratified => scores
            .by_horizon()
            .into_iter()
            .map(|(h, pool)| {
                let (n, offset) = stratum_offset(&pool, alpha, &format!("h={h}"))?;
                Ok(Stratum { horizon: Some(h), n, offset })
            })
            .collect::<Result<_>>()?,
    };
    Ok(CalibrationTable { alpha, mode, strata })
}

impl CalibrationTable {
    pub fn offset_for(&self, horizon: u32) -> Result<f64> {
        match self.mode {
            CalibrationMode::Pooled => Ok(self.strata[0].offset),
            CalibrationMode::Stratified => self
                .strata
                .iter()
                .find(|s| s.horizon == Some(horizon))
                .map(|s| s.offset)
                .ok_or(Error::UncalibratedHorizon(horizon)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Calibrated interval in log space at the table's level for a forecast
/// at horizon `h`.
pub fn predict_interval(
    qf: &QuantileForecast,
    table: &CalibrationTable,
    horizon: u32,
) -> Result<(f64, f64)> {
    let (lo, hi, _) = central_quantile_pair(qf, table.alpha)?;
    let q = table.offset_for(horizon)?;
    Ok((lo - q, hi + q))
}

/// Per-group empirical coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoverage {
    pub label: String,
    pub coverage: f64,
    pub n: usize,
}

/// Marginal and per-group coverage of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub nominal: f64,
    pub marginal: f64,
    pub n: usize,
    pub groups: Vec<GroupCoverage>,
}

/// Fraction of truths inside closed intervals, overall and per group
/// label. `groups` may be empty for marginal-only reports.
pub fn empirical_coverage(
    intervals: &[(f64, f64)],
    truths: &[f64],
    groups: &[String],
    nominal: f64,
) -> Result<CoverageReport> {
    if intervals.len() != truths.len() {
        return Err(Error::Parameter(format!(
            "{} intervals vs {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    if !groups.is_empty() && groups.len() != truths.len() {
        return Err(Error::Parameter("group labels length mismatch".into()));
    }
    let mut covered = 0usize;
    let mut by_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, (&(lo, hi), &y)) in intervals.iter().zip(truths).enumerate() {
        let inside = y >= lo && y <= hi;
        if inside {
            covered += 1;
        }
        if !groups.is_empty() {
            let cell = by_group.entry(groups[i].as_str()).or_insert((0, 0));
            cell.1 += 1;
            if inside {
                cell.0 += 1;
            }
        }
    }
    let n = truths.len();
    Ok(CoverageReport {
        nominal,
        marginal: if n == 0 { 0.0 } else { covered as f64 / n as f64 },
        n,
        groups: by_group
            .into_iter()
            .map(|(label, (c, t))| GroupCoverage {
                label: label.to_string(),
                coverage: c as f64 / t as f64,
                n: t,
            })
            .collect(),
    })
}

/// Finite-sample coverage-deviation bound for one stratum:
/// `1/(n_h + 1) + L_h sqrt(ln(2/delta) / (2 n_h))`.
pub fn coverage_bound(n_h: usize, l_h: f64, delta: f64) -> Result<f64> {
    if n_h < 1 {
        return Err(Error::Parameter("coverage_bound needs n_h >= 1".into()));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::Parameter(format!("delta must be in (0,1), got {delta}")));
    }
    if l_h < 0.0 {
        return Err(Error::Parameter(format!("Lipschitz constant must be >= 0, got {l_h}")));
    }
    Ok(1.0 / (n_h as f64 + 1.0) + l_h * ((2.0 / delta).ln() / (2.0 * n_h as f64)).sqrt())
}

/// Lipschitz estimate for one stratum: Gaussian kernel density with
/// Silverman bandwidth evaluated at the empirical (1-alpha) score
/// quantile. The bandwidth is floored so duplicate-heavy samples stay
/// finite.
pub fn estimate_lipschitz(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Parameter("estimate_lipschitz needs scores".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let eval_at = {
        let k = ((n as f64) * (1.0 - alpha)).ceil().max(1.0) as usize;
        sorted[k.min(n) - 1]
    };
    let sd = math::sample_variance(&sorted).sqrt();
    let iqr = math::quantile_type7(&sorted, 0.75) - math::quantile_type7(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = (0.9 * spread * (n as f64).powf(-0.2)).max(1e-9 * eval_at.abs().max(1.0));
    let norm = 1.0 / (n as f64 * bw);
    let density: f64 = sorted
        .iter()
        .map(|&s| math::normal_pdf((eval_at - s) / bw))
        .sum::<f64>()
        * norm;
    Ok(density)
}

/// One calibration-bench observation used by the sensitivity studies:
/// the raw central quantile pair, the realized truth, and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalObs {
    pub id: u64,
    pub cohort: i32,
    pub group: String,
    pub horizon: u32,
    pub q_lo: f64,
    pub q_hi: f64,
    pub truth_log: f64,
}

impl CalObs {
    pub fn score(&self) -> f64 {
        (self.q_lo - self.truth_log).max(self.truth_log - self.q_hi)
    }

    fn covered_by(&self, offset: f64) -> bool {
        self.truth_log >= self.q_lo - offset && self.truth_log <= self.q_hi + offset
    }
}

/// One row of a sensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub study: String,
    pub fold: String,
    pub n_target: usize,
    pub replicates: usize,
    pub mean_marginal: f64,
    pub sd_marginal: f64,
    pub mean_worst_group: f64,
    pub sd_worst_group: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
}

/// Minimum group size for the worst-group statistic.
const WORST_GROUP_FLOOR: usize = 10;

/// Build per-horizon offsets from a calibration pool and evaluate
/// marginal and worst-group coverage on a test pool.
fn calibrate_and_evaluate(
    cal: &[&CalObs],
    test: &[&CalObs],
    alpha: f64,
) -> Result<(f64, f64)> {
    let mut by_h: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for o in cal {
        by_h.entry(o.horizon).or_default().push(o.score());
    }
    let mut offsets: BTreeMap<u32, f64> = BTreeMap::new();
    for (h, pool) in by_h {
        let (_, offset) = stratum_offset(&pool, alpha, &format!("h={h}"))?;
        offsets.insert(h, offset);
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for o in test {
        let Some(&offset) = offsets.get(&o.horizon) else {
            return Err(Error::UncalibratedHorizon(o.horizon));
        };
        let inside = o.covered_by(offset);
        total += 1;
        if inside {
            covered += 1;
        }
        let cell = groups.entry(o.group.as_str()).or_insert((0, 0));
        cell.1 += 1;
        if inside {
            cell.0 += 1;
        }
    }
    if total == 0 {
        return Err(Error::Parameter("empty test pool".into()));
    }
    let marginal = covered as f64 / total as f64;
    let worst = groups
        .values()
        .filter(|(_, t)| *t >= WORST_GROUP_FLOOR)
        .map(|(c, t)| *c as f64 / *t as f64)
        .fold(f64::INFINITY, f64::min);
    Ok((marginal, if worst.is_finite() { worst } else { marginal }))
}

/// Stratified subsample of one horizon stratum preserving group
/// proportions (largest-remainder allocation, without replacement).
fn stratified_subsample<'a>(
    stratum: &[&'a CalObs],
    size: usize,
    stream: &mut Stream,
) -> Vec<&'a CalObs> {
    if size >= stratum.len() {
        return stratum.to_vec();
    }
    let mut by_group: BTreeMap<&str, Vec<&CalObs>> = BTreeMap::new();
    for o in stratum {
        by_group.entry(o.group.as_str()).or_default().push(o);
    }
    let total = stratum.len() as f64;
    let mut quotas: Vec<(&str, usize, f64)> = by_group
        .iter()
        .map(|(g, members)| {
            let exact = size as f64 * members.len() as f64 / total;
            (*g, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|(_, q, _)| q).sum();
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    let mut i = 0;
    while assigned < size && i < quotas.len() {
        quotas[i].1 += 1;
        assigned += 1;
        i += 1;
    }
    let mut out = Vec::with_capacity(size);
    for (g, quota, _) in quotas {
        let members = &by_group[g];
        let take = quota.min(members.len());
        for idx in stream.sample_indices(members.len(), take) {
            out.push(members[idx]);
        }
    }
    out
}

/// Leave-one-cohort-out sensitivity study: each cohort in turn plays the
/// internal test set, the remaining cohorts supply calibration scores,
/// optionally subsampled per horizon stratum to each target size, with
/// `b` replicates per (fold, size) cell.
pub fn loco_cv_study(
    obs: &[CalObs],
    alpha: f64,
    sizes: &[usize],
    b: usize,
    seed: u64,
) -> Result<SensitivityTable> {
    if obs.is_empty() || b == 0 {
        return Err(Error::Parameter("loco_cv_study needs observations and b >= 1".into()));
    }
    let cohorts: Vec<i32> = {
        let mut c: Vec<i32> = obs.iter().map(|o| o.cohort).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    if cohorts.len() < 2 {
        return Err(Error::Parameter("loco_cv_study needs at least two cohorts".into()));
    }
    let mut rows = Vec::new();
    for (fold_idx, &fold) in cohorts.iter().enumerate() {
        let cal_pool: Vec<&CalObs> = obs.iter().filter(|o| o.cohort != fold).collect();
        let test_pool: Vec<&CalObs> = obs.iter().filter(|o| o.cohort == fold).collect();
        let mut strata: BTreeMap<u32, Vec<&CalObs>> = BTreeMap::new();
        for o in &cal_pool {
            strata.entry(o.horizon).or_default().push(o);
        }
        for &size in sizes {
            let reps: Vec<Result<(f64, f64)>> = (0..b)
                .into_par_iter()
                .map(|rep| {
                    let mut subsampled: Vec<&CalObs> = Vec::new();
                    for (h, members) in &strata {
                        let mut s = Stream::new(
                            seed,
                            &[
                                fold_idx as u64,
                                size as u64,
                                rep as u64,
                                *h as u64,
                                tag::SUBSAMPLE,
                            ],
                        );
                        subsampled.extend(stratified_subsample(members, size, &mut s));
                    }
                    calibrate_and_evaluate(&subsampled, &test_pool, alpha)
                })
                .collect();
            let mut marginals = Vec::with_capacity(b);
            let mut worsts = Vec::with_capacity(b);
            for r in reps {
                let (m, w) = r?;
                marginals.push(m);
                worsts.push(w);
            }
            rows.push(SensitivityRow {
                study: "loco-cv".into(),
                fold: format!("cohort-{fold}"),
                n_target: size,
                replicates: b,
                mean_marginal: math::mean(&marginals),
                sd_marginal: math::sample_variance(&marginals).sqrt(),
                mean_worst_group: math::mean(&worsts),
                sd_worst_group: math::sample_variance(&worsts).sqrt(),
            });
        }
    }
    Ok(SensitivityTable { rows })
}

/// Nonparametric bootstrap sensitivity study: resample calibration scores
/// with replacement per horizon stratum at each target size, rebuild the
/// offsets, and evaluate on a fixed test pool.
pub fn bootstrap_study(
    cal: &[CalObs],
    test: &[CalObs],
    alpha: f64,
    sizes: &[usize],
    b: usize,
    seed: u64,
) -> Result<SensitivityTable> {
    if cal.is_empty() || test.is_empty() || b == 0 {
        return Err(Error::Parameter("bootstrap_study needs data and b >= 1".into()));
    }
    let mut strata: BTreeMap<u32, Vec<&CalObs>> = BTreeMap::new();
    for o in cal {
        strata.entry(o.horizon).or_default().push(o);
    }
    let test_refs: Vec<&CalObs> = test.iter().collect();
    let mut rows = Vec::new();
    for &size in sizes {
        let reps: Vec<Result<(f64, f64)>> = (0..b)
            .into_par_iter()
            .map(|rep| {
                let mut resampled: Vec<&CalObs> = Vec::new();
                for (h, members) in &strata {
                    let mut s = Stream::new(
                        seed,
                        &[size as u64, rep as u64, *h as u64, tag::BOOTSTRAP],
                    );
                    let take = size.min(members.len().max(1));
                    for _ in 0..take {
                        resampled.push(members[s.next_index(members.len())]);
                    }
                }
                calibrate_and_evaluate(&resampled, &test_refs, alpha)
            })
            .collect();
        let mut marginals = Vec::with_capacity(b);
        let mut worsts = Vec::with_capacity(b);
        for r in reps {
            let (m, w) = r?;
            marginals.push(m);
            worsts.push(w);
        }
        rows.push(SensitivityRow {
            study: "bootstrap".into(),
            fold: "all".into(),
            n_target: size,
            replicates: b,
            mean_marginal: math::mean(&marginals),
            sd_marginal: math::sample_variance(&marginals).sqrt(),
            mean_worst_group: math::mean(&worsts),
            sd_worst_group: math::sample_variance(&worsts).sqrt(),
        });
    }
    Ok(SensitivityTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::QUANTILE_LEVELS;

    fn qf(lo: f64, hi: f64) -> QuantileForecast {
        // Linearly spaced quantiles with q_{0.05} = lo, q_{0.95} = hi,
        // endpoints pinned exactly.
        let mut quantiles = [0.0; 7];
        for (k, &level) in QUANTILE_LEVELS.iter().enumerate() {
            quantiles[k] = lo + (hi - lo) * (level - 0.05) / 0.90;
        }
        quantiles[0] = lo;
        quantiles[6] = hi;
        QuantileForecast { point: 0.5 * (lo + hi), quantiles }
    }

    #[test]
    fn score_signs_match_position_relative_to_pair() {
        let f = qf(-1.0, 1.0);
        assert!(nonconformity_score(&f, 0.0, 0.1).unwrap() < 0.0);
        assert!((nonconformity_score(&f, 2.0, 0.1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nonconformity_score(&f, -1.0, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn conformal_rank_handles_float_products() {
        assert_eq!(conformal_rank(19, 0.1), 18);
        assert_eq!(conformal_rank(99, 0.1), 90);
        assert_eq!(conformal_rank(999, 0.1), 900);
        assert_eq!(conformal_rank(100, 0.1), 91);
        assert_eq!(conformal_rank(99, 0.2), 80);
    }

    fn score_set(scores: &[f64], horizon: u32) -> ScoreSet {
        ScoreSet::from_entries(
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoreEntry { id: i as u64, horizon, score: s })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn offset_is_order_statistic() {
        // n = 19, alpha = 0.1: the 18th smallest.
        let scores: Vec<f64> = (1..=19).map(|i| i as f64).collect();
        let table =
            build_calibration(&score_set(&scores, 1), 0.1, CalibrationMode::Pooled).unwrap();
        assert_eq!(table.strata[0].offset, 18.0);
        assert_eq!(table.strata[0].n, 19);
    }

    #[test]
    fn constant_scores_give_constant_offset() {
        let table = build_calibration(
            &score_set(&[0.7; 25], 1),
            0.2,
            CalibrationMode::Pooled,
        )
        .unwrap();
        assert_eq!(table.strata[0].offset, 0.7);
    }

    #[test]
    fn offset_matches_full_sort_oracle_on_random_scores() {
        let mut s = Stream::new(5, &[tag::BOOTSTRAP]);
        for trial in 0..50 {
            let n = 20 + s.next_index(400);
            let scores: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
            for alpha in [0.1, 0.2, 0.5] {
                let table = build_calibration(
                    &score_set(&scores, 1),
                    alpha,
                    CalibrationMode::Pooled,
                )
                .unwrap();
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want = sorted[conformal_rank(n, alpha) - 1];
                assert_eq!(table.strata[0].offset, want, "trial {trial} alpha {alpha}");
            }
        }
    }

    #[test]
    fn infeasible_n_is_a_calibration_error() {
        // n = 5, alpha = 0.1: rank ceil(6*0.9) = 6 > 5.
        let err = build_calibration(
            &score_set(&[1.0, 2.0, 3.0, 4.0, 5.0], 3),
            0.1,
            CalibrationMode::Stratified,
        )
        .unwrap_err();
        match err {
            Error::CalibrationInfeasible { stratum, needed, have } => {
                assert_eq!(stratum, "h=3");
                assert_eq!((needed, have), (6, 5));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_scores_rejected() {
        let mut set = ScoreSet::new();
        set.push(ScoreEntry { id: 1, horizon: 2, score: 0.5 }).unwrap();
        assert!(set.push(ScoreEntry { id: 1, horizon: 2, score: 0.6 }).is_err());
        set.push(ScoreEntry { id: 1, horizon: 3, score: 0.6 }).unwrap();
    }

    #[test]
    fn interval_examples() {
        let f = qf(0.0, 1.0);
        let scores: Vec<f64> = vec![0.0; 39];
        let table =
            build_calibration(&score_set(&scores, 1), 0.1, CalibrationMode::Pooled).unwrap();
        assert_eq!(predict_interval(&f, &table, 1).unwrap(), (0.0, 1.0));

        let table2 = build_calibration(
            &score_set(&[0.5; 39], 1),
            0.1,
            CalibrationMode::Stratified,
        )
        .unwrap();
        let (lo, hi) = predict_interval(&f, &table2, 1).unwrap();
        assert_eq!((lo, hi), (-0.5, 1.5));
        assert!((hi - lo) - (1.0 + 2.0 * 0.5) < 1e-12);
        assert!(matches!(
            predict_interval(&f, &table2, 9),
            Err(Error::UncalibratedHorizon(9))
        ));
    }

    #[test]
    fn coverage_counts_boundaries_as_covered() {
        let intervals = vec![(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)];
        let truths = vec![0.0, 1.0, 2.0];
        let rep = empirical_coverage(&intervals, &truths, &[], 0.9).unwrap();
        assert!((rep.marginal - 2.0 / 3.0).abs() < 1e-12);
        let all_in = empirical_coverage(&intervals, &[0.5, 0.5, 0.5], &[], 0.9).unwrap();
        assert_eq!(all_in.marginal, 1.0);
        let groups = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        let rep2 = empirical_coverage(&intervals, &truths, &groups, 0.9).unwrap();
        assert_eq!(rep2.groups.len(), 2);
        let total: usize = rep2.groups.iter().map(|g| g.n).sum();
        assert_eq!(total, rep2.n);
    }

    #[test]
    fn offsets_nonincreasing_in_alpha() {
        let mut s = Stream::new(9, &[1]);
        let scores: Vec<f64> = (0..200).map(|_| s.next_normal()).collect();
        let set = score_set(&scores, 1);
        let mut last = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.2, 0.5] {
            let t = build_calibration(&set, alpha, CalibrationMode::Pooled).unwrap();
            assert!(t.strata[0].offset <= last);
            last = t.strata[0].offset;
        }
    }

    #[test]
    fn stratified_equals_pooled_with_single_stratum() {
        let mut s = Stream::new(11, &[2]);
        let scores: Vec<f64> = (0..150).map(|_| s.next_normal()).collect();
        let set = score_set(&scores, 4);
        let pooled = build_calibration(&set, 0.1, CalibrationMode::Pooled).unwrap();
        let strat = build_calibration(&set, 0.1, CalibrationMode::Stratified).unwrap();
        assert_eq!(pooled.strata[0].offset, strat.strata[0].offset);
        assert_eq!(strat.strata[0].horizon, Some(4));
    }

    #[test]
    fn coverage_bound_formula_values() {
        // Direct evaluation at the headline inputs.
        let b = coverage_bound(14_107, 0.65, 0.05).unwrap();
        assert!((b - 0.0075).abs() < 5e-5, "bound {b}");
        assert_eq!(coverage_bound(9, 0.0, 0.05).unwrap(), 0.1);
        // n -> infinity limit is 0.
        let tiny = coverage_bound(100_000_000, 0.65, 0.05).unwrap();
        assert!(tiny < 1e-3);
        assert!(coverage_bound(0, 0.5, 0.05).is_err());
        assert!(coverage_bound(10, 0.5, 1.5).is_err());
        assert!(coverage_bound(10, -0.1, 0.05).is_err());
    }

    #[test]
    fn lipschitz_estimate_matches_analytic_densities() {
        let n = 100_000;
        let mut s = Stream::new(13, &[3]);
        let normal: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let l_normal = estimate_lipschitz(&normal, 0.5).unwrap();
        assert!(
            (l_normal - math::normal_pdf(0.0)).abs() < 0.01,
            "KDE at the median {l_normal} vs phi(0) {}",
            math::normal_pdf(0.0)
        );
        let uniform: Vec<f64> = (0..n).map(|_| s.next_f64()).collect();
        let l_uniform = estimate_lipschitz(&uniform, 0.5).unwrap();
        assert!((l_uniform - 1.0).abs() < 0.03, "uniform density {l_uniform}");
        // Duplicate-heavy tiny sample stays finite.
        let dup = vec![1.0; 12];
        let l_dup = estimate_lipschitz(&dup, 0.1).unwrap();
        assert!(l_dup.is_finite());
    }

    #[test]
    fn exchangeable_splits_hit_the_marginal_band() {
        // 150 exchangeable calibration/test splits at n = 99, alpha = 0.1:
        // mean coverage should sit in [0.9, 0.91] within 3 MC standard
        // errors (the acceptance suite runs the full四-cell version).
        let n_cal = 99;
        let n_test = 500;
        let alpha = 0.1;
        let splits = 150;
        let mut coverages = Vec::with_capacity(splits);
        for rep in 0..splits {
            let mut s = Stream::new(17, &[rep as u64, 4]);
            let f = qf(-1.0, 1.0);
            let mut set = ScoreSet::new();
            for i in 0..n_cal {
                let y = s.next_normal();
                set.push(ScoreEntry {
                    id: i as u64,
                    horizon: 1,
                    score: nonconformity_score(&f, y, alpha).unwrap(),
                })
                .unwrap();
            }
            let table = build_calibration(&set, alpha, CalibrationMode::Pooled).unwrap();
            let mut intervals = Vec::with_capacity(n_test);
            let mut truths = Vec::with_capacity(n_test);
            for _ in 0..n_test {
                intervals.push(predict_interval(&f, &table, 1).unwrap());
                truths.push(s.next_normal());
            }
            let rep = empirical_coverage(&intervals, &truths, &[], 1.0 - alpha).unwrap();
            coverages.push(rep.marginal);
        }
        let mean = math::mean(&coverages);
        let se = (math::sample_variance(&coverages) / splits as f64).sqrt();
        let lo = 1.0 - alpha - 3.0 * se;
        let hi = 1.0 - alpha + 1.0 / (n_cal as f64 + 1.0) + 3.0 * se;
        assert!(
            mean >= lo && mean <= hi,
            "mean coverage {mean} outside [{lo}, {hi}]"
        );
    }

    fn synthetic_obs(n_per_cohort: usize, cohorts: &[i32], seed: u64) -> Vec<CalObs> {
        let mut out = Vec::new();
        let mut id = 0u64;
        for &cohort in cohorts {
            for i in 0..n_per_cohort {
                for h in 1..=2u32 {
                    let mut s = Stream::new(seed, &[cohort as u64, i as u64, h as u64]);
                    let scale = 1.0 + 0.2 * h as f64;
                    out.push(CalObs {
                        id,
                        cohort,
                        group: if i % 2 == 0 { "g0".into() } else { "g1".into() },
                        horizon: h,
                        q_lo: -scale,
                        q_hi: scale,
                        truth_log: scale * 1.2 * s.next_normal(),
                    });
                }
                id += 1;
            }
        }
        out
    }

    #[test]
    fn loco_b1_full_size_reproduces_single_pass() {
        let obs = synthetic_obs(300, &[1980, 1981], 21);
        let full = obs.iter().filter(|o| o.cohort != 1980).count();
        let table = loco_cv_study(&obs, 0.1, &[full], 1, 5).unwrap();
        let row = table
            .rows
            .iter()
            .find(|r| r.fold == "cohort-1980")
            .unwrap();
        // Recompute the same fold directly.
        let cal: Vec<&CalObs> = obs.iter().filter(|o| o.cohort != 1980).collect();
        let test: Vec<&CalObs> = obs.iter().filter(|o| o.cohort == 1980).collect();
        let (marginal, worst) = calibrate_and_evaluate(&cal, &test, 0.1).unwrap();
        assert_eq!(row.mean_marginal, marginal);
        assert_eq!(row.mean_worst_group, worst);
        assert_eq!(row.sd_marginal, 0.0);
    }

    #[test]
    fn loco_and_bootstrap_are_deterministic() {
        let obs = synthetic_obs(120, &[1980, 1981, 1982], 23);
        let a = loco_cv_study(&obs, 0.1, &[50, 100], 20, 7).unwrap();
        let b = loco_cv_study(&obs, 0.1, &[50, 100], 20, 7).unwrap();
        assert_eq!(a, b);
        let (cal, test): (Vec<CalObs>, Vec<CalObs>) =
            obs.into_iter().partition(|o| o.cohort != 1982);
        let c = bootstrap_study(&cal, &test, 0.1, &[50, 100], 20, 9).unwrap();
        let d = bootstrap_study(&cal, &test, 0.1, &[50, 100], 20, 9).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn bootstrap_full_sample_b1_close_to_direct_pass() {
        let obs = synthetic_obs(400, &[1980, 1981], 25);
        let (cal, test): (Vec<CalObs>, Vec<CalObs>) =
            obs.into_iter().partition(|o| o.cohort != 1981);
        let n_h = cal.iter().filter(|o| o.horizon == 1).count();
        let t = bootstrap_study(&cal, &test, 0.1, &[n_h], 40, 11).unwrap();
        let cal_refs: Vec<&CalObs> = cal.iter().collect();
        let test_refs: Vec<&CalObs> = test.iter().collect();
        let (direct, _) = calibrate_and_evaluate(&cal_refs, &test_refs, 0.1).unwrap();
        // Bootstrap resampling adds noise; the mean should still track the
        // direct pass.
        assert!(
            (t.rows[0].mean_marginal - direct).abs() < 0.03,
            "bootstrap mean {} vs direct {direct}",
            t.rows[0].mean_marginal
        );
    }

    #[test]
    fn stratified_subsample_preserves_group_shares() {
        let obs = synthetic_obs(500, &[1980], 27);
        let stratum: Vec<&CalObs> =
            obs.iter().filter(|o| o.horizon == 1).collect();
        let mut s = Stream::new(1, &[tag::SUBSAMPLE]);
        let sub = stratified_subsample(&stratum, 100, &mut s);
        assert_eq!(sub.len(), 100);
        let g0 = sub.iter().filter(|o| o.group == "g0").count();
        assert_eq!(g0, 50, "balanced groups should stay balanced");
        // Distinct observations (sampling without replacement).
        let mut ids: Vec<u64> = sub.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn calibration_table_json_round_trip() {
        let scores: Vec<f64> = (1..=40).map(|i| i as f64 / 10.0).collect();
        let mut set = ScoreSet::new();
        for (i, &s) in scores.iter().enumerate() {
            set.push(ScoreEntry { id: i as u64, horizon: 1 + (i % 2) as u32, score: s })
                .unwrap();
        }
        let table = build_calibration(&set, 0.2, CalibrationMode::Stratified).unwrap();
        let json = table.to_json().unwrap();
        let back = CalibrationTable::from_json(&json).unwrap();
        assert_eq!(table, back);
    }
}
