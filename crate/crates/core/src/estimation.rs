//! Moment computation on panels and GMM estimation of the earnings
//! processes at a reduced desk-scale moment set: mean, variance, skewness
//! and kurtosis of one-, three-, and five-year log earnings changes within
//! age bins.

use crate::error::{Error, Result};
use crate::math;
use crate::optim::{self, NelderMeadOptions};
use crate::panel::{
    log_value, simulate_gkos_panel, GkosParams, IndividualHistory, PopulationSpec,
};
use crate::rng::{tag, Stream};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Statistic of a log-change distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stat {
    Mean,
    Variance,
    Skewness,
    Kurtosis,
}

pub const ALL_STATS: [Stat; 4] = [Stat::Mean, Stat::Variance, Stat::Skewness, Stat::Kurtosis];

/// One retained moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub lag: u32,
    /// Half-open age bin `[lo, hi)` evaluated at the base year of the change.
    pub age_bin: (i32, i32),
    pub stat: Stat,
    pub value: f64,
    pub n_obs: usize,
}

/// A moment that could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedMoment {
    pub lag: u32,
    pub age_bin: (i32, i32),
    pub stat: Stat,
    pub reason: String,
}

/// Ordered list of change moments; ordering is canonical in
/// (lag, age bin, statistic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub moments: Vec<Moment>,
    pub dropped: Vec<DroppedMoment>,
}

impl MomentVector {
    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }
}

/// Default desk-scale age bins (three ten-year bins from 25).
pub fn default_age_bins() -> Vec<(i32, i32)> {
    vec![(25, 35), (35, 45), (45, 55)]
}

pub const DEFAULT_LAGS: [u32; 3] = [1, 3, 5];

fn change_moments_ref(
    panel: &[&IndividualHistory],
    lags: &[u32],
    age_bins: &[(i32, i32)],
) -> Result<MomentVector> {
    if panel.is_empty() {
        return Err(Error::Estimation("empty panel".into()));
    }
    // Bucket changes by (lag, bin).
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); lags.len() * age_bins.len()];
    for hist in panel {
        let recs = &hist.records;
        // Index from year offset to record position for gap-safe lookup.
        let year0 = match recs.first() {
            Some(r) => r.year,
            None => continue,
        };
        let span = (recs.last().unwrap().year - year0 + 1) as usize;
        let mut by_year: Vec<Option<usize>> = vec![None; span];
        for (i, r) in recs.iter().enumerate() {
            by_year[(r.year - year0) as usize] = Some(i);
        }
        for (li, &lag) in lags.iter().enumerate() {
            for (i, r) in recs.iter().enumerate() {
                let target_off = (r.year - year0) as usize + lag as usize;
                if target_off >= span {
                    continue;
                }
                let Some(j) = by_year[target_off] else { continue };
                let change = log_value(recs[j].earnings) - log_value(r.earnings);
                let _ = i;
                for (bi, &(lo, hi)) in age_bins.iter().enumerate() {
                    if r.age >= lo && r.age < hi {
                        buckets[li * age_bins.len() + bi].push(change);
                        break;
                    }
                }
            }
        }
    }

    let mut moments = Vec::new();
    let mut dropped = Vec::new();
    for (li, &lag) in lags.iter().enumerate() {
        for (bi, &bin) in age_bins.iter().enumerate() {
            let xs = &buckets[li * age_bins.len() + bi];
            let n = xs.len();
            if n < 2 {
                for stat in ALL_STATS {
                    dropped.push(DroppedMoment {
                        lag,
                        age_bin: bin,
                        stat,
                        reason: format!("n_obs = {n} < 2"),
                    });
                }
                continue;
            }
            let mean = math::mean(xs);
            let variance = math::sample_variance(xs);
            moments.push(Moment { lag, age_bin: bin, stat: Stat::Mean, value: mean, n_obs: n });
            moments.push(Moment {
                lag,
                age_bin: bin,
                stat: Stat::Variance,
                value: variance,
                n_obs: n,
            });
            let (m2, m3, m4) = math::central_moments(xs);
            if m2 <= 0.0 {
                for stat in [Stat::Skewness, Stat::Kurtosis] {
                    dropped.push(DroppedMoment {
                        lag,
                        age_bin: bin,
                        stat,
                        reason: "zero variance".into(),
                    });
                }
            } else {
                moments.push(Moment {
                    lag,
                    age_bin: bin,
                    stat: Stat::Skewness,
                    value: m3 / m2.powf(1.5),
                    n_obs: n,
                });
                moments.push(Moment {
                    lag,
                    age_bin: bin,
                    stat: Stat::Kurtosis,
                    value: m4 / (m2 * m2),
                    n_obs: n,
                });
            }
        }
    }
    Ok(MomentVector { moments, dropped })
}

/// Compute change moments over a panel. Zero-earnings years enter with log
/// value zero. Bins with fewer than two observations (and skewness or
/// kurtosis of zero-variance cells) are dropped with a warning entry.
pub fn compute_change_moments(
    panel: &[IndividualHistory],
    lags: &[u32],
    age_bins: &[(i32, i32)],
) -> Result<MomentVector> {
    let refs: Vec<&IndividualHistory> = panel.iter().collect();
    change_moments_ref(&refs, lags, age_bins)
}

/// Moment weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weighting {
    Identity,
    /// Inverse of a diagonal bootstrap estimate of the moment variances.
    DiagonalBootstrap { replicates: usize },
}

/// Resolved weights aligned with a target moment vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub diagonal: Vec<f64>,
}

impl WeightMatrix {
    pub fn identity(n: usize) -> Self {
        WeightMatrix { diagonal: vec![1.0; n] }
    }
}

/// Box bounds for the six free parameters, in order:
/// rho, permanent mean 1, permanent variance 1, permanent weight 1,
/// transitory variance 1, transitory weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            lo: [0.5, -1.5, 1e-4, 0.05, 1e-4, 0.05],
            hi: [0.985, 1.5, 0.8, 0.95, 0.8, 0.95],
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        for i in 0..6 {
            if self.lo[i] >= self.hi[i] {
                return Err(Error::Parameter(format!(
                    "bound {i} not well-ordered: [{}, {}]",
                    self.lo[i], self.hi[i]
                )));
            }
        }
        Ok(())
    }
}

/// GMM configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub lags: Vec<u32>,
    pub age_bins: Vec<(i32, i32)>,
    pub weighting: Weighting,
    pub max_evaluations: usize,
    pub tolerance: f64,
    pub bounds: ParamBounds,
    /// Individuals in the nested simulation used for simulated moments.
    pub nested_individuals: usize,
    /// Fixed seed of the nested simulation (common random numbers across
    /// objective evaluations).
    pub nested_seed: u64,
    /// Starting point; its filler mixture components are held fixed.
    pub init: GkosParams,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            lags: DEFAULT_LAGS.to_vec(),
            age_bins: default_age_bins(),
            weighting: Weighting::Identity,
            max_evaluations: 400,
            tolerance: 1e-8,
            bounds: ParamBounds::default(),
            nested_individuals: 20_000,
            nested_seed: 0x6d6f_6d65,
            init: GkosParams::reference(),
        }
    }
}

/// Simulation context shared by objective evaluations.
#[derive(Debug, Clone)]
pub struct GmmContext {
    pub pop: PopulationSpec,
    pub lags: Vec<u32>,
    pub age_bins: Vec<(i32, i32)>,
    pub nested_seed: u64,
}

impl GmmContext {
    pub fn from_config(pop: &PopulationSpec, cfg: &GmmConfig) -> Self {
        let mut nested_pop = pop.clone();
        nested_pop.n_individuals = cfg.nested_individuals.min(pop.n_individuals.max(1));
        nested_pop.feature_schema = Default::default();
        nested_pop.feature_coupling = Vec::new();
        GmmContext {
            pop: nested_pop,
            lags: cfg.lags.clone(),
            age_bins: cfg.age_bins.clone(),
            nested_seed: cfg.nested_seed,
        }
    }
}

const PENALTY: f64 = 1e12;

fn moment_key(m: &Moment) -> (u32, i32, i32, Stat) {
    (m.lag, m.age_bin.0, m.age_bin.1, m.stat)
}

/// Weighted squared distance between simulated moments at `params` and the
/// target. The nested panel is simulated with the context's fixed seed.
/// A target moment without a finite simulated counterpart yields a large
/// finite penalty.
pub fn gmm_objective(
    params: &GkosParams,
    target: &MomentVector,
    weights: &WeightMatrix,
    ctx: &GmmContext,
) -> f64 {
    if params.validate().is_err() {
        return PENALTY;
    }
    let sim_panel = match simulate_gkos_panel(params, &ctx.pop, ctx.nested_seed) {
        Ok(p) => p,
        Err(_) => return PENALTY,
    };
    let sim = match compute_change_moments(&sim_panel, &ctx.lags, &ctx.age_bins) {
        Ok(m) => m,
        Err(_) => return PENALTY,
    };
    let sim_map: HashMap<_, f64> =
        sim.moments.iter().map(|m| (moment_key(m), m.value)).collect();
    let mut obj = 0.0;
    for (m, w) in target.moments.iter().zip(&weights.diagonal) {
        match sim_map.get(&moment_key(m)) {
            Some(v) if v.is_finite() => {
                let g = v - m.value;
                obj += w * g * g;
            }
            _ => return PENALTY,
        }
    }
    obj
}

/// Free-parameter vector: the leading component of each mixture plus rho.
fn params_to_vector(p: &GkosParams) -> [f64; 6] {
    [
        p.rho,
        p.perm_mix[0].mean,
        p.perm_mix[0].variance,
        p.perm_mix[0].weight,
        p.trans_mix[0].variance,
        p.trans_mix[0].weight,
    ]
}

/// Rebuild parameters from the free vector, holding the filler components
/// of `base` fixed and rescaling their weights so each mixture sums to 1.
fn vector_to_params(base: &GkosParams, v: &[f64; 6]) -> GkosParams {
    let mut p = base.clone();
    p.rho = v[0];
    p.perm_mix[0].mean = v[1];
    p.perm_mix[0].variance = v[2];
    p.perm_mix[0].weight = v[3];
    let filler: f64 = base.perm_mix[1].weight + base.perm_mix[2].weight;
    if filler > 1e-12 {
        let scale = (1.0 - v[3]) / filler;
        p.perm_mix[1].weight = base.perm_mix[1].weight * scale;
        p.perm_mix[2].weight = base.perm_mix[2].weight * scale;
    } else {
        p.perm_mix[1].weight = 1.0 - v[3];
        p.perm_mix[2].weight = 0.0;
    }
    p.trans_mix[0].variance = v[4];
    p.trans_mix[0].weight = v[5];
    p.trans_mix[1].weight = 1.0 - v[5];
    p
}

/// Estimation diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmDiagnostics {
    pub final_objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub penalized_evaluations: usize,
    pub n_target_moments: usize,
}

/// Bootstrap diagonal weights for the target moments: inverse variance of
/// each moment over `replicates` resamples of individuals.
pub fn bootstrap_diagonal_weights(
    panel: &[IndividualHistory],
    target: &MomentVector,
    lags: &[u32],
    age_bins: &[(i32, i32)],
    replicates: usize,
    seed: u64,
) -> Result<WeightMatrix> {
    let n = panel.len();
    let mut per_moment: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); target.len()];
    for b in 0..replicates {
        let mut s = Stream::new(seed, &[tag::BOOTSTRAP, b as u64]);
        let resampled: Vec<&IndividualHistory> =
            (0..n).map(|_| &panel[s.next_index(n)]).collect();
        let boot = change_moments_ref(&resampled, lags, age_bins)?;
        let boot_map: HashMap<_, f64> =
            boot.moments.iter().map(|m| (moment_key(m), m.value)).collect();
        for (j, m) in target.moments.iter().enumerate() {
            if let Some(v) = boot_map.get(&moment_key(m)) {
                per_moment[j].push(*v);
            }
        }
    }
    let diagonal = per_moment
        .iter()
        .map(|vals| {
            let var = math::sample_variance(vals);
            1.0 / var.max(1e-12)
        })
        .collect();
    Ok(WeightMatrix { diagonal })
}

/// Estimate the mixture process by simulated-moments GMM with Nelder-Mead
/// inside box bounds. The zero-earnings probability is estimated directly
/// from the panel's zero share; the fixed-effect scale and the filler
/// mixture components are held at their `cfg.init` values.
pub fn estimate_gkos(
    panel: &[IndividualHistory],
    pop: &PopulationSpec,
    cfg: &GmmConfig,
    seed: u64,
) -> Result<(GkosParams, GmmDiagnostics)> {
    cfg.bounds.validate()?;
    cfg.init.validate()?;
    if panel.is_empty() {
        return Err(Error::Estimation("empty panel".into()));
    }
    let target = compute_change_moments(panel, &cfg.lags, &cfg.age_bins)?;
    if target.is_empty() {
        return Err(Error::Estimation("no target moments survived".into()));
    }

    let weights = match cfg.weighting {
        Weighting::Identity => WeightMatrix::identity(target.len()),
        Weighting::DiagonalBootstrap { replicates } => bootstrap_diagonal_weights(
            panel,
            &target,
            &cfg.lags,
            &cfg.age_bins,
            replicates,
            seed,
        )?,
    };

    // Zero share is identified directly by the person-year zero fraction.
    let (mut zeros, mut total) = (0usize, 0usize);
    for h in panel {
        for r in &h.records {
            total += 1;
            if r.earnings == 0.0 {
                zeros += 1;
            }
        }
    }
    let mut base = cfg.init.clone();
    base.zero_prob = zeros as f64 / total.max(1) as f64;

    let ctx = GmmContext::from_config(pop, cfg);
    let x0_raw = params_to_vector(&base);
    let x0: Vec<f64> = (0..6)
        .map(|i| optim::from_bounded(x0_raw[i], cfg.bounds.lo[i], cfg.bounds.hi[i]))
        .collect();

    let mut penalized = 0usize;
    let result = optim::nelder_mead(
        |u| {
            let mut v = [0.0; 6];
            for i in 0..6 {
                v[i] = optim::to_bounded(u[i], cfg.bounds.lo[i], cfg.bounds.hi[i]);
            }
            let candidate = vector_to_params(&base, &v);
            let f = gmm_objective(&candidate, &target, &weights, &ctx);
            if f >= PENALTY {
                penalized += 1;
            }
            f
        },
        &x0,
        &NelderMeadOptions {
            max_evaluations: cfg.max_evaluations,
            tolerance: cfg.tolerance,
            initial_step: 0.3,
        },
    );

    let mut v = [0.0; 6];
    for i in 0..6 {
        v[i] = optim::to_bounded(result.x_min[i], cfg.bounds.lo[i], cfg.bounds.hi[i]);
    }
    let estimate = vector_to_params(&base, &v);
    estimate.validate()?;
    let diagnostics = GmmDiagnostics {
        final_objective: result.f_min,
        evaluations: result.evaluations,
        converged: result.converged,
        penalized_evaluations: penalized,
        n_target_moments: target.len(),
    };
    Ok((estimate, diagnostics))
}

/// Per-individual k-year log changes, gap-safe.
fn k_year_changes(hist: &IndividualHistory, k: i32) -> Vec<f64> {
    let recs = &hist.records;
    let Some(first) = recs.first() else { return Vec::new() };
    let span = (recs.last().unwrap().year - first.year + 1) as usize;
    let mut by_year: Vec<Option<usize>> = vec![None; span];
    for (i, r) in recs.iter().enumerate() {
        by_year[(r.year - first.year) as usize] = Some(i);
    }
    let mut out = Vec::new();
    for r in recs {
        let off = (r.year - first.year + k) as usize;
        if off < span {
            if let Some(j) = by_year[off] {
                out.push(log_value(recs[j].earnings) - log_value(r.earnings));
            }
        }
    }
    out
}

fn pooled_variance(changes: &[Vec<f64>]) -> (f64, usize) {
    let all: Vec<f64> = changes.iter().flatten().copied().collect();
    (math::sample_variance(&all), all.len())
}

/// Estimate the Gaussian AR(1)-plus-transitory process from a panel.
///
/// The moments are variances of one-, two-, and three-year log earnings
/// changes, `V_k = 2 sigma_z^2 (1 - rho^k) + 2 sigma_eps^2`. Their
/// consecutive differences cancel the transitory component, so
/// `rho = (V_3 - V_2) / (V_2 - V_1)` stays consistent under iid
/// measurement-like noise. Variances follow in closed form. When the
/// persistence signal `V_2 - V_1` is within cluster-bootstrap noise of
/// zero, rho is reported as 0 and the innovation absorbs the one-year
/// change variance (the split is not identified in that case).
pub fn estimate_ar1(panel: &[IndividualHistory]) -> Result<crate::panel::Ar1Params> {
    let mut per_ind: Vec<[Vec<f64>; 3]> = Vec::new();
    for h in panel {
        let c1 = k_year_changes(h, 1);
        if c1.len() >= 3 {
            per_ind.push([c1, k_year_changes(h, 2), k_year_changes(h, 3)]);
        }
    }
    if per_ind.is_empty() {
        return Err(Error::Estimation(
            "no individual has >= 3 consecutive-year change pairs".into(),
        ));
    }
    let v = |k: usize| {
        let changes: Vec<Vec<f64>> = per_ind.iter().map(|c| c[k].clone()).collect();
        pooled_variance(&changes)
    };
    let (v1, n1) = v(0);
    let (v2, n2) = v(1);
    let (v3, n3) = v(2);
    if n1 < 30 || n2 < 30 || n3 < 30 {
        return Err(Error::Estimation(format!(
            "insufficient overlap for change variances (pairs: {n1}, {n2}, {n3})"
        )));
    }
    if v1 < 1e-14 {
        return Err(Error::Estimation(
            "degenerate change variances (constant log earnings)".into(),
        ));
    }

    // Cluster bootstrap SE of the persistence signal V_2 - V_1 (fixed
    // internal seed; the estimator stays deterministic in the panel).
    let n_ind = per_ind.len();
    let boot = 40usize;
    let mut signals = Vec::with_capacity(boot);
    for b in 0..boot {
        let mut s = Stream::new(0x4152_3153, &[tag::BOOTSTRAP, b as u64]);
        let mut d1: Vec<f64> = Vec::new();
        let mut d2: Vec<f64> = Vec::new();
        for _ in 0..n_ind {
            let pick = &per_ind[s.next_index(n_ind)];
            d1.extend_from_slice(&pick[0]);
            d2.extend_from_slice(&pick[1]);
        }
        signals.push(math::sample_variance(&d2) - math::sample_variance(&d1));
    }
    let signal_se = math::sample_variance(&signals).sqrt();

    let d21 = v2 - v1;
    let d32 = v3 - v2;
    let rho = if d21.abs() <= 3.0 * signal_se {
        0.0
    } else {
        let r = d32 / d21;
        if !r.is_finite() || r.abs() >= 0.999 {
            return Err(Error::Estimation(format!(
                "change-variance ratio {r} outside the stationary region"
            )));
        }
        r
    };

    let (stationary_var, transitory_variance) = if rho.abs() < 1e-9 {
        (v1 / 2.0, 0.0)
    } else {
        let sz = (d21 / (2.0 * rho * (1.0 - rho))).max(0.0);
        let te = (v1 / 2.0 - sz * (1.0 - rho)).max(0.0);
        (sz, te)
    };
    let innovation_variance = stationary_var * (1.0 - rho * rho);

    // Fixed-effect scale from the cross-sectional level variance.
    let levels: Vec<f64> = panel
        .iter()
        .flat_map(|h| h.records.iter().map(|r| log_value(r.earnings)))
        .collect();
    let level_var = math::sample_variance(&levels);
    let fe_var = (level_var - stationary_var - transitory_variance).max(0.0);

    let params = crate::panel::Ar1Params {
        rho,
        innovation_variance,
        transitory_variance,
        fixed_effect_sd: fe_var.sqrt(),
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{simulate_ar1_panel, Ar1Params, FeatureSchema, MixtureComponent};

    fn pop(n: usize) -> PopulationSpec {
        PopulationSpec {
            n_individuals: n,
            birth_cohort_range: (1955, 1955),
            observation_window: (1980, 2009),
            entry_age: 20,
            feature_schema: FeatureSchema::default(),
            feature_coupling: Vec::new(),
            conditioning_len: 10,
        }
    }

    /// Textbook two-pass oracle, computed through an independent code path
    /// over explicitly enumerated (year, year+lag) pairs.
    fn oracle_moments(
        panel: &[IndividualHistory],
        lag: u32,
        bin: (i32, i32),
    ) -> Option<(f64, f64, f64, f64, usize)> {
        let mut changes = Vec::new();
        for h in panel {
            for a in &h.records {
                if !(a.age >= bin.0 && a.age < bin.1) {
                    continue;
                }
                for b in &h.records {
                    if b.year == a.year + lag as i32 {
                        changes.push(log_value(b.earnings) - log_value(a.earnings));
                    }
                }
            }
        }
        let n = changes.len();
        if n < 2 {
            return None;
        }
        let mean = changes.iter().sum::<f64>() / n as f64;
        let var = changes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m2 = changes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = changes.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        let m4 = changes.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        Some((mean, var, m3 / m2.powf(1.5), m4 / (m2 * m2), n))
    }

    #[test]
    fn constant_panel_drops_shape_moments() {
        let p = Ar1Params {
            rho: 0.5,
            innovation_variance: 0.0,
            transitory_variance: 0.0,
            fixed_effect_sd: 1.0,
        };
        let panel = simulate_ar1_panel(&p, &pop(100), 1).unwrap();
        let mv = compute_change_moments(&panel, &[1, 3], &[(20, 40)]).unwrap();
        for m in &mv.moments {
            match m.stat {
                Stat::Mean | Stat::Variance => assert!(m.value.abs() < 1e-20),
                _ => panic!("skewness/kurtosis should have been dropped"),
            }
        }
        assert_eq!(mv.dropped.len(), 4, "2 lags x (skew + kurt)");
    }

    #[test]
    fn symmetric_shocks_have_no_skewness() {
        // Single-age bin so each individual contributes exactly one change
        // and the changes are independent; SE(skewness) = sqrt(6/n).
        let p = Ar1Params {
            rho: 0.6,
            innovation_variance: 0.2,
            transitory_variance: 0.1,
            fixed_effect_sd: 0.0,
        };
        let panel = simulate_ar1_panel(&p, &pop(50_000), 2).unwrap();
        let mv = compute_change_moments(&panel, &[1], &[(30, 31)]).unwrap();
        let skew = mv
            .moments
            .iter()
            .find(|m| m.stat == Stat::Skewness)
            .expect("skewness present");
        assert_eq!(skew.n_obs, 50_000);
        let se = (6.0 / skew.n_obs as f64).sqrt();
        assert!(
            skew.value.abs() < 4.0 * se,
            "skewness {} beyond 4 MC standard errors ({})",
            skew.value,
            4.0 * se
        );
    }

    #[test]
    fn moments_match_independent_oracle() {
        let params = GkosParams::reference();
        let panel = simulate_gkos_panel(&params, &pop(2_000), 3).unwrap();
        let lags = [1u32, 3, 5];
        let bins = default_age_bins();
        let mv = compute_change_moments(&panel, &lags, &bins).unwrap();
        for &lag in &lags {
            for &bin in &bins {
                let Some((mean, var, skew, kurt, n)) = oracle_moments(&panel, lag, bin) else {
                    continue;
                };
                let find = |stat: Stat| {
                    mv.moments
                        .iter()
                        .find(|m| m.lag == lag && m.age_bin == bin && m.stat == stat)
                        .unwrap()
                };
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
                assert!(rel(find(Stat::Mean).value, mean) < 1e-12);
                assert!(rel(find(Stat::Variance).value, var) < 1e-12);
                assert!(rel(find(Stat::Skewness).value, skew) < 1e-12);
                assert!(rel(find(Stat::Kurtosis).value, kurt) < 1e-12);
                assert_eq!(find(Stat::Mean).n_obs, n);
            }
        }
    }

    #[test]
    fn moments_are_permutation_invariant() {
        let params = GkosParams::reference();
        let mut panel = simulate_gkos_panel(&params, &pop(300), 7).unwrap();
        let a = compute_change_moments(&panel, &[1, 3], &default_age_bins()).unwrap();
        panel.reverse();
        let b = compute_change_moments(&panel, &[1, 3], &default_age_bins()).unwrap();
        for (ma, mb) in a.moments.iter().zip(&b.moments) {
            assert_eq!(ma.stat, mb.stat);
            assert!((ma.value - mb.value).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_is_zero_at_self_match() {
        let cfg = GmmConfig { nested_individuals: 500, ..GmmConfig::default() };
        let ctx = GmmContext::from_config(&pop(500), &cfg);
        let params = GkosParams::reference();
        let nested = simulate_gkos_panel(&params, &ctx.pop, ctx.nested_seed).unwrap();
        let target = compute_change_moments(&nested, &ctx.lags, &ctx.age_bins).unwrap();
        let w = WeightMatrix::identity(target.len());
        assert_eq!(gmm_objective(&params, &target, &w, &ctx), 0.0);
    }

    #[test]
    fn objective_is_square_of_single_moment_gap() {
        let cfg = GmmConfig { nested_individuals: 500, ..GmmConfig::default() };
        let ctx = GmmContext::from_config(&pop(500), &cfg);
        let params = GkosParams::reference();
        let nested = simulate_gkos_panel(&params, &ctx.pop, ctx.nested_seed).unwrap();
        let mut target = compute_change_moments(&nested, &ctx.lags, &ctx.age_bins).unwrap();
        let delta = 0.37;
        target.moments[5].value += delta;
        let w = WeightMatrix::identity(target.len());
        let got = gmm_objective(&params, &target, &w, &ctx);
        assert!((got - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn objective_prefers_truth_over_rho_perturbations() {
        let truth = GkosParams::reference();
        let target_panel = simulate_gkos_panel(&truth, &pop(20_000), 41).unwrap();
        let cfg = GmmConfig { nested_individuals: 20_000, ..GmmConfig::default() };
        let ctx = GmmContext::from_config(&pop(20_000), &cfg);
        let target =
            compute_change_moments(&target_panel, &ctx.lags, &ctx.age_bins).unwrap();
        let w = WeightMatrix::identity(target.len());
        let at_truth = gmm_objective(&truth, &target, &w, &ctx);
        for drho in [-0.1, 0.1] {
            let mut p = truth.clone();
            p.rho += drho;
            let perturbed = gmm_objective(&p, &target, &w, &ctx);
            assert!(
                at_truth < perturbed,
                "objective {at_truth} at truth not below {perturbed} at rho{drho:+}"
            );
        }
    }

    #[test]
    fn estimate_gkos_is_deterministic() {
        let truth = GkosParams::reference();
        let panel = simulate_gkos_panel(&truth, &pop(2_000), 5).unwrap();
        let cfg = GmmConfig {
            nested_individuals: 1_000,
            max_evaluations: 60,
            ..GmmConfig::default()
        };
        let (a, _) = estimate_gkos(&panel, &pop(2_000), &cfg, 9).unwrap();
        let (b, _) = estimate_gkos(&panel, &pop(2_000), &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn estimate_gkos_respects_bounds_and_weight_sum() {
        // Degenerate panel: constant earnings drive variances to the lower
        // bound; estimates must stay inside the box and weights sum to 1.
        let p = Ar1Params {
            rho: 0.5,
            innovation_variance: 0.0,
            transitory_variance: 0.0,
            fixed_effect_sd: 0.5,
        };
        let panel = simulate_ar1_panel(&p, &pop(300), 11).unwrap();
        let cfg = GmmConfig {
            nested_individuals: 300,
            max_evaluations: 120,
            ..GmmConfig::default()
        };
        let (est, diag) = estimate_gkos(&panel, &pop(300), &cfg, 1).unwrap();
        for (i, v) in params_to_vector(&est).iter().enumerate() {
            assert!(
                *v >= cfg.bounds.lo[i] - 1e-12 && *v <= cfg.bounds.hi[i] + 1e-12,
                "param {i} = {v} outside box"
            );
        }
        let wp: f64 = est.perm_mix.iter().map(|c| c.weight).sum();
        let wt: f64 = est.trans_mix.iter().map(|c| c.weight).sum();
        assert!((wp - 1.0).abs() < 1e-12 && (wt - 1.0).abs() < 1e-12);
        // The leading permanent variance should move toward the zero
        // boundary relative to its starting value.
        assert!(
            est.perm_mix[0].variance < cfg.init.perm_mix[0].variance,
            "{:?}",
            est.perm_mix[0]
        );
        let _ = diag;
    }

    #[test]
    fn ar1_recovery_with_transitory_noise() {
        let truth = Ar1Params {
            rho: 0.9,
            innovation_variance: 0.19,
            transitory_variance: 0.06,
            fixed_effect_sd: 0.3,
        };
        let panel = simulate_ar1_panel(&truth, &pop(50_000), 17).unwrap();
        let est = estimate_ar1(&panel).unwrap();
        assert!(
            (est.rho - 0.9).abs() < 0.03,
            "recovered rho {} not within 0.03 of 0.9",
            est.rho
        );
        assert!((est.innovation_variance - 0.19).abs() < 0.05);
        assert!((est.transitory_variance - 0.06).abs() < 0.03);
    }

    #[test]
    fn ar1_white_noise_recovers_zero_rho() {
        let truth = Ar1Params {
            rho: 0.0,
            innovation_variance: 0.5,
            transitory_variance: 0.0,
            fixed_effect_sd: 0.2,
        };
        let panel = simulate_ar1_panel(&truth, &pop(50_000), 19).unwrap();
        let est = estimate_ar1(&panel).unwrap();
        assert!(est.rho.abs() < 0.03, "rho {} should be ~0", est.rho);
    }

    #[test]
    fn ar1_constant_earnings_is_estimation_error() {
        let truth = Ar1Params {
            rho: 0.5,
            innovation_variance: 0.0,
            transitory_variance: 0.0,
            fixed_effect_sd: 1.0,
        };
        let panel = simulate_ar1_panel(&truth, &pop(200), 23).unwrap();
        assert!(matches!(estimate_ar1(&panel), Err(Error::Estimation(_))));
    }

    #[test]
    fn moment_vector_serializes_to_canonical_json() {
        let params = GkosParams::reference();
        let panel = simulate_gkos_panel(&params, &pop(200), 29).unwrap();
        let mv = compute_change_moments(&panel, &[1], &[(20, 50)]).unwrap();
        let json = serde_json::to_string(&mv).unwrap();
        let back: MomentVector = serde_json::from_str(&json).unwrap();
        assert_eq!(mv, back);
        assert!(json.find("\"lag\"").unwrap() < json.find("\"age_bin\"").unwrap());
    }
}
