//! Irregular annual earnings panels: domain types, synthetic generators
//! for the mixture (GKOS-style) and Gaussian AR(1) processes, feature
//! attachment, lifetime present-discounted value, and CSV serialization.
//!
//! Earnings are non-negative levels in constant-price currency units. The
//! zero-earnings convention used throughout the crate maps earnings of
//! exactly zero to log value zero (`log 1 = 0`); see [`log_value`].

use crate::error::{Error, Result};
use crate::rng::{tag, Stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};

/// Log-earnings value with the zero convention: earnings of exactly 0 map
/// to 0.0, everything else to `ln(earnings)`.
#[inline]
pub fn log_value(earnings: f64) -> f64 {
    if earnings == 0.0 {
        0.0
    } else {
        earnings.ln()
    }
}

/// One person-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualRecord {
    pub year: i32,
    pub age: i32,
    /// Non-negative earnings level in constant-price units.
    pub earnings: f64,
    /// Continuous feature values (may be empty).
    pub continuous: Vec<f64>,
    /// Categorical feature indices (may be empty). A value equal to the
    /// feature's cardinality denotes the reserved "unknown" index.
    pub categoricals: Vec<u32>,
    /// Missingness over continuous then categorical slots;
    /// `true` = missing. Length must equal `continuous.len() + categoricals.len()`.
    pub missing_mask: Vec<bool>,
}

impl AnnualRecord {
    pub fn validate(&self) -> Result<()> {
        if self.earnings < 0.0 || !self.earnings.is_finite() {
            return Err(Error::Parameter(format!(
                "earnings must be finite and >= 0, got {}",
                self.earnings
            )));
        }
        if self.missing_mask.len() != self.continuous.len() + self.categoricals.len() {
            return Err(Error::Schema(format!(
                "mask length {} != continuous {} + categorical {}",
                self.missing_mask.len(),
                self.continuous.len(),
                self.categoricals.len()
            )));
        }
        Ok(())
    }
}

/// Ordered, possibly gappy, annual history of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualHistory {
    pub id: u64,
    pub birth_year: i32,
    /// Strictly ascending in year.
    pub records: Vec<AnnualRecord>,
    /// Length of the conditioning window T_C.
    pub conditioning_len: usize,
}

impl IndividualHistory {
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].year <= w[0].year {
                return Err(Error::Schema(format!(
                    "records of individual {} not strictly ascending at year {}",
                    self.id, w[1].year
                )));
            }
        }
        for r in &self.records {
            r.validate()?;
            if r.age != r.year - self.birth_year {
                return Err(Error::Schema(format!(
                    "individual {}: age {} != year {} - birth_year {}",
                    self.id, r.age, r.year, self.birth_year
                )));
            }
        }
        Ok(())
    }

    /// The first `conditioning_len` records.
    pub fn conditioning_window(&self) -> &[AnnualRecord] {
        &self.records[..self.conditioning_len.min(self.records.len())]
    }
}

/// One normal mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

fn validate_mixture(components: &[MixtureComponent], label: &str) -> Result<()> {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Parameter(format!(
            "{label} mixture weights sum to {total}, expected 1"
        )));
    }
    for c in components {
        if c.variance <= 0.0 {
            return Err(Error::Parameter(format!(
                "{label} mixture variance must be > 0, got {}",
                c.variance
            )));
        }
        if c.weight < 0.0 {
            return Err(Error::Parameter(format!(
                "{label} mixture weight must be >= 0, got {}",
                c.weight
            )));
        }
    }
    Ok(())
}

/// Mixture mean and variance.
pub fn mixture_moments(components: &[MixtureComponent]) -> (f64, f64) {
    let mean: f64 = components.iter().map(|c| c.weight * c.mean).sum();
    let second: f64 = components
        .iter()
        .map(|c| c.weight * (c.variance + c.mean * c.mean))
        .sum();
    (mean, second - mean * mean)
}

fn sample_mixture(components: &[MixtureComponent], stream: &mut Stream) -> f64 {
    let u = stream.next_f64();
    let z = stream.next_normal();
    let mut acc = 0.0;
    for c in components {
        acc += c.weight;
        if u < acc {
            return c.mean + c.variance.sqrt() * z;
        }
    }
    let last = components.last().expect("nonempty mixture");
    last.mean + last.variance.sqrt() * z
}

/// Parameters of the mixture earnings process: fixed effect, AR(1)
/// permanent component with three-component normal-mixture innovations,
/// two-component normal-mixture transitory shock, and a zero-earnings
/// override probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GkosParams {
    /// AR coefficient of the permanent component, in (-1, 1).
    pub rho: f64,
    /// Three permanent-innovation components.
    pub perm_mix: [MixtureComponent; 3],
    /// Two transitory components.
    pub trans_mix: [MixtureComponent; 2],
    /// Standard deviation of the Gaussian fixed effect.
    pub fixed_effect_sd: f64,
    /// Probability that a person-year's earnings are set to exactly zero.
    pub zero_prob: f64,
}

impl GkosParams {
    pub fn validate(&self) -> Result<()> {
        if self.rho.abs() >= 1.0 {
            return Err(Error::Parameter(format!("|rho| must be < 1, got {}", self.rho)));
        }
        validate_mixture(&self.perm_mix, "permanent")?;
        validate_mixture(&self.trans_mix, "transitory")?;
        if self.fixed_effect_sd < 0.0 {
            return Err(Error::Parameter("fixed_effect_sd must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(Error::Parameter(format!(
                "zero_prob must be in [0,1], got {}",
                self.zero_prob
            )));
        }
        Ok(())
    }

    /// Reference parameter bundle used by the synthetic benchmarks. The
    /// leading component of each mixture and the AR coefficient follow the
    /// published Swedish-panel estimates; the filler components are chosen
    /// mean-zero overall with heavier tails, and the zero-earnings share
    /// matches the reported 7.4%.
    pub fn reference() -> Self {
        GkosParams {
            rho: 0.924,
            perm_mix: [
                MixtureComponent { mean: -0.287, variance: 0.0418, weight: 0.784 },
                MixtureComponent { mean: 0.7, variance: 0.15, weight: 0.15 },
                MixtureComponent { mean: 1.817_878_787_878_788, variance: 0.4, weight: 0.066 },
            ],
            trans_mix: [
                MixtureComponent { mean: 0.0, variance: 0.0712, weight: 0.681 },
                MixtureComponent { mean: 0.0, variance: 0.35, weight: 0.319 },
            ],
            fixed_effect_sd: 0.3,
            zero_prob: 0.074,
        }
    }

    /// Stationary mean and variance of the permanent component.
    pub fn permanent_stationary(&self) -> (f64, f64) {
        let (m, v) = mixture_moments(&self.perm_mix);
        (m / (1.0 - self.rho), v / (1.0 - self.rho * self.rho))
    }
}

/// Gaussian AR(1)-plus-transitory process parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1Params {
    pub rho: f64,
    pub innovation_variance: f64,
    pub transitory_variance: f64,
    pub fixed_effect_sd: f64,
}

impl Ar1Params {
    pub fn validate(&self) -> Result<()> {
        if self.rho.abs() >= 1.0 {
            return Err(Error::Parameter(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.innovation_variance < 0.0
            || self.transitory_variance < 0.0
            || self.fixed_effect_sd < 0.0
        {
            return Err(Error::Parameter("variances must be >= 0".into()));
        }
        Ok(())
    }

    /// Stationary variance of the permanent component.
    pub fn stationary_variance(&self) -> f64 {
        self.innovation_variance / (1.0 - self.rho * self.rho)
    }
}

/// Declared continuous feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeature {
    pub name: String,
}

/// Declared categorical feature with a first-order Markov evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    /// Number of observable categories (the reserved unknown index is
    /// `cardinality`, not counted here). Must be >= 2.
    pub cardinality: u32,
    /// Per-year probability of keeping the current category; the rest of
    /// the mass is spread uniformly over the other categories.
    pub stay_prob: f64,
}

/// Feature schema for a population.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub continuous: Vec<ContinuousFeature>,
    pub categorical: Vec<CategoricalFeature>,
    /// I.i.d. missingness rate applied per feature slot per year.
    pub missing_rate: f64,
}

impl FeatureSchema {
    pub fn n_slots(&self) -> usize {
        self.continuous.len() + self.categorical.len()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.categorical {
            if c.cardinality < 2 {
                return Err(Error::Schema(format!(
                    "categorical feature '{}' needs cardinality >= 2, got {}",
                    c.name, c.cardinality
                )));
            }
            if !(0.0..=1.0).contains(&c.stay_prob) {
                return Err(Error::Schema(format!(
                    "stay_prob of '{}' must be in [0,1]",
                    c.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::Schema("missing_rate must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// A coupling rule: every transition of the named categorical feature adds
/// `drift_per_year` to the individual's log-earnings slope from the
/// transition year onward (year `t` after a switch at `t0` gains
/// `drift_per_year * (t - t0)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRule {
    pub feature: String,
    pub drift_per_year: f64,
}

/// Population layout for the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_individuals: usize,
    /// Inclusive birth-cohort range.
    pub birth_cohort_range: (i32, i32),
    /// Inclusive first/last calendar year of the panel.
    pub observation_window: (i32, i32),
    /// Age at panel entry; records start at `birth_year + entry_age`.
    pub entry_age: i32,
    pub feature_schema: FeatureSchema,
    pub feature_coupling: Vec<CouplingRule>,
    /// Conditioning window length stamped on generated histories.
    pub conditioning_len: usize,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 {
            return Err(Error::Parameter("n_individuals must be >= 1".into()));
        }
        if self.entry_age < 16 {
            return Err(Error::Parameter(format!(
                "entry_age must be >= 16, got {}",
                self.entry_age
            )));
        }
        if self.birth_cohort_range.0 > self.birth_cohort_range.1 {
            return Err(Error::Parameter("birth_cohort_range reversed".into()));
        }
        if self.observation_window.0 > self.observation_window.1 {
            return Err(Error::Parameter("observation_window reversed".into()));
        }
        self.feature_schema.validate()?;
        for rule in &self.feature_coupling {
            if !self
                .feature_schema
                .categorical
                .iter()
                .any(|c| c.name == rule.feature)
            {
                return Err(Error::Schema(format!(
                    "coupling references unknown categorical feature '{}'",
                    rule.feature
                )));
            }
        }
        Ok(())
    }

    fn birth_year(&self, id: u64, seed: u64) -> i32 {
        let (lo, hi) = self.birth_cohort_range;
        if lo == hi {
            return lo;
        }
        let mut s = Stream::new(seed, &[id, tag::BIRTH_YEAR]);
        lo + s.next_index((hi - lo + 1) as usize) as i32
    }

    /// Observed calendar years for one individual (consecutive; capped at
    /// age 64 and at the observation window).
    fn observed_years(&self, birth_year: i32) -> std::ops::RangeInclusive<i32> {
        let first = (birth_year + self.entry_age).max(self.observation_window.0);
        let last = (birth_year + 64).min(self.observation_window.1);
        first..=last
    }
}

/// Number of burn-in steps used to bring the permanent component to its
/// stationary distribution (moment-matched start plus mixture steps).
const STATIONARY_BURN_IN: usize = 100;

fn simulate_gkos_individual(
    params: &GkosParams,
    pop: &PopulationSpec,
    seed: u64,
    id: u64,
) -> IndividualHistory {
    let birth_year = pop.birth_year(id, seed);
    let mut fe_stream = Stream::new(seed, &[id, tag::FIXED_EFFECT]);
    let alpha = params.fixed_effect_sd * fe_stream.next_normal();

    let (stat_mean, stat_var) = params.permanent_stationary();
    let mut init = Stream::new(seed, &[id, tag::PERM_INIT]);
    let mut z = stat_mean + stat_var.sqrt() * init.next_normal();
    let mut burn = Stream::new(seed, &[id, tag::PERM_BURN]);
    for _ in 0..STATIONARY_BURN_IN {
        z = params.rho * z + sample_mixture(&params.perm_mix, &mut burn);
    }

    let mut records = Vec::new();
    for year in pop.observed_years(birth_year) {
        let y64 = year as u64 as u64;
        let mut perm = Stream::new(seed, &[id, y64, tag::PERM_SHOCK]);
        z = params.rho * z + sample_mixture(&params.perm_mix, &mut perm);
        let mut trans = Stream::new(seed, &[id, y64, tag::TRANS_SHOCK]);
        let eps = sample_mixture(&params.trans_mix, &mut trans);
        let mut zero = Stream::new(seed, &[id, y64, tag::ZERO_EVENT]);
        let earnings = if zero.next_f64() < params.zero_prob {
            0.0
        } else {
            (alpha + z + eps).exp()
        };
        records.push(AnnualRecord {
            year,
            age: year - birth_year,
            earnings,
            continuous: Vec::new(),
            categoricals: Vec::new(),
            missing_mask: Vec::new(),
        });
    }
    IndividualHistory { id, birth_year, records, conditioning_len: pop.conditioning_len }
}

/// Simulate a panel under the mixture process. Deterministic in
/// `(params, pop, seed)` and invariant to thread count.
pub fn simulate_gkos_panel(
    params: &GkosParams,
    pop: &PopulationSpec,
    seed: u64,
) -> Result<Vec<IndividualHistory>> {
    params.validate()?;
    pop.validate()?;
    Ok((0..pop.n_individuals as u64)
        .into_par_iter()
        .map(|id| simulate_gkos_individual(params, pop, seed, id))
        .collect())
}

fn simulate_ar1_individual(
    params: &Ar1Params,
    pop: &PopulationSpec,
    seed: u64,
    id: u64,
) -> IndividualHistory {
    let birth_year = pop.birth_year(id, seed);
    let mut fe_stream = Stream::new(seed, &[id, tag::FIXED_EFFECT]);
    let alpha = params.fixed_effect_sd * fe_stream.next_normal();

    let mut init = Stream::new(seed, &[id, tag::PERM_INIT]);
    let mut z = params.stationary_variance().sqrt() * init.next_normal();
    let innovation_sd = params.innovation_variance.sqrt();
    let transitory_sd = params.transitory_variance.sqrt();

    let mut records = Vec::new();
    for year in pop.observed_years(birth_year) {
        let y64 = year as u64;
        let mut perm = Stream::new(seed, &[id, y64, tag::PERM_SHOCK]);
        z = params.rho * z + innovation_sd * perm.next_normal();
        let mut trans = Stream::new(seed, &[id, y64, tag::TRANS_SHOCK]);
        let eps = transitory_sd * trans.next_normal();
        records.push(AnnualRecord {
            year,
            age: year - birth_year,
            earnings: (alpha + z + eps).exp(),
            continuous: Vec::new(),
            categoricals: Vec::new(),
            missing_mask: Vec::new(),
        });
    }
    IndividualHistory { id, birth_year, records, conditioning_len: pop.conditioning_len }
}

/// Simulate a panel under the Gaussian AR(1)-plus-transitory process.
pub fn simulate_ar1_panel(
    params: &Ar1Params,
    pop: &PopulationSpec,
    seed: u64,
) -> Result<Vec<IndividualHistory>> {
    params.validate()?;
    pop.validate()?;
    Ok((0..pop.n_individuals as u64)
        .into_par_iter()
        .map(|id| simulate_ar1_individual(params, pop, seed, id))
        .collect())
}

fn attach_features_individual(
    hist: &mut IndividualHistory,
    pop: &PopulationSpec,
    seed: u64,
) {
    let schema = &pop.feature_schema;
    let n_cont = schema.continuous.len();
    let n_cat = schema.categorical.len();
    let id = hist.id;

    // Initial categorical states.
    let mut cat_state: Vec<u32> = schema
        .categorical
        .iter()
        .enumerate()
        .map(|(f, c)| {
            let mut s = Stream::new(seed, &[id, f as u64, tag::FEATURE_INIT]);
            s.next_index(c.cardinality as usize) as u32
        })
        .collect();

    // Cumulative coupled drift, advanced year by year.
    let mut drift_slope = 0.0;
    let mut drift_level = 0.0;
    let mut prev_year: Option<i32> = None;

    for rec in hist.records.iter_mut() {
        let y64 = rec.year as u64;
        if let Some(py) = prev_year {
            let gap = (rec.year - py) as f64;
            drift_level += drift_slope * gap;
            for (f, c) in schema.categorical.iter().enumerate() {
                let mut s = Stream::new(seed, &[id, y64, f as u64, tag::FEATURE_STEP]);
                let u = s.next_f64();
                if u >= c.stay_prob {
                    // Uniform over the other categories.
                    let step = 1 + s.next_index(c.cardinality as usize - 1) as u32;
                    cat_state[f] = (cat_state[f] + step) % c.cardinality;
                    for rule in &pop.feature_coupling {
                        if rule.feature == schema.categorical[f].name {
                            drift_slope += rule.drift_per_year;
                        }
                    }
                }
            }
        }
        prev_year = Some(rec.year);

        rec.categoricals = cat_state.clone();
        rec.continuous = (0..n_cont)
            .map(|f| {
                let mut s = Stream::new(seed, &[id, y64, f as u64, tag::CONTINUOUS]);
                s.next_normal()
            })
            .collect();
        let mut miss = Stream::new(seed, &[id, y64, tag::MISSINGNESS]);
        rec.missing_mask = (0..n_cont + n_cat)
            .map(|_| miss.next_f64() < schema.missing_rate)
            .collect();

        if drift_level != 0.0 && rec.earnings > 0.0 {
            rec.earnings = (rec.earnings.ln() + drift_level).exp();
        }
    }
}

/// Populate feature slots on a simulated panel and apply any categorical
/// coupling to the earnings path. With an empty coupling list, earnings
/// are unchanged.
pub fn attach_features(
    panel: &mut [IndividualHistory],
    pop: &PopulationSpec,
    seed: u64,
) -> Result<()> {
    pop.validate()?;
    panel
        .par_iter_mut()
        .for_each(|hist| attach_features_individual(hist, pop, seed));
    Ok(())
}

/// First and last age of the lifetime present-discounted value sum.
pub const PDV_FIRST_AGE: i32 = 20;
pub const PDV_LAST_AGE: i32 = 64;

/// Present-discounted value at age 20 of an earnings path given as
/// `(age, earnings)` pairs: ages outside 20..=64 are ignored, ages inside
/// the range but absent contribute zero.
pub fn lifetime_pdv_path(path: &[(i32, f64)], r: f64) -> Result<f64> {
    if r <= -1.0 {
        return Err(Error::Parameter(format!("discount rate must be > -1, got {r}")));
    }
    let base = 1.0 + r;
    let mut total = 0.0;
    for &(age, earnings) in path {
        if (PDV_FIRST_AGE..=PDV_LAST_AGE).contains(&age) {
            total += base.powi(-(age - PDV_FIRST_AGE)) * earnings;
        }
    }
    Ok(total)
}

/// Present-discounted value of an individual's observed earnings.
pub fn lifetime_pdv(history: &IndividualHistory, r: f64) -> Result<f64> {
    let path: Vec<(i32, f64)> = history.records.iter().map(|rec| (rec.age, rec.earnings)).collect();
    lifetime_pdv_path(&path, r)
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

/// Format a float with 17 significant digits, enough for exact f64
/// round-trips.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a panel as CSV: one row per person-year, header
/// `id,birth_year,year,age,earnings,c_1..c_K,d_1..d_L,m_1..m_{K+L}`.
pub fn write_panel_csv<W: Write>(panel: &[IndividualHistory], mut out: W) -> Result<()> {
    let (n_cont, n_cat) = panel
        .iter()
        .flat_map(|h| h.records.first())
        .map(|r| (r.continuous.len(), r.categoricals.len()))
        .next()
        .unwrap_or((0, 0));

    let mut header = String::from("id,birth_year,year,age,earnings");
    for k in 1..=n_cont {
        header.push_str(&format!(",c_{k}"));
    }
    for l in 1..=n_cat {
        header.push_str(&format!(",d_{l}"));
    }
    for m in 1..=n_cont + n_cat {
        header.push_str(&format!(",m_{m}"));
    }
    writeln!(out, "{header}")?;

    for hist in panel {
        for rec in &hist.records {
            if rec.continuous.len() != n_cont || rec.categoricals.len() != n_cat {
                return Err(Error::Schema(format!(
                    "individual {}: ragged feature widths in CSV export",
                    hist.id
                )));
            }
            let mut line = format!(
                "{},{},{},{},{}",
                hist.id,
                hist.birth_year,
                rec.year,
                rec.age,
                fmt_f64(rec.earnings)
            );
            for v in &rec.continuous {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            for d in &rec.categoricals {
                line.push(',');
                line.push_str(&d.to_string());
            }
            for m in &rec.missing_mask {
                line.push(',');
                line.push(if *m { '1' } else { '0' });
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Read a panel written by [`write_panel_csv`]. `conditioning_len` is not
/// part of the file format and is stamped from the argument.
pub fn read_panel_csv<R: Read>(input: R, conditioning_len: usize) -> Result<Vec<IndividualHistory>> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Serialize("empty panel CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..5] != ["id", "birth_year", "year", "age", "earnings"] {
        return Err(Error::Serialize(format!("unexpected panel CSV header: {header}")));
    }
    let n_cont = cols.iter().filter(|c| c.starts_with("c_")).count();
    let n_cat = cols.iter().filter(|c| c.starts_with("d_")).count();
    let n_mask = cols.iter().filter(|c| c.starts_with("m_")).count();
    if n_mask != n_cont + n_cat {
        return Err(Error::Serialize("mask column count mismatch".into()));
    }

    let mut panel: Vec<IndividualHistory> = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 + n_cont + n_cat + n_mask {
            return Err(Error::Serialize(format!("bad panel CSV row: {line}")));
        }
        let parse_err = |what: &str| Error::Serialize(format!("bad {what} in row: {line}"));
        let id: u64 = f[0].parse().map_err(|_| parse_err("id"))?;
        let birth_year: i32 = f[1].parse().map_err(|_| parse_err("birth_year"))?;
        let year: i32 = f[2].parse().map_err(|_| parse_err("year"))?;
        let age: i32 = f[3].parse().map_err(|_| parse_err("age"))?;
        let earnings: f64 = f[4].parse().map_err(|_| parse_err("earnings"))?;
        let mut continuous = Vec::with_capacity(n_cont);
        for k in 0..n_cont {
            continuous.push(f[5 + k].parse().map_err(|_| parse_err("continuous"))?);
        }
        let mut categoricals = Vec::with_capacity(n_cat);
        for l in 0..n_cat {
            categoricals.push(f[5 + n_cont + l].parse().map_err(|_| parse_err("categorical"))?);
        }
        let mut missing_mask = Vec::with_capacity(n_mask);
        for m in 0..n_mask {
            missing_mask.push(match f[5 + n_cont + n_cat + m] {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err("mask")),
            });
        }
        let rec = AnnualRecord { year, age, earnings, continuous, categoricals, missing_mask };
        match panel.last_mut() {
            Some(h) if h.id == id => h.records.push(rec),
            _ => panel.push(IndividualHistory {
                id,
                birth_year,
                records: vec![rec],
                conditioning_len,
            }),
        }
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{mean, sample_variance};

    fn bare_pop(n: usize) -> PopulationSpec {
        PopulationSpec {
            n_individuals: n,
            birth_cohort_range: (1960, 1960),
            observation_window: (1980, 2009),
            entry_age: 20,
            feature_schema: FeatureSchema::default(),
            feature_coupling: Vec::new(),
            conditioning_len: 10,
        }
    }

    #[test]
    fn rejects_bad_mixture_weights() {
        let mut p = GkosParams::reference();
        p.perm_mix[0].weight = 0.9;
        assert!(matches!(
            simulate_gkos_panel(&p, &bare_pop(1), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn degenerate_noise_gives_constant_zero_log_earnings() {
        let p = GkosParams {
            rho: 0.5,
            perm_mix: [
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.5 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.3 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.2 },
            ],
            trans_mix: [
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.5 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.5 },
            ],
            fixed_effect_sd: 0.0,
            zero_prob: 0.0,
        };
        let panel = simulate_gkos_panel(&p, &bare_pop(5), 3).unwrap();
        for h in &panel {
            for r in &h.records {
                assert!(log_value(r.earnings).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_share_matches_reference_probability() {
        // 10,000 individuals x 30 years at the reference bundle.
        let p = GkosParams::reference();
        let panel = simulate_gkos_panel(&p, &bare_pop(10_000), 11).unwrap();
        let mut zeros = 0usize;
        let mut total = 0usize;
        for h in &panel {
            for r in &h.records {
                total += 1;
                if r.earnings == 0.0 {
                    zeros += 1;
                }
            }
        }
        let share = zeros as f64 / total as f64;
        assert!(
            (share - 0.074).abs() < 0.005,
            "zero share {share} outside 0.074 +/- 0.005 over {total} person-years"
        );
    }

    #[test]
    fn permanent_component_reaches_stationary_variance() {
        // rho = 0.5, unit-variance single-component permanent shock, no
        // transitory noise, no zeros: cross-sectional variance of log
        // earnings at any year is sigma^2/(1-rho^2) = 1/0.75.
        let p = GkosParams {
            rho: 0.5,
            perm_mix: [
                MixtureComponent { mean: 0.0, variance: 1.0, weight: 1.0 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.0 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.0 },
            ],
            trans_mix: [
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 1.0 },
                MixtureComponent { mean: 0.0, variance: 1e-300, weight: 0.0 },
            ],
            fixed_effect_sd: 0.0,
            zero_prob: 0.0,
        };
        let n = 50_000;
        let panel = simulate_gkos_panel(&p, &bare_pop(n), 17).unwrap();
        let last_log: Vec<f64> = panel
            .iter()
            .map(|h| log_value(h.records.last().unwrap().earnings))
            .collect();
        let want = 1.0 / (1.0 - 0.25);
        let got = sample_variance(&last_log);
        // Var of the sample variance of a Gaussian: 2 sigma^4 / (n-1).
        let se = (2.0 * want * want / (n as f64 - 1.0)).sqrt();
        assert!(
            (got - want).abs() < 3.0 * se,
            "stationary variance {got} vs {want} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn mixture_sampler_matches_analytic_moments() {
        let p = GkosParams::reference();
        let (want_mean, want_var) = mixture_moments(&p.perm_mix);
        let mut s = Stream::new(5, &[tag::PERM_SHOCK]);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_mixture(&p.perm_mix, &mut s)).collect();
        let m = mean(&draws);
        let v = sample_variance(&draws);
        let se_mean = (want_var / n as f64).sqrt();
        // Rough SE for the variance using the mixture's fourth moment bound.
        let fourth: f64 = draws.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((fourth - v * v) / n as f64).sqrt();
        assert!((m - want_mean).abs() < 4.0 * se_mean, "mean {m} vs {want_mean}");
        assert!((v - want_var).abs() < 4.0 * se_var, "var {v} vs {want_var}");
    }

    #[test]
    fn one_year_changes_are_heavy_tailed_at_reference_params() {
        let mut p = GkosParams::reference();
        p.zero_prob = 0.0;
        let panel = simulate_gkos_panel(&p, &bare_pop(50_000), 23).unwrap();
        let mut changes = Vec::new();
        for h in &panel {
            for w in h.records.windows(2) {
                changes.push(log_value(w[1].earnings) - log_value(w[0].earnings));
            }
        }
        let (m2, _, m4) = crate::math::central_moments(&changes);
        let kurt = m4 / (m2 * m2);
        assert!(kurt > 3.0, "kurtosis {kurt} not heavy-tailed");
    }

    #[test]
    fn ar1_zero_variances_give_fixed_effect_only() {
        let p = Ar1Params {
            rho: 0.6,
            innovation_variance: 0.0,
            transitory_variance: 0.0,
            fixed_effect_sd: 0.5,
        };
        let panel = simulate_ar1_panel(&p, &bare_pop(4), 9).unwrap();
        for h in &panel {
            let first = log_value(h.records[0].earnings);
            for r in &h.records {
                assert!((log_value(r.earnings) - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ar1_change_variance_matches_closed_form() {
        // rho = 0: Var(delta log y) = 2 (sigma_u^2 + sigma_eps^2).
        let p = Ar1Params {
            rho: 0.0,
            innovation_variance: 1.0,
            transitory_variance: 0.5,
            fixed_effect_sd: 0.4,
        };
        let panel = simulate_ar1_panel(&p, &bare_pop(20_000), 31).unwrap();
        let mut changes = Vec::new();
        for h in &panel {
            for w in h.records.windows(2) {
                changes.push(log_value(w[1].earnings) - log_value(w[0].earnings));
            }
        }
        let want = 2.0 * (1.0 + 0.5);
        let got = sample_variance(&changes);
        // Changes overlap within individuals, inflate the tolerance.
        assert!((got - want).abs() < 0.05, "change variance {got} vs {want}");
    }

    #[test]
    fn ar1_stationary_variance_formula() {
        let p = Ar1Params {
            rho: 0.9,
            innovation_variance: 0.19,
            transitory_variance: 0.0,
            fixed_effect_sd: 0.0,
        };
        assert!((p.stationary_variance() - 1.0).abs() < 1e-12);
        let n = 50_000;
        let panel = simulate_ar1_panel(&p, &bare_pop(n), 37).unwrap();
        let last: Vec<f64> = panel
            .iter()
            .map(|h| log_value(h.records.last().unwrap().earnings))
            .collect();
        let got = sample_variance(&last);
        let se = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((got - 1.0).abs() < 3.0 * se, "stationary var {got}");
    }

    #[test]
    fn determinism_identical_across_thread_pools() {
        let p = GkosParams::reference();
        let pop = bare_pop(200);
        let a = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_gkos_panel(&p, &pop, 99).unwrap());
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| simulate_gkos_panel(&p, &pop, 99).unwrap());
        assert_eq!(a, b);
    }

    fn featured_pop(n: usize, coupling: Vec<CouplingRule>, missing_rate: f64) -> PopulationSpec {
        let mut pop = bare_pop(n);
        pop.feature_schema = FeatureSchema {
            continuous: vec![ContinuousFeature { name: "hours".into() }],
            categorical: vec![CategoricalFeature {
                name: "occupation".into(),
                cardinality: 3,
                stay_prob: 0.9,
            }],
            missing_rate,
        };
        pop.feature_coupling = coupling;
        pop
    }

    #[test]
    fn empty_coupling_leaves_earnings_unchanged() {
        let p = GkosParams::reference();
        let pop = featured_pop(50, Vec::new(), 0.1);
        let base = simulate_gkos_panel(&p, &pop, 7).unwrap();
        let mut featured = base.clone();
        attach_features(&mut featured, &pop, 7).unwrap();
        for (a, b) in base.iter().zip(&featured) {
            for (ra, rb) in a.records.iter().zip(&b.records) {
                assert_eq!(ra.earnings, rb.earnings);
            }
            assert_eq!(b.records[0].continuous.len(), 1);
            assert_eq!(b.records[0].categoricals.len(), 1);
            assert_eq!(b.records[0].missing_mask.len(), 2);
        }
    }

    #[test]
    fn coupling_shifts_switchers_by_drift_times_horizon() {
        // Constant-earnings DGP so the drift is the only signal. Compare
        // log earnings 5 years after a switch between switchers and
        // non-switchers.
        let p = Ar1Params {
            rho: 0.0,
            innovation_variance: 0.0,
            transitory_variance: 0.0,
            fixed_effect_sd: 0.0,
        };
        let pop = featured_pop(
            50_000,
            vec![CouplingRule { feature: "occupation".into(), drift_per_year: 0.2 }],
            0.0,
        );
        let mut panel = simulate_ar1_panel(&p, &pop, 13).unwrap();
        attach_features(&mut panel, &pop, 13).unwrap();

        // Individuals whose only switch happens at record index 1 (their
        // second year): earnings at index 1+5 should sit 0.2*5 above
        // individuals who never switch.
        let mut switch_vals = Vec::new();
        let mut stay_vals = Vec::new();
        for h in &panel {
            let switches: Vec<usize> = h
                .records
                .windows(2)
                .enumerate()
                .filter(|(_, w)| w[1].categoricals[0] != w[0].categoricals[0])
                .map(|(i, _)| i + 1)
                .collect();
            if switches.is_empty() {
                stay_vals.push(log_value(h.records[6].earnings));
            } else if switches == vec![1] && h.records.len() > 6 {
                switch_vals.push(log_value(h.records[6].earnings));
            }
        }
        assert!(switch_vals.len() > 100, "too few single-switch individuals");
        let gap = mean(&switch_vals) - mean(&stay_vals);
        assert!((gap - 1.0).abs() < 1e-9, "drift gap {gap} should be 0.2 * 5");
    }

    #[test]
    fn full_missingness_masks_everything() {
        let p = GkosParams::reference();
        let pop = featured_pop(20, Vec::new(), 1.0);
        let mut panel = simulate_gkos_panel(&p, &pop, 5).unwrap();
        attach_features(&mut panel, &pop, 5).unwrap();
        for h in &panel {
            for r in &h.records {
                assert!(r.missing_mask.iter().all(|&m| m));
            }
        }
    }

    #[test]
    fn coupling_with_unknown_feature_is_schema_error() {
        let mut pop = featured_pop(5, Vec::new(), 0.0);
        pop.feature_coupling =
            vec![CouplingRule { feature: "industry".into(), drift_per_year: 0.1 }];
        let p = GkosParams::reference();
        let mut panel = simulate_gkos_panel(&p, &featured_pop(5, Vec::new(), 0.0), 1).unwrap();
        assert!(matches!(
            attach_features(&mut panel, &pop, 1),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn pdv_constant_path_zero_rate() {
        let path: Vec<(i32, f64)> = (20..=64).map(|a| (a, 1.0)).collect();
        assert_eq!(lifetime_pdv_path(&path, 0.0).unwrap(), 45.0);
    }

    #[test]
    fn pdv_single_year_at_base_age() {
        let path = [(20, 1.0)];
        assert_eq!(lifetime_pdv_path(&path, 0.02).unwrap(), 1.0);
    }

    #[test]
    fn pdv_matches_geometric_closed_form() {
        // Independent oracle: geometric series sum for constant earnings,
        // S = (1 - q^45) / (1 - q), q = 1/(1+r).
        let r = 0.02;
        let q: f64 = 1.0 / (1.0 + r);
        let oracle = (1.0 - q.powi(45)) / (1.0 - q);
        let path: Vec<(i32, f64)> = (20..=64).map(|a| (a, 1.0)).collect();
        let got = lifetime_pdv_path(&path, r).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        // Frozen value of the oracle itself.
        assert!((oracle - 30.079_963_071_993_497).abs() < 1e-10);
    }

    #[test]
    fn pdv_missing_ages_contribute_zero_and_monotone_in_rate() {
        let path = [(20, 1.0), (30, 1.0), (64, 2.0)];
        let v0 = lifetime_pdv_path(&path, 0.0).unwrap();
        assert_eq!(v0, 4.0);
        let v1 = lifetime_pdv_path(&path, 0.01).unwrap();
        let v2 = lifetime_pdv_path(&path, 0.05).unwrap();
        assert!(v0 > v1 && v1 > v2);
        assert!(lifetime_pdv_path(&path, -1.0).is_err());
    }

    #[test]
    fn pdv_linear_in_path() {
        let path = [(20, 1.0), (21, 2.0), (40, 3.0)];
        let doubled: Vec<(i32, f64)> = path.iter().map(|&(a, y)| (a, 2.0 * y)).collect();
        let v = lifetime_pdv_path(&path, 0.03).unwrap();
        let v2 = lifetime_pdv_path(&doubled, 0.03).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let p = GkosParams::reference();
        let pop = featured_pop(10, Vec::new(), 0.3);
        let mut panel = simulate_gkos_panel(&p, &pop, 21).unwrap();
        attach_features(&mut panel, &pop, 21).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice(), pop.conditioning_len).unwrap();
        assert_eq!(panel, back);
    }
}
