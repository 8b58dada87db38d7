//! Maps annual records to fixed-dimension token vectors by concatenating
//! five subvectors — continuous, categorical, missingness, age, year —
//! and projecting to the model dimension.
//!
//! Log earnings (zero convention, see [`crate::panel::log_value`]) always
//! enters as continuous slot 0 ahead of the declared continuous features,
//! standardized per calendar year like everything else. Missing
//! continuous values are imputed to zero after standardization; missing
//! categorical values map to the reserved unknown embedding row.

use crate::error::{Error, Result};
use crate::panel::{log_value, AnnualRecord, FeatureSchema, IndividualHistory};
use crate::rng::{tag, Stream};
use crate::tensor::Mat;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Subvector dimensions and input ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub continuous_dim: usize,
    /// One embedding width per declared categorical feature.
    pub categorical_dims: Vec<usize>,
    pub missing_dim: usize,
    pub age_dim: usize,
    pub year_dim: usize,
    /// Output token dimension d.
    pub model_dim: usize,
    /// Inclusive age range accepted by tokenization.
    pub age_range: (i32, i32),
    /// Inclusive calendar-year range accepted by tokenization.
    pub year_range: (i32, i32),
}

impl TokenizerConfig {
    /// Toy-scale defaults: d = 32, small subvectors, categorical widths
    /// `ceil(log2(cardinality)) + 1`.
    pub fn toy(schema: &FeatureSchema, age_range: (i32, i32), year_range: (i32, i32)) -> Self {
        let categorical_dims = schema
            .categorical
            .iter()
            .map(|c| (c.cardinality as f64).log2().ceil() as usize + 1)
            .collect();
        TokenizerConfig {
            continuous_dim: 8,
            categorical_dims,
            missing_dim: 4,
            age_dim: 8,
            year_dim: 4,
            model_dim: 32,
            age_range,
            year_range,
        }
    }

    pub fn concat_dim(&self) -> usize {
        self.continuous_dim
            + self.categorical_dims.iter().sum::<usize>()
            + self.missing_dim
            + self.age_dim
            + self.year_dim
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if self.continuous_dim == 0
            || self.missing_dim == 0
            || self.age_dim == 0
            || self.year_dim == 0
            || self.model_dim == 0
        {
            return Err(Error::Parameter("tokenizer dims must be >= 1".into()));
        }
        if self.categorical_dims.len() != schema.categorical.len() {
            return Err(Error::Schema(format!(
                "{} categorical dims for {} features",
                self.categorical_dims.len(),
                schema.categorical.len()
            )));
        }
        if self.age_range.0 > self.age_range.1 || self.year_range.0 > self.year_range.1 {
            return Err(Error::Parameter("tokenizer ranges reversed".into()));
        }
        Ok(())
    }
}

/// Per-(year, feature) standardization cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatCell {
    pub mean: f64,
    /// Standard deviation used for scaling; 1.0 when the cell is constant.
    pub sd: f64,
    /// Set when the cell had fewer than two distinct observations.
    pub constant: bool,
    /// Set when the cell had zero observations and inherited the pooled
    /// statistic.
    pub inherited: bool,
}

/// Year-specific means and standard deviations of the continuous slots
/// (slot 0 is log earnings, slots 1.. are the declared features), computed
/// on training individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// Number of continuous slots (declared features + 1).
    pub n_slots: usize,
    pub by_year: BTreeMap<i32, Vec<StatCell>>,
    /// All-year pooled fallback, used for unseen years and empty cells.
    pub pooled: Vec<StatCell>,
}

struct Accum {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accum {
    fn new() -> Self {
        Accum { n: 0, mean: 0.0, m2: 0.0 }
    }

    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn cell(&self) -> Option<StatCell> {
        if self.n == 0 {
            return None;
        }
        if self.n == 1 {
            return Some(StatCell { mean: self.mean, sd: 1.0, constant: true, inherited: false });
        }
        let var = self.m2 / (self.n - 1) as f64;
        if var <= 0.0 {
            Some(StatCell { mean: self.mean, sd: 1.0, constant: true, inherited: false })
        } else {
            Some(StatCell { mean: self.mean, sd: var.sqrt(), constant: false, inherited: false })
        }
    }
}

/// Fit per-year standardization statistics on a training panel.
pub fn fit_stats(panel: &[IndividualHistory], schema: &FeatureSchema) -> Result<FeatureStats> {
    if panel.iter().all(|h| h.records.is_empty()) {
        return Err(Error::Parameter("cannot fit stats on an empty panel".into()));
    }
    let n_slots = schema.continuous.len() + 1;
    let mut by_year: BTreeMap<i32, Vec<Accum>> = BTreeMap::new();
    let mut pooled: Vec<Accum> = (0..n_slots).map(|_| Accum::new()).collect();
    for hist in panel {
        for rec in &hist.records {
            let cells = by_year
                .entry(rec.year)
                .or_insert_with(|| (0..n_slots).map(|_| Accum::new()).collect());
            let ly = log_value(rec.earnings);
            cells[0].push(ly);
            pooled[0].push(ly);
            for (k, v) in rec.continuous.iter().enumerate() {
                if !rec.missing_mask.get(k).copied().unwrap_or(false) {
                    cells[k + 1].push(*v);
                    pooled[k + 1].push(*v);
                }
            }
        }
    }
    let pooled_cells: Vec<StatCell> = pooled
        .iter()
        .map(|a| {
            a.cell().unwrap_or(StatCell { mean: 0.0, sd: 1.0, constant: true, inherited: true })
        })
        .collect();
    let by_year_cells = by_year
        .into_iter()
        .map(|(year, accs)| {
            let cells = accs
                .iter()
                .enumerate()
                .map(|(k, a)| match a.cell() {
                    Some(c) => c,
                    None => StatCell { inherited: true, ..pooled_cells[k] },
                })
                .collect();
            (year, cells)
        })
        .collect();
    Ok(FeatureStats { n_slots, by_year: by_year_cells, pooled: pooled_cells })
}

impl FeatureStats {
    /// Cell for `(year, slot)`, falling back to the pooled statistic for
    /// years never seen at fit time.
    pub fn cell(&self, year: i32, slot: usize) -> &StatCell {
        self.by_year
            .get(&year)
            .map(|cells| &cells[slot])
            .unwrap_or(&self.pooled[slot])
    }
}

/// Fitted tokenizer: statistics plus all lookup tables and projections.
/// Immutable after construction; training code treats the tables as model
/// parameters and owns its own copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerState {
    pub config: TokenizerConfig,
    pub stats: FeatureStats,
    /// Cardinalities of the declared categorical features.
    pub cardinalities: Vec<u32>,
    /// (continuous_dim x n_slots) linear map of standardized values.
    pub cont_proj: Mat,
    /// One (cardinality + 1) x dim embedding table per categorical
    /// feature; the last row is the reserved unknown index.
    pub cat_tables: Vec<Mat>,
    /// (missing_dim x mask_len) linear map of the missingness mask.
    pub missing_proj: Mat,
    /// One row per age in `age_range`.
    pub age_table: Mat,
    /// One row per year in `year_range`.
    pub year_table: Mat,
    /// (model_dim x concat_dim) output projection.
    pub final_proj: Mat,
    /// 1 x model_dim output bias.
    pub final_bias: Mat,
}

impl TokenizerState {
    /// Initialize tables and projections: embeddings i.i.d.
    /// uniform(-1/sqrt(dim), 1/sqrt(dim)), projections
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(
        config: TokenizerConfig,
        schema: &FeatureSchema,
        stats: FeatureStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate(schema)?;
        if stats.n_slots != schema.continuous.len() + 1 {
            return Err(Error::Schema(format!(
                "stats have {} slots, schema needs {}",
                stats.n_slots,
                schema.continuous.len() + 1
            )));
        }
        let mut s = Stream::new(seed, &[tag::TRAIN_INIT]);
        let n_slots = stats.n_slots;
        let mask_len = schema.n_slots();
        let emb = |rows: usize, cols: usize, s: &mut Stream| {
            Mat::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), s)
        };
        let proj = |rows: usize, cols: usize, s: &mut Stream| {
            Mat::uniform(rows, cols, 1.0 / (cols.max(1) as f64).sqrt(), s)
        };
        let cont_proj = proj(config.continuous_dim, n_slots, &mut s);
        let cat_tables: Vec<Mat> = schema
            .categorical
            .iter()
            .zip(&config.categorical_dims)
            .map(|(c, &dim)| emb(c.cardinality as usize + 1, dim, &mut s))
            .collect();
        let missing_proj = proj(config.missing_dim, mask_len, &mut s);
        let n_ages = (config.age_range.1 - config.age_range.0 + 1) as usize;
        let n_years = (config.year_range.1 - config.year_range.0 + 1) as usize;
        let age_table = emb(n_ages, config.age_dim, &mut s);
        let year_table = emb(n_years, config.year_dim, &mut s);
        let concat = config.concat_dim();
        let final_proj = proj(config.model_dim, concat, &mut s);
        let final_bias = Mat::zeros(1, config.model_dim);
        Ok(TokenizerState {
            config,
            stats,
            cardinalities: schema.categorical.iter().map(|c| c.cardinality).collect(),
            cont_proj,
            cat_tables,
            missing_proj,
            age_table,
            year_table,
            final_proj,
            final_bias,
        })
    }

    pub fn n_continuous_slots(&self) -> usize {
        self.stats.n_slots
    }

    pub fn mask_len(&self) -> usize {
        self.missing_proj.cols
    }

    /// Standardized continuous slot values and the 0/1 mask vector for a
    /// record (the pre-projection inputs). Exposed for the training path,
    /// which backpropagates into the projections.
    pub fn standardize(&self, record: &AnnualRecord) -> Result<(Vec<f64>, Vec<f64>)> {
        let n_cont = self.n_continuous_slots() - 1;
        if record.continuous.len() != n_cont
            || record.categoricals.len() != self.cardinalities.len()
            || record.missing_mask.len() != self.mask_len()
        {
            return Err(Error::Schema(format!(
                "record features ({}, {}, mask {}) do not match tokenizer ({}, {}, mask {})",
                record.continuous.len(),
                record.categoricals.len(),
                record.missing_mask.len(),
                n_cont,
                self.cardinalities.len(),
                self.mask_len()
            )));
        }
        let mut std_vals = vec![0.0; self.n_continuous_slots()];
        let cell0 = self.stats.cell(record.year, 0);
        std_vals[0] = (log_value(record.earnings) - cell0.mean) / cell0.sd;
        for k in 0..n_cont {
            if record.missing_mask[k] {
                std_vals[k + 1] = 0.0;
            } else {
                let cell = self.stats.cell(record.year, k + 1);
                std_vals[k + 1] = (record.continuous[k] - cell.mean) / cell.sd;
            }
        }
        let mask: Vec<f64> =
            record.missing_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok((std_vals, mask))
    }

    /// Embedding row index for categorical feature `f` of a record:
    /// the reserved unknown row when masked, otherwise the stored index
    /// (which may itself be the explicit unknown index).
    pub fn cat_row(&self, record: &AnnualRecord, f: usize) -> Result<usize> {
        let card = self.cardinalities[f];
        let masked = record.missing_mask[self.n_continuous_slots() - 1 + f];
        if masked {
            return Ok(card as usize);
        }
        let idx = record.categoricals[f];
        if idx > card {
            return Err(Error::Tokenize(format!(
                "categorical feature {f} index {idx} exceeds cardinality {card}"
            )));
        }
        Ok(idx as usize)
    }

    pub fn age_row(&self, age: i32) -> Result<usize> {
        let (lo, hi) = self.config.age_range;
        if age < lo || age > hi {
            return Err(Error::Tokenize(format!("age {age} outside [{lo}, {hi}]")));
        }
        Ok((age - lo) as usize)
    }

    pub fn year_row(&self, year: i32) -> Result<usize> {
        let (lo, hi) = self.config.year_range;
        if year < lo || year > hi {
            return Err(Error::Tokenize(format!("year {year} outside [{lo}, {hi}]")));
        }
        Ok((year - lo) as usize)
    }

    /// Pre-projection concatenated vector for a record.
    pub fn concat(&self, record: &AnnualRecord) -> Result<Vec<f64>> {
        let (std_vals, mask) = self.standardize(record)?;
        let mut out = Vec::with_capacity(self.config.concat_dim());
        out.extend(self.cont_proj.matvec(&std_vals));
        for f in 0..self.cat_tables.len() {
            out.extend_from_slice(self.cat_tables[f].row(self.cat_row(record, f)?));
        }
        out.extend(self.missing_proj.matvec(&mask));
        out.extend_from_slice(self.age_table.row(self.age_row(record.age)?));
        out.extend_from_slice(self.year_table.row(self.year_row(record.year)?));
        Ok(out)
    }

    /// Token vector of length `model_dim` for one record.
    pub fn tokenize(&self, record: &AnnualRecord) -> Result<Vec<f64>> {
        let concat = self.concat(record)?;
        let mut token = self.final_proj.matvec(&concat);
        for (t, b) in token.iter_mut().zip(&self.final_bias.data) {
            *t += b;
        }
        Ok(token)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Serialize(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{
        attach_features, simulate_gkos_panel, CategoricalFeature, ContinuousFeature,
        GkosParams, PopulationSpec,
    };

    fn schema() -> FeatureSchema {
        FeatureSchema {
            continuous: vec![ContinuousFeature { name: "hours".into() }],
            categorical: vec![CategoricalFeature {
                name: "occupation".into(),
                cardinality: 3,
                stay_prob: 0.9,
            }],
            missing_rate: 0.2,
        }
    }

    fn pop(n: usize) -> PopulationSpec {
        PopulationSpec {
            n_individuals: n,
            birth_cohort_range: (1960, 1962),
            observation_window: (1985, 2004),
            entry_age: 20,
            feature_schema: schema(),
            feature_coupling: Vec::new(),
            conditioning_len: 10,
        }
    }

    fn fitted_state(seed: u64) -> (Vec<IndividualHistory>, TokenizerState) {
        let pop = pop(80);
        let params = GkosParams::reference();
        let mut panel = simulate_gkos_panel(&params, &pop, seed).unwrap();
        attach_features(&mut panel, &pop, seed).unwrap();
        let stats = fit_stats(&panel, &pop.feature_schema).unwrap();
        let cfg = TokenizerConfig::toy(&pop.feature_schema, (18, 70), (1980, 2070));
        let state = TokenizerState::init(cfg, &pop.feature_schema, stats, seed).unwrap();
        (panel, state)
    }

    #[test]
    fn single_record_stats_are_constant_flagged() {
        let hist = IndividualHistory {
            id: 0,
            birth_year: 1970,
            records: vec![AnnualRecord {
                year: 2000,
                age: 30,
                earnings: 100.0,
                continuous: vec![7.0],
                categoricals: vec![1],
                missing_mask: vec![false, false],
            }],
            conditioning_len: 1,
        };
        let stats = fit_stats(&[hist], &schema()).unwrap();
        let cell = stats.cell(2000, 1);
        assert_eq!(cell.mean, 7.0);
        assert!(cell.constant);
        assert_eq!(cell.sd, 1.0);
    }

    #[test]
    fn two_point_cell_uses_n_minus_one_denominator() {
        let mk = |id: u64, v: f64| IndividualHistory {
            id,
            birth_year: 1970,
            records: vec![AnnualRecord {
                year: 2000,
                age: 30,
                earnings: 1.0,
                continuous: vec![v],
                categoricals: vec![0],
                missing_mask: vec![false, false],
            }],
            conditioning_len: 1,
        };
        let stats = fit_stats(&[mk(0, 1.0), mk(1, 3.0)], &schema()).unwrap();
        let cell = stats.cell(2000, 1);
        assert_eq!(cell.mean, 2.0);
        assert!((cell.sd - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_match_brute_force_recompute() {
        let (panel, state) = fitted_state(3);
        // Independent two-pass oracle per (year, slot 1).
        let mut by_year: std::collections::BTreeMap<i32, Vec<f64>> = Default::default();
        for h in &panel {
            for r in &h.records {
                if !r.missing_mask[0] {
                    by_year.entry(r.year).or_default().push(r.continuous[0]);
                }
            }
        }
        for (year, vals) in by_year {
            if vals.len() < 2 {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            let cell = state.stats.cell(year, 1);
            assert!((cell.mean - mean).abs() < 1e-12);
            assert!((cell.sd - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_depend_only_on_record_fields() {
        let (panel, state) = fitted_state(5);
        let hist = panel.iter().find(|h| h.records.len() >= 5).unwrap();
        let tokens: Vec<Vec<f64>> =
            hist.records.iter().map(|r| state.tokenize(r).unwrap()).collect();
        // Deleting an unrelated record changes no other token (tokenize is
        // per-record); recompute after removing the middle record.
        let mut shorter = hist.clone();
        shorter.records.remove(2);
        for (i, r) in shorter.records.iter().enumerate() {
            let tok = state.tokenize(r).unwrap();
            let orig = if i < 2 { &tokens[i] } else { &tokens[i + 1] };
            assert_eq!(&tok, orig);
        }
    }

    #[test]
    fn masked_values_do_not_leak_into_tokens() {
        let (_, state) = fitted_state(7);
        let mut rec = AnnualRecord {
            year: 1990,
            age: 28,
            earnings: 50.0,
            continuous: vec![1.25],
            categoricals: vec![2],
            missing_mask: vec![true, true],
        };
        let a = state.tokenize(&rec).unwrap();
        rec.continuous[0] = -400.0;
        rec.categoricals[0] = 0;
        let b = state.tokenize(&rec).unwrap();
        assert_eq!(a, b, "masked slots must not affect the token");
        assert_eq!(a.len(), state.config.model_dim);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_age_or_year_is_an_error() {
        let (_, state) = fitted_state(9);
        let rec = AnnualRecord {
            year: 1990,
            age: 90,
            earnings: 1.0,
            continuous: vec![0.0],
            categoricals: vec![0],
            missing_mask: vec![false, false],
        };
        assert!(matches!(state.tokenize(&rec), Err(Error::Tokenize(_))));
        let rec2 = AnnualRecord { age: 30, year: 1900, ..rec };
        assert!(matches!(state.tokenize(&rec2), Err(Error::Tokenize(_))));
    }

    #[test]
    fn standardization_idempotence() {
        // Tokenizing raw values through fitted stats equals tokenizing
        // pre-standardized values through identity stats.
        let (panel, state) = fitted_state(11);
        let rec = &panel[0].records[3];
        let token_fitted = state.tokenize(rec).unwrap();

        let mut identity = state.clone();
        for cells in identity.stats.by_year.values_mut() {
            for c in cells.iter_mut() {
                *c = StatCell { mean: 0.0, sd: 1.0, constant: false, inherited: false };
            }
        }
        for c in identity.stats.pooled.iter_mut() {
            *c = StatCell { mean: 0.0, sd: 1.0, constant: false, inherited: false };
        }
        let mut pre = rec.clone();
        let cell0 = state.stats.cell(rec.year, 0);
        pre.earnings = ((log_value(rec.earnings) - cell0.mean) / cell0.sd).exp();
        let cell1 = state.stats.cell(rec.year, 1);
        if !rec.missing_mask[0] {
            pre.continuous[0] = (rec.continuous[0] - cell1.mean) / cell1.sd;
        }
        let token_pre = identity.tokenize(&pre).unwrap();
        for (a, b) in token_fitted.iter().zip(&token_pre) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_scale_dims_concatenate_to_252_project_to_384() {
        let schema = FeatureSchema {
            continuous: (0..14)
                .map(|i| ContinuousFeature { name: format!("c{i}") })
                .collect(),
            categorical: (0..10)
                .map(|i| CategoricalFeature {
                    name: format!("d{i}"),
                    cardinality: 4,
                    stay_prob: 0.9,
                })
                .collect(),
            missing_rate: 0.0,
        };
        let cfg = TokenizerConfig {
            continuous_dim: 64,
            categorical_dims: vec![24, 16, 8, 4, 4, 4, 4, 4, 4, 4],
            missing_dim: 16,
            age_dim: 64,
            year_dim: 32,
            model_dim: 384,
            age_range: (16, 70),
            year_range: (1990, 2022),
        };
        assert_eq!(cfg.concat_dim(), 64 + 76 + 16 + 64 + 32);
        assert_eq!(cfg.concat_dim(), 252);
        let stats = FeatureStats {
            n_slots: 15,
            by_year: BTreeMap::new(),
            pooled: vec![
                StatCell { mean: 0.0, sd: 1.0, constant: false, inherited: false };
                15
            ],
        };
        let state = TokenizerState::init(cfg, &schema, stats, 1).unwrap();
        let rec = AnnualRecord {
            year: 2000,
            age: 30,
            earnings: 10.0,
            continuous: vec![0.0; 14],
            categoricals: vec![0; 10],
            missing_mask: vec![false; 24],
        };
        assert_eq!(state.tokenize(&rec).unwrap().len(), 384);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (_, state) = fitted_state(13);
        let json = state.to_json().unwrap();
        let back = TokenizerState::from_json(&json).unwrap();
        assert_eq!(state, back);
    }

}
