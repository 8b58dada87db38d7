//! Auxiliary feature imputation for autoregressive decoding: categorical
//! features evolve by empirical first-order transition matrices
//! conditioned on a coarse bucket of the sampled log-earnings change;
//! continuous features are carried forward.

use crate::error::{Error, Result};
use crate::panel::{log_value, AnnualRecord, IndividualHistory};
use crate::rng::{tag, Stream};
use serde::{Deserialize, Serialize};

/// Transition model for one categorical feature:
/// `probs[bucket][from][to]`, rows summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransitions {
    pub cardinality: u32,
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// Earnings-bucket-conditioned Markov imputer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImputer {
    /// Interior bucket edges over the one-year log-earnings change; a
    /// change `d` falls in bucket `#{e in edges : e <= d}`.
    pub bucket_edges: Vec<f64>,
    pub features: Vec<FeatureTransitions>,
}

impl FeatureImputer {
    pub fn n_buckets(&self) -> usize {
        self.bucket_edges.len() + 1
    }

    fn bucket(&self, dlog: f64) -> usize {
        self.bucket_edges.iter().filter(|e| **e <= dlog).count()
    }

    /// Imputer for featureless panels.
    pub fn empty() -> Self {
        FeatureImputer { bucket_edges: vec![-0.1, 0.1], features: Vec::new() }
    }

    /// Fit transition matrices on consecutive-year record pairs of a
    /// training panel. Rows with no observations default to staying in
    /// place.
    pub fn fit(panel: &[IndividualHistory], bucket_edges: Vec<f64>) -> Result<Self> {
        let n_features = panel
            .iter()
            .flat_map(|h| h.records.first())
            .map(|r| r.categoricals.len())
            .next()
            .unwrap_or(0);
        if n_features == 0 {
            return Ok(FeatureImputer { bucket_edges, features: Vec::new() });
        }
        let cards: Vec<u32> = (0..n_features)
            .map(|f| {
                panel
                    .iter()
                    .flat_map(|h| h.records.iter())
                    .map(|r| r.categoricals[f])
                    .max()
                    .unwrap_or(0)
                    + 1
            })
            .collect();
        let n_buckets = bucket_edges.len() + 1;
        let imputer_edges = bucket_edges.clone();
        let mut counts: Vec<Vec<Vec<Vec<f64>>>> = cards
            .iter()
            .map(|&c| vec![vec![vec![0.0; c as usize]; c as usize]; n_buckets])
            .collect();
        let probe = FeatureImputer { bucket_edges, features: Vec::new() };
        for hist in panel {
            for w in hist.records.windows(2) {
                if w[1].year != w[0].year + 1 {
                    continue;
                }
                let dlog = log_value(w[1].earnings) - log_value(w[0].earnings);
                let b = probe.bucket(dlog);
                for f in 0..n_features {
                    let from = w[0].categoricals[f] as usize;
                    let to = w[1].categoricals[f] as usize;
                    if from < cards[f] as usize && to < cards[f] as usize {
                        counts[f][b][from][to] += 1.0;
                    }
                }
            }
        }
        let features = counts
            .into_iter()
            .zip(&cards)
            .map(|(buckets, &card)| {
                let probs = buckets
                    .into_iter()
                    .map(|rows| {
                        rows.into_iter()
                            .enumerate()
                            .map(|(from, row)| {
                                let total: f64 = row.iter().sum();
                                if total <= 0.0 {
                                    let mut stay = vec![0.0; card as usize];
                                    stay[from] = 1.0;
                                    stay
                                } else {
                                    row.into_iter().map(|c| c / total).collect()
                                }
                            })
                            .collect()
                    })
                    .collect();
                FeatureTransitions { cardinality: card, probs }
            })
            .collect();
        let imputer = FeatureImputer { bucket_edges: imputer_edges, features };
        imputer.validate()?;
        Ok(imputer)
    }

    pub fn validate(&self) -> Result<()> {
        for (f, ft) in self.features.iter().enumerate() {
            for bucket in &ft.probs {
                for row in bucket {
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(Error::Parameter(format!(
                            "imputer feature {f}: transition row sums to {total}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Build the next-year record from the previous one and the sampled
    /// earnings: categoricals stepped through the bucketed transition
    /// matrices, continuous slots carried forward, mask all observed.
    pub fn impute_next(
        &self,
        prev: &AnnualRecord,
        earnings: f64,
        dlog: f64,
        seed: u64,
        individual_id: u64,
        path_id: u64,
    ) -> AnnualRecord {
        let b = self.bucket(dlog);
        let year = prev.year + 1;
        let categoricals: Vec<u32> = prev
            .categoricals
            .iter()
            .enumerate()
            .map(|(f, &from)| {
                let ft = match self.features.get(f) {
                    Some(ft) => ft,
                    None => return from,
                };
                if from >= ft.cardinality {
                    return from; // unknown stays unknown
                }
                let row = &ft.probs[b][from as usize];
                let mut s = Stream::new(
                    seed,
                    &[individual_id, path_id, year as u64, f as u64, tag::IMPUTE],
                );
                let u = s.next_f64();
                let mut acc = 0.0;
                for (to, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return to as u32;
                    }
                }
                from
            })
            .collect();
        AnnualRecord {
            year,
            age: prev.age + 1,
            earnings,
            continuous: prev.continuous.clone(),
            categoricals,
            missing_mask: vec![false; prev.missing_mask.len()],
        }
    }
}
