//! Forecaster contract plus four implementations: the toy causal
//! transformer with dual heads, a per-horizon linear quantile regressor,
//! the mixture-process particle forecaster, and the Gaussian AR(1) Kalman
//! forecaster — with quantile sampling and autoregressive decoding.

pub mod ar1;
pub mod gkos;
pub mod imputer;
pub mod linear;
pub mod serialize;
pub mod transformer;

pub use ar1::Ar1Forecaster;
pub use gkos::GkosForecaster;
pub use imputer::FeatureImputer;
pub use linear::LinearQuantileForecaster;
pub use transformer::{
    train_toy, GradCheckReport, ModelParams, ToyForecaster, ToyTransformerConfig, TrainSettings,
};

use crate::error::{Error, Result};
use crate::panel::IndividualHistory;
use serde::{Deserialize, Serialize};

/// The seven trained quantile levels.
pub const QUANTILE_LEVELS: [f64; 7] = [0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95];

/// Tail extrapolation cap, in units of the adjacent segment's length.
pub const TAIL_CAP_SEGMENTS: f64 = 3.0;

/// Point forecast plus seven conditional log-earnings quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    /// Point forecast of log earnings.
    pub point: f64,
    /// Values at [`QUANTILE_LEVELS`].
    pub quantiles: [f64; 7],
}

impl QuantileForecast {
    /// Non-decreasing copy (quantile crossing resolved by sorting).
    pub fn rearranged(&self) -> Self {
        QuantileForecast { point: self.point, quantiles: rearrange_quantiles(&self.quantiles) }
    }

    pub fn is_rearranged(&self) -> bool {
        self.quantiles.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Pinball loss `u (alpha - 1[u < 0])` at level `alpha`.
#[inline]
pub fn pinball_loss(u: f64, alpha: f64) -> f64 {
    debug_assert!(alpha > 0.0 && alpha < 1.0);
    if u < 0.0 {
        u * (alpha - 1.0)
    } else {
        u * alpha
    }
}

/// Joint training loss for one forecast position: squared-error point term
/// plus the pinball terms over the seven levels.
pub fn loss_joint(point: f64, quantiles: &[f64; 7], target_log_y: f64) -> f64 {
    let d = target_log_y - point;
    let mut loss = 0.5 * d * d;
    for (q, alpha) in quantiles.iter().zip(QUANTILE_LEVELS) {
        loss += pinball_loss(target_log_y - q, alpha);
    }
    loss
}

/// Sort seven quantiles ascending. Idempotent; the output is a permutation
/// of the input.
pub fn rearrange_quantiles(quantiles: &[f64; 7]) -> [f64; 7] {
    let mut q = *quantiles;
    q.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    q
}

/// Piecewise-linear inverse CDF through the seven (level, value) knots.
///
/// `u` in `(0, 1)`; between knots the value interpolates linearly; beyond
/// the outermost levels the adjacent segment's slope continues, with the
/// extension capped at [`TAIL_CAP_SEGMENTS`] times that segment's length.
/// The forecast must be rearranged (non-decreasing).
pub fn sample_from_quantiles(qf: &QuantileForecast, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Parameter(format!("inverse-CDF draw u must be in (0,1), got {u}")));
    }
    debug_assert!(qf.is_rearranged(), "sample_from_quantiles requires rearranged quantiles");
    let q = &qf.quantiles;
    let levels = &QUANTILE_LEVELS;
    if u <= levels[0] {
        let seg = q[1] - q[0];
        let slope = seg / (levels[1] - levels[0]);
        let ext = (levels[0] - u) * slope;
        return Ok(q[0] - ext.min(TAIL_CAP_SEGMENTS * seg));
    }
    if u >= levels[6] {
        let seg = q[6] - q[5];
        let slope = seg / (levels[6] - levels[5]);
        let ext = (u - levels[6]) * slope;
        return Ok(q[6] + ext.min(TAIL_CAP_SEGMENTS * seg));
    }
    for k in 0..6 {
        if u <= levels[k + 1] {
            let frac = (u - levels[k]) / (levels[k + 1] - levels[k]);
            return Ok(q[k] + frac * (q[k + 1] - q[k]));
        }
    }
    unreachable!("u covered by the knot ranges");
}

/// Quantile pair `(q_{alpha/2}, q_{1-alpha/2})` backing a central interval
/// at miscoverage `alpha`, plus a flag marking levels obtained by tail
/// extrapolation rather than trained heads.
pub fn central_quantile_pair(qf: &QuantileForecast, alpha: f64) -> Result<(f64, f64, bool)> {
    let q = &qf.quantiles;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    if close(alpha, 0.10) {
        Ok((q[0], q[6], false))
    } else if close(alpha, 0.20) {
        Ok((q[1], q[5], false))
    } else if close(alpha, 0.50) {
        Ok((q[2], q[4], false))
    } else if close(alpha, 0.05) {
        // Approximated via tail extrapolation of the inverse CDF; flagged.
        let lo = sample_from_quantiles(qf, 0.025)?;
        let hi = sample_from_quantiles(qf, 0.975)?;
        Ok((lo, hi, true))
    } else {
        Err(Error::Parameter(format!(
            "alpha {alpha} has no matching trained quantile pair (supported: 0.1, 0.2, 0.5, \
             and 0.05 by tail extrapolation)"
        )))
    }
}

/// A probabilistic multi-horizon forecaster of annual earnings.
///
/// Implementations condition on the history's conditioning window only.
/// `horizon_quantiles` returns one rearranged forecast per horizon
/// `1..=max_horizon`; `sample_paths` returns `n_paths` earnings-level
/// paths of length `horizon`, deterministic in `(seed, history.id)`.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;

    fn horizon_quantiles(
        &self,
        history: &IndividualHistory,
        max_horizon: u32,
        seed: u64,
    ) -> Result<Vec<QuantileForecast>>;

    fn sample_paths(
        &self,
        history: &IndividualHistory,
        horizon: u32,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>>;
}

/// Baseline that ignores the conditioning window: fixed quantiles fitted
/// from pooled training log values, identical for every individual and
/// horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnconditionalForecaster {
    pub forecast: QuantileForecast,
}

impl UnconditionalForecaster {
    /// Fit from pooled training-panel log values.
    pub fn fit(panel: &[IndividualHistory]) -> Result<Self> {
        let mut vals: Vec<f64> = panel
            .iter()
            .flat_map(|h| h.records.iter().map(|r| crate::panel::log_value(r.earnings)))
            .collect();
        if vals.is_empty() {
            return Err(Error::Parameter("cannot fit on an empty panel".into()));
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut quantiles = [0.0; 7];
        for (k, &level) in QUANTILE_LEVELS.iter().enumerate() {
            quantiles[k] = crate::math::quantile_type7(&vals, level);
        }
        let point = crate::math::mean(&vals);
        Ok(UnconditionalForecaster { forecast: QuantileForecast { point, quantiles } })
    }
}

impl Forecaster for UnconditionalForecaster {
    fn name(&self) -> &str {
        "unconditional"
    }

    fn horizon_quantiles(
        &self,
        _history: &IndividualHistory,
        max_horizon: u32,
        _seed: u64,
    ) -> Result<Vec<QuantileForecast>> {
        Ok(vec![self.forecast.rearranged(); max_horizon as usize])
    }

    fn sample_paths(
        &self,
        history: &IndividualHistory,
        horizon: u32,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let qf = self.forecast.rearranged();
        let mut paths = Vec::with_capacity(n_paths);
        for p in 0..n_paths {
            let mut s = crate::rng::Stream::new(
                seed,
                &[history.id, p as u64, crate::rng::tag::LIFETIME_PATH],
            );
            let mut path = Vec::with_capacity(horizon as usize);
            for _ in 0..horizon {
                let draw = sample_from_quantiles(&qf, s.next_open_f64())?;
                path.push(draw.exp());
            }
            paths.push(path);
        }
        Ok(paths)
    }
}
