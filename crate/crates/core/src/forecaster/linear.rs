//! Per-horizon linear quantile regression on the flattened conditioning
//! window: a lightweight stand-in exercising the same forecast contract
//! as the sequence model. Quantile coefficients are fitted by full-batch
//! subgradient descent on the pinball loss; the point forecast is OLS.

use crate::error::{Error, Result};
use crate::forecaster::{
    sample_from_quantiles, Forecaster, QuantileForecast, QUANTILE_LEVELS,
};
use crate::math::solve_linear;
use crate::panel::{log_value, IndividualHistory};
use crate::rng::{tag, Stream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonModel {
    pub point_coefs: Vec<f64>,
    pub quantile_coefs: [Vec<f64>; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQuantileForecaster {
    pub conditioning_len: usize,
    /// Index h-1 holds the model for horizon h.
    pub models: Vec<HorizonModel>,
}

/// Training matrix for one horizon: rows `[1, window log values]`,
/// targets the log value `h` records past the window.
fn design(
    panel: &[IndividualHistory],
    t_c: usize,
    h: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for hist in panel {
        if hist.records.len() < t_c + h {
            continue;
        }
        let mut x = Vec::with_capacity(t_c + 1);
        x.push(1.0);
        for rec in &hist.records[..t_c] {
            x.push(log_value(rec.earnings));
        }
        xs.push(x);
        ys.push(log_value(hist.records[t_c + h - 1].earnings));
    }
    (xs, ys)
}

fn ols(xs: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
    let p = xs[0].len();
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..p {
            xty[i] += x[i] * y;
            for j in 0..p {
                xtx[i * p + j] += x[i] * x[j];
            }
        }
    }
    // Tiny ridge keeps collinear windows solvable.
    for i in 0..p {
        xtx[i * p + i] += 1e-8;
    }
    solve_linear(&xtx, &xty, p)
        .ok_or_else(|| Error::Estimation("singular design in linear forecaster".into()))
}

fn pinball_subgradient_fit(
    xs: &[Vec<f64>],
    ys: &[f64],
    alpha: f64,
    init: &[f64],
    iterations: usize,
    step0: f64,
) -> Vec<f64> {
    let p = init.len();
    let n = xs.len() as f64;
    let mut beta = init.to_vec();
    for it in 0..iterations {
        let mut grad = vec![0.0; p];
        for (x, &y) in xs.iter().zip(ys) {
            let pred: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            let u = y - pred;
            let g = if u < 0.0 { -(alpha - 1.0) } else { -alpha };
            for i in 0..p {
                grad[i] += g * x[i] / n;
            }
        }
        let step = step0 / (1.0 + it as f64).sqrt();
        for i in 0..p {
            beta[i] -= step * grad[i];
        }
    }
    beta
}

/// Fit per-horizon linear quantile models for horizons `1..=max_horizon`.
pub fn fit_quantile_linear(
    panel: &[IndividualHistory],
    conditioning_len: usize,
    max_horizon: u32,
    iterations: usize,
) -> Result<LinearQuantileForecaster> {
    let mut models = Vec::with_capacity(max_horizon as usize);
    for h in 1..=max_horizon as usize {
        let (xs, ys) = design(panel, conditioning_len, h);
        if xs.len() < conditioning_len + 2 {
            return Err(Error::Estimation(format!(
                "horizon {h}: only {} usable training rows",
                xs.len()
            )));
        }
        let point_coefs = ols(&xs, &ys)?;
        let quantile_coefs = std::array::from_fn(|k| {
            pinball_subgradient_fit(&xs, &ys, QUANTILE_LEVELS[k], &point_coefs, iterations, 0.5)
        });
        models.push(HorizonModel { point_coefs, quantile_coefs });
    }
    Ok(LinearQuantileForecaster { conditioning_len, models })
}

impl LinearQuantileForecaster {
    fn features(&self, history: &IndividualHistory) -> Result<Vec<f64>> {
        if history.records.len() < self.conditioning_len {
            return Err(Error::Parameter(format!(
                "individual {} lacks a full conditioning window",
                history.id
            )));
        }
        let mut x = Vec::with_capacity(self.conditioning_len + 1);
        x.push(1.0);
        for rec in &history.records[..self.conditioning_len] {
            x.push(log_value(rec.earnings));
        }
        Ok(x)
    }

    fn forecast_at(&self, x: &[f64], h: usize) -> Result<QuantileForecast> {
        let model = self.models.get(h - 1).ok_or_else(|| {
            Error::Parameter(format!("horizon {h} beyond the fitted maximum {}", self.models.len()))
        })?;
        let dot = |coefs: &[f64]| coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        let mut quantiles = [0.0; 7];
        for k in 0..7 {
            quantiles[k] = dot(&model.quantile_coefs[k]);
        }
        Ok(QuantileForecast { point: dot(&model.point_coefs), quantiles }.rearranged())
    }

    /// Mean in-sample pinball loss of the fitted quantile lines at one
    /// horizon (diagnostic used by tests and reports).
    pub fn in_sample_pinball(
        &self,
        panel: &[IndividualHistory],
        h: usize,
    ) -> Result<f64> {
        let (xs, ys) = design(panel, self.conditioning_len, h);
        if xs.is_empty() {
            return Err(Error::Estimation("no usable rows".into()));
        }
        let model = &self.models[h - 1];
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            for k in 0..7 {
                let pred: f64 =
                    model.quantile_coefs[k].iter().zip(x).map(|(c, v)| c * v).sum();
                total += crate::forecaster::pinball_loss(y - pred, QUANTILE_LEVELS[k]);
            }
        }
        Ok(total / (xs.len() as f64 * 7.0))
    }
}

impl Forecaster for LinearQuantileForecaster {
    fn name(&self) -> &str {
        "quantile_linear"
    }

    fn horizon_quantiles(
        &self,
        history: &IndividualHistory,
        max_horizon: u32,
        _seed: u64,
    ) -> Result<Vec<QuantileForecast>> {
        let x = self.features(history)?;
        (1..=max_horizon as usize).map(|h| self.forecast_at(&x, h)).collect()
    }

    /// Marginal sampler: each step draws independently from that
    /// horizon's inverse CDF (the per-horizon models carry no joint
    /// dependence structure).
    fn sample_paths(
        &self,
        history: &IndividualHistory,
        horizon: u32,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let x = self.features(history)?;
        let forecasts: Vec<QuantileForecast> =
            (1..=horizon as usize).map(|h| self.forecast_at(&x, h)).collect::<Result<_>>()?;
        let mut paths = Vec::with_capacity(n_paths);
        for path_id in 0..n_paths as u64 {
            let mut s = Stream::new(seed, &[history.id, path_id, tag::LIFETIME_PATH]);
            let path = forecasts
                .iter()
                .map(|qf| sample_from_quantiles(qf, s.next_open_f64()).map(f64::exp))
                .collect::<Result<Vec<f64>>>()?;
            paths.push(path);
        }
        Ok(paths)
    }
}
