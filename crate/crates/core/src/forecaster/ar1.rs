//! Closed-form Gaussian forecaster for the AR(1)-plus-transitory process:
//! exact Kalman filtering of the latent (fixed effect, permanent state)
//! pair, Gaussian predictive quantiles at every horizon.

use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, QuantileForecast, QUANTILE_LEVELS};
use crate::math::inv_normal_cdf;
use crate::panel::{log_value, Ar1Params, IndividualHistory};
use crate::rng::{tag, Stream};

/// Filtered state: mean and covariance of (fixed effect, permanent).
#[derive(Debug, Clone, Copy)]
pub struct FilteredState {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct Ar1Forecaster {
    pub params: Ar1Params,
}

impl Ar1Forecaster {
    pub fn new(params: Ar1Params) -> Self {
        Ar1Forecaster { params }
    }

    /// Kalman filter over the conditioning window. Zero-earnings years
    /// enter as log value 0 like everywhere else (the Gaussian model has
    /// no zero-inflation mechanism).
    pub fn filter(&self, history: &IndividualHistory) -> Result<FilteredState> {
        self.params.validate()?;
        let window = history.conditioning_window();
        if window.is_empty() {
            return Err(Error::Parameter(format!(
                "individual {} has an empty conditioning window",
                history.id
            )));
        }
        let p = &self.params;
        let rho = p.rho;
        let q = p.innovation_variance;
        let r = p.transitory_variance;
        let mut x = [0.0, 0.0];
        let mut cov = [[p.fixed_effect_sd * p.fixed_effect_sd, 0.0], [0.0, p.stationary_variance()]];
        let mut prev_year = window[0].year - 1;
        for rec in window {
            for _ in 0..(rec.year - prev_year) {
                x = [x[0], rho * x[1]];
                cov = [
                    [cov[0][0], rho * cov[0][1]],
                    [rho * cov[1][0], rho * rho * cov[1][1] + q],
                ];
            }
            prev_year = rec.year;
            let obs = log_value(rec.earnings);
            let s = cov[0][0] + cov[0][1] + cov[1][0] + cov[1][1] + r;
            if s <= 0.0 {
                continue; // fully degenerate model, nothing to update
            }
            let k = [(cov[0][0] + cov[0][1]) / s, (cov[1][0] + cov[1][1]) / s];
            let e = obs - (x[0] + x[1]);
            x = [x[0] + k[0] * e, x[1] + k[1] * e];
            let hp = [cov[0][0] + cov[1][0], cov[0][1] + cov[1][1]];
            cov = [
                [cov[0][0] - k[0] * hp[0], cov[0][1] - k[0] * hp[1]],
                [cov[1][0] - k[1] * hp[0], cov[1][1] - k[1] * hp[1]],
            ];
        }
        Ok(FilteredState { mean: x, cov })
    }

    /// Predictive mean and variance of log earnings `h >= 1` years past
    /// the filtered state.
    pub fn predictive(&self, state: &FilteredState, h: u32) -> (f64, f64) {
        let p = &self.params;
        let rho = p.rho;
        let rh = rho.powi(h as i32);
        let mean = state.mean[0] + rh * state.mean[1];
        let state_var = state.cov[0][0]
            + rh * (state.cov[0][1] + state.cov[1][0])
            + rh * rh * state.cov[1][1];
        let innovation_var = if rho.abs() < 1.0 {
            p.innovation_variance * (1.0 - rho.powi(2 * h as i32)) / (1.0 - rho * rho)
        } else {
            p.innovation_variance * h as f64
        };
        (mean, state_var + innovation_var + p.transitory_variance)
    }
}

impl Forecaster for Ar1Forecaster {
    fn name(&self) -> &str {
        "ar1"
    }

    fn horizon_quantiles(
        &self,
        history: &IndividualHistory,
        max_horizon: u32,
        _seed: u64,
    ) -> Result<Vec<QuantileForecast>> {
        let state = self.filter(history)?;
        Ok((1..=max_horizon)
            .map(|h| {
                let (mean, var) = self.predictive(&state, h);
                let sd = var.max(0.0).sqrt();
                let mut quantiles = [0.0; 7];
                for (k, &level) in QUANTILE_LEVELS.iter().enumerate() {
                    quantiles[k] = mean + sd * inv_normal_cdf(level);
                }
                QuantileForecast { point: mean, quantiles }
            })
            .collect())
    }

    fn sample_paths(
        &self,
        history: &IndividualHistory,
        horizon: u32,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let state = self.filter(history)?;
        let p = &self.params;
        // Cholesky factor of the 2x2 posterior covariance.
        let c = state.cov;
        let l00 = c[0][0].max(0.0).sqrt();
        let (l10, l11) = if l00 > 0.0 {
            let l10 = c[1][0] / l00;
            (l10, (c[1][1] - l10 * l10).max(0.0).sqrt())
        } else {
            (0.0, c[1][1].max(0.0).sqrt())
        };
        let innovation_sd = p.innovation_variance.sqrt();
        let transitory_sd = p.transitory_variance.sqrt();
        let mut paths = Vec::with_capacity(n_paths);
        for path_id in 0..n_paths as u64 {
            let mut s = Stream::new(seed, &[history.id, path_id, tag::LIFETIME_PATH]);
            let (g0, g1) = (s.next_normal(), s.next_normal());
            let alpha = state.mean[0] + l00 * g0;
            let mut z = state.mean[1] + l10 * g0 + l11 * g1;
            let mut path = Vec::with_capacity(horizon as usize);
            for _ in 0..horizon {
                z = p.rho * z + innovation_sd * s.next_normal();
                let eps = transitory_sd * s.next_normal();
                path.push((alpha + z + eps).exp());
            }
            paths.push(path);
        }
        Ok(paths)
    }
}
