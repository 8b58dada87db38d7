//! Particle-filter forecaster for the mixture earnings process.
//!
//! The process itself never specifies how to condition on an observed
//! history, so forecasting runs a bootstrap particle filter over the
//! latent pair (fixed effect, permanent state): particles start from the
//! priors, are reweighted by the mixture likelihood of each observed log
//! earnings value, and are resampled systematically. Forecasts are
//! empirical quantiles of forward-simulated particles.

use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, QuantileForecast, QUANTILE_LEVELS};
use crate::math;
use crate::panel::{log_value, GkosParams, IndividualHistory, MixtureComponent};
use crate::rng::{tag, Stream};
use std::f64::consts::TAU;

fn mixture_pdf(components: &[MixtureComponent], x: f64) -> f64 {
    components
        .iter()
        .map(|c| {
            let z = x - c.mean;
            c.weight * (-0.5 * z * z / c.variance).exp() / (TAU * c.variance).sqrt()
        })
        .sum()
}

fn sample_mixture(components: &[MixtureComponent], s: &mut Stream) -> f64 {
    let u = s.next_f64();
    let z = s.next_normal();
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

/// Filtered particle cloud after absorbing a conditioning window.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub alpha: Vec<f64>,
    pub z: Vec<f64>,
    /// Last year the filter has absorbed.
    pub year: i32,
    /// Set when the effective sample size fell below the resample
    /// threshold at least once.
    pub ess_flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GkosForecaster {
    pub params: GkosParams,
    pub n_particles: usize,
    /// Resample when ESS drops below this fraction of the cloud size.
    pub ess_threshold: f64,
}

impl GkosForecaster {
    pub fn new(params: GkosParams, n_particles: usize) -> Self {
        GkosForecaster { params, n_particles, ess_threshold: 0.5 }
    }

    /// Systematic resampling with a single uniform offset.
    fn resample(weights: &[f64], s: &mut Stream) -> Vec<usize> {
        let n = weights.len();
        let mut picks = Vec::with_capacity(n);
        let step = 1.0 / n as f64;
        let mut u = s.next_f64() * step;
        let mut acc = 0.0;
        let mut j = 0usize;
        for w in weights {
            acc += w;
            while u < acc && picks.len() < n {
                picks.push(j);
                u += step;
            }
            j += 1;
        }
        while picks.len() < n {
            picks.push(n - 1);
        }
        picks
    }

    /// Run the filter over the history's conditioning window.
    pub fn filter(&self, history: &IndividualHistory, seed: u64) -> Result<ParticleCloud> {
        self.params.validate()?;
        let window = history.conditioning_window();
        if window.is_empty() {
            return Err(Error::Parameter(format!(
                "individual {} has an empty conditioning window",
                history.id
            )));
        }
        let n = self.n_particles;
        let mut s = Stream::new(seed, &[history.id, tag::PARTICLE]);
        let p = &self.params;
        let (stat_mean, stat_var) = p.permanent_stationary();
        let mut alpha: Vec<f64> =
            (0..n).map(|_| p.fixed_effect_sd * s.next_normal()).collect();
        let mut z: Vec<f64> =
            (0..n).map(|_| stat_mean + stat_var.sqrt() * s.next_normal()).collect();
        for zp in z.iter_mut() {
            for _ in 0..50 {
                *zp = p.rho * *zp + sample_mixture(&p.perm_mix, &mut s);
            }
        }

        let mut weights = vec![1.0 / n as f64; n];
        let mut flagged = false;
        let mut prev_year = window[0].year - 1;
        for rec in window {
            let gap = (rec.year - prev_year) as usize;
            for zp in z.iter_mut() {
                for _ in 0..gap {
                    *zp = p.rho * *zp + sample_mixture(&p.perm_mix, &mut s);
                }
            }
            prev_year = rec.year;

            if rec.earnings > 0.0 {
                // A zero-earnings year is a zero-inflation event whose
                // likelihood is particle-independent; only positive
                // earnings reweight the cloud.
                let obs = log_value(rec.earnings);
                let mut total = 0.0;
                for i in 0..n {
                    let lik = mixture_pdf(&p.trans_mix, obs - alpha[i] - z[i]);
                    weights[i] *= lik;
                    total += weights[i];
                }
                if total <= 0.0 || !total.is_finite() {
                    // Degenerate likelihood: reset and flag.
                    weights.fill(1.0 / n as f64);
                    flagged = true;
                } else {
                    for w in weights.iter_mut() {
                        *w /= total;
                    }
                }
            }

            let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
            if ess < self.ess_threshold * n as f64 {
                flagged = true;
                let picks = Self::resample(&weights, &mut s);
                alpha = picks.iter().map(|&i| alpha[i]).collect();
                z = picks.iter().map(|&i| z[i]).collect();
                weights.fill(1.0 / n as f64);
            }
        }

        // Equalize for the forward stage.
        let picks = Self::resample(&weights, &mut s);
        let alpha: Vec<f64> = picks.iter().map(|&i| alpha[i]).collect();
        let z: Vec<f64> = picks.iter().map(|&i| z[i]).collect();
        Ok(ParticleCloud { alpha, z, year: prev_year, ess_flagged: flagged })
    }

    /// Per-step log-value samples of the forward-simulated cloud;
    /// `out[h-1][particle]`.
    fn forward_log_values(
        &self,
        cloud: &ParticleCloud,
        horizon: u32,
        s: &mut Stream,
    ) -> Vec<Vec<f64>> {
        let p = &self.params;
        let n = cloud.alpha.len();
        let mut z = cloud.z.clone();
        let mut out = vec![vec![0.0; n]; horizon as usize];
        for h in 0..horizon as usize {
            for i in 0..n {
                z[i] = p.rho * z[i] + sample_mixture(&p.perm_mix, s);
                let eps = sample_mixture(&p.trans_mix, s);
                let zero = s.next_f64() < p.zero_prob;
                out[h][i] =
                    if zero { 0.0 } else { cloud.alpha[i] + z[i] + eps };
            }
        }
        out
    }
}

impl Forecaster for GkosForecaster {
    fn name(&self) -> &str {
        "gkos"
    }

    fn horizon_quantiles(
        &self,
        history: &IndividualHistory,
        max_horizon: u32,
        seed: u64,
    ) -> Result<Vec<QuantileForecast>> {
        let cloud = self.filter(history, seed)?;
        let mut s = Stream::new(seed, &[history.id, 1, tag::PARTICLE]);
        let logs = self.forward_log_values(&cloud, max_horizon, &mut s);
        Ok(logs
            .into_iter()
            .map(|mut vals| {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut quantiles = [0.0; 7];
                for (k, &level) in QUANTILE_LEVELS.iter().enumerate() {
                    quantiles[k] = math::quantile_type7(&vals, level);
                }
                QuantileForecast { point: math::mean(&vals), quantiles }
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
        let cloud = self.filter(history, seed)?;
        let p = &self.params;
        let n = cloud.alpha.len();
        let mut paths = Vec::with_capacity(n_paths);
        for path_id in 0..n_paths as u64 {
            let mut s = Stream::new(seed, &[history.id, path_id, tag::LIFETIME_PATH]);
            let pick = s.next_index(n);
            let mut z = cloud.z[pick];
            let alpha = cloud.alpha[pick];
            let mut path = Vec::with_capacity(horizon as usize);
            for _ in 0..horizon {
                z = p.rho * z + sample_mixture(&p.perm_mix, &mut s);
                let eps = sample_mixture(&p.trans_mix, &mut s);
                let zero = s.next_f64() < p.zero_prob;
                path.push(if zero { 0.0 } else { (alpha + z + eps).exp() });
            }
            paths.push(path);
        }
        Ok(paths)
    }
}
