//! Derivative-free minimization: Nelder-Mead simplex with box bounds via
//! a logistic reparameterization.

/// Result of a Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x_min: Vec<f64>,
    pub f_min: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Options for [`nelder_mead`].
#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Converged when the simplex function spread falls below
    /// `tolerance * (1 + |f_best|)`.
    pub tolerance: f64,
    /// Initial simplex step applied per coordinate.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evaluations: 800, tolerance: 1e-10, initial_step: 0.25 }
    }
}

/// Classic Nelder-Mead (reflection 1, expansion 2, contraction 0.5,
/// shrink 0.5) on an unconstrained space.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    let n = x0.len();
    assert!(n > 0);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    // Initial simplex: x0 plus one step per coordinate.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let fx0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), fx0));
    for i in 0..n {
        let mut xi = x0.to_vec();
        xi[i] += opts.initial_step;
        let fi = eval(&xi, &mut evals);
        simplex.push((xi, fi));
    }

    let mut iterations = 0usize;
    let mut converged = false;
    while evals < opts.max_evaluations {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= opts.tolerance * (1.0 + best.abs()) {
            converged = true;
            break;
        }

        // Centroid of all but the worst point.
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }

        let worst_x = simplex[n].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst_x)
            .map(|(c, w)| c + (c - w))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst_x)
                .map(|(c, w)| c + 2.0 * (c - w))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            simplex[n] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[n - 1].1 {
            simplex[n] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = if f_reflect < simplex[n].1 {
                centroid.iter().zip(&reflect).map(|(c, r)| c + 0.5 * (r - c)).collect()
            } else {
                centroid.iter().zip(&worst_x).map(|(c, w)| c + 0.5 * (w - c)).collect()
            };
            let f_contract = eval(&contract, &mut evals);
            if f_contract < simplex[n].1.min(f_reflect) {
                simplex[n] = (contract, f_contract);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    for (v, b) in vertex.0.iter_mut().zip(&best_x) {
                        *v = b + 0.5 * (*v - b);
                    }
                    vertex.1 = eval(&vertex.0, &mut evals);
                    if evals >= opts.max_evaluations {
                        break;
                    }
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    NelderMeadResult {
        x_min: simplex[0].0.clone(),
        f_min: simplex[0].1,
        evaluations: evals,
        iterations,
        converged,
    }
}

/// Map an unconstrained coordinate to a box `(lo, hi)` by a logistic.
pub fn to_bounded(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) / (1.0 + (-u).exp())
}

/// Inverse of [`to_bounded`]; clamps strictly inside the box first.
pub fn from_bounded(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let frac = ((x - lo) / w).clamp(1e-9, 1.0 - 1e-9);
    (frac / (1.0 - frac)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_bowl() {
        let res = nelder_mead(
            |x| (x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2),
            &[0.0, 0.0],
            &NelderMeadOptions::default(),
        );
        assert!(res.converged);
        assert!((res.x_min[0] - 1.5).abs() < 1e-4);
        assert!((res.x_min[1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opts = NelderMeadOptions {
            max_evaluations: 4000,
            tolerance: 1e-12,
            initial_step: 0.5,
        };
        let res = nelder_mead(
            |x| {
                let a = 1.0 - x[0];
                let b = x[1] - x[0] * x[0];
                a * a + 100.0 * b * b
            },
            &[-1.2, 1.0],
            &opts,
        );
        assert!((res.x_min[0] - 1.0).abs() < 1e-3, "{:?}", res);
        assert!((res.x_min[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn budget_exhaustion_reports_not_converged() {
        let opts = NelderMeadOptions { max_evaluations: 10, tolerance: 1e-14, initial_step: 0.5 };
        let res = nelder_mead(|x| x[0] * x[0], &[5.0], &opts);
        assert!(!res.converged);
        assert!(res.evaluations <= 11);
    }

    #[test]
    fn bounded_transform_round_trips() {
        for &x in &[0.11, 0.5, 0.89] {
            let u = from_bounded(x, 0.1, 0.9);
            assert!((to_bounded(u, 0.1, 0.9) - x).abs() < 1e-12);
        }
        assert!(to_bounded(-1e9, 0.0, 1.0) >= 0.0);
        assert!(to_bounded(1e9, 0.0, 1.0) <= 1.0);
    }
}
