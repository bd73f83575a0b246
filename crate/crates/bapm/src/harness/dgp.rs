//! The synthetic data-generating process of the benchmark scenarios.
//!
//! Seven base covariates drive nonlinear potential outcomes; what the
//! analyst observes depends on the `(n_rel, n_irr)` scenario. The true
//! average effect has a closed form used as the scoring oracle.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One population draw: base covariates, the analyst-visible matrix, and
/// both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpDraw {
    pub base: DMatrix<f64>,
    pub observed: DMatrix<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Closed-form average treatment effect of the synthetic outcome model:
/// `0.1(e − 1) − 0.2 e^{1/2} Φ(1) ≈ −0.1056`. The interaction terms are
/// mean zero by independence, and extra predictive covariates enter both
/// arms identically, so the value does not depend on the scenario.
pub fn true_tau_synthetic() -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    0.1 * (std::f64::consts::E - 1.0) - 0.2 * 0.5_f64.exp() * normal.cdf(1.0)
}

/// Coefficients of the extra predictive covariates: linearly decreasing
/// from 0.05 to 0.01 over however many there are.
pub fn extra_coefficients(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.05],
        m => (0..m)
            .map(|j| 0.05 - 0.04 * j as f64 / (m - 1) as f64)
            .collect(),
    }
}

/// Draw `n` units from the synthetic process for scenario
/// `(n_rel, n_irr)`.
///
/// Supported scenarios: `n_rel = 0` (noise only), `n_rel = 5` (the five
/// outcome-predictive covariates X1, X2, X3, X6, X7), and `n_rel > 5`
/// (X2, X3, X4, X6, X7 plus `n_rel − 5` extra predictive covariates, with
/// X1 and X5 hidden). Irrelevant covariates are independent standard
/// normal noise.
pub fn draw_population(
    n: usize,
    n_rel: usize,
    n_irr: usize,
    stream: &RngStream,
) -> Result<DgpDraw> {
    if (1..=4).contains(&n_rel) {
        return Err(Error::Scenario(format!(
            "n_rel must be 0, 5, or greater than 5; got {n_rel}"
        )));
    }
    let n_extra = n_rel.saturating_sub(5);
    let n_observed = match n_rel {
        0 => n_irr,
        _ => 5 + n_extra + n_irr,
    };
    if n_observed == 0 {
        return Err(Error::Scenario("the analyst must observe at least one covariate".into()));
    }
    let coefs = extra_coefficients(n_extra);

    let mut rng = stream.rng();
    fn normal(rng: &mut rand_chacha::ChaCha12Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    let mut base = DMatrix::zeros(n, 7);
    let mut extras = DMatrix::zeros(n, n_extra);
    let mut irr = DMatrix::zeros(n, n_irr);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = normal(&mut rng);
        let x2 = normal(&mut rng);
        let x3 = normal(&mut rng);
        let x7 = normal(&mut rng);
        let x5: f64 = {
            // Uniform(0, 1) from the same stream.
            use rand::Rng;
            rng.random::<f64>()
        };
        let x4 = x5 + normal(&mut rng);
        let x6 = x3 + normal(&mut rng);
        for (c, v) in [x1, x2, x3, x4, x5, x6, x7].into_iter().enumerate() {
            base[(i, c)] = v;
        }
        let mut extra_term = 0.0;
        for (j, coef) in coefs.iter().enumerate() {
            let e = normal(&mut rng);
            extras[(i, j)] = e;
            extra_term += coef * e;
        }
        for j in 0..n_irr {
            irr[(i, j)] = normal(&mut rng);
        }
        let shared = 0.1 * x1.sin() + 0.3 * x2.exp();
        y0.push(shared + 0.1 * x3.abs().exp() + 0.2 * x4 * x6 + extra_term);
        y1.push(shared + 0.1 * x5.exp() + 0.2 * x4 * x7 + extra_term);
    }

    let mut observed = DMatrix::zeros(n, n_observed);
    let mut col = 0;
    let copy_base = |observed: &mut DMatrix<f64>, col: &mut usize, c: usize| {
        for i in 0..n {
            observed[(i, *col)] = base[(i, c)];
        }
        *col += 1;
    };
    match n_rel {
        0 => {}
        5 => {
            for c in [0, 1, 2, 5, 6] {
                copy_base(&mut observed, &mut col, c);
            }
        }
        _ => {
            for c in [1, 2, 3, 5, 6] {
                copy_base(&mut observed, &mut col, c);
            }
            for j in 0..n_extra {
                for i in 0..n {
                    observed[(i, col)] = extras[(i, j)];
                }
                col += 1;
            }
        }
    }
    for j in 0..n_irr {
        for i in 0..n {
            observed[(i, col)] = irr[(i, j)];
        }
        col += 1;
    }
    debug_assert_eq!(col, n_observed);
    Ok(DgpDraw { base, observed, y0, y1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn true_tau_matches_the_closed_form() {
        assert_relative_eq!(true_tau_synthetic(), -0.105597, epsilon = 1e-5);
    }

    #[test]
    fn extra_coefficients_span_five_to_one_hundredths() {
        assert_eq!(extra_coefficients(0), Vec::<f64>::new());
        assert_eq!(extra_coefficients(1), vec![0.05]);
        let c = extra_coefficients(5);
        assert_relative_eq!(c[0], 0.05, epsilon = 1e-12);
        assert_relative_eq!(c[4], 0.01, epsilon = 1e-12);
        assert_relative_eq!(c[2], 0.03, epsilon = 1e-12);
    }

    #[test]
    fn observed_column_counts_follow_the_visibility_rules() {
        let s = RngStream::new(1);
        assert_eq!(draw_population(8, 0, 20, &s).unwrap().observed.ncols(), 20);
        assert_eq!(draw_population(8, 5, 3, &s).unwrap().observed.ncols(), 8);
        assert_eq!(draw_population(8, 10, 10, &s).unwrap().observed.ncols(), 20);
        assert!(draw_population(8, 3, 3, &s).is_err());
        assert!(draw_population(8, 0, 0, &s).is_err());
    }

    #[test]
    fn draws_are_reproducible() {
        let a = draw_population(16, 10, 10, &RngStream::new(7)).unwrap();
        let b = draw_population(16, 10, 10, &RngStream::new(7)).unwrap();
        assert_eq!(a, b);
    }

    // The large Monte Carlo checks of the moments live in the acceptance
    // suite; this is a cheap smoke test of the outcome formulas.
    #[test]
    fn outcome_formulas_track_the_base_covariates() {
        let d = draw_population(4, 5, 1, &RngStream::new(3)).unwrap();
        for i in 0..4 {
            let (x1, x2, x3, x4, x5, x6, x7) = (
                d.base[(i, 0)],
                d.base[(i, 1)],
                d.base[(i, 2)],
                d.base[(i, 3)],
                d.base[(i, 4)],
                d.base[(i, 5)],
                d.base[(i, 6)],
            );
            let y0 = 0.1 * x1.sin() + 0.3 * x2.exp() + 0.1 * x3.abs().exp() + 0.2 * x4 * x6;
            let y1 = 0.1 * x1.sin() + 0.1 * x5.exp() + 0.3 * x2.exp() + 0.2 * x4 * x7;
            assert_relative_eq!(d.y0[i], y0, epsilon = 1e-12);
            assert_relative_eq!(d.y1[i], y1, epsilon = 1e-12);
        }
    }
}
