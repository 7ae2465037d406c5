//! Canonical-link GLMs (Gaussian/identity, binomial/logit, Poisson/log)
//! fitted by iteratively reweighted least squares.
//!
//! With a canonical link the score is `X' W (y - mu)`, so at convergence the
//! response residuals are orthogonal to every regressor under the case
//! weights. Residual balancing relies on that property.

use std::f64::consts::PI;
use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::WeightedQr;

/// Absolute link-scale coefficient beyond which separation is suspected.
pub const SEPARATION_THRESHOLD: f64 = 30.0;

const MU_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "linear" | "normal" => Ok(Family::Gaussian),
            "binomial" | "logistic" | "logit" => Ok(Family::Binomial),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }

    /// Level-of-measurement default: {0,1} columns are binomial, other
    /// non-negative integer columns Poisson, everything else Gaussian.
    pub fn for_values(values: &DVector<f64>) -> Self {
        if values.iter().all(|&v| v == 0.0 || v == 1.0) {
            Family::Binomial
        } else if values.iter().all(|&v| v >= 0.0 && v.fract() == 0.0) {
            Family::Poisson
        } else {
            Family::Gaussian
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Binomial => {
                let p = if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                };
                p.clamp(MU_EPS, 1.0 - MU_EPS)
            }
            Family::Poisson => eta.min(700.0).exp().max(f64::MIN_POSITIVE),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Binomial => (mu / (1.0 - mu)).ln(),
            Family::Poisson => mu.ln(),
        }
    }

    /// Variance function, which for a canonical link is also d mu / d eta.
    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        fn ylogy(y: f64, mu: f64) -> f64 {
            if y == 0.0 {
                0.0
            } else {
                y * (y / mu).ln()
            }
        }
        match self {
            Family::Gaussian => (y - mu).powi(2),
            Family::Binomial => 2.0 * (ylogy(y, mu) + ylogy(1.0 - y, 1.0 - mu)),
            Family::Poisson => 2.0 * (ylogy(y, mu) - (y - mu)),
        }
    }

    fn check_response(self, y: &DVector<f64>) -> Result<()> {
        let bad = |message: String| {
            Err(Error::InvalidResponse {
                family: self.name(),
                message,
            })
        };
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return bad(format!("row {i} is not finite"));
            }
            match self {
                Family::Binomial if !(0.0..=1.0).contains(&v) => {
                    return bad(format!("row {i} = {v} outside [0, 1]"));
                }
                Family::Poisson if v < 0.0 => {
                    return bad(format!("row {i} = {v} is negative"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Converged when the largest absolute score component drops below this.
    pub score_tol: f64,
    /// ...or when the relative deviance change drops below this.
    pub deviance_tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-10,
            deviance_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: DVector<f64>,
    pub fitted_means: DVector<f64>,
    /// Response residuals `y - fitted_means`.
    pub residuals: DVector<f64>,
    /// Gaussian: weighted ML residual variance `sum w e^2 / sum w`. Others: 1.
    pub dispersion: f64,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub design_names: Vec<String>,
    /// Some |coefficient| exceeded [`SEPARATION_THRESHOLD`].
    pub separation_warning: bool,
}

impl GlmFit {
    pub fn response_residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    pub fn predict_mean(&self, new_design: &DMatrix<f64>) -> Result<DVector<f64>> {
        if new_design.ncols() != self.coefficients.len() {
            return Err(Error::Dimension(format!(
                "design has {} columns, fit has {} coefficients",
                new_design.ncols(),
                self.coefficients.len()
            )));
        }
        let eta = new_design * &self.coefficients;
        Ok(eta.map(|e| self.family.inverse_link(e)))
    }

    /// Density (Gaussian, homoskedastic with the fitted dispersion) or mass
    /// (binomial) of `observed` under the fitted conditional distribution.
    pub fn conditional_density(
        &self,
        new_design: &DMatrix<f64>,
        observed: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let mean = self.predict_mean(new_design)?;
        if observed.len() != mean.len() {
            return Err(Error::Dimension(format!(
                "{} observations for {} design rows",
                observed.len(),
                mean.len()
            )));
        }
        match self.family {
            Family::Gaussian => {
                let sigma = self.dispersion.sqrt();
                if !(sigma > 0.0) {
                    return Err(Error::Degenerate(
                        "zero residual standard deviation in gaussian density".into(),
                    ));
                }
                Ok(mean.zip_map(observed, |m, y| normal_density(y, m, sigma)))
            }
            Family::Binomial => {
                let mut out = DVector::zeros(mean.len());
                for i in 0..mean.len() {
                    out[i] = match observed[i] {
                        1.0 => mean[i],
                        0.0 => 1.0 - mean[i],
                        y => {
                            return Err(Error::InvalidResponse {
                                family: "binomial",
                                message: format!("observed value {y} is not 0/1"),
                            })
                        }
                    };
                }
                Ok(out)
            }
            Family::Poisson => Err(Error::Unsupported(
                "conditional density for the poisson family".into(),
            )),
        }
    }
}

pub fn normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

pub fn fit_glm(
    design: &DesignMatrix,
    response: &DVector<f64>,
    family: Family,
    case_weights: &DVector<f64>,
) -> Result<GlmFit> {
    fit_glm_with(design, response, family, case_weights, &GlmOptions::default())
}

pub fn fit_glm_with(
    design: &DesignMatrix,
    response: &DVector<f64>,
    family: Family,
    case_weights: &DVector<f64>,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let x = &design.values;
    let (n, p) = x.shape();
    if response.len() != n || case_weights.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows, response {} and weights {}",
            response.len(),
            case_weights.len()
        )));
    }
    if n < p {
        return Err(Error::RankDeficient(format!(
            "{n} observations for {p} regressors"
        )));
    }
    if case_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "case weights must be finite and non-negative".into(),
        ));
    }
    family.check_response(response)?;

    let deviance = |mu: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| case_weights[i] * family.unit_deviance(response[i], mu[i]))
            .sum()
    };
    let means = |beta: &DVector<f64>| (x * beta).map(|e| family.inverse_link(e));

    let (beta, converged, iterations) = if family == Family::Gaussian {
        let qr = WeightedQr::new(x, case_weights)?;
        (qr.solve(response), true, 1)
    } else {
        // Standard starting values that keep mu inside the support.
        let mut mu = response.map(|y| match family {
            Family::Binomial => (y + 0.5) / 2.0,
            _ => y + 0.1,
        });
        let mut eta = mu.map(|m| family.link(m));
        let mut dev_old = deviance(&mu);
        let mut beta_old: Option<DVector<f64>> = None;
        let mut converged = false;
        let mut iterations = 0;
        let mut beta = DVector::zeros(p);

        while iterations < opts.max_iter {
            iterations += 1;
            let v = mu.map(|m| family.variance(m));
            let w = case_weights.component_mul(&v);
            let z = DVector::from_fn(n, |i, _| eta[i] + (response[i] - mu[i]) / v[i]);
            let mut candidate = WeightedQr::new(x, &w)?.solve(&z);
            let mut mu_new = means(&candidate);
            let mut dev_new = deviance(&mu_new);

            // Step halving on deviance increase.
            if let Some(prev) = &beta_old {
                let mut halvings = 0;
                while !(dev_new <= dev_old * (1.0 + 1e-12) + 1e-300) && halvings < 30 {
                    candidate = (prev + &candidate) * 0.5;
                    mu_new = means(&candidate);
                    dev_new = deviance(&mu_new);
                    halvings += 1;
                }
            }

            beta = candidate;
            mu = mu_new;
            eta = x * &beta;

            let score = x.tr_mul(&DVector::from_fn(n, |i, _| {
                case_weights[i] * (response[i] - mu[i])
            }));
            let rel_change = (dev_new - dev_old).abs() / (dev_new.abs() + 0.1);
            dev_old = dev_new;
            beta_old = Some(beta.clone());
            if score.amax() < opts.score_tol || rel_change < opts.deviance_tol {
                converged = true;
                break;
            }
        }
        (beta, converged, iterations)
    };

    let mu_final = means(&beta);
    let perfect_fit = family == Family::Binomial
        && (0..n).all(|i| case_weights[i] == 0.0 || (response[i] - mu_final[i]).abs() < 1e-8);
    let separation_warning = family != Family::Gaussian
        && (perfect_fit || beta.iter().any(|b| b.abs() > SEPARATION_THRESHOLD));
    if !converged {
        if separation_warning {
            return Err(Error::Degenerate(format!(
                "complete separation suspected: coefficients diverged ({} family)",
                family
            )));
        }
        return Err(Error::NotConverged { iterations });
    }
    if separation_warning {
        warn!(
            "{} GLM: coefficient beyond ±{SEPARATION_THRESHOLD}, possible separation",
            family
        );
    }

    let fitted_means = means(&beta);
    let residuals = response - &fitted_means;
    let sw: f64 = case_weights.sum();
    let dispersion = match family {
        Family::Gaussian => {
            residuals
                .iter()
                .zip(case_weights.iter())
                .map(|(e, w)| w * e * e)
                .sum::<f64>()
                / sw
        }
        _ => 1.0,
    };
    let deviance = deviance(&fitted_means);

    Ok(GlmFit {
        family,
        coefficients: beta,
        fitted_means,
        residuals,
        dispersion,
        deviance,
        converged,
        iterations,
        design_names: design.names.clone(),
        separation_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn intercept(n: usize) -> DesignMatrix {
        DesignMatrix::intercept(n)
    }

    fn ones(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0)
    }

    #[test]
    fn gaussian_intercept_is_the_mean() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_glm(&intercept(3), &y, Family::Gaussian, &ones(3)).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0, epsilon = 1e-14);
        let r = fit.response_residuals();
        assert_relative_eq!(r[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(r[1], 0.0, epsilon = 1e-14);
        assert_relative_eq!(r[2], 1.0, epsilon = 1e-14);
        // ML divisor n
        assert_relative_eq!(fit.dispersion, 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn binomial_intercept_is_logit_of_mean() {
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let fit = fit_glm(&intercept(4), &y, Family::Binomial, &ones(4)).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.coefficients[0], -(3.0_f64).ln(), epsilon = 1e-10);
        let r = fit.response_residuals();
        for (got, want) in r.iter().zip([0.75, -0.25, -0.25, -0.25]) {
            assert_relative_eq!(*got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn poisson_intercept_is_log_of_mean() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_glm(&intercept(3), &y, Family::Poisson, &ones(3)).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0_f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn saturated_gaussian_has_zero_residuals() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let design = DesignMatrix::new(vec!["a".into(), "b".into()], x);
        let y = DVector::from_vec(vec![3.0, -1.0]);
        let fit = fit_glm(&design, &y, Family::Gaussian, &ones(2)).unwrap();
        assert!(fit.residuals.amax() < 1e-14);
    }

    fn fit_with_coefficients(family: Family, coefficients: Vec<f64>) -> GlmFit {
        let p = coefficients.len();
        GlmFit {
            family,
            coefficients: DVector::from_vec(coefficients),
            fitted_means: DVector::zeros(0),
            residuals: DVector::zeros(0),
            dispersion: 1.0,
            deviance: 0.0,
            converged: true,
            iterations: 1,
            design_names: vec![String::new(); p],
            separation_warning: false,
        }
    }

    #[test]
    fn predict_mean_examples() {
        let g = fit_with_coefficients(Family::Gaussian, vec![1.0, 2.0]);
        let row = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(g.predict_mean(&row).unwrap()[0], 1.0);

        let b = fit_with_coefficients(Family::Binomial, vec![0.0]);
        let row = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(b.predict_mean(&row).unwrap()[0], 0.5);

        let p = fit_with_coefficients(Family::Poisson, vec![2.0_f64.ln()]);
        assert_relative_eq!(p.predict_mean(&row).unwrap()[0], 2.0, epsilon = 1e-14);

        let wrong = DMatrix::from_element(1, 2, 1.0);
        assert!(matches!(b.predict_mean(&wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn conditional_density_examples() {
        let row = DMatrix::from_element(1, 1, 1.0);
        let g = fit_with_coefficients(Family::Gaussian, vec![0.0]);
        let d = g
            .conditional_density(&row, &DVector::from_element(1, 0.0))
            .unwrap();
        assert_relative_eq!(d[0], 0.398942280401, epsilon = 1e-12);

        let b = fit_with_coefficients(Family::Binomial, vec![-(3.0_f64).ln()]);
        let one = b
            .conditional_density(&row, &DVector::from_element(1, 1.0))
            .unwrap();
        let zero = b
            .conditional_density(&row, &DVector::from_element(1, 0.0))
            .unwrap();
        assert_relative_eq!(one[0], 0.25, epsilon = 1e-14);
        assert_relative_eq!(zero[0], 0.75, epsilon = 1e-14);

        let p = fit_with_coefficients(Family::Poisson, vec![0.0]);
        assert!(matches!(
            p.conditional_density(&row, &DVector::from_element(1, 1.0)),
            Err(Error::Unsupported(_))
        ));

        let mut flat = fit_with_coefficients(Family::Gaussian, vec![0.0]);
        flat.dispersion = 0.0;
        assert!(flat
            .conditional_density(&row, &DVector::from_element(1, 0.0))
            .is_err());
    }

    #[test]
    fn rank_deficient_design_errors() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let design = DesignMatrix::new(vec!["a".into(), "b".into()], x);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            fit_glm(&design, &y, Family::Binomial, &ones(3)),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn invalid_responses_are_rejected() {
        let y = DVector::from_vec(vec![1.5, 0.0]);
        assert!(fit_glm(&intercept(2), &y, Family::Binomial, &ones(2)).is_err());
        let y = DVector::from_vec(vec![-1.0, 0.0]);
        assert!(fit_glm(&intercept(2), &y, Family::Poisson, &ones(2)).is_err());
    }

    #[test]
    fn separated_logistic_sets_flag() {
        let x = DMatrix::from_row_slice(
            6,
            2,
            &[1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0],
        );
        let design = DesignMatrix::new(vec!["1".into(), "x".into()], x);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        match fit_glm(&design, &y, Family::Binomial, &ones(6)) {
            Ok(fit) => assert!(fit.separation_warning),
            Err(e) => assert!(matches!(e, Error::Degenerate(_)), "{e}"),
        }
    }

    #[test]
    fn family_defaults_by_level() {
        assert_eq!(
            Family::for_values(&DVector::from_vec(vec![0.0, 1.0, 1.0])),
            Family::Binomial
        );
        assert_eq!(
            Family::for_values(&DVector::from_vec(vec![0.0, 3.0, 1.0])),
            Family::Poisson
        );
        assert_eq!(
            Family::for_values(&DVector::from_vec(vec![0.5, 3.0, 1.0])),
            Family::Gaussian
        );
    }

    // Deterministic pseudo-random design from a seed, well conditioned.
    fn random_problem(seed: u64, n: usize, p: usize) -> (DesignMatrix, DVector<f64>, DVector<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.2..3.0));
        let names = (0..p).map(|j| format!("x{j}")).collect();
        let y = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        (DesignMatrix::new(names, x), y, w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gaussian_matches_normal_equations(seed in any::<u64>()) {
            let (design, y, w) = random_problem(seed, 40, 4);
            let fit = fit_glm(&design, &y, Family::Gaussian, &w).unwrap();
            let x = &design.values;
            let xtw = x.transpose() * DMatrix::from_diagonal(&w);
            let direct = (&xtw * x).cholesky().unwrap().solve(&(&xtw * &y));
            for k in 0..4 {
                let rel = (fit.coefficients[k] - direct[k]).abs() / direct[k].abs().max(1e-3);
                prop_assert!(rel < 1e-8);
            }
        }

        #[test]
        fn score_orthogonality_all_families(seed in any::<u64>()) {
            let (design, y, w) = random_problem(seed, 60, 3);
            let binary = y.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let counts = y.map(|v| (v * 5.0).floor());
            for (family, response) in [
                (Family::Gaussian, y.clone()),
                (Family::Binomial, binary),
                (Family::Poisson, counts),
            ] {
                let fit = fit_glm(&design, &response, family, &w).unwrap();
                let score = design.values.tr_mul(&w.component_mul(&fit.residuals));
                prop_assert!(score.amax() < 1e-8, "{family}: {}", score.amax());
                if family == Family::Binomial {
                    prop_assert!(fit.fitted_means.iter().all(|&m| m > 0.0 && m < 1.0));
                }
                if family == Family::Poisson {
                    prop_assert!(fit.fitted_means.iter().all(|&m| m > 0.0));
                }
            }
        }

        #[test]
        fn case_weight_scale_invariance(seed in any::<u64>(), k in 0.01f64..100.0) {
            let (design, y, w) = random_problem(seed, 50, 3);
            let binary = y.map(|v| if v > 0.4 { 1.0 } else { 0.0 });
            let a = fit_glm(&design, &binary, Family::Binomial, &w).unwrap();
            let b = fit_glm(&design, &binary, Family::Binomial, &(&w * k)).unwrap();
            for j in 0..3 {
                prop_assert!((a.coefficients[j] - b.coefficients[j]).abs() < 1e-8);
            }
        }
    }
}
