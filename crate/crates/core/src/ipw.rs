//! Inverse probability of treatment weights.
//!
//! The weight of unit i is the product over periods of
//! `f(D_t | numerator history) / f(D_t | denominator history)`, evaluated at
//! the unit's observed treatment, times its base weight. Unstabilized weights
//! use a numerator of one.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::{MediationDataset, PanelDataset, VariableKind};
use crate::design::{DesignMatrix, Regressor};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, Family};

/// Densities below this are reported as positivity violations.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Conditional treatment model for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentModel {
    pub family: Family,
    /// Regressors besides the intercept.
    pub regressors: Vec<Regressor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpwSpec {
    /// Per period, `f(D_t | X̄_t, D̄_{t−1}, C)`.
    pub denominator: Vec<TreatmentModel>,
    /// Per period, `f(D_t | D̄_{t−1})` or with `C` added.
    pub numerator: Vec<TreatmentModel>,
    pub stabilized: bool,
    /// Whether numerators condition on baseline covariates.
    pub baseline_conditioning: bool,
}

fn treatment_family(kind: VariableKind) -> Family {
    match kind {
        VariableKind::Binary => Family::Binomial,
        VariableKind::Continuous => Family::Gaussian,
    }
}

impl IpwSpec {
    /// Denominator on `D_{t−1}`, `X_t` and baseline covariates; numerator on
    /// `D_{t−1}` (plus baseline covariates when `baseline_conditioning`).
    pub fn lag_one(data: &PanelDataset, stabilized: bool, baseline_conditioning: bool) -> Self {
        let family = treatment_family(data.treatment_kind());
        let baseline: Vec<Regressor> = (0..data.n_baseline()).map(Regressor::Baseline).collect();
        let mut denominator = Vec::new();
        let mut numerator = Vec::new();
        for t in 0..data.periods() {
            let mut num = Vec::new();
            if t > 0 {
                num.push(Regressor::Treatment(t - 1));
            }
            if baseline_conditioning {
                num.extend(baseline.iter().cloned());
            }
            let mut den = Vec::new();
            if t > 0 {
                den.push(Regressor::Treatment(t - 1));
            }
            den.extend((0..data.n_confounders()).map(|j| Regressor::Confounder {
                period: t,
                index: j,
            }));
            den.extend(baseline.iter().cloned());
            numerator.push(TreatmentModel {
                family,
                regressors: num,
            });
            denominator.push(TreatmentModel {
                family,
                regressors: den,
            });
        }
        Self {
            denominator,
            numerator,
            stabilized,
            baseline_conditioning,
        }
    }

    pub fn check(&self, data: &PanelDataset) -> Result<()> {
        let periods = data.periods();
        if self.denominator.len() != periods
            || (self.stabilized && self.numerator.len() != periods)
        {
            return Err(Error::Dimension(format!(
                "treatment models must be given for each of {periods} periods"
            )));
        }
        for t in 0..periods {
            for r in &self.denominator[t].regressors {
                if !r.resolves(data)
                    || r.max_treatment_period().is_some_and(|p| p >= t)
                    || r.max_confounder_period().is_some_and(|p| p > t)
                {
                    return Err(Error::InvalidArgument(format!(
                        "denominator regressor {} is not available at period {}",
                        r.label(data),
                        t + 1
                    )));
                }
            }
            if !self.stabilized {
                continue;
            }
            for r in &self.numerator[t].regressors {
                if !self.denominator[t].regressors.contains(r) {
                    return Err(Error::InvalidArgument(format!(
                        "numerator regressor {} at period {} is missing from the denominator",
                        r.label(data),
                        t + 1
                    )));
                }
                if !self.baseline_conditioning && r.max_confounder_period().is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "numerator at period {} conditions on a time-varying confounder",
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Standard deviation (divisor n) over the mean.
    pub cv: f64,
}

impl WeightSummary {
    pub fn of(w: &DVector<f64>) -> Self {
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            min: w.min(),
            max: w.max(),
            mean,
            cv: var.sqrt() / mean,
        }
    }
}

impl fmt::Display for WeightSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min {:.6} max {:.6} mean {:.6} cv {:.6}",
            self.min, self.max, self.mean, self.cv
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: DVector<f64>,
    pub method: String,
    pub summary: WeightSummary,
}

impl WeightVector {
    pub fn new(weights: DVector<f64>, method: impl Into<String>) -> Self {
        let summary = WeightSummary::of(&weights);
        Self {
            weights,
            method: method.into(),
            summary,
        }
    }
}

/// Density or mass of each unit's observed response under a GLM fitted with
/// case weights `q`. A constant binary response has mass one everywhere.
fn observed_density(
    design: &DesignMatrix,
    y: &DVector<f64>,
    family: Family,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    if family == Family::Binomial && y.iter().all(|v| *v == y[0]) {
        return Ok(DVector::from_element(y.len(), 1.0));
    }
    let fit = fit_glm(design, y, family, q)?;
    fit.conditional_density(&design.values, y)
}

fn guard(density: f64, unit: &str, period: usize) -> Result<f64> {
    if !(density >= DENSITY_FLOOR) {
        return Err(Error::Positivity {
            unit: unit.to_string(),
            period,
            density,
        });
    }
    Ok(density)
}

/// Fitted per-period densities `(denominator, numerator)`, each n × T. The
/// numerator is all ones for unstabilized specifications.
pub fn fitted_densities(
    data: &PanelDataset,
    spec: &IpwSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.check(data)?;
    let (n, periods) = (data.n(), data.periods());
    let q = data.base_weights();
    let mut den = DMatrix::zeros(n, periods);
    let mut num = DMatrix::from_element(n, periods, 1.0);
    for t in 0..periods {
        let d = data.treatment(t);
        let m = &spec.denominator[t];
        let design = DesignMatrix::from_regressors(data, &m.regressors);
        den.set_column(t, &observed_density(&design, &d, m.family, q)?);
        if spec.stabilized {
            let m = &spec.numerator[t];
            let design = DesignMatrix::from_regressors(data, &m.regressors);
            num.set_column(t, &observed_density(&design, &d, m.family, q)?);
        }
    }
    Ok((den, num))
}

fn method_label(stabilized: bool, base: &str) -> String {
    if stabilized {
        format!("{base} (stabilized)")
    } else {
        base.to_string()
    }
}

/// Model-based inverse probability weights for a panel.
pub fn ipw_panel(data: &PanelDataset, spec: &IpwSpec) -> Result<WeightVector> {
    let (den, num) = fitted_densities(data, spec)?;
    let w = product_weights(data, &den, &num)?;
    Ok(WeightVector::new(w, method_label(spec.stabilized, "ipw")))
}

fn product_weights(
    data: &PanelDataset,
    den: &DMatrix<f64>,
    num: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let q = data.base_weights();
    let ids = data.unit_ids();
    let mut w = q.clone();
    for i in 0..data.n() {
        for t in 0..data.periods() {
            let d = guard(den[(i, t)], &ids[i], t + 1)?;
            let nu = guard(num[(i, t)], &ids[i], t + 1)?;
            w[i] *= nu / d;
        }
    }
    Ok(w)
}

/// Known treatment probability or density of unit `i`'s observed treatment
/// at 0-based period `t`.
pub trait DensityAccessor {
    fn density(&self, unit: usize, period: usize) -> Option<f64>;
}

/// n × T table; non-finite entries are missing.
impl DensityAccessor for DMatrix<f64> {
    fn density(&self, unit: usize, period: usize) -> Option<f64> {
        self.get((unit, period)).copied().filter(|v| v.is_finite())
    }
}

/// Adapts a closure `(unit, period) -> Option<density>`.
pub struct FnDensity<F>(pub F);

impl<F: Fn(usize, usize) -> Option<f64>> DensityAccessor for FnDensity<F> {
    fn density(&self, unit: usize, period: usize) -> Option<f64> {
        (self.0)(unit, period)
    }
}

/// Inverse probability weights from known densities. `numerator` is
/// required when `stabilized`.
pub fn true_weights(
    data: &PanelDataset,
    truth: &dyn DensityAccessor,
    stabilized: bool,
    numerator: Option<&dyn DensityAccessor>,
) -> Result<WeightVector> {
    let (n, periods) = (data.n(), data.periods());
    let numerator = match (stabilized, numerator) {
        (true, Some(a)) => Some(a),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "stabilized true weights need a numerator".into(),
            ))
        }
        (false, _) => None,
    };
    let ids = data.unit_ids();
    let lookup = |acc: &dyn DensityAccessor, i: usize, t: usize| {
        acc.density(i, t).ok_or_else(|| Error::MissingTruth {
            unit: ids[i].clone(),
            period: t + 1,
        })
    };
    let mut den = DMatrix::zeros(n, periods);
    let mut num = DMatrix::from_element(n, periods, 1.0);
    for i in 0..n {
        for t in 0..periods {
            den[(i, t)] = lookup(truth, i, t)?;
            if let Some(acc) = numerator {
                num[(i, t)] = lookup(acc, i, t)?;
            }
        }
    }
    let w = product_weights(data, &den, &num)?;
    Ok(WeightVector::new(w, method_label(stabilized, "ipw-truth")))
}

/// Percentile by linear interpolation between order statistics at 0-based
/// position `(n − 1) p / 100`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// The `lower` and `upper` percentiles of `w`.
pub fn censoring_bounds(w: &DVector<f64>, lower: f64, upper: f64) -> (f64, f64) {
    let mut sorted: Vec<f64> = w.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    (percentile(&sorted, lower), percentile(&sorted, upper))
}

/// Clamps weights to the `[lower, upper]` percentile range.
pub fn censor_weights(weights: &WeightVector, lower: f64, upper: f64) -> Result<WeightVector> {
    if !(0.0 <= lower && lower < upper && upper <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "censoring percentiles must satisfy 0 <= lower < upper <= 100, got ({lower}, {upper})"
        )));
    }
    let w = &weights.weights;
    if w.is_empty() {
        return Ok(weights.clone());
    }
    let (lo, hi) = censoring_bounds(w, lower, upper);
    let censored = w.map(|v| v.clamp(lo, hi));
    Ok(WeightVector::new(
        censored,
        format!("{} censored at ({lower}, {upper})", weights.method),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediationWeight {
    /// `[f(D)/f(D|C)] · [f(M|D)/f(M|C,D,Z)]`.
    SwStar,
    /// `f(M|C,D)/f(M|C,D,Z)`; the MSM must then adjust for C.
    SwDagger,
}

/// Inverse probability weights for the controlled direct effect.
pub fn ipw_mediation(data: &MediationDataset, variant: MediationWeight) -> Result<WeightVector> {
    let n = data.n();
    let q = data.base_weights();
    let d = data.treatment();
    let m = data.mediator();
    let d_family = treatment_family(data.treatment_kind());
    let m_family = treatment_family(data.mediator_kind());

    let mut with_c = DesignMatrix::intercept(n);
    for (j, name) in data.pre_names().iter().enumerate() {
        with_c.push(name.clone(), &data.pre().column(j).into_owned());
    }
    let mut with_cd = with_c.clone();
    with_cd.push(data.treatment_name(), d);
    let mut with_cdz = with_cd.clone();
    for (k, name) in data.post_names().iter().enumerate() {
        with_cdz.push(name.clone(), &data.post().column(k).into_owned());
    }
    let mut d_only = DesignMatrix::intercept(n);
    d_only.push(data.treatment_name(), d);

    let mediator_den = observed_density(&with_cdz, m, m_family, q)?;
    let (ratios, label) = match variant {
        MediationWeight::SwStar => {
            let d_num = observed_density(&DesignMatrix::intercept(n), d, d_family, q)?;
            let d_den = observed_density(&with_c, d, d_family, q)?;
            let m_num = observed_density(&d_only, m, m_family, q)?;
            (vec![(d_num, d_den, 1), (m_num, mediator_den, 2)], "sw_star")
        }
        MediationWeight::SwDagger => {
            let m_num = observed_density(&with_cd, m, m_family, q)?;
            (
                vec![(m_num, mediator_den, 2)],
                "sw_dagger (pre-treatment covariates must enter the MSM)",
            )
        }
    };
    let ids = data.unit_ids();
    let mut w = q.clone();
    for (num, den, period) in &ratios {
        for i in 0..n {
            w[i] *= guard(num[i], &ids[i], *period)? / guard(den[i], &ids[i], *period)?;
        }
    }
    Ok(WeightVector::new(w, label))
}
