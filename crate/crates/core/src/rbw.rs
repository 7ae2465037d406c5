//! Residual balancing weights.
//!
//! Each balanced confounder function `g_j(X_t)` is regressed on its
//! pre-period regressors `r(X̄_{t−1}, D̄_{t−1})`. Its response residual is
//! then constrained to be orthogonal, in the weighted sample, to a set of
//! h-functions: a constant, the current and future treatments up to the
//! horizon, and optionally the model's own regressors. The weights are the
//! minimum relative-entropy perturbation of the base weights satisfying all
//! of those constraints.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::{MediationDataset, PanelDataset};
use crate::design::{DesignMatrix, Regressor};
use crate::ebal::{
    solve_entropy_balance, ColumnLabel, ConstraintMatrix, EntropyOptions, WeightSolution,
};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, Family, GlmFit};

/// A balanced function of the period-t confounders.
#[derive(Debug, Clone, PartialEq)]
pub enum GFunction {
    /// `X_jt`.
    Confounder(usize),
    /// `X_jt · X_kt`.
    Product(usize, usize),
    /// `X_jt^k`.
    Power(usize, u32),
}

impl GFunction {
    pub fn evaluate(&self, data: &PanelDataset, t: usize) -> DVector<f64> {
        let x = data.confounders(t);
        match *self {
            GFunction::Confounder(j) => x.column(j).into_owned(),
            GFunction::Product(j, k) => x.column(j).component_mul(&x.column(k)),
            GFunction::Power(j, k) => x.column(j).map(|v| v.powi(k as i32)),
        }
    }

    pub fn label(&self, data: &PanelDataset, t: usize) -> String {
        match *self {
            GFunction::Confounder(j) => data.confounder_label(j, t),
            GFunction::Product(j, k) => format!(
                "{}*{}",
                data.confounder_label(j, t),
                data.confounder_label(k, t)
            ),
            GFunction::Power(j, k) => format!("{}^{}", data.confounder_label(j, t), k),
        }
    }

    fn resolves(&self, j_max: usize) -> bool {
        match *self {
            GFunction::Confounder(j) | GFunction::Power(j, _) => j < j_max,
            GFunction::Product(j, k) => j < j_max && k < j_max,
        }
    }
}

/// Model for one balanced function at one (0-based) period.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderModel {
    pub period: usize,
    pub g: GFunction,
    pub family: Family,
    /// Regressors besides the intercept.
    pub regressors: Vec<Regressor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfounderModelSpec {
    pub models: Vec<ConfounderModel>,
}

fn default_family(data: &PanelDataset, t: usize, g: &GFunction) -> Family {
    Family::for_values(&g.evaluate(data, t))
}

impl ConfounderModelSpec {
    pub fn new(models: Vec<ConfounderModel>) -> Self {
        Self { models }
    }

    /// `g_j(X_t) = X_jt` regressed on every confounder and the treatment of
    /// the previous period. Period 1 is intercept-only.
    pub fn lag_one(data: &PanelDataset) -> Self {
        Self::build(data, |t| {
            let mut regs = Vec::new();
            if t > 0 {
                for j in 0..data.n_confounders() {
                    regs.push(Regressor::Confounder {
                        period: t - 1,
                        index: j,
                    });
                }
                regs.push(Regressor::Treatment(t - 1));
            }
            regs
        })
    }

    /// `g_j(X_t) = X_jt` regressed on the previous treatment only.
    pub fn prior_treatment_only(data: &PanelDataset) -> Self {
        Self::build(data, |t| {
            if t > 0 {
                vec![Regressor::Treatment(t - 1)]
            } else {
                Vec::new()
            }
        })
    }

    fn build(data: &PanelDataset, regressors: impl Fn(usize) -> Vec<Regressor>) -> Self {
        let mut models = Vec::new();
        for t in 0..data.periods() {
            let regs = regressors(t);
            for j in 0..data.n_confounders() {
                let g = GFunction::Confounder(j);
                models.push(ConfounderModel {
                    period: t,
                    family: default_family(data, t, &g),
                    g,
                    regressors: regs.clone(),
                });
            }
        }
        Self { models }
    }

    /// Same family for every model.
    pub fn with_family(mut self, family: Family) -> Self {
        for m in &mut self.models {
            m.family = family;
        }
        self
    }

    /// Appends `g` at every period, reusing the regressors of the first model
    /// already specified for that period.
    pub fn with_g_function(mut self, data: &PanelDataset, g: GFunction) -> Self {
        for t in 0..data.periods() {
            let regressors = self
                .models
                .iter()
                .find(|m| m.period == t)
                .map(|m| m.regressors.clone())
                .unwrap_or_default();
            self.models.push(ConfounderModel {
                period: t,
                family: default_family(data, t, &g),
                g: g.clone(),
                regressors,
            });
        }
        self
    }

    /// Every reference exists and precedes the model's period.
    pub fn check(&self, data: &PanelDataset) -> Result<()> {
        for m in &self.models {
            if m.period >= data.periods() {
                return Err(Error::InvalidArgument(format!(
                    "confounder model at period {} but the panel has {} periods",
                    m.period + 1,
                    data.periods()
                )));
            }
            if !m.g.resolves(data.n_confounders()) {
                return Err(Error::InvalidArgument(format!(
                    "g function {:?} references a missing confounder",
                    m.g
                )));
            }
            for r in &m.regressors {
                let late = r.max_treatment_period().is_some_and(|p| p >= m.period)
                    || r.max_confounder_period().is_some_and(|p| p >= m.period);
                if !r.resolves(data) || late {
                    return Err(Error::InvalidArgument(format!(
                        "regressor {r:?} for {} is not available before period {}",
                        m.g.label(data, m.period),
                        m.period + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which h-functions each residual is balanced against.
#[derive(Debug, Clone, PartialEq)]
pub struct HFunctionSpec {
    /// Per 0-based period t, the last 0-based treatment period included.
    /// `None` means all remaining periods.
    pub horizons: Option<Vec<usize>>,
    /// Also balance against the model's non-intercept regressors.
    pub include_regressors: bool,
}

impl Default for HFunctionSpec {
    fn default() -> Self {
        Self {
            horizons: None,
            include_regressors: true,
        }
    }
}

impl HFunctionSpec {
    /// Only `D_t … D_{t+k}` (capped at the final period).
    pub fn with_lead(periods: usize, k: usize) -> Self {
        Self {
            horizons: Some((0..periods).map(|t| (t + k).min(periods - 1)).collect()),
            include_regressors: true,
        }
    }

    pub fn horizon(&self, t: usize, periods: usize) -> Result<usize> {
        let h = match &self.horizons {
            None => periods - 1,
            Some(v) => *v.get(t).ok_or_else(|| {
                Error::InvalidArgument(format!("no horizon given for period {}", t + 1))
            })?,
        };
        if h < t || h >= periods {
            return Err(Error::InvalidArgument(format!(
                "horizon {} for period {} must lie in [{}, {}]",
                h + 1,
                t + 1,
                t + 1,
                periods
            )));
        }
        Ok(h)
    }
}

/// A fitted confounder model and the quantity it explains.
#[derive(Debug, Clone)]
pub struct ConfounderFit {
    /// 1-based period.
    pub period: usize,
    pub variable: String,
    pub fit: GlmFit,
}

impl fmt::Display for ConfounderFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}:{} ({})", self.period, self.variable, self.fit.family)
    }
}

fn is_constant(v: &DVector<f64>) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Residuals of `y` from a GLM on `design`, with the failure labelled.
fn residualize(
    design: &DesignMatrix,
    y: &DVector<f64>,
    family: Family,
    q: &DVector<f64>,
    period: usize,
    variable: &str,
) -> Result<GlmFit> {
    let family = if is_constant(y) {
        warn!("{variable} at period {period} is constant; its residuals are zero");
        Family::Gaussian
    } else {
        family
    };
    fit_glm(design, y, family, q).map_err(|e| Error::ConfounderModel {
        period,
        variable: variable.to_string(),
        source: Box::new(e),
    })
}

struct ColumnBuilder {
    n: usize,
    values: Vec<f64>,
    labels: Vec<ColumnLabel>,
}

impl ColumnBuilder {
    fn new(n: usize) -> Self {
        Self {
            n,
            values: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn push(&mut self, period: usize, variable: &str, h: &str, column: DVector<f64>) {
        debug_assert_eq!(column.len(), self.n);
        self.values.extend(column.iter());
        self.labels.push(ColumnLabel {
            period,
            variable: variable.to_string(),
            h: h.to_string(),
        });
    }

    fn finish(self) -> Result<ConstraintMatrix> {
        let m = self.labels.len();
        ConstraintMatrix::new(DMatrix::from_vec(self.n, m, self.values), self.labels)
    }
}

/// Residual-by-h constraint columns for every model in `spec`.
pub fn build_residual_constraints(
    data: &PanelDataset,
    spec: &ConfounderModelSpec,
    hspec: &HFunctionSpec,
) -> Result<(ConstraintMatrix, Vec<ConfounderFit>)> {
    spec.check(data)?;
    let periods = data.periods();
    let q = data.base_weights();
    let mut cols = ColumnBuilder::new(data.n());
    let mut fits = Vec::with_capacity(spec.models.len());
    for m in &spec.models {
        let t = m.period;
        let variable = m.g.label(data, t);
        let design = DesignMatrix::from_regressors(data, &m.regressors);
        let y = m.g.evaluate(data, t);
        let fit = residualize(&design, &y, m.family, q, t + 1, &variable)?;
        let delta = fit.residuals.clone();

        cols.push(t + 1, &variable, "1", delta.clone());
        for s in t..=hspec.horizon(t, periods)? {
            cols.push(
                t + 1,
                &variable,
                &data.treatment_label(s),
                delta.component_mul(&data.treatment(s)),
            );
        }
        if hspec.include_regressors {
            for (k, name) in design.names.iter().enumerate().skip(1) {
                cols.push(
                    t + 1,
                    &variable,
                    name,
                    delta.component_mul(&design.values.column(k)),
                );
            }
        }
        fits.push(ConfounderFit {
            period: t + 1,
            variable,
            fit,
        });
    }
    Ok((cols.finish()?, fits))
}

/// Residual balancing weights for a longitudinal panel.
pub fn rbw_panel(
    data: &PanelDataset,
    spec: &ConfounderModelSpec,
    hspec: &HFunctionSpec,
    opts: &EntropyOptions,
) -> Result<WeightSolution> {
    let (constraints, _) = build_residual_constraints(data, spec, hspec)?;
    if constraints.n_constraints() == 0 {
        return Err(Error::EmptyConstraints);
    }
    solve_entropy_balance(&constraints, data.base_weights(), opts)
}

/// Result of refitting one Gaussian confounder model on the weighted sample
/// with the horizon's treatments appended.
#[derive(Debug, Clone)]
pub struct RefitDiagnostic {
    pub period: usize,
    pub variable: String,
    /// Largest |coefficient| on an appended treatment.
    pub max_future_coefficient: f64,
    /// Largest change in an original coefficient relative to the base fit.
    pub max_coefficient_shift: f64,
}

/// Refits every Gaussian model in `spec` with case weights `weights` and
/// `D_t … D_{t′}` added as regressors. Non-Gaussian models are skipped.
pub fn refit_diagnostics(
    data: &PanelDataset,
    spec: &ConfounderModelSpec,
    hspec: &HFunctionSpec,
    weights: &DVector<f64>,
) -> Result<Vec<RefitDiagnostic>> {
    spec.check(data)?;
    let q = data.base_weights();
    let mut out = Vec::new();
    for m in spec.models.iter().filter(|m| m.family == Family::Gaussian) {
        let t = m.period;
        let variable = m.g.label(data, t);
        let y = m.g.evaluate(data, t);
        let base_design = DesignMatrix::from_regressors(data, &m.regressors);
        let base = residualize(&base_design, &y, m.family, q, t + 1, &variable)?;
        let mut design = base_design.clone();
        for s in t..=hspec.horizon(t, data.periods())? {
            design.push(data.treatment_label(s), &data.treatment(s));
        }
        let refit = residualize(&design, &y, m.family, weights, t + 1, &variable)?;
        let p = base.coefficients.len();
        let max_future_coefficient = refit.coefficients.rows(p, design.ncols() - p).amax();
        let max_coefficient_shift = (refit.coefficients.rows(0, p) - &base.coefficients).amax();
        out.push(RefitDiagnostic {
            period: t + 1,
            variable,
            max_future_coefficient,
            max_coefficient_shift,
        });
    }
    Ok(out)
}

/// Balancing conditions `(n_c, n_c_cbps)` for `j` confounders over
/// `periods` periods. `regressors[t]` counts the model's regressors
/// including the intercept; `horizon[t]` is the 1-based last treatment
/// period balanced at 1-based period `t + 1` (all remaining by default).
pub fn constraint_counts(
    j: usize,
    periods: usize,
    regressors: &[usize],
    horizon: Option<&[usize]>,
) -> Result<(usize, usize)> {
    if j == 0 || periods == 0 {
        return Err(Error::InvalidArgument(
            "need at least one confounder and one period".into(),
        ));
    }
    if regressors.len() != periods || horizon.is_some_and(|h| h.len() != periods) {
        return Err(Error::Dimension(format!(
            "expected {periods} per-period entries"
        )));
    }
    let mut per_unit = 0;
    for t in 1..=periods {
        let last = horizon.map_or(periods, |h| h[t - 1]);
        if last < t || last > periods {
            return Err(Error::InvalidArgument(format!(
                "horizon {last} for period {t} outside [{t}, {periods}]"
            )));
        }
        per_unit += last - t + 1 + regressors[t - 1];
    }
    let cbps = j * ((periods - 1) * (1usize << periods) + 1);
    Ok((j * per_unit, cbps))
}

/// Residual balancing for a single treatment and mediator.
#[derive(Debug, Clone, PartialEq)]
pub struct MediationSpec {
    /// Family per post-treatment confounder; defaults by level of
    /// measurement.
    pub post_families: Option<Vec<Family>>,
    /// Balance centred pre-treatment confounders against D and M. When
    /// false the MSM must adjust for them instead.
    pub include_pretreatment: bool,
}

impl Default for MediationSpec {
    fn default() -> Self {
        Self {
            post_families: None,
            include_pretreatment: true,
        }
    }
}

/// Residual-by-h constraint columns for the mediation setting.
pub fn build_mediation_constraints(
    data: &MediationDataset,
    spec: &MediationSpec,
) -> Result<(ConstraintMatrix, Vec<ConfounderFit>)> {
    let n = data.n();
    let q = data.base_weights();
    let d = data.treatment();
    let m = data.mediator();
    if is_constant(d) {
        return Err(Error::Degenerate(format!(
            "treatment {} has no variation",
            data.treatment_name()
        )));
    }
    if is_constant(m) {
        return Err(Error::Degenerate(format!(
            "mediator {} has no variation",
            data.mediator_name()
        )));
    }
    let c = data.pre();
    let z = data.post();
    if let Some(f) = &spec.post_families {
        if f.len() != z.ncols() {
            return Err(Error::Dimension(format!(
                "{} families for {} post-treatment confounders",
                f.len(),
                z.ncols()
            )));
        }
    }
    if z.ncols() == 0 && !(spec.include_pretreatment && c.ncols() > 0) {
        return Err(Error::EmptyConstraints);
    }

    let d_name = data.treatment_name();
    let m_name = data.mediator_name();
    let mut cols = ColumnBuilder::new(n);
    let mut fits = Vec::new();

    if spec.include_pretreatment {
        let intercept = DesignMatrix::intercept(n);
        for (j, name) in data.pre_names().iter().enumerate() {
            let y = c.column(j).into_owned();
            let fit = residualize(&intercept, &y, Family::Gaussian, q, 1, name)?;
            let delta = &fit.residuals;
            cols.push(1, name, "1", delta.clone());
            cols.push(1, name, d_name, delta.component_mul(d));
            cols.push(1, name, m_name, delta.component_mul(m));
            fits.push(ConfounderFit {
                period: 1,
                variable: name.clone(),
                fit,
            });
        }
    }

    let mut design = DesignMatrix::intercept(n);
    for (j, name) in data.pre_names().iter().enumerate() {
        design.push(name.clone(), &c.column(j).into_owned());
    }
    design.push(d_name, d);
    for (k, name) in data.post_names().iter().enumerate() {
        let y = z.column(k).into_owned();
        let family = spec
            .post_families
            .as_ref()
            .map_or_else(|| Family::for_values(&y), |f| f[k]);
        let fit = residualize(&design, &y, family, q, 2, name)?;
        let delta = &fit.residuals;
        cols.push(2, name, "1", delta.clone());
        cols.push(2, name, d_name, delta.component_mul(d));
        cols.push(2, name, m_name, delta.component_mul(m));
        for (j, cname) in data.pre_names().iter().enumerate() {
            cols.push(2, name, cname, delta.component_mul(&c.column(j)));
        }
        fits.push(ConfounderFit {
            period: 2,
            variable: name.clone(),
            fit,
        });
    }
    Ok((cols.finish()?, fits))
}

pub fn rbw_mediation(
    data: &MediationDataset,
    spec: &MediationSpec,
    opts: &EntropyOptions,
) -> Result<WeightSolution> {
    let (constraints, _) = build_mediation_constraints(data, spec)?;
    solve_entropy_balance(&constraints, data.base_weights(), opts)
}
