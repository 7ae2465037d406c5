//! Marginal structural models fitted by weighted least squares with a
//! heteroskedasticity-robust sandwich covariance.

use nalgebra::{DMatrix, DVector};

use crate::data::{MediationDataset, PanelDataset};
use crate::design::DesignMatrix;
use crate::ebal::WeightSolution;
use crate::error::{Error, Result};
use crate::formula::{ColumnCatalog, Factor, ParsedFormula, Term};
use crate::ipw::{WeightSummary, WeightVector};
use crate::linalg::{symmetrize, WeightedQr};

/// A dataset whose columns an MSM formula can reference.
pub trait ColumnSource {
    fn n(&self) -> usize;
    fn catalog(&self) -> ColumnCatalog;
    fn column(&self, name: &str) -> Option<DVector<f64>>;
}

impl ColumnSource for PanelDataset {
    fn n(&self) -> usize {
        PanelDataset::n(self)
    }

    fn catalog(&self) -> ColumnCatalog {
        let treatments: Vec<String> = (0..self.periods()).map(|t| self.treatment_label(t)).collect();
        let mut columns = vec![self.outcome_name().to_string()];
        columns.extend(self.baseline_names().iter().cloned());
        columns.extend(treatments.iter().cloned());
        for t in 0..self.periods() {
            for j in 0..self.n_confounders() {
                columns.push(self.confounder_label(j, t));
            }
        }
        ColumnCatalog {
            columns,
            families: vec![(self.treatment_name().to_string(), treatments)],
        }
    }

    fn column(&self, name: &str) -> Option<DVector<f64>> {
        self.column_by_name(name)
    }
}

impl ColumnSource for MediationDataset {
    fn n(&self) -> usize {
        MediationDataset::n(self)
    }

    fn catalog(&self) -> ColumnCatalog {
        let mut columns = vec![
            self.outcome_name().to_string(),
            self.treatment_name().to_string(),
            self.mediator_name().to_string(),
        ];
        columns.extend(self.pre_names().iter().cloned());
        columns.extend(self.post_names().iter().cloned());
        ColumnCatalog {
            columns,
            families: Vec::new(),
        }
    }

    fn column(&self, name: &str) -> Option<DVector<f64>> {
        self.column_by_name(name)
    }
}

/// Anything carrying a per-unit weight vector.
pub trait AsWeights {
    fn weight_vector(&self) -> &DVector<f64>;
}

impl AsWeights for DVector<f64> {
    fn weight_vector(&self) -> &DVector<f64> {
        self
    }
}

impl AsWeights for WeightVector {
    fn weight_vector(&self) -> &DVector<f64> {
        &self.weights
    }
}

impl AsWeights for WeightSolution {
    fn weight_vector(&self) -> &DVector<f64> {
        &self.weights
    }
}

fn factor_values(src: &dyn ColumnSource, catalog: &ColumnCatalog, f: &Factor) -> Result<DVector<f64>> {
    let missing = |name: &str| Error::UnknownColumn {
        name: name.to_string(),
        offset: 0,
    };
    match f {
        Factor::Column(c) => src.column(c).ok_or_else(|| missing(c)),
        Factor::Cum(p) | Factor::Ave(p) => {
            let cols = catalog.family(p).ok_or_else(|| missing(p))?;
            let mut sum = DVector::zeros(src.n());
            for c in cols {
                sum += src.column(c).ok_or_else(|| missing(c))?;
            }
            if matches!(f, Factor::Ave(_)) {
                sum /= cols.len() as f64;
            }
            Ok(sum)
        }
    }
}

/// Design matrix (intercept first, then terms in order) and response.
pub fn design_from_formula(
    src: &dyn ColumnSource,
    formula: &ParsedFormula,
) -> Result<(DesignMatrix, DVector<f64>)> {
    let catalog = src.catalog();
    let y = factor_values(src, &catalog, &Factor::Column(formula.response.clone()))?;
    let mut design = DesignMatrix::intercept(src.n());
    for t in &formula.terms {
        let v = match &t.term {
            Term::Single(a) => factor_values(src, &catalog, a)?,
            Term::Product(a, b) => {
                factor_values(src, &catalog, a)?.component_mul(&factor_values(src, &catalog, b)?)
            }
        };
        design.push(t.term.to_string(), &v);
    }
    Ok((design, y))
}

#[derive(Debug, Clone)]
pub struct MsmFit {
    /// Coefficient names, intercept first.
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub sandwich_cov: DMatrix<f64>,
    pub n: usize,
    pub formula: ParsedFormula,
    pub weight_summary: WeightSummary,
    pub residuals: DVector<f64>,
}

impl MsmFit {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.sandwich_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Weighted least squares of the formula's response on its terms.
pub fn fit_msm<W: AsWeights + ?Sized>(
    src: &dyn ColumnSource,
    formula: &ParsedFormula,
    weights: &W,
) -> Result<MsmFit> {
    let w = weights.weight_vector();
    let n = src.n();
    if w.len() != n {
        return Err(Error::Dimension(format!("{} weights for {n} units", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument(
            "MSM weights must be finite, non-negative and not all zero".into(),
        ));
    }
    let (design, y) = design_from_formula(src, formula)?;
    let x = &design.values;
    let qr = WeightedQr::new(x, w)?;
    let coefficients = qr.solve(&y);
    let residuals = &y - x * &coefficients;

    let bread = qr.xtwx_inverse();
    let p = x.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let s = w[i] * residuals[i];
        let xi = x.row(i).transpose();
        meat.ger(s * s, &xi, &xi, 1.0);
    }
    let mut sandwich_cov = &bread * meat * &bread;
    symmetrize(&mut sandwich_cov);

    Ok(MsmFit {
        names: design.names,
        coefficients,
        sandwich_cov,
        n,
        formula: formula.clone(),
        weight_summary: WeightSummary::of(w),
        residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effect {
    pub estimate: f64,
    pub se: f64,
}

/// `c'β` with delta-method standard error `sqrt(c' V c)`.
pub fn effect_summary(fit: &MsmFit, contrast: &DVector<f64>) -> Result<Effect> {
    if contrast.len() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "contrast has {} entries for {} coefficients",
            contrast.len(),
            fit.coefficients.len()
        )));
    }
    let estimate = contrast.dot(&fit.coefficients);
    let var = (contrast.transpose() * &fit.sandwich_cov * contrast)[(0, 0)];
    Ok(Effect {
        estimate,
        se: var.max(0.0).sqrt(),
    })
}

/// Controlled direct effect `α₁ + α₃ m` of `treatment` with the mediator held
/// at `m`. The formula must contain the treatment term and the
/// treatment-by-mediator product.
pub fn cde(fit: &MsmFit, treatment: &str, mediator: &str, m: f64) -> Result<Effect> {
    let d = Factor::Column(treatment.to_string());
    let med = Factor::Column(mediator.to_string());
    let main = Term::Single(d.clone());
    let inter = Term::Product(d, med);
    // Design columns are 1 + position in the term list.
    let find = |want: &Term| {
        fit.formula
            .terms
            .iter()
            .position(|t| t.term.same_as(want))
            .map(|k| k + 1)
    };
    let (Some(a1), Some(a3)) = (find(&main), find(&inter)) else {
        return Err(Error::InvalidArgument(format!(
            "formula needs terms {treatment} and {treatment}*{mediator} for a controlled direct effect"
        )));
    };
    let mut c = DVector::zeros(fit.coefficients.len());
    c[a1] = 1.0;
    c[a3] = m;
    let se = effect_summary(fit, &c)?.se;
    Ok(Effect {
        estimate: fit.coefficients[a1] + fit.coefficients[a3] * m,
        se,
    })
}
