//! Regressor references over panel histories and the design matrices built
//! from them.

use nalgebra::{DMatrix, DVector};

use crate::data::PanelDataset;

pub const INTERCEPT: &str = "(Intercept)";

/// A column derived from a panel dataset. Periods are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Treatment(usize),
    Confounder { period: usize, index: usize },
    Baseline(usize),
    Product(Box<Regressor>, Box<Regressor>),
    Power(Box<Regressor>, u32),
}

impl Regressor {
    pub fn product(a: Regressor, b: Regressor) -> Self {
        Regressor::Product(Box::new(a), Box::new(b))
    }

    pub fn power(a: Regressor, k: u32) -> Self {
        Regressor::Power(Box::new(a), k)
    }

    /// Latest treatment period referenced, if any.
    pub fn max_treatment_period(&self) -> Option<usize> {
        match self {
            Regressor::Treatment(t) => Some(*t),
            Regressor::Confounder { .. } | Regressor::Baseline(_) => None,
            Regressor::Product(a, b) => a.max_treatment_period().max(b.max_treatment_period()),
            Regressor::Power(a, _) => a.max_treatment_period(),
        }
    }

    /// Latest confounder period referenced, if any.
    pub fn max_confounder_period(&self) -> Option<usize> {
        match self {
            Regressor::Confounder { period, .. } => Some(*period),
            Regressor::Treatment(_) | Regressor::Baseline(_) => None,
            Regressor::Product(a, b) => {
                a.max_confounder_period().max(b.max_confounder_period())
            }
            Regressor::Power(a, _) => a.max_confounder_period(),
        }
    }

    /// True when every reference exists in `data`.
    pub fn resolves(&self, data: &PanelDataset) -> bool {
        match self {
            Regressor::Treatment(t) => *t < data.periods(),
            Regressor::Confounder { period, index } => {
                *period < data.periods() && *index < data.n_confounders()
            }
            Regressor::Baseline(j) => *j < data.n_baseline(),
            Regressor::Product(a, b) => a.resolves(data) && b.resolves(data),
            Regressor::Power(a, _) => a.resolves(data),
        }
    }

    pub fn label(&self, data: &PanelDataset) -> String {
        match self {
            Regressor::Treatment(t) => data.treatment_label(*t),
            Regressor::Confounder { period, index } => data.confounder_label(*index, *period),
            Regressor::Baseline(j) => data.baseline_names()[*j].clone(),
            Regressor::Product(a, b) => format!("{}*{}", a.label(data), b.label(data)),
            Regressor::Power(a, k) => format!("{}^{}", a.label(data), k),
        }
    }

    pub fn evaluate(&self, data: &PanelDataset) -> DVector<f64> {
        match self {
            Regressor::Treatment(t) => data.treatment(*t),
            Regressor::Confounder { period, index } => {
                data.confounders(*period).column(*index).into_owned()
            }
            Regressor::Baseline(j) => data.baseline().column(*j).into_owned(),
            Regressor::Product(a, b) => a.evaluate(data).component_mul(&b.evaluate(data)),
            Regressor::Power(a, k) => a.evaluate(data).map(|v| v.powi(*k as i32)),
        }
    }
}

/// Named columns of a design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Self {
        assert_eq!(names.len(), values.ncols(), "one name per design column");
        Self { names, values }
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept(n: usize) -> Self {
        Self {
            names: vec![INTERCEPT.to_string()],
            values: DMatrix::from_element(n, 1, 1.0),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, column: &DVector<f64>) {
        let k = self.values.ncols();
        let values = std::mem::replace(&mut self.values, DMatrix::zeros(0, 0));
        let mut values = values.insert_column(k, 0.0);
        values.set_column(k, column);
        self.values = values;
        self.names.push(name.into());
    }

    /// Intercept followed by `regressors` in order.
    pub fn from_regressors(data: &PanelDataset, regressors: &[Regressor]) -> Self {
        let n = data.n();
        let mut names = vec![INTERCEPT.to_string()];
        let mut values = DMatrix::from_element(n, regressors.len() + 1, 1.0);
        for (k, r) in regressors.iter().enumerate() {
            names.push(r.label(data));
            values.set_column(k + 1, &r.evaluate(data));
        }
        Self { names, values }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}
