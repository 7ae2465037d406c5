//! Minimum relative-entropy weights under linear balancing constraints.
//!
//! Minimize `sum_i w_i log(w_i / q_i)` subject to `sum_i w_i c_ir = 0` for
//! every constraint column `r` and `sum_i w_i = n`. The solution has the form
//! `w_i = n q_i exp(lambda' c_i) / sum_j q_j exp(lambda' c_j)`, where `lambda`
//! minimizes the convex dual `log sum_i q_i exp(lambda' c_i)`. Its gradient
//! is the weighted constraint mean and its Hessian the weighted covariance
//! of the constraint columns; we run damped Newton on it.
//!
//! Internally every column is divided by its base-weighted root mean square
//! and columns that are zero or lie in the span of earlier columns are
//! dropped. The returned dual is on the original column scale, with zeros
//! for dropped columns.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual norm below which a standardized column is considered
/// to lie in the span of the preceding columns.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// Columns whose RMS is below this fraction of the largest column RMS are
/// treated as all-zero.
const ZERO_COLUMN_TOL: f64 = 1e-13;

/// Standardized-scale dual norm beyond which the dual is declared divergent.
const DUAL_DIVERGENCE: f64 = 1e3;

/// Identifies constraint column `δ(g_j(x_t)) · h_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnLabel {
    /// 1-based period.
    pub period: usize,
    /// The balanced quantity, e.g. a residualized confounder.
    pub variable: String,
    /// The h-function it is crossed with; `1` for the mean-zero column.
    pub h: String,
}

impl fmt::Display for ColumnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}:{}*{}", self.period, self.variable, self.h)
    }
}

/// n × n_c matrix of balancing columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    values: DMatrix<f64>,
    labels: Vec<ColumnLabel>,
}

impl ConstraintMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<ColumnLabel>) -> Result<Self> {
        if values.ncols() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} constraint columns but {} labels",
                values.ncols(),
                labels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "constraint matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { values, labels })
    }

    /// Unlabelled columns, named `c1`, `c2`, ...
    pub fn from_columns(values: DMatrix<f64>) -> Result<Self> {
        let labels = (0..values.ncols())
            .map(|r| ColumnLabel {
                period: 1,
                variable: format!("c{}", r + 1),
                h: "1".into(),
            })
            .collect();
        Self::new(values, labels)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[ColumnLabel] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct EntropyOptions {
    /// Convergence threshold on `max_r |sum_i w_i c_ir| / n`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting dual on the original column scale (defaults to zero).
    pub initial_dual: Option<DVector<f64>>,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            initial_dual: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    ZeroColumn,
    Collinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    /// Per column `sum_i w_i c_ir / n`.
    pub column_means: Vec<f64>,
    pub max_violation: f64,
    pub worst_column: Option<usize>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct WeightSolution {
    /// Positive weights summing to n.
    pub weights: DVector<f64>,
    /// Lagrange multipliers on the original column scale.
    pub dual: DVector<f64>,
    /// `sum_i w_i log(w_i / q_i)`.
    pub objective: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dropped: Vec<(usize, DropReason)>,
    pub balance: BalanceReport,
}

/// Per-column weighted means and the pass flag `max |.| < tol`.
pub fn check_balance(
    constraints: &ConstraintMatrix,
    weights: &DVector<f64>,
    tol: f64,
) -> BalanceReport {
    assert_eq!(
        constraints.n(),
        weights.len(),
        "weights must match constraint rows"
    );
    let n = constraints.n().max(1) as f64;
    let column_means: Vec<f64> = constraints
        .values
        .column_iter()
        .map(|c| c.dot(weights) / n)
        .collect();
    let (worst_column, max_violation) = column_means
        .iter()
        .enumerate()
        .fold((None, 0.0_f64), |(wi, wv), (r, v)| {
            if v.abs() > wv || wi.is_none() {
                (Some(r), v.abs().max(wv))
            } else {
                (wi, wv)
            }
        });
    BalanceReport {
        column_means,
        max_violation,
        worst_column,
        pass: max_violation < tol,
    }
}

struct DualState {
    value: f64,
    probs: DVector<f64>,
}

fn dual_state(log_q: &DVector<f64>, z: &DMatrix<f64>, lambda: &DVector<f64>) -> DualState {
    let a = log_q + z * lambda;
    let amax = a.max();
    let e = a.map(|v| (v - amax).exp());
    let s = e.sum();
    DualState {
        value: amax + s.ln(),
        probs: e / s,
    }
}

/// Weights `n q_i exp(lambda' c_i) / sum_j q_j exp(lambda' c_j)`.
pub fn weights_from_dual(
    constraints: &ConstraintMatrix,
    base_weights: &DVector<f64>,
    dual: &DVector<f64>,
) -> DVector<f64> {
    let log_q = base_weights.map(f64::ln);
    let st = dual_state(&log_q, &constraints.values, dual);
    st.probs * constraints.n() as f64
}

pub fn solve_entropy_balance(
    constraints: &ConstraintMatrix,
    base_weights: &DVector<f64>,
    opts: &EntropyOptions,
) -> Result<WeightSolution> {
    let c = &constraints.values;
    let (n, m) = c.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("no units to weight".into()));
    }
    if base_weights.len() != n {
        return Err(Error::Dimension(format!(
            "{} base weights for {} units",
            base_weights.len(),
            n
        )));
    }
    if base_weights.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
        return Err(Error::InvalidArgument(
            "base weights must be strictly positive".into(),
        ));
    }
    if let Some(d) = &opts.initial_dual {
        if d.len() != m {
            return Err(Error::Dimension(format!(
                "initial dual has {} entries for {} constraints",
                d.len(),
                m
            )));
        }
    }

    let q_sum = base_weights.sum();
    let log_q = base_weights.map(f64::ln);

    // Standardize and screen columns.
    let scales: Vec<f64> = c
        .column_iter()
        .map(|col| (col.component_mul(&col).dot(base_weights) / q_sum).sqrt())
        .collect();
    let largest = scales.iter().cloned().fold(0.0_f64, f64::max);
    let mut dropped = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for r in 0..m {
        if !(scales[r] > ZERO_COLUMN_TOL * largest) || scales[r] == 0.0 {
            dropped.push((r, DropReason::ZeroColumn));
            continue;
        }
        let z = c.column(r) / scales[r];
        // Gram-Schmidt under the base-weighted inner product.
        let mut resid = z.clone_owned();
        for b in &basis {
            let proj = resid.component_mul(base_weights).dot(b) / q_sum;
            resid -= b * proj;
        }
        let norm = (resid.component_mul(&resid).dot(base_weights) / q_sum).sqrt();
        if norm < COLLINEARITY_TOL {
            dropped.push((r, DropReason::Collinear));
            continue;
        }
        basis.push(resid / norm);
        kept.push(r);
    }
    for (r, why) in &dropped {
        warn!(
            "dropping constraint column {} ({:?})",
            constraints.labels[*r], why
        );
    }

    let k = kept.len();
    let z = DMatrix::from_fn(n, k, |i, j| c[(i, kept[j])] / scales[kept[j]]);
    let mut lambda = match &opts.initial_dual {
        Some(d) => DVector::from_fn(k, |j, _| d[kept[j]] * scales[kept[j]]),
        None => DVector::zeros(k),
    };

    let violation_of = |probs: &DVector<f64>| -> (f64, usize) {
        // sum_i w_i c_ir / n with w = n p
        let g = c.tr_mul(probs);
        g.iter()
            .enumerate()
            .fold((0.0_f64, 0usize), |(v, a), (r, x)| {
                if x.abs() > v {
                    (x.abs(), r)
                } else {
                    (v, a)
                }
            })
    };
    let label_of = |r: usize| {
        constraints
            .labels
            .get(r)
            .map(ToString::to_string)
            .unwrap_or_else(|| "-".into())
    };

    let mut state = dual_state(&log_q, &z, &lambda);
    let mut iterations = 0;
    let converged;
    loop {
        let (viol, worst) = violation_of(&state.probs);
        if viol < opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::MaxIterations {
                iterations,
                column: label_of(worst),
                violation: viol,
            });
        }
        iterations += 1;

        let grad = z.tr_mul(&state.probs);
        let mut zp = z.clone();
        for (i, mut row) in zp.row_iter_mut().enumerate() {
            row *= state.probs[i];
        }
        let hess = z.tr_mul(&zp) - &grad * grad.transpose();
        let newton = hess.cholesky().map(|ch| -ch.solve(&grad));
        let mut dir = match newton {
            Some(d) if d.iter().all(|v| v.is_finite()) && d.dot(&grad) < 0.0 => d,
            _ => -&grad,
        };
        let slope = dir.dot(&grad);
        if !(slope < 0.0) {
            // Zero gradient in the kept directions yet violated: cannot move.
            return Err(Error::Infeasible {
                column: label_of(worst),
                violation: viol,
            });
        }

        // Backtracking (Armijo) line search on the dual objective.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &lambda + &dir * step;
            let st = dual_state(&log_q, &z, &trial);
            let armijo = st.value <= state.value + 1e-4 * step * slope;
            // Within rounding of the objective, progress is judged by the gradient.
            let flat = st.value <= state.value + 1e-14 * state.value.abs().max(1.0)
                && violation_of(&st.probs).0 < viol;
            if st.value.is_finite() && (armijo || flat) {
                accepted = Some((trial, st));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, st)) => {
                lambda = trial;
                state = st;
            }
            None => {
                // Stalled: accept a gradient step only if it still reduces
                // the violation, otherwise give up.
                dir = -&grad;
                let trial = &lambda + &dir * 1e-8;
                let st = dual_state(&log_q, &z, &trial);
                if violation_of(&st.probs).0 < viol {
                    lambda = trial;
                    state = st;
                } else {
                    return Err(Error::Infeasible {
                        column: label_of(worst),
                        violation: viol,
                    });
                }
            }
        }
        if lambda.amax() > DUAL_DIVERGENCE {
            let (viol, worst) = violation_of(&state.probs);
            return Err(Error::Infeasible {
                column: label_of(worst),
                violation: viol,
            });
        }
    }

    let mut dual = DVector::zeros(m);
    for (j, &r) in kept.iter().enumerate() {
        dual[r] = lambda[j] / scales[r];
    }
    let weights = weights_from_dual(constraints, base_weights, &dual);
    let objective = weights
        .iter()
        .zip(base_weights.iter())
        .map(|(w, q)| if *w > 0.0 { w * (w / q).ln() } else { 0.0 })
        .sum();
    let balance = check_balance(constraints, &weights, opts.tol);
    Ok(WeightSolution {
        weights,
        dual,
        objective,
        max_constraint_violation: balance.max_violation,
        iterations,
        converged,
        dropped,
        balance,
    })
}
