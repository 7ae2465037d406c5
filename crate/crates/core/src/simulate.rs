//! Simulation study: a data-generating process with treatment-affected
//! confounders, a g-computation truth oracle, and a Monte Carlo harness
//! comparing weighting estimators of a linear MSM.
//!
//! For unit i and period t = 1..T:
//!
//! ```text
//! U_1 = 1,  U_t = 5/3 + (2/3) D_{t−1}
//! X_t = (U_t ε₁, U_t ε₂, |U_t ε₃|, |U_t ε₄|),  ε ~ N(0, I)
//! η_t = −D_{t−1} + γ'X_t + (−0.5)^t,  γ = α γ_base,  D_0 = 0
//! D_t ~ Bernoulli(logit⁻¹ η_t)  or  N(η_t, σ_d²)
//! Y ~ N(250 − 10 Σ D_t + Σ δ'X_t, σ_y²)
//! ```
//!
//! Random numbers come from ChaCha20 seeded with the configured seed.
//! Replication r of a Monte Carlo run uses stream r; g-computation batch b
//! uses stream `TRUTH_STREAM + b`. Within a stream, units are drawn in
//! order, each drawing its periods in order.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{PanelDataset, PanelParts, VariableKind};
use crate::ebal::{solve_entropy_balance, EntropyOptions};
use crate::error::{Error, Result};
use crate::formula::{parse_formula, ParsedFormula};
use crate::glm::{normal_density, Family};
use crate::ipw::{censor_weights, ipw_panel, percentile, true_weights, IpwSpec};
use crate::linalg::weighted_least_squares;
use crate::msm::{fit_msm, ColumnSource};
use crate::quadrature::{half_normal, standard_normal, Rule};
use crate::rbw::{build_residual_constraints, refit_diagnostics, ConfounderModelSpec, HFunctionSpec};

const OUTCOME_INTERCEPT: f64 = 250.0;
const TREATMENT_EFFECT: f64 = -10.0;

/// First ChaCha stream used by g-computation batches.
pub const TRUTH_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    pub periods: usize,
    pub alpha: f64,
    pub treatment_kind: VariableKind,
    pub misspecified: bool,
    pub seed: u64,
    pub delta: [f64; 4],
    pub gamma_base: [f64; 4],
    pub sigma_y: f64,
    pub sigma_d: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            periods: 3,
            alpha: 0.8,
            treatment_kind: VariableKind::Binary,
            misspecified: false,
            seed: 1,
            delta: [27.4, 13.7, 13.7, 13.7],
            gamma_base: [1.0, -0.5, 0.25, 0.1],
            sigma_y: 5.0,
            sigma_d: 2.0,
        }
    }
}

impl SimulationConfig {
    pub fn check(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument("need at least 2 units".into()));
        }
        if self.periods == 0 {
            return Err(Error::InvalidArgument("need at least 1 period".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_d > 0.0) {
            return Err(Error::InvalidArgument(
                "noise standard deviations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn gamma(&self) -> [f64; 4] {
        self.gamma_base.map(|g| self.alpha * g)
    }

    fn u(&self, t: usize, d_prev: f64) -> f64 {
        if t == 0 {
            1.0
        } else {
            5.0 / 3.0 + 2.0 / 3.0 * d_prev
        }
    }

    /// Period shift `(−0.5)^t` for 0-based `t`.
    fn shift(t: usize) -> f64 {
        (-0.5_f64).powi(t as i32 + 1)
    }

    fn linear_predictor(&self, t: usize, d_prev: f64, x: &[f64; 4]) -> f64 {
        let g = self.gamma();
        -d_prev + (0..4).map(|j| g[j] * x[j]).sum::<f64>() + Self::shift(t)
    }

    /// Treatment formula `Y ~ D1 + … + DT`.
    pub fn msm_formula(&self) -> String {
        let terms: Vec<String> = (1..=self.periods).map(|t| format!("D{t}")).collect();
        format!("Y ~ {}", terms.join(" + "))
    }
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn draw_confounders(rng: &mut ChaCha20Rng, u: f64) -> [f64; 4] {
    let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    [u * e[0], u * e[1], (u * e[2]).abs(), (u * e[3]).abs()]
}

fn outcome_mean(cfg: &SimulationConfig, d: &[f64], x: &[[f64; 4]]) -> f64 {
    let mut y = OUTCOME_INTERCEPT + TREATMENT_EFFECT * d.iter().sum::<f64>();
    for xt in x {
        y += (0..4).map(|j| cfg.delta[j] * xt[j]).sum::<f64>();
    }
    y
}

struct UnitDraw {
    x: Vec<[f64; 4]>,
    d: Vec<f64>,
    y: f64,
    /// DGP probability or density of each observed treatment.
    density: Vec<f64>,
}

fn draw_unit(cfg: &SimulationConfig, rng: &mut ChaCha20Rng) -> UnitDraw {
    let periods = cfg.periods;
    let mut x = Vec::with_capacity(periods);
    let mut d = Vec::with_capacity(periods);
    let mut density = Vec::with_capacity(periods);
    let mut d_prev = 0.0;
    for t in 0..periods {
        let xt = draw_confounders(rng, cfg.u(t, d_prev));
        let eta = cfg.linear_predictor(t, d_prev, &xt);
        let (dt, f) = match cfg.treatment_kind {
            VariableKind::Binary => {
                let p = expit(eta);
                if rng.random::<f64>() < p {
                    (1.0, p)
                } else {
                    (0.0, 1.0 - p)
                }
            }
            VariableKind::Continuous => {
                let z: f64 = rng.sample(StandardNormal);
                (eta + cfg.sigma_d * z, normal_density(z, 0.0, 1.0) / cfg.sigma_d)
            }
        };
        x.push(xt);
        d.push(dt);
        density.push(f);
        d_prev = dt;
    }
    let e: f64 = rng.sample(StandardNormal);
    let y = outcome_mean(cfg, &d, &x) + cfg.sigma_y * e;
    UnitDraw { x, d, y, density }
}

/// A simulated panel with the DGP quantities hidden from the analyst.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub data: PanelDataset,
    /// The confounders actually generated, per period n × 4.
    pub true_confounders: Vec<DMatrix<f64>>,
    /// n × T DGP probability (binary) or density (continuous) of each
    /// observed treatment given its true history.
    pub true_denominator: DMatrix<f64>,
    pub misspecified: bool,
}

pub fn generate_sample(config: &SimulationConfig) -> Result<SimulatedSample> {
    config.check()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    Ok(generate_with(config, &mut rng))
}

fn generate_with(cfg: &SimulationConfig, rng: &mut ChaCha20Rng) -> SimulatedSample {
    let (n, periods) = (cfg.n, cfg.periods);
    let mut x = vec![DMatrix::zeros(n, 4); periods];
    let mut d = DMatrix::zeros(n, periods);
    let mut y = DVector::zeros(n);
    let mut den = DMatrix::zeros(n, periods);
    for i in 0..n {
        let u = draw_unit(cfg, rng);
        for t in 0..periods {
            for j in 0..4 {
                x[t][(i, j)] = u.x[t][j];
            }
            d[(i, t)] = u.d[t];
            den[(i, t)] = u.density[t];
        }
        y[i] = u.y;
    }
    let data = PanelDataset::from_parts(PanelParts {
        unit_ids: (1..=n).map(|i| i.to_string()).collect(),
        times: (1..=periods).map(|t| t as f64).collect(),
        baseline_names: vec![],
        baseline: DMatrix::zeros(n, 0),
        confounder_names: (1..=4).map(|j| format!("X{j}")).collect(),
        confounders: x.clone(),
        treatment_name: "D".into(),
        treatment_kind: cfg.treatment_kind,
        treatments: d,
        outcome_name: "Y".into(),
        outcome: y,
        base_weights: DVector::from_element(n, 1.0),
        auxiliary: vec![],
    })
    .expect("simulated parts are consistent");
    SimulatedSample {
        data,
        true_confounders: x,
        true_denominator: den,
        misspecified: false,
    }
}

/// `(X₁³, 6X₂, log(X₃ + 1), 1/(X₄ + 1))` applied to every period's
/// confounders.
pub fn misspecify_confounders(data: &PanelDataset) -> Result<PanelDataset> {
    if data.n_confounders() != 4 {
        return Err(Error::InvalidArgument(format!(
            "the transform needs 4 confounders, found {}",
            data.n_confounders()
        )));
    }
    let mut parts = data.parts().clone();
    for x in &mut parts.confounders {
        for mut row in x.row_iter_mut() {
            let (a, b, c, e) = (row[0], row[1], row[2], row[3]);
            row[0] = a.powi(3);
            row[1] = 6.0 * b;
            row[2] = (c + 1.0).ln();
            row[3] = 1.0 / (e + 1.0);
        }
    }
    PanelDataset::from_parts(parts)
}

/// Replaces the analyst-visible confounders with their transforms. The DGP
/// quantities are untouched. Applying it twice is an error.
pub fn apply_misspecification(sample: &SimulatedSample) -> Result<SimulatedSample> {
    if sample.misspecified {
        return Err(Error::InvalidArgument(
            "sample confounders are already transformed".into(),
        ));
    }
    Ok(SimulatedSample {
        data: misspecify_confounders(&sample.data)?,
        true_confounders: sample.true_confounders.clone(),
        true_denominator: sample.true_denominator.clone(),
        misspecified: true,
    })
}

/// Quadrature for the marginal law of `D_t` given `D_{t−1}` with the
/// confounders integrated out.
struct MarginalTreatment {
    normal: Rule,
    half: Rule,
}

impl MarginalTreatment {
    fn new() -> Self {
        Self {
            normal: standard_normal(40),
            half: half_normal(40, 9.0),
        }
    }

    /// `(c, |U|, sd of γ₁X₁ + γ₂X₂)` at 0-based period t.
    fn pieces(cfg: &SimulationConfig, t: usize, d_prev: f64) -> (f64, f64, f64) {
        let g = cfg.gamma();
        let u = cfg.u(t, d_prev);
        let c = -d_prev + SimulationConfig::shift(t);
        (c, u.abs(), u.abs() * (g[0] * g[0] + g[1] * g[1]).sqrt())
    }

    fn prob_treated(&self, cfg: &SimulationConfig, t: usize, d_prev: f64) -> f64 {
        let g = cfg.gamma();
        let (c, au, s) = Self::pieces(cfg, t, d_prev);
        let mut total = 0.0;
        for (a, wa) in self.half.nodes.iter().zip(&self.half.weights) {
            for (b, wb) in self.half.nodes.iter().zip(&self.half.weights) {
                let m = c + au * (g[2] * a + g[3] * b);
                total += wa * wb * self.normal.integrate(|z| expit(m + s * z));
            }
        }
        total
    }

    fn density(&self, cfg: &SimulationConfig, t: usize, d_prev: f64, d: f64) -> f64 {
        let g = cfg.gamma();
        let (c, au, s) = Self::pieces(cfg, t, d_prev);
        let sd = (cfg.sigma_d * cfg.sigma_d + s * s).sqrt();
        let mut total = 0.0;
        for (a, wa) in self.half.nodes.iter().zip(&self.half.weights) {
            let ma = c + au * g[2] * a;
            for (b, wb) in self.half.nodes.iter().zip(&self.half.weights) {
                total += wa * wb * normal_density(d, ma + au * g[3] * b, sd);
            }
        }
        total
    }
}

/// n × T marginal probability or density of each observed treatment given
/// the previous treatment, as implied by the DGP.
pub fn true_numerator(config: &SimulationConfig, data: &PanelDataset) -> DMatrix<f64> {
    let q = MarginalTreatment::new();
    let (n, periods) = (data.n(), data.periods());
    let d = data.treatments();
    let prev = |i: usize, t: usize| if t == 0 { 0.0 } else { d[(i, t - 1)] };
    let mut out = DMatrix::zeros(n, periods);
    match config.treatment_kind {
        VariableKind::Binary => {
            let table: Vec<[f64; 2]> = (0..periods)
                .map(|t| [q.prob_treated(config, t, 0.0), q.prob_treated(config, t, 1.0)])
                .collect();
            for t in 0..periods {
                for i in 0..n {
                    let p = table[t][prev(i, t) as usize];
                    out[(i, t)] = if d[(i, t)] == 1.0 { p } else { 1.0 - p };
                }
            }
        }
        VariableKind::Continuous => {
            for t in 0..periods {
                for i in 0..n {
                    out[(i, t)] = q.density(config, t, prev(i, t), d[(i, t)]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthEstimate {
    /// g-computation MSM coefficients on D1..DT.
    pub coefficients: Vec<f64>,
    /// Monte Carlo standard errors of `coefficients`.
    pub mc_se: Vec<f64>,
    /// Closed form `−10 + (δ₃ + δ₄)(2/3)√(2/π)` for t < T and `−10` for
    /// t = T; exact for binary treatments.
    pub analytic: Vec<f64>,
    pub n_sims: usize,
}

pub fn analytic_truth(config: &SimulationConfig) -> Vec<f64> {
    let slope = (config.delta[2] + config.delta[3]) * (2.0 / 3.0) * (2.0 / PI).sqrt();
    (0..config.periods)
        .map(|t| {
            if t + 1 < config.periods {
                TREATMENT_EFFECT + slope
            } else {
                TREATMENT_EFFECT
            }
        })
        .collect()
}

/// g-computation truth. Treatment paths follow their observational
/// marginal; potential outcomes under each path are drawn with fresh
/// confounder and outcome noise and regressed on the path, in batches of
/// `max(config.n, 100)` units. The result averages the batch coefficients.
pub fn true_msm_coefficients(config: &SimulationConfig, n_sims: usize) -> Result<TruthEstimate> {
    config.check()?;
    let batch = config.n.max(100);
    let batches = n_sims.div_ceil(batch);
    if batches < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_sims = {n_sims} gives fewer than two batches of {batch}"
        )));
    }
    let periods = config.periods;
    let per_batch: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(TRUTH_STREAM + b as u64);
            let mut x = DMatrix::from_element(batch, periods + 1, 1.0);
            let mut y = DVector::zeros(batch);
            for i in 0..batch {
                let path = draw_unit(config, &mut rng).d;
                let mut xs = Vec::with_capacity(periods);
                for t in 0..periods {
                    let d_prev = if t == 0 { 0.0 } else { path[t - 1] };
                    xs.push(draw_confounders(&mut rng, config.u(t, d_prev)));
                    x[(i, t + 1)] = path[t];
                }
                let e: f64 = rng.sample(StandardNormal);
                y[i] = outcome_mean(config, &path, &xs) + config.sigma_y * e;
            }
            weighted_least_squares(&x, &y, &DVector::from_element(batch, 1.0))
                .map(|beta| beta.iter().skip(1).copied().collect())
        })
        .collect::<Result<_>>()?;
    let b = batches as f64;
    let mut coefficients = vec![0.0; periods];
    let mut mc_se = vec![0.0; periods];
    for t in 0..periods {
        let mean = per_batch.iter().map(|v| v[t]).sum::<f64>() / b;
        let var = per_batch.iter().map(|v| (v[t] - mean).powi(2)).sum::<f64>() / (b - 1.0);
        coefficients[t] = mean;
        mc_se[t] = (var / b).sqrt();
    }
    Ok(TruthEstimate {
        coefficients,
        mc_se,
        analytic: analytic_truth(config),
        n_sims: batches * batch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Rbw,
    IpwGlm,
    IpwGlmCensored,
    IpwTruth,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Rbw,
        Estimator::IpwGlm,
        Estimator::IpwGlmCensored,
        Estimator::IpwTruth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Rbw => "rbw",
            Estimator::IpwGlm => "ipw_glm",
            Estimator::IpwGlmCensored => "ipw_glm_censored",
            Estimator::IpwTruth => "ipw_truth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloOptions {
    /// g-computation units for continuous-treatment truth.
    pub truth_sims: usize,
    pub censor: (f64, f64),
    pub entropy: EntropyOptions,
    pub hspec: HFunctionSpec,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            truth_sims: 1_000_000,
            censor: (1.0, 99.0),
            entropy: EntropyOptions::default(),
            hspec: HFunctionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub estimator: Estimator,
    pub coefficient: String,
    pub successes: usize,
    pub mean: f64,
    pub bias: f64,
    /// Divisor R.
    pub sd: f64,
    pub rmse: f64,
    /// `(probability, quantile of estimate − truth)`.
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub replication: usize,
    pub estimator: Estimator,
    pub coefficient: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub replication: usize,
    pub estimator: Estimator,
    pub message: String,
}

/// Balance diagnostics of one replication's residual balancing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RbwReplication {
    pub replication: usize,
    pub max_violation: f64,
    pub max_future_coefficient: f64,
    pub max_coefficient_shift: f64,
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub config: SimulationConfig,
    pub reps: usize,
    pub coefficient_names: Vec<String>,
    pub truth: Vec<f64>,
    pub truth_source: String,
    pub summaries: Vec<CellSummary>,
    pub estimates: Vec<EstimateRecord>,
    pub failures: Vec<Failure>,
    pub rbw_diagnostics: Vec<RbwReplication>,
}

impl MonteCarloReport {
    pub fn summary(&self, estimator: Estimator, coefficient: &str) -> Option<&CellSummary> {
        self.summaries
            .iter()
            .find(|s| s.estimator == estimator && s.coefficient == coefficient)
    }

    pub fn failure_count(&self, estimator: Estimator) -> usize {
        self.failures.iter().filter(|f| f.estimator == estimator).count()
    }
}

pub const QUANTILE_GRID: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

struct Replication {
    estimates: Vec<(Estimator, std::result::Result<Vec<f64>, String>)>,
    rbw: Option<RbwReplication>,
}

fn msm_coefficients(
    data: &PanelDataset,
    formula: &ParsedFormula,
    w: &DVector<f64>,
) -> Result<Vec<f64>> {
    let fit = fit_msm(data as &dyn ColumnSource, formula, w)?;
    Ok(fit.coefficients.iter().skip(1).copied().collect())
}

fn replicate(
    cfg: &SimulationConfig,
    r: usize,
    estimators: &[Estimator],
    opts: &MonteCarloOptions,
    formula: &ParsedFormula,
) -> Replication {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(r as u64);
    let mut sample = generate_with(cfg, &mut rng);
    if cfg.misspecified {
        sample = apply_misspecification(&sample).expect("simulated panels have 4 confounders");
    }
    let data = &sample.data;
    let mut rbw = None;
    let mut ipw_glm: Option<Result<DVector<f64>>> = None;
    let mut estimates = Vec::new();
    for &e in estimators {
        let out = match e {
            Estimator::Rbw => {
                let spec =
                    ConfounderModelSpec::prior_treatment_only(data).with_family(Family::Gaussian);
                (|| {
                    let (c, _) = build_residual_constraints(data, &spec, &opts.hspec)?;
                    let sol = solve_entropy_balance(&c, data.base_weights(), &opts.entropy)?;
                    let diags = refit_diagnostics(data, &spec, &opts.hspec, &sol.weights)?;
                    rbw = Some(RbwReplication {
                        replication: r,
                        max_violation: sol.max_constraint_violation,
                        max_future_coefficient: diags
                            .iter()
                            .map(|d| d.max_future_coefficient)
                            .fold(0.0, f64::max),
                        max_coefficient_shift: diags
                            .iter()
                            .map(|d| d.max_coefficient_shift)
                            .fold(0.0, f64::max),
                    });
                    msm_coefficients(data, formula, &sol.weights)
                })()
            }
            Estimator::IpwGlm | Estimator::IpwGlmCensored => {
                let w = ipw_glm
                    .get_or_insert_with(|| {
                        ipw_panel(data, &IpwSpec::lag_one(data, true, false)).map(|w| w.weights)
                    })
                    .as_ref()
                    .map_err(|err| Error::InvalidArgument(err.to_string()));
                w.and_then(|w| {
                    if e == Estimator::IpwGlm {
                        msm_coefficients(data, formula, w)
                    } else {
                        let wv = crate::ipw::WeightVector::new(w.clone(), "ipw");
                        let c = censor_weights(&wv, opts.censor.0, opts.censor.1)?;
                        msm_coefficients(data, formula, &c.weights)
                    }
                })
            }
            Estimator::IpwTruth => {
                let num = true_numerator(cfg, data);
                true_weights(data, &sample.true_denominator, true, Some(&num))
                    .and_then(|w| msm_coefficients(data, formula, &w.weights))
            }
        };
        estimates.push((e, out.map_err(|err| err.to_string())));
    }
    Replication { estimates, rbw }
}

pub fn run_monte_carlo(
    config: &SimulationConfig,
    estimators: &[Estimator],
    reps: usize,
) -> Result<MonteCarloReport> {
    run_monte_carlo_with(config, estimators, reps, &MonteCarloOptions::default())
}

pub fn run_monte_carlo_with(
    config: &SimulationConfig,
    estimators: &[Estimator],
    reps: usize,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloReport> {
    config.check()?;
    if reps == 0 || estimators.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one replication and one estimator".into(),
        ));
    }
    let (truth, truth_source) = match config.treatment_kind {
        VariableKind::Binary => (analytic_truth(config), "analytic".to_string()),
        VariableKind::Continuous => {
            let t = true_msm_coefficients(config, opts.truth_sims)?;
            (t.coefficients, format!("g-computation ({} units)", t.n_sims))
        }
    };
    let names: Vec<String> = (1..=config.periods).map(|t| format!("D{t}")).collect();
    let text = config.msm_formula();
    let formula = {
        let probe = generate_with(
            &SimulationConfig {
                n: 2,
                ..config.clone()
            },
            &mut ChaCha20Rng::seed_from_u64(0),
        );
        parse_formula(&text, &probe.data.catalog())?
    };

    let reps_out: Vec<Replication> = (0..reps)
        .into_par_iter()
        .map(|r| replicate(config, r, estimators, opts, &formula))
        .collect();

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut rbw_diagnostics = Vec::new();
    for (r, rep) in reps_out.into_iter().enumerate() {
        for (e, out) in rep.estimates {
            match out {
                Ok(beta) => {
                    for (k, b) in beta.into_iter().enumerate() {
                        estimates.push(EstimateRecord {
                            replication: r,
                            estimator: e,
                            coefficient: names[k].clone(),
                            estimate: b,
                        });
                    }
                }
                Err(message) => failures.push(Failure {
                    replication: r,
                    estimator: e,
                    message,
                }),
            }
        }
        rbw_diagnostics.extend(rep.rbw);
    }
    if failures.len() == reps * estimators.len() {
        return Err(Error::AllFailed);
    }

    let mut summaries = Vec::new();
    for &e in estimators {
        for (k, name) in names.iter().enumerate() {
            let values: Vec<f64> = estimates
                .iter()
                .filter(|s| s.estimator == e && &s.coefficient == name)
                .map(|s| s.estimate)
                .collect();
            if values.is_empty() {
                continue;
            }
            summaries.push(summarize(e, name, &values, truth[k]));
        }
    }

    Ok(MonteCarloReport {
        config: config.clone(),
        reps,
        coefficient_names: names,
        truth,
        truth_source,
        summaries,
        estimates,
        failures,
        rbw_diagnostics,
    })
}

fn summarize(estimator: Estimator, coefficient: &str, values: &[f64], truth: f64) -> CellSummary {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r).sqrt();
    let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / r).sqrt();
    let mut errors: Vec<f64> = values.iter().map(|v| v - truth).collect();
    errors.sort_by(f64::total_cmp);
    CellSummary {
        estimator,
        coefficient: coefficient.to_string(),
        successes: values.len(),
        mean,
        bias: mean - truth,
        sd,
        rmse,
        quantiles: QUANTILE_GRID
            .iter()
            .map(|p| (*p, percentile(&errors, 100.0 * p)))
            .collect(),
    }
}

/// One row per (replication, estimator, coefficient).
pub fn write_estimates_csv<W: Write>(report: &MonteCarloReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replication", "estimator", "coefficient", "estimate", "truth"])?;
    for s in &report.estimates {
        let k = report
            .coefficient_names
            .iter()
            .position(|c| c == &s.coefficient)
            .expect("estimates use report coefficient names");
        w.write_record([
            (s.replication + 1).to_string(),
            s.estimator.name().to_string(),
            s.coefficient.clone(),
            s.estimate.to_string(),
            report.truth[k].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<estimates>", e))?;
    Ok(())
}

/// One row per (estimator, coefficient).
pub fn write_summary_csv<W: Write>(report: &MonteCarloReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "estimator".to_string(),
        "coefficient".into(),
        "truth".into(),
        "successes".into(),
        "failures".into(),
        "mean".into(),
        "bias".into(),
        "sd".into(),
        "rmse".into(),
    ];
    header.extend(QUANTILE_GRID.iter().map(|p| format!("q{p}")));
    w.write_record(&header)?;
    for s in &report.summaries {
        let k = report
            .coefficient_names
            .iter()
            .position(|c| c == &s.coefficient)
            .expect("summaries use report coefficient names");
        let mut row = vec![
            s.estimator.name().to_string(),
            s.coefficient.clone(),
            report.truth[k].to_string(),
            s.successes.to_string(),
            report.failure_count(s.estimator).to_string(),
            s.mean.to_string(),
            s.bias.to_string(),
            s.sd.to_string(),
            s.rmse.to_string(),
        ];
        row.extend(s.quantiles.iter().map(|(_, q)| q.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn big(kind: VariableKind) -> SimulatedSample {
        generate_sample(&SimulationConfig {
            n: 100_000,
            treatment_kind: kind,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn mean_and_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = v.clone().count() as f64;
        let mean = v.clone().sum::<f64>() / n;
        let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = SimulationConfig { n: 50, ..Default::default() };
        let a = generate_sample(&cfg).unwrap();
        let b = generate_sample(&cfg).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.true_denominator, b.true_denominator);
        let c = generate_sample(&SimulationConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn confounder_moments() {
        let root = (2.0 / PI).sqrt();
        for kind in [VariableKind::Binary, VariableKind::Continuous] {
            let s = big(kind);
            let data = &s.data;
            for t in 0..3 {
                let x = data.confounders(t);
                for j in 0..2 {
                    let (m, se) = mean_and_se(x.column(j).iter().copied());
                    assert!(m.abs() < 4.0 * se, "{kind} X{} t{t}: {m} ± {se}", j + 1);
                }
                // E X_3t = E X_4t = E|U_t| √(2/π)
                let u = |i: usize| if t == 0 { 1.0 } else { (5.0 / 3.0 + 2.0 / 3.0 * data.treatments()[(i, t - 1)]).abs() };
                for j in 2..4 {
                    let diffs = (0..data.n()).map(|i| x[(i, j)] - u(i) * root);
                    let (m, se) = mean_and_se(diffs);
                    assert!(m.abs() < 4.0 * se, "{kind} X{} t{t}: {m} ± {se}", j + 1);
                }
            }
        }
        let s = big(VariableKind::Binary);
        let (m, se) = mean_and_se(s.data.confounders(0).column(2).iter().copied());
        assert!((m - root).abs() < 4.0 * se);
    }

    #[test]
    fn denominator_matches_dgp() {
        let s = generate_sample(&SimulationConfig { n: 20, ..Default::default() }).unwrap();
        let cfg = SimulationConfig::default();
        let x = &s.true_confounders;
        let d = s.data.treatments();
        for i in 0..20 {
            let xt: [f64; 4] = std::array::from_fn(|j| x[1][(i, j)]);
            let p = expit(cfg.linear_predictor(1, d[(i, 0)], &xt));
            let want = if d[(i, 1)] == 1.0 { p } else { 1.0 - p };
            assert_relative_eq!(s.true_denominator[(i, 1)], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn misspecification_transform() {
        let mut parts = generate_sample(&SimulationConfig { n: 2, periods: 1, ..Default::default() })
            .unwrap()
            .data
            .into_parts();
        parts.confounders[0] = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1f64.exp() - 1.0, 1.0]);
        let data = PanelDataset::from_parts(parts).unwrap();
        let m = misspecify_confounders(&data).unwrap();
        let x = m.confounders(0);
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 6.0, 0.0, 1.0]);
        assert_relative_eq!(x[(1, 0)], 8.0);
        assert_relative_eq!(x[(1, 1)], 0.0);
        assert_relative_eq!(x[(1, 2)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[(1, 3)], 0.5);

        let s = generate_sample(&SimulationConfig { n: 10, ..Default::default() }).unwrap();
        let once = apply_misspecification(&s).unwrap();
        assert_eq!(once.true_confounders, s.true_confounders);
        assert!(apply_misspecification(&once).is_err());
    }

    #[test]
    fn marginal_treatment_law_matches_simulation() {
        // Mean of D_2 given D_1 from the quadrature against a direct draw.
        for kind in [VariableKind::Binary, VariableKind::Continuous] {
            let cfg = SimulationConfig { treatment_kind: kind, ..Default::default() };
            let q = MarginalTreatment::new();
            for d_prev in [0.0, 1.0] {
                let mut rng = ChaCha20Rng::seed_from_u64(3);
                let draws: Vec<f64> = (0..200_000)
                    .map(|_| {
                        let x = draw_confounders(&mut rng, cfg.u(1, d_prev));
                        let eta = cfg.linear_predictor(1, d_prev, &x);
                        match kind {
                            VariableKind::Binary => expit(eta),
                            VariableKind::Continuous => eta,
                        }
                    })
                    .collect();
                let (m, se) = mean_and_se(draws.iter().copied());
                let quad = match kind {
                    VariableKind::Binary => q.prob_treated(&cfg, 1, d_prev),
                    VariableKind::Continuous => {
                        let r = crate::quadrature::gauss_legendre(400, -40.0, 40.0);
                        let mass = r.integrate(|v| q.density(&cfg, 1, d_prev, v));
                        assert_relative_eq!(mass, 1.0, epsilon = 1e-8);
                        r.integrate(|v| v * q.density(&cfg, 1, d_prev, v))
                    }
                };
                assert!((m - quad).abs() < 4.0 * se, "{kind} d={d_prev}: {m} vs {quad}");
            }
        }
    }

    #[test]
    fn analytic_truth_values() {
        let a = analytic_truth(&SimulationConfig::default());
        let b = -10.0 + 27.4 * (2.0 / 3.0) * (2.0 / PI).sqrt();
        assert_eq!(a, vec![b, b, -10.0]);
        assert_relative_eq!(b, 4.574691, epsilon = 1e-6);
        assert!((b - 4.5745).abs() < 5e-4);
    }

    #[test]
    fn truth_without_confounder_pathway() {
        let cfg = SimulationConfig {
            delta: [0.0; 4],
            n: 500,
            ..Default::default()
        };
        let t = true_msm_coefficients(&cfg, 20_000).unwrap();
        for k in 0..3 {
            assert!((t.coefficients[k] + 10.0).abs() < 4.0 * t.mc_se[k], "{t:?}");
        }
        assert_eq!(t.analytic, vec![-10.0; 3]);
    }

    #[test]
    fn truth_ignores_confounding_strength() {
        for alpha in [0.4, 0.8] {
            let cfg = SimulationConfig { alpha, n: 500, ..Default::default() };
            let t = true_msm_coefficients(&cfg, 50_000).unwrap();
            for k in 0..3 {
                assert!((t.coefficients[k] - t.analytic[k]).abs() < 4.0 * t.mc_se[k], "{t:?}");
            }
        }
    }

    #[test]
    fn report_is_deterministic_and_decomposes() {
        let cfg = SimulationConfig { n: 300, seed: 9, ..Default::default() };
        let a = run_monte_carlo(&cfg, &Estimator::ALL, 3).unwrap();
        let b = run_monte_carlo(&cfg, &Estimator::ALL, 3).unwrap();
        assert_eq!(a.estimates, b.estimates);
        assert_eq!(a.summaries, b.summaries);
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        for s in &a.summaries {
            let lhs = s.rmse * s.rmse;
            let rhs = s.bias * s.bias + s.sd * s.sd;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));
        }
        for d in &a.rbw_diagnostics {
            assert!(d.max_violation < 1e-8);
            assert!(d.max_future_coefficient < 1e-6);
        }
        let mut buf = Vec::new();
        write_summary_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        let mut buf = Vec::new();
        write_estimates_csv(&a, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 4 * 3);
    }

    #[test]
    fn first_replication_is_the_seeded_sample() {
        let cfg = SimulationConfig { n: 200, seed: 4, ..Default::default() };
        let report = run_monte_carlo(&cfg, &[Estimator::IpwGlm], 1).unwrap();
        let s = generate_sample(&cfg).unwrap();
        let formula = parse_formula(&cfg.msm_formula(), &s.data.catalog()).unwrap();
        let w = ipw_panel(&s.data, &IpwSpec::lag_one(&s.data, true, false)).unwrap();
        let beta = msm_coefficients(&s.data, &formula, &w.weights).unwrap();
        let got: Vec<f64> = report.estimates.iter().map(|e| e.estimate).collect();
        assert_eq!(got, beta);
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(Estimator::parse(e.name()).unwrap(), e);
        }
        assert_eq!(Estimator::parse("ipw-glm").unwrap(), Estimator::IpwGlm);
        assert!(Estimator::parse("cbps").is_err());
    }
}
