use rbw_core::formula::parse_formula;
use rbw_core::ipw::true_weights;
use rbw_core::msm::{fit_msm, ColumnSource};
use rbw_core::simulate::{analytic_truth, generate_sample, true_numerator, SimulationConfig};

#[test]
fn oracle_weights_recover_binary_truth_at_large_n() {
    let cfg = SimulationConfig {
        n: 20_000,
        seed: 11,
        ..SimulationConfig::default()
    };
    let s = generate_sample(&cfg).unwrap();
    let num = true_numerator(&cfg, &s.data);
    let w = true_weights(&s.data, &s.true_denominator, true, Some(&num)).unwrap();
    let f = parse_formula(&cfg.msm_formula(), &s.data.catalog()).unwrap();
    let fit = fit_msm(&s.data, &f, &w.weights).unwrap();
    let se = fit.standard_errors();
    for (k, truth) in analytic_truth(&cfg).into_iter().enumerate() {
        let z = (fit.coefficients[k + 1] - truth) / se[k + 1];
        assert!(z.abs() < 4.0, "D{}: estimate {} truth {truth} z {z}", k + 1, fit.coefficients[k + 1]);
    }
}
