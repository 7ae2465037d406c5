use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rbw_core::data::{read_panel_csv, write_panel_csv, PanelDataset, PanelParts, VariableKind};
use rbw_core::simulate::{generate_sample, SimulationConfig};

fn panel(n: usize, periods: usize, j: usize, seed: Vec<f64>) -> PanelDataset {
    let v = |k: usize| seed[k % seed.len()] * (1.0 + k as f64);
    PanelDataset::from_parts(PanelParts {
        unit_ids: (0..n).map(|i| format!("unit-{i}")).collect(),
        times: (0..periods).map(|t| 2000.0 + 0.5 * t as f64).collect(),
        baseline_names: vec!["age".into()],
        baseline: DMatrix::from_fn(n, 1, |i, _| v(i + 7)),
        confounder_names: (0..j).map(|k| format!("x{k}")).collect(),
        confounders: (0..periods)
            .map(|t| DMatrix::from_fn(n, j, |i, k| v(i * 31 + t * 7 + k)))
            .collect(),
        treatment_name: "D".into(),
        treatment_kind: VariableKind::Continuous,
        treatments: DMatrix::from_fn(n, periods, |i, t| v(i * 3 + t + 1)),
        outcome_name: "Y".into(),
        outcome: DVector::from_fn(n, |i, _| v(i + 11)),
        base_weights: DVector::from_fn(n, |i, _| 0.5 + v(i).abs()),
        auxiliary: vec![(
            "dens".into(),
            DMatrix::from_fn(n, periods, |i, t| 1e-3 + v(i + t).abs()),
        )],
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_read_is_identity(
        n in 1usize..20,
        periods in 1usize..5,
        j in 0usize..4,
        seed in prop::collection::vec(-1e6f64..1e6, 1..12),
    ) {
        let d = panel(n, periods, j, seed);
        let mut buf = Vec::new();
        write_panel_csv(&d, &mut buf).unwrap();
        let back = read_panel_csv(buf.as_slice(), &d.long_schema()).unwrap();
        prop_assert_eq!(back, d);
    }
}

#[test]
fn simulated_panel_round_trips() {
    let s = generate_sample(&SimulationConfig {
        n: 50,
        ..SimulationConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_panel_csv(&s.data, &mut buf).unwrap();
    let back = read_panel_csv(buf.as_slice(), &s.data.long_schema()).unwrap();
    assert_eq!(back, s.data);
}
