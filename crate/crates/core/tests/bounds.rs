use fedunlearn::federation::FederationSpec;
use fedunlearn::linalg::{Matrix, ParamVector};
use fedunlearn::metrics::{bound_cq, metric_q, metric_s, metric_v, Oracles};
use fedunlearn::objectives::{Objective, QuadraticObjective};

fn point(target: f64) -> Objective {
    Objective::Quadratic(
        QuadraticObjective::new(Matrix::from_rows(1, 1, vec![1.0]).unwrap(), vec![target], 0.0).unwrap(),
    )
}

// Remaining clients at ±1, removed client at 0: w* = w^{r*} = 0.
fn symmetric() -> FederationSpec {
    FederationSpec::new(vec![point(1.0), point(-1.0), point(0.0)], vec![0.4, 0.4, 0.2], &[2]).unwrap()
}

#[test]
fn oracles_of_symmetric_instance() {
    let spec = symmetric();
    let o = Oracles::compute(&spec).unwrap();
    assert!(o.w_star[0].abs() < 1e-15);
    assert!(o.w_rem_star[0].abs() < 1e-15);
    // F*_{−J} = ½·½(1 + 1) = 0.5; local optima are exact.
    assert!((bound_cq(&spec, &o).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn exact_unlearning_has_zero_metrics_but_positive_floor() {
    let spec = symmetric();
    let o = Oracles::compute(&spec).unwrap();
    let w = ParamVector::new(vec![0.0]);
    let v = metric_v(&spec, &o, &w).unwrap();
    let q = metric_q(&spec, &o, &w).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(q, 0.0);
    assert_eq!(metric_s(&spec, &o, &w).unwrap(), 0.0);
    // The sum 2V + Q sits below Cq on this instance.
    assert!(2.0 * v + q < bound_cq(&spec, &o).unwrap());
}

#[test]
fn hand_computed_metrics_off_optimum() {
    let spec = symmetric();
    let o = Oracles::compute(&spec).unwrap();
    let w = ParamVector::new(vec![0.5]);
    // f_1 = ½(0.5 − 1)² = 0.125, f_2 = ½(1.5)² = 1.125, f_3 = 0.125; at 0 they are 0.5, 0.5, 0.
    assert!((metric_v(&spec, &o, &w).unwrap() - 0.125).abs() < 1e-15);
    // F(0.5) = 0.4·0.125 + 0.4·1.125 + 0.2·0.125 = 0.525; F(0) = 0.4.
    assert!((metric_s(&spec, &o, &w).unwrap() - 0.125).abs() < 1e-15);
    // Δf = (−0.375, 0.625), mean 0.125, Q = ½(0.5 + 0.5).
    assert!((metric_q(&spec, &o, &w).unwrap() - 0.5).abs() < 1e-15);
}
