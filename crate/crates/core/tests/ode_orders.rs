//! Integrator accuracy and structural properties.

use flowrefine_core::ode::{convergence_order, integrate, FnField, Method, OdeConfig, OrderEstimate};
use flowrefine_core::sampling::{sample_standard_normal, Seed};
use flowrefine_core::PointCloud;
use proptest::prelude::*;

fn linear_field() -> FnField<impl Fn(&[f64], f64, &mut [f64]) + Sync> {
    FnField::new(2, |x: &[f64], _t, o: &mut [f64]| o.copy_from_slice(x))
}

fn start() -> PointCloud {
    PointCloud::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0], vec![-1.0, 0.0]]).unwrap()
}

fn exact_linear(t0: f64, t1: f64) -> PointCloud {
    let g = (t1 - t0).exp();
    let rows: Vec<Vec<f64>> = (0..3).map(|i| start().row(i).iter().map(|v| v * g).collect()).collect();
    PointCloud::from_rows(&rows).unwrap()
}

#[test]
fn euler_is_first_order() {
    let steps = [20, 40, 80, 160, 320];
    let est = convergence_order(&linear_field(), &start(), &exact_linear(0.0, 1.0), Method::Euler, 0.0, 1.0, &steps).unwrap();
    match est {
        OrderEstimate::Slope(p) => assert!((0.9..=1.1).contains(&p), "euler slope {p}"),
        OrderEstimate::Exact => panic!("euler cannot be exact on v = x"),
    }
}

#[test]
fn rk4_is_fourth_order() {
    let steps = [4, 8, 16, 32];
    let est = convergence_order(&linear_field(), &start(), &exact_linear(0.0, 1.0), Method::Rk4, 0.0, 1.0, &steps).unwrap();
    match est {
        OrderEstimate::Slope(p) => assert!((3.7..=4.3).contains(&p), "rk4 slope {p}"),
        OrderEstimate::Exact => panic!("rk4 cannot be exact on v = x"),
    }
}

#[test]
fn constant_field_reported_exact() {
    let c = [0.75, -1.25];
    let field = FnField::new(2, move |_x: &[f64], _t, o: &mut [f64]| o.copy_from_slice(&c));
    let rows: Vec<Vec<f64>> = (0..3).map(|i| start().row(i).iter().zip(c).map(|(x, c)| x + c).collect()).collect();
    let exact = PointCloud::from_rows(&rows).unwrap();
    for method in [Method::Euler, Method::Rk4] {
        let est = convergence_order(&field, &start(), &exact, method, 0.0, 1.0, &[4, 8, 16]).unwrap();
        assert_eq!(est, OrderEstimate::Exact);
    }
}

#[test]
fn subinterval_order_matches() {
    let steps = [4, 8, 16, 32];
    let est = convergence_order(&linear_field(), &start(), &exact_linear(0.25, 0.75), Method::Rk4, 0.25, 0.75, &steps).unwrap();
    let OrderEstimate::Slope(p) = est else { panic!("expected slope") };
    assert!((3.7..=4.3).contains(&p), "{p}");
}

#[test]
fn time_dependent_field_uses_step_times() {
    // dx/dt = 2t  ⇒  x(1) = x(0) + 1; RK4 integrates polynomials of degree ≤ 3 in t exactly.
    let field = FnField::new(1, |_x: &[f64], t, o: &mut [f64]| o[0] = 2.0 * t);
    let start = PointCloud::from_rows(&[vec![0.0], vec![3.0]]).unwrap();
    let cfg = OdeConfig { method: Method::Rk4, num_steps: 8, t_start: 0.0, t_end: 1.0 };
    let (end, _) = integrate(&field, &start, &cfg, None).unwrap();
    assert!((end.row(0)[0] - 1.0).abs() < 1e-14);
    assert!((end.row(1)[0] - 4.0).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn points_evolve_independently(seed in any::<u64>(), n in 2usize..20, rk4 in any::<bool>()) {
        let field = FnField::new(2, |x: &[f64], t, o: &mut [f64]| {
            o[0] = -x[1] + t * x[0].sin();
            o[1] = x[0] - 0.5 * x[1];
        });
        let cloud = sample_standard_normal(2, n, Seed(seed)).unwrap();
        let method = if rk4 { Method::Rk4 } else { Method::Euler };
        let cfg = OdeConfig { method, num_steps: 13, t_start: 0.1, t_end: 0.9 };
        let (all, _) = integrate(&field, &cloud, &cfg, None).unwrap();
        for i in 0..n {
            let one = cloud.select(&[i]);
            let (alone, _) = integrate(&field, &one, &cfg, None).unwrap();
            prop_assert_eq!(alone.row(0), all.row(i));
        }
    }

    #[test]
    fn dyadic_subintervals_compose(seed in any::<u64>(), k in 1usize..6, rk4 in any::<bool>()) {
        // With h = 1/64 and a split at a multiple of h, both halves step through
        // the same times and the composition reproduces the single run bitwise.
        let field = FnField::new(2, |x: &[f64], t, o: &mut [f64]| {
            o[0] = x[1] * (1.0 + t);
            o[1] = -x[0];
        });
        let cloud = sample_standard_normal(2, 5, Seed(seed)).unwrap();
        let method = if rk4 { Method::Rk4 } else { Method::Euler };
        let split = k as f64 * 8.0 / 64.0;
        let whole = OdeConfig { method, num_steps: 64, t_start: 0.0, t_end: 1.0 };
        let first = OdeConfig { method, num_steps: k * 8, t_start: 0.0, t_end: split };
        let second = OdeConfig { method, num_steps: 64 - k * 8, t_start: split, t_end: 1.0 };
        let (direct, _) = integrate(&field, &cloud, &whole, None).unwrap();
        let (mid, _) = integrate(&field, &cloud, &first, None).unwrap();
        let (composed, _) = integrate(&field, &mid, &second, None).unwrap();
        prop_assert_eq!(direct, composed);
    }
}
