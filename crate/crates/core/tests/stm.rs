use std::collections::BTreeMap;

use optreg::bgoe::{backward_generate, BgoeOptions, NeighborhoodSpec, NewtonOptions};
use optreg::lqr::{linearize, solve_for_system, RiccatiSolution};
use optreg::stm::{
    generate_covering_dataset, initial_state_sensitivity, propagate_with_stm, solve_target_update, RegionKind,
    RegionSpec, TargetingOptions,
};
use optreg::systems::{linear_system, make_benchmark, CostModel, Matrix, SystemModel, Vector};
use proptest::prelude::*;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn opts(n: usize, delta: f64) -> BgoeOptions {
    BgoeOptions {
        step: 1e-3,
        neighborhood: NeighborhoodSpec::ball(delta, n).unwrap(),
        divergence_bound: 100.0,
        newton: NewtonOptions::default(),
    }
}

fn nl2() -> (SystemModel, CostModel, RiccatiSolution) {
    let (sys, cost) = make_benchmark("nl2", &BTreeMap::new()).unwrap();
    let rs = solve_for_system(&sys, &cost).unwrap();
    (sys, cost, rs)
}

fn oscillator() -> (SystemModel, CostModel, RiccatiSolution) {
    let sys = linear_system(
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]),
        Matrix::from_column_slice(2, 1, &[0.0, 1.0]),
    )
    .unwrap();
    let cost = CostModel::new(Matrix::identity(2, 2), Matrix::from_element(1, 1, 0.5), Vector::zeros(2), Vector::zeros(1)).unwrap();
    let rs = solve_for_system(&sys, &cost).unwrap();
    (sys, cost, rs)
}

#[test]
fn linear_sensitivity_is_closed_loop_exponential() {
    // with p = 2Px the state runs on ẋ = A_cl x, so x(t₀) = exp(−A_cl T) x_f
    let (sys, cost, rs) = oscillator();
    let lin = linearize(&sys, &cost).unwrap();
    let a_cl = &lin.a - &lin.b * &rs.k;
    let t = 1.5;
    let (_, stm) = propagate_with_stm(&sys, &cost, &rs, &v(&[0.03, -0.02]), t, &opts(2, 0.05)).unwrap();
    let m = initial_state_sensitivity(&stm, &rs);
    let expected = (-&a_cl * t).exp();
    assert!((m - expected).amax() < 1e-8);
}

#[test]
fn zero_horizon_is_identity() {
    let (sys, cost, rs) = nl2();
    let (_, stm) = propagate_with_stm(&sys, &cost, &rs, &v(&[0.02, 0.01]), 0.0, &opts(2, 0.05)).unwrap();
    assert_eq!(stm.phi, Matrix::identity(4, 4));
    assert_eq!(initial_state_sensitivity(&stm, &rs), Matrix::identity(2, 2));
}

#[test]
fn short_horizon_sensitivity_is_near_identity() {
    let (sys, cost, rs) = nl2();
    let lin = linearize(&sys, &cost).unwrap();
    let a_cl = &lin.a - &lin.b * &rs.k;
    let t = 1e-2;
    let (_, stm) = propagate_with_stm(&sys, &cost, &rs, &v(&[0.02, 0.01]), t, &opts(2, 0.05)).unwrap();
    let m = initial_state_sensitivity(&stm, &rs);
    let lin_m = (-&a_cl * t).exp();
    assert!((&m - Matrix::identity(2, 2)).amax() < 2.0 * a_cl.amax() * t);
    assert!((&m - &lin_m).amax() < 10.0 * t * t, "{m} {lin_m}");
    assert!(stm.warning.is_none());
}

#[test]
fn sensitivity_matches_central_differences() {
    let (sys, cost, rs) = nl2();
    let o = opts(2, 0.05);
    let x_f = v(&[0.03, -0.035]);
    let t = 2.0;
    let (_, stm) = propagate_with_stm(&sys, &cost, &rs, &x_f, t, &o).unwrap();
    let m = initial_state_sensitivity(&stm, &rs);
    let eps = 1e-5;
    for j in 0..2 {
        let mut e = Vector::zeros(2);
        e[j] = eps;
        let plus = backward_generate(&sys, &cost, &rs, &(&x_f + &e), t, &o).unwrap();
        let minus = backward_generate(&sys, &cost, &rs, &(&x_f - &e), t, &o).unwrap();
        let fd = (&plus.states[0] - &minus.states[0]) / (2.0 * eps);
        let col = m.column(j);
        assert!((&fd - col).norm() <= 1e-3 * col.norm(), "column {j}: {fd} vs {col}");
    }
}

#[test]
fn update_examples() {
    let nb = NeighborhoodSpec::ball(0.05, 2).unwrap();
    let origin = Vector::zeros(2);
    let (dx, dt) = solve_target_update(&Matrix::identity(2, 2), &v(&[1.0, 0.0]), &origin, &v(&[0.01, 0.0]), &origin, &nb).unwrap();
    assert_eq!((dx, dt), (Vector::zeros(2), 0.0));

    let m = Matrix::identity(2, 2) * 2.0;
    // below the small-step threshold: direct solve, horizon unchanged
    let (dx, dt) = solve_target_update(&m, &v(&[1.0, 0.0]), &v(&[0.004, 0.0]), &v(&[0.01, 0.0]), &origin, &nb).unwrap();
    assert!((&dx - v(&[0.002, 0.0])).amax() < 1e-15);
    assert_eq!(dt, 0.0);
    // above it: least-norm split between terminal state and horizon
    let (dx, dt) = solve_target_update(&m, &v(&[1.0, 0.0]), &v(&[0.02, 0.0]), &v(&[0.01, 0.0]), &origin, &nb).unwrap();
    assert!((&dx - v(&[0.008, 0.0])).amax() < 1e-14);
    assert!((dt - 0.004).abs() < 1e-14);

    let wide = NeighborhoodSpec::ball(1.0, 2).unwrap();
    let (dx, dt) = solve_target_update(&m, &v(&[1.0, 0.0]), &v(&[0.1, 0.0]), &v(&[0.01, 0.0]), &origin, &wide).unwrap();
    assert!((dx - v(&[0.05, 0.0])).amax() < 1e-15);
    assert_eq!(dt, 0.0);

    let xdot = v(&[1.0, 0.0]);
    let dx0 = v(&[0.2, 0.0]);
    let (dx, dt) = solve_target_update(&Matrix::identity(2, 2), &xdot, &dx0, &v(&[0.01, 0.0]), &origin, &wide).unwrap();
    assert!(dx.norm() <= 0.2);
    assert!((&dx + &xdot * dt - &dx0).amax() < 1e-12);

    let singular = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    assert!(solve_target_update(&singular, &v(&[1.0, 0.0]), &v(&[0.01, 0.0]), &v(&[0.01, 0.0]), &origin, &nb).is_err());
}

proptest! {
    #[test]
    fn update_stays_in_closed_neighborhood(
        a in prop::array::uniform4(-2.0f64..2.0),
        xdot in prop::array::uniform2(-1.0f64..1.0),
        dx0 in prop::array::uniform2(-0.5f64..0.5),
        xf in prop::array::uniform2(-0.035f64..0.035),
    ) {
        let m = Matrix::from_row_slice(2, 2, &a);
        let sv = m.clone().singular_values();
        prop_assume!(sv.min() > 1e-2 * sv.max());
        let nb = NeighborhoodSpec::ball(0.05, 2).unwrap();
        let x_f = v(&xf);
        let (dx, dt) = solve_target_update(&m, &v(&xdot), &v(&dx0), &x_f, &Vector::zeros(2), &nb).unwrap();
        prop_assert!(dt.is_finite());
        prop_assert!((&x_f + &dx).norm() <= 0.05 * (1.0 + 1e-9));
    }

    #[test]
    fn feasible_small_update_is_exact(
        a in prop::array::uniform4(-2.0f64..2.0),
        dx0 in prop::array::uniform2(-1e-3f64..1e-3),
    ) {
        let m = Matrix::from_row_slice(2, 2, &a) + Matrix::identity(2, 2) * 5.0;
        let nb = NeighborhoodSpec::ball(0.05, 2).unwrap();
        let (dx, dt) = solve_target_update(&m, &v(&[1.0, 0.0]), &v(&dx0), &Vector::zeros(2), &Vector::zeros(2), &nb).unwrap();
        prop_assert_eq!(dt, 0.0);
        prop_assert!((&m * dx - v(&dx0)).amax() < 1e-14);
    }
}

#[test]
fn ball_grid_has_requested_count_inside_region() {
    let r = RegionSpec::ball(Vector::zeros(2), 3.6, 200).unwrap();
    assert_eq!(r.grid.len(), 200);
    assert!(r.grid.iter().all(|x| x.norm() <= 3.6 + 1e-12 && x.norm() > 0.0));
    assert!(r.grid.windows(2).all(|w| r.scaled_distance(&w[0], &w[1]) <= r.max_spacing * (1.0 + 1e-9)));
}

#[test]
fn boundary_points() {
    let ball = RegionKind::Ball { center: vec![0.0, 0.0], radius: 3.6 };
    let four = ball.boundary_points(4).unwrap();
    for (p, e) in four.iter().zip([[3.6, 0.0], [0.0, 3.6], [-3.6, 0.0], [0.0, -3.6]]) {
        assert!((p - v(&e)).amax() < 1e-12);
    }
    let twenty = ball.boundary_points(20).unwrap();
    let a = twenty[1][1].atan2(twenty[1][0]).to_degrees();
    assert!((a - 18.0).abs() < 1e-12);
    assert!(ball.boundary_points(0).is_err());

    let bx = RegionKind::Box { lo: vec![-1.0, 0.4, -2.0], hi: vec![1.0, 0.4, 2.0] };
    let pts = bx.boundary_points(8).unwrap();
    for c in [[-1.0, 0.4, -2.0], [1.0, 0.4, -2.0], [1.0, 0.4, 2.0], [-1.0, 0.4, 2.0]] {
        assert!(pts.iter().any(|p| (p - v(&c)).amax() < 1e-12), "missing corner {c:?}");
    }
    assert!(pts.iter().all(|p| bx.contains(p)));
}

#[test]
fn box_grid_rejects_bad_resolution() {
    assert!(RegionSpec::box_grid(v(&[-1.0, 0.0]), v(&[1.0, 0.0]), &[3, 2]).is_err());
    let r = RegionSpec::box_grid(v(&[-1.0, 0.0]), v(&[1.0, 0.0]), &[5, 1]).unwrap();
    assert_eq!(r.grid.len(), 5);
}

#[test]
fn targets_inside_neighborhood_are_skipped() {
    let (sys, cost, rs) = nl2();
    let kind = RegionKind::Ball { center: vec![0.0, 0.0], radius: 3.6 };
    let region = RegionSpec::with_grid(kind, vec![v(&[0.02, 0.01]), v(&[1.0, 0.5])], 2.0).unwrap();
    let o = TargetingOptions::for_problem(&rs, opts(2, 0.05));
    let results = generate_covering_dataset(&sys, &cost, &rs, &region, &o).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].target_x0, v(&[1.0, 0.5]));
}

#[test]
fn nearby_target_converges() {
    let (sys, cost, rs) = nl2();
    let kind = RegionKind::Ball { center: vec![0.0, 0.0], radius: 3.6 };
    let region = RegionSpec::with_grid(kind, vec![v(&[1.0, 0.5]), v(&[0.9, 0.7])], 1.0).unwrap();
    let o = TargetingOptions::for_problem(&rs, opts(2, 0.05));
    let results = generate_covering_dataset(&sys, &cost, &rs, &region, &o).unwrap();
    for r in &results {
        assert!(r.converged && r.residual <= 1e-3);
        assert!((&r.trajectory.states[0] - &r.target_x0).norm() <= 1e-3);
        // analytic value along the generated trajectory
        let x = &r.trajectory.states[0];
        assert!((r.trajectory.cost_to_go[0] - (0.5 * x[0] * x[0] + x[1] * x[1])).abs() < 1e-5 * (1.0 + r.trajectory.cost_to_go[0]));
    }
}
