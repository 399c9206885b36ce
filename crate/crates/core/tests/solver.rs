use bfnet::analysis::{
    geometric_window, residual_exponent, spline_error, variation, y_increment_exponent, z_blowup_exponent,
};
use bfnet::bsde::{solve, BsdeSolution, Combine, Generator, Scheme, TerminalCondition};
use bfnet::forward::{simulate, ForwardModel};
use bfnet::gaussian_oracle::{cond_residual_norm, TerminalFunction1D};
use bfnet::regression::RegressionConfig;
use bfnet::timenets::{build_uniform_net, refine_net, SmoothnessSpec, TimeNet};

fn unit_net(n: usize) -> TimeNet {
    build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0]).unwrap(), n).unwrap()
}

fn solve_bm(g: TerminalFunction1D, grid: &TimeNet, ensemble_grid: &TimeNet, paths: usize, seed: u64) -> BsdeSolution {
    let model = ForwardModel::brownian(1).unwrap();
    let ens = simulate(&model, ensemble_grid, paths, seed, false).unwrap();
    let term = TerminalCondition::at_horizon(g, 1.0);
    solve(&model, &Generator::zero(), &term, grid, &ens, &RegressionConfig::default(), Scheme::Explicit).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

#[test]
fn more_paths_shrink_the_initial_value_error() {
    // E h_2(W_1) = 0, so |Y_0| is the whole error
    let grid = unit_net(8);
    let err = |paths: usize| {
        median(
            (0..16)
                .map(|seed| solve_bm(TerminalFunction1D::hermite(2), &grid, &grid, paths, 100 + seed).y(0)[0].abs())
                .collect(),
        )
    };
    let (small, large) = (err(1 << 14), err(1 << 16));
    assert!(large < small, "median |Y_0|: {} at 2^14, {} at 2^16", small, large);
}

#[test]
fn variation_is_stable_under_grid_refinement() {
    let coarse = unit_net(4);
    let fine = refine_net(&coarse, 16).unwrap();
    let half = refine_net(&coarse, 8).unwrap();
    for g in [TerminalFunction1D::hermite(2), TerminalFunction1D::linear()] {
        let a = variation(&solve_bm(g.clone(), &half, &fine, 1 << 15, 7), &coarse, 2.0).unwrap();
        let b = variation(&solve_bm(g.clone(), &fine, &fine, 1 << 15, 7), &coarse, 2.0).unwrap();
        let change = (a.total - b.total).abs() / b.total;
        assert!(change < 0.05, "{}: {} vs {} ({:.1}%)", g, a.total, b.total, 100.0 * change);
    }
}

#[test]
fn spline_error_vanishes_at_its_knots() {
    let coarse = unit_net(4);
    let fine = refine_net(&coarse, 4).unwrap();
    let sol = solve_bm(TerminalFunction1D::indicator(0.0), &fine, &fine, 4096, 3);
    let err = spline_error(&sol, &coarse, 2.0).unwrap();
    for (t, e) in &err.profile {
        if coarse.index_of(*t).is_some() {
            assert_eq!(*e, 0.0, "knot {}", t);
        }
    }
    assert!(err.sup_error > 0.0);
}

#[test]
fn all_probes_see_a_smooth_terminal() {
    let base = unit_net(64);
    let window = geometric_window(0.0, 1.0, 2..=8);
    let grid = base.with_inserted(&window).unwrap();
    let sol = solve_bm(TerminalFunction1D::linear(), &grid, &grid, 1 << 16, 21);
    let estimates = [
        z_blowup_exponent(&sol, 1, &window, 2.0).unwrap(),
        y_increment_exponent(&sol, 1, &window, 2.0).unwrap(),
        residual_exponent(&sol, 1, &window, 2.0).unwrap(),
    ];
    for e in &estimates {
        assert!((e.theta_hat - 1.0).abs() <= 1e-3, "{:?}: {}", e.probe, e.theta_hat);
    }
}

#[test]
fn residuals_obey_the_contraction_sandwich() {
    let gs = [TerminalFunction1D::indicator(0.0), TerminalFunction1D::power(0.25).unwrap()];
    let times: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    for g in &gs {
        for p in [2.0, 4.0] {
            let r: Vec<(f64, f64)> = times
                .iter()
                .map(|&t| {
                    let q = cond_residual_norm(g, t, p).unwrap();
                    (q.value, q.error)
                })
                .collect();
            for i in 0..r.len() {
                let later = r[i..].iter().map(|v| v.0).fold(0.0, f64::max);
                let tol = r[i..].iter().map(|v| v.1).fold(1e-9, f64::max);
                assert!(later <= 2.0 * r[i].0 + tol, "{} p={} t={}", g, p, times[i]);
            }
        }
    }
}

#[test]
fn observed_jump_survives_until_the_horizon() {
    let coarse = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 0.5, 1.0]).unwrap(), 4).unwrap();
    let model = ForwardModel::brownian(1).unwrap();
    let ens = simulate(&model, &coarse, 1 << 14, 8, false).unwrap();
    let term = TerminalCondition::composite(
        vec![0.5, 1.0],
        vec![TerminalFunction1D::indicator(0.0), TerminalFunction1D::indicator(0.0)],
        Combine::Sum { weights: vec![0.5, 0.5] },
    )
    .unwrap();
    let sol = solve(&model, &Generator::zero(), &term, &coarse, &ens, &RegressionConfig::default(), Scheme::Explicit)
        .unwrap();
    // after r_1 the first part is known: the residual of Y_{r_2} given F_s only sees the second
    let r1 = coarse.index_of(0.5).unwrap();
    let last = coarse.len() - 1;
    let fit = sol.project(sol.y(last), last - 1).unwrap();
    let resid: Vec<f64> = sol.y(last).iter().zip(&fit).map(|(a, b)| a - b).collect();
    let rms = (resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64).sqrt();
    let oracle = 0.5 * cond_residual_norm(&TerminalFunction1D::indicator(0.0), 0.875, 2.0).unwrap().value;
    assert!((rms - oracle).abs() < 0.1 * oracle, "rms {} oracle {}", rms, oracle);
    assert!(sol.y(r1).iter().all(|v| v.is_finite()));
}
