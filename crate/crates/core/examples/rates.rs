//! L2-variation and spline error on theta nets against uniform nets.

use bfnet::analysis::{rate_slope, spline_error, variation};
use bfnet::bsde::{solve, Generator, Scheme, TerminalCondition};
use bfnet::forward::{simulate, ForwardModel};
use bfnet::gaussian_oracle::TerminalFunction1D;
use bfnet::regression::{Basis, RegressionConfig};
use bfnet::timenets::{build_theta_net, refine_net, SmoothnessSpec};

fn main() -> bfnet::Result<()> {
    let paths = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1usize << 13);
    let model = ForwardModel::brownian(1)?;
    let term = TerminalCondition::at_horizon(TerminalFunction1D::indicator(0.0), 1.0);
    let reg = RegressionConfig::new(Basis::PiecewiseLinear { bins: 64 }, 1e-8)?;
    for (label, theta) in [("theta' = 0.4", 0.4), ("uniform", 1.0)] {
        let spec = SmoothnessSpec::new(vec![0.0, 1.0], vec![theta])?;
        let mut table = Vec::new();
        for n in [4usize, 8, 16, 32] {
            let coarse = build_theta_net(&spec, n)?;
            let fine = refine_net(&coarse, 4)?;
            let ens = simulate(&model, &fine, paths, 1, false)?;
            let sol = solve(&model, &Generator::zero(), &term, &fine, &ens, &reg, Scheme::Explicit)?;
            let v = variation(&sol, &coarse, 2.0)?;
            let s = spline_error(&sol, &coarse, 2.0)?;
            println!(
                "{:>13} n = {:>2}: var_2 = {:.4} (Y {:.4}, Z {:.4}), √n·var_2 = {:.3}, spline = {:.4}",
                label, n, v.total, v.y_component, v.z_component, (n as f64).sqrt() * v.total, s.sup_error
            );
            table.push((n as f64, v.total));
        }
        let (slope, se) = rate_slope(&table)?;
        println!("{:>13} slope {:.3} ± {:.3}", label, slope, se);
    }
    Ok(())
}
