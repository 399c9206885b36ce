//! The three exponent probes on one Monte Carlo solution.

use bfnet::analysis::{geometric_window, residual_exponent, y_increment_exponent, z_blowup_exponent};
use bfnet::bsde::{solve, Generator, Scheme, TerminalCondition};
use bfnet::forward::{simulate, ForwardModel};
use bfnet::gaussian_oracle::TerminalFunction1D;
use bfnet::regression::{Basis, RegressionConfig};
use bfnet::timenets::{build_theta_net, SmoothnessSpec};

fn main() -> bfnet::Result<()> {
    let model = ForwardModel::brownian(1)?;
    let reg = RegressionConfig::new(Basis::PiecewiseLinear { bins: 64 }, 1e-8)?;
    let window = geometric_window(0.0, 1.0, 2..=8);
    for (g, theta) in [(TerminalFunction1D::indicator(0.0), 0.5), (TerminalFunction1D::power(0.25)?, 0.75)] {
        let spec = SmoothnessSpec::new(vec![0.0, 1.0], vec![theta])?;
        let grid = build_theta_net(&spec, 32)?.with_inserted(&window)?;
        let ens = simulate(&model, &grid, 1 << 14, 1, false)?;
        let term = TerminalCondition::at_horizon(g.clone(), 1.0);
        let sol = solve(&model, &Generator::zero(), &term, &grid, &ens, &reg, Scheme::Explicit)?;
        println!("{} (θ = {}):", g, theta);
        for e in [
            z_blowup_exponent(&sol, 1, &window, 2.0)?,
            y_increment_exponent(&sol, 1, &window, 2.0)?,
            residual_exponent(&sol, 1, &window, 2.0)?,
        ] {
            println!(
                "  {:?}: θ̂ = {:.3} ± {:.3}{}",
                e.probe,
                e.theta_hat,
                e.theta_se,
                if e.unreliable { " (unreliable)" } else { "" }
            );
        }
    }
    Ok(())
}
