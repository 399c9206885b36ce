//! Forward simulation, Brownian mixing and the binary path format.

use bfnet::analysis::{mixing_distance, smoothness_from_residuals, ProbePoint};
use bfnet::bsde::TerminalCondition;
use bfnet::forward::{simulate, simulate_mixed, ForwardModel, MixingSchedule};
use bfnet::gaussian_oracle::TerminalFunction1D;
use bfnet::io::{read_ensemble, write_ensemble};
use bfnet::timenets::{build_uniform_net, SmoothnessSpec};

fn main() -> bfnet::Result<()> {
    let model = ForwardModel::geometric(vec![0.05], vec![0.2], vec![1.0])?;
    let grid = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0])?, 16)?;
    let ens = simulate(&model, &grid, 1 << 12, 42, true)?;
    let last = ens.column(grid.len() - 1, 0);
    println!("GBM: E[X_1] ≈ {:.4} (exact {:.4})", last.iter().sum::<f64>() / last.len() as f64, 0.05f64.exp());

    let file = std::env::temp_dir().join("bfnet-example-paths.bin");
    write_ensemble(&file, &ens)?;
    let back = read_ensemble(&file, &model)?;
    println!("binary round trip identical: {}", back.same_data(&ens));
    std::fs::remove_file(&file)?;

    // Replacing the noise on (t, 1] moves X_1 by N(0, 2(1 − t)) for X = W.
    let bm = ForwardModel::brownian(1)?;
    let pair = simulate_mixed(&bm, &grid, &MixingSchedule::indicator(0.75, 1.0)?, 1 << 12, 7)?;
    let k = grid.len() - 1;
    let gap: f64 = (0..pair.base.n_paths())
        .map(|p| (pair.base.state(p, k)[0] - pair.mixed.state(p, k)[0]).powi(2))
        .sum::<f64>()
        / pair.base.n_paths() as f64;
    println!("‖X^η_1 − X_1‖_2 = {:.4} (exact {:.4})", gap.sqrt(), 0.5f64.sqrt());

    // Mixing distances of the indicator decay like (1 − t)^{θ/2} with θ = 1/2.
    let term = TerminalCondition::at_horizon(TerminalFunction1D::indicator(0.0), 1.0);
    let ts: Vec<f64> = (2..=7).map(|j| 1.0 - 2f64.powi(-j)).collect();
    let fine = build_uniform_net(&SmoothnessSpec::uniform(vec![0.0, 1.0])?, 4)?.with_inserted(&ts)?;
    let pts = mixing_distance(&bm, &term, &fine, &ts, 1.0, 1 << 14, 3, 2.0)?;
    let probe: Vec<ProbePoint> = pts
        .iter()
        .map(|m| ProbePoint { s: m.t, value: m.distance.value, se: m.distance.se })
        .collect();
    let est = smoothness_from_residuals(1, 0.0, 1.0, &probe)?;
    println!("θ̂ from mixing distances: {:.3} ± {:.3}", est.theta_hat, est.theta_se);
    Ok(())
}
