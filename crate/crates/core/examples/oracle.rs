//! Gaussian oracle for X = W: Hermite coefficients, Z norms and residual decay.

use bfnet::gaussian_oracle::{cond_residual_norm, expand, z_norm, TerminalFunction1D, DEFAULT_NODES, DEFAULT_ORDER};

fn main() -> bfnet::Result<()> {
    let gs = [
        TerminalFunction1D::hermite(2),
        TerminalFunction1D::indicator(0.0),
        TerminalFunction1D::power(0.25)?,
    ];
    for g in &gs {
        let e = expand(g, DEFAULT_ORDER, DEFAULT_NODES)?;
        println!("{}: α_0..α_3 = {:?}", g, &e.coefficients[..4]);
        println!("  Parseval defect {:.2e}, tail mass {:.2e}", e.parseval_defect(), e.tail_mass);
        println!("  {:>8} {:>10} {:>12}", "t", "‖Z_t‖_2", "residual");
        for t in [0.5, 0.9, 0.99, 0.999] {
            let r = cond_residual_norm(g, t, 2.0)?;
            println!("  {:>8} {:>10.5} {:>12.6}", t, z_norm(g, t, 2.0)?, r.value);
        }
    }
    // Indicator closed forms: ‖Z_t‖² = 1/(2π√(1−t²)), residual² = 1/4 − arcsin(t)/(2π).
    let t: f64 = 0.99;
    let pi = std::f64::consts::PI;
    println!(
        "indicator closed forms at t = {}: ‖Z_t‖_2 = {:.5}, residual = {:.6}",
        t,
        (1.0 / (2.0 * pi * (1.0 - t * t).sqrt())).sqrt(),
        (0.25 - t.asin() / (2.0 * pi)).sqrt()
    );
    Ok(())
}
