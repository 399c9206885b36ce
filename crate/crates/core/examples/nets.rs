//! Theta-adapted nets against uniform nets, and the weight φ they compensate.

use bfnet::timenets::{build_theta_net, build_uniform_net, phi, refine_net, SmoothnessSpec};

fn main() -> bfnet::Result<()> {
    let spec = SmoothnessSpec::new(vec![0.0, 0.5, 1.0], vec![0.5, 0.25])?;
    let theta = build_theta_net(&spec, 4)?;
    let uniform = build_uniform_net(&spec, 4)?;
    println!("theta net   {}", theta.to_json());
    println!("uniform net {}", uniform.to_json());
    println!("max step: theta {:.4}, uniform {:.4}", theta.max_step(), uniform.max_step());

    // Steps shrink where φ(t) = (r_l − t)^{(θ_l − 1)/2} blows up.
    for (i, w) in theta.knots().windows(2).enumerate() {
        println!("  [{:.5}, {:.5}]  step {:.5}  φ(left) {:.3}", w[0], w[1], theta.step(i), phi(w[0], &spec)?);
    }

    let fine = refine_net(&theta, 4)?;
    println!("refined x4: {} knots, embeds the coarse net: {}", fine.len(), fine.embedding_of(&theta).is_some());
    Ok(())
}
