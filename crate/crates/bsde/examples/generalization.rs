//! Accuracy away from the trained start point.
//!
//! Every training batch starts from the same point ξ, yet the paths fan
//! out across space, so the fitted network is accurate on a whole tube
//! around the trajectories — not just at ξ. This example trains briefly,
//! then re-evaluates from perturbed start points ξ + δ‖ξ‖v with v drawn
//! uniformly on the unit sphere, reporting the mean relative error as a
//! function of the relative distance δ.

use bsde::nets::{Architecture, NetConfig};
use bsde::problems::black_scholes;
use bsde::report::generalization_sweep;
use bsde::trainer::{train, TrainConfig};
use ndarray::Array1;

fn main() {
    let dim = 2;
    let problem = black_scholes(dim, 0.05, 0.4, 1.0, Array1::ones(dim));

    let net = NetConfig::new(dim, 16, 2, Architecture::FullyConnected);
    let mut config = TrainConfig::new(net, 1500, 3);
    config.batch_paths = 32;
    config.steps = 10;
    config.learning_rate = 1e-2;

    println!("training for {} iterations…", config.iterations);
    let outcome = train(&problem, &config).expect("training converges");
    println!(
        "value at the start point: {:.4} (loss {:.5})\n",
        outcome.report.final_y0,
        outcome.report.final_loss().unwrap()
    );

    let distances = [0.0, 0.05, 0.1, 0.2, 0.3];
    let sweep = generalization_sweep(&problem, &outcome.params, &distances, 40, 99)
        .expect("sweep runs");

    println!("{:>12} {:>14} {:>12}", "distance %", "mean err %", "stderr %");
    for row in &sweep.rows {
        println!(
            "{:>12.1} {:>14.3} {:>12.3}",
            row.rel_distance_pct, row.mean_rel_err_pct, row.stderr_pct
        );
    }
    println!("\nperturbation protocol: {}", sweep.protocol);
}
