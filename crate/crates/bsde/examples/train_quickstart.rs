//! Minimal end-to-end training run.
//!
//! Trains a small fully connected value network on the 2-dimensional
//! option-pricing benchmark and compares the learned value at the start
//! point against the closed form. One network, shared across all time
//! steps, is fitted by driving the per-step one-step residuals and the
//! terminal mismatch to zero over freshly simulated path batches.

use bsde::nets::{Architecture, NetConfig};
use bsde::problems::black_scholes;
use bsde::trainer::{train, TrainConfig};
use ndarray::Array1;

fn main() {
    let dim = 2;
    let (rate, vol, horizon) = (0.05, 0.4, 1.0);
    let problem = black_scholes(dim, rate, vol, horizon, Array1::ones(dim));

    let net = NetConfig::new(dim, 16, 2, Architecture::FullyConnected);
    let mut config = TrainConfig::new(net, 2000, 7);
    config.batch_paths = 32;
    config.steps = 10;
    config.learning_rate = 1e-2;

    println!("training fc width 16 on the d = {dim} pricing benchmark…\n");
    let outcome = train(&problem, &config).expect("training converges");

    println!("{:>10} {:>16} {:>12}", "iteration", "loss", "value(0, xi)");
    for record in outcome.report.records.iter().step_by(250) {
        println!(
            "{:>10} {:>16.6} {:>12.5}",
            record.iteration,
            record.loss,
            record.y0_estimate.unwrap_or(f64::NAN)
        );
    }

    let exact = ((rate + vol * vol) * horizon).exp() * dim as f64;
    let y0 = outcome.report.final_y0;
    println!("\nlearned value at the start point: {y0:.5}");
    println!("closed form:                      {exact:.5}");
    println!("relative error:                   {:.2}%", 100.0 * (y0 - exact).abs() / exact);
    println!("total time: {:.1}s", outcome.report.total_seconds);
}
