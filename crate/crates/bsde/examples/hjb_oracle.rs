//! Monte Carlo reference for the control benchmark.
//!
//! The control problem has no elementary closed form, but the
//! exponential transform turns its value into an expectation over plain
//! Brownian endpoints: u(t, x) = −ln E[exp(−g(x + √2·W_{T−t}))]. This
//! example probes that estimator: exactness at the horizon, the
//! 1/√K decay of the standard error, and the reference value at the
//! origin that a trained network should reproduce.

use bsde::problems::log_mc_reference;

fn main() {
    let horizon = 1.0;
    let x = vec![0.0; 20];

    // At t = T the expectation degenerates to the terminal payoff itself.
    let (at_horizon, se) = log_mc_reference(&x, horizon, horizon, 100, 1);
    println!("value at the horizon: {at_horizon:.12} (se {se})");
    println!("terminal payoff g(0): {:.12}\n", (0.5_f64).ln());

    // Before the horizon the standard error shrinks like 1/sqrt(K).
    println!("{:>10} {:>12} {:>12}", "samples", "estimate", "std error");
    let mut previous_se = f64::NAN;
    for samples in [1_000, 4_000, 16_000, 64_000] {
        let (value, se) = log_mc_reference(&x, 0.0, horizon, samples, 77);
        let note = if previous_se.is_nan() {
            String::new()
        } else {
            format!("   ({:.2}x smaller)", previous_se / se)
        };
        println!("{samples:>10} {value:>12.6} {se:>12.6}{note}");
        previous_se = se;
    }

    let (reference, se) = log_mc_reference(&x, 0.0, horizon, 200_000, 2024);
    println!("\nreference value u(0, 0) in d = 20: {reference:.5} ± {se:.5}");
}
