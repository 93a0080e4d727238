//! The Z process is the network's spatial gradient.
//!
//! The scheme couples the value approximation u(t, x; Θ) to its own input
//! gradient ∇ₓu — that gradient is the Z process of the backward equation.
//! This example evaluates ∇ₓu for all three architectures by reverse-mode
//! differentiation and checks it against central finite differences.

use bsde::graph::{central_differences, max_rel_deviation};
use bsde::nets::{Architecture, NetConfig, NetworkParams};

fn main() {
    let dim = 4;
    let t = 0.35;
    let point = [0.8, -1.2, 0.4, 2.0];

    println!("spatial gradient vs central differences (step 1e-5), d = {dim}\n");
    for arch in Architecture::ALL {
        let params = NetworkParams::init(NetConfig::new(dim, 16, 3, arch), 42);
        let (value, gradient) = params.value_and_gradient(t, &point);
        let numeric = central_differences(|x| params.value(t, x), &point, 1e-5);
        let deviation = max_rel_deviation(&gradient, &numeric);

        println!("{:<8} u = {value:>9.5}", arch.label());
        println!("         reverse-mode  {:?}", rounded(&gradient));
        println!("         finite diff   {:?}", rounded(&numeric));
        println!("         max relative deviation {deviation:.2e}\n");
    }
}

fn rounded(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| (v * 1e6).round() / 1e6).collect()
}
