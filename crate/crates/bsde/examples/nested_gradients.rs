//! Differentiating a derivative.
//!
//! The engine records every adjoint computation as ordinary graph nodes, so
//! the output of `grad` can be fed straight back into `grad`. This example
//! takes first, second, and mixed partial derivatives of
//!
//!     f(x, y) = tanh(x·y) + x²·y
//!
//! and compares each against the hand-derived closed form. The same
//! mechanism is what lets the solver differentiate a loss that itself
//! contains network gradients.

use bsde::graph::{grad, Graph, Tensor};

fn main() {
    let (x0, y0) = (0.7, -0.3);

    let g = Graph::new();
    let x = g.input(Tensor::Scalar(x0));
    let y = g.input(Tensor::Scalar(y0));
    let f = x.mul(y).tanh() + x.square().mul(y);

    // First order: one reverse sweep, emitted as new graph nodes.
    let first = grad(f, &[x, y]);
    let (fx, fy) = (first[0], first[1]);

    // Second order: differentiate the derivative nodes again.
    let fxx = grad(fx, &[x])[0];
    let fxy = grad(fx, &[y])[0];
    let fyx = grad(fy, &[x])[0];

    // Hand derivatives, with t = tanh(x y) and sech² = 1 − t².
    let t = (x0 * y0).tanh();
    let s = 1.0 - t * t;
    let expected = [
        ("f", f.scalar_value(), t + x0 * x0 * y0),
        ("df/dx", fx.scalar_value(), y0 * s + 2.0 * x0 * y0),
        ("df/dy", fy.scalar_value(), x0 * s + x0 * x0),
        ("d2f/dx2", fxx.scalar_value(), -2.0 * t * s * y0 * y0 + 2.0 * y0),
        ("d2f/dxdy", fxy.scalar_value(), s - 2.0 * x0 * y0 * t * s + 2.0 * x0),
        ("d2f/dydx", fyx.scalar_value(), s - 2.0 * x0 * y0 * t * s + 2.0 * x0),
    ];

    println!("f(x, y) = tanh(x y) + x^2 y   at (x, y) = ({x0}, {y0})\n");
    println!("{:<10} {:>20} {:>20} {:>12}", "quantity", "graph", "closed form", "|diff|");
    for (name, got, want) in expected {
        println!("{name:<10} {got:>20.15} {want:>20.15} {:>12.2e}", (got - want).abs());
    }

    // The two mixed partials come from different differentiation orders but
    // must agree (symmetry of second derivatives).
    let symmetric = (fxy.scalar_value() - fyx.scalar_value()).abs();
    println!("\nmixed-partial symmetry gap: {symmetric:.2e}");
}
