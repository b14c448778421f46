//! Trains the default d=10 model and prints the evaluation curve.
//!
//! `cargo run --release --example train_curve -- [steps] [cmf|causal]`

use permlab_core::training::{train, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(1 << 13, |s| s.parse().expect("steps must be an integer"));
    let mask = args.next().map_or(Ok(permlab_core::MaskMode::Cmf), |s| s.parse()).expect("mask is cmf or causal");
    let cfg = TrainConfig {
        steps,
        mask,
        eval_every: 512.min(steps),
        ..TrainConfig::default()
    };
    let report = train(&cfg, |step, mse, _| println!("{step} {mse:.6e}")).expect("training failed");
    println!(
        "final {:.6e} after {steps} steps, {:.3} s/step",
        report.final_mse,
        report.wallclock / steps as f64
    );
}
