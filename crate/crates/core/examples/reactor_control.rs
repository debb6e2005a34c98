//! Closed-loop control of a delayed two-state reactor, plain and through the
//! encoded cloud controller. Writes CSV traces to ./reactor-out.
//!
//! cargo run --release --example reactor_control

use std::sync::Arc;

use imcode::casestudy::control::{self, ControlConfig};
use imcode::scheme::Scales;

fn main() -> imcode::Result<()> {
    for (label, cfg) in [
        ("high privacy", ControlConfig::default()),
        (
            "unit scales",
            ControlConfig {
                scales: Scales::unit(),
                sigma: 1.0,
                ..ControlConfig::default()
            },
        ),
    ] {
        let plain = control::run_plain(&cfg)?;
        let (enc, transcript) = control::run_encoded(&cfg, Arc::new(cfg.keygen()?))?;
        let c = control::compare(&plain, &enc);
        println!(
            "{label}: max|u-u^| {:.2e}  max|x-x^| {:.2e}  max|x| {:.3}  residual {:.2e}  runtime x{:.1}  {} messages",
            c.max_action_gap,
            c.max_state_gap,
            c.max_state_norm,
            c.max_relative_residual,
            c.runtime_ratio(),
            transcript.entries.len()
        );
        if label == "high privacy" {
            control::export_figures_data(&plain, &enc, "reactor-out")?;
        }
    }
    println!("traces in reactor-out/");
    Ok(())
}
